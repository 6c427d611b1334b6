#include "qkdsim/readout.hpp"

#include <fmt/format.h>

#include <cmath>

namespace qkdsim {

namespace {

constexpr std::uint64_t field_mask(unsigned width)
{
    return (std::uint64_t{1} << width) - 1;
}

constexpr std::uint64_t kMicroBytesPerByte = 1'000'000;

}  // namespace

std::uint64_t pack(const TdcRecord& record, bool rollover)
{
    if (record.fine > field_mask(kFineWidth))
        throw PackError(fmt::format("fine code {} exceeds {} bits", record.fine, kFineWidth));
    if (record.coarse > field_mask(kCoarseWidth))
        throw PackError(fmt::format("coarse count {} exceeds {} bits", record.coarse, kCoarseWidth));
    if (record.channel > field_mask(kChannelWidth))
        throw PackError(fmt::format("channel {} exceeds {} bits", record.channel, kChannelWidth));
    return (std::uint64_t{record.fine} << kFineShift) | (record.coarse << kCoarseShift) |
           (std::uint64_t{record.channel} << kChannelShift) | (std::uint64_t{rollover} << kRolloverBit);
}

UnpackedWord unpack(std::uint64_t word)
{
    if (word & kReservedMask)
        throw PackError(fmt::format("reserved bits set in word 0x{:016x}", word));
    UnpackedWord out;
    out.record.fine = static_cast<std::uint32_t>((word >> kFineShift) & field_mask(kFineWidth));
    out.record.coarse = (word >> kCoarseShift) & field_mask(kCoarseWidth);
    out.record.channel = static_cast<ChannelId>((word >> kChannelShift) & field_mask(kChannelWidth));
    out.rollover = ((word >> kRolloverBit) & 1U) != 0;
    return out;
}

CoarseUnwrapper::CoarseUnwrapper(std::uint32_t coarse_bits, std::uint32_t n_channels)
    : coarse_bits_(coarse_bits), tracks_(n_channels)
{
    if (coarse_bits == 0 || coarse_bits > 62)
        throw ConfigError("unwrapper: coarse_bits must lie in [1, 62]");
}

std::uint64_t CoarseUnwrapper::unwrap(ChannelId channel, std::uint64_t coarse, bool rollover)
{
    if (channel >= tracks_.size())
        throw ContractError(fmt::format("unwrapper: channel {} out of range", channel));
    Track& track = tracks_[channel];
    const std::uint64_t parity = rollover ? 1 : 0;
    if (!track.seen) {
        track.seen = true;
        track.epoch = parity;
    } else if ((track.epoch & 1U) != parity) {
        track.epoch += 1;
    } else if (coarse < track.last_coarse) {
        track.epoch += 2;
    }
    track.last_coarse = coarse;
    return (track.epoch << coarse_bits_) | coarse;
}

ReadoutLink::ReadoutLink(StreamOptions options) : options_(options)
{
    if (options_.depth == 0)
        throw ConfigError("readout: depth must be > 0");
    if (options_.word_size == 0 || options_.link_rate == 0)
        throw ConfigError("readout: word_size and link_rate must be > 0");
    if (!(options_.tick >= 1.0) || options_.tick != std::floor(options_.tick))
        throw ConfigError("readout: tick must be a whole number of picoseconds >= 1");
    // bytes/s * ps * 1e-12 s/ps * 1e6 micro-bytes/byte; floored so the ceiling is never exceeded.
    const double budget = static_cast<double>(options_.link_rate) * options_.tick * 1e-6;
    if (budget > 1e18)
        throw ConfigError("readout: link_rate * tick too large");
    budget_ = static_cast<std::uint64_t>(std::floor(budget));
    word_cost_ = std::uint64_t{options_.word_size} * kMicroBytesPerByte;
    buffer_.depth = options_.depth;
}

void ReadoutLink::run_tick()
{
    credit_ += budget_;
    while (!queue_.empty() && credit_ >= word_cost_) {
        credit_ -= word_cost_;
        if (options_.keep_words)
            delivered_.push_back(queue_.front());
        queue_.pop_front();
        ++buffer_.delivered;
        buffer_.drained_bytes += options_.word_size;
    }
    if (queue_.empty())
        credit_ = 0;
    buffer_.occupancy = queue_.size();
    ++buffer_.ticks;
}

void ReadoutLink::advance_to_tick(std::uint64_t tick)
{
    while (current_tick_ < tick) {
        if (queue_.empty()) {
            // Idle ticks earn nothing that can be kept.
            buffer_.ticks += tick - current_tick_;
            current_tick_ = tick;
            credit_ = 0;
            return;
        }
        run_tick();
        ++current_tick_;
    }
}

void ReadoutLink::offer(Picoseconds time, std::uint64_t word)
{
    if (finished_)
        throw ContractError("readout: offer() after finish()");
    if (!(time >= 0.0) || time < last_time_)
        throw ContractError(fmt::format("readout: arrival at {} ps out of order", time));
    last_time_ = time;
    advance_to_tick(static_cast<std::uint64_t>(std::floor(time / options_.tick)));
    ++buffer_.offered;
    if (queue_.size() >= options_.depth) {
        ++buffer_.drops;
        return;
    }
    queue_.push_back(word);
    buffer_.occupancy = queue_.size();
}

void ReadoutLink::finish()
{
    if (finished_)
        return;
    finished_ = true;
    run_tick();
    ++current_tick_;
    if (options_.drain_tail) {
        while (!queue_.empty()) {
            run_tick();
            ++current_tick_;
        }
    }
}

StreamResult stream(std::span<const TimedWord> arrivals, const StreamOptions& options)
{
    ReadoutLink link(options);
    for (const auto& a : arrivals)
        link.offer(a.time, a.word);
    link.finish();
    return {link.buffer(), link.take_delivered_words()};
}

std::uint64_t CounterBank::total(ChannelId channel) const
{
    std::uint64_t sum = 0;
    for (auto c : counts.at(channel))
        sum += c;
    return sum;
}

GatedCounter::GatedCounter(CounterOptions options) : options_(options)
{
    if (!(options_.gate_length > 0.0))
        throw ConfigError("counter: gate_length must be > 0");
    if (options_.n_gates == 0 || options_.n_channels == 0)
        throw ConfigError("counter: n_gates and n_channels must be > 0");
    if (!(options_.dead_time >= 0.0) || !(options_.max_count_rate >= 0.0))
        throw ConfigError("counter: dead_time and max_count_rate must be >= 0");
    bank_.gate_length = options_.gate_length;
    bank_.counts.assign(options_.n_channels, std::vector<std::uint64_t>(options_.n_gates, 0));
    last_accept_.assign(options_.n_channels, std::nullopt);
    if (options_.max_count_rate > 0.0) {
        cap_budget_ = static_cast<std::uint64_t>(
            std::floor(options_.max_count_rate * options_.gate_length / kPsPerSecond));
        const std::size_t slots = options_.cap_scope == CapScope::aggregate ? 1 : options_.n_channels;
        cap_used_.assign(slots, std::vector<std::uint64_t>(options_.n_gates, 0));
    }
}

void GatedCounter::add(const RawHit& hit)
{
    if (hit.channel >= options_.n_channels)
        throw ConfigError(fmt::format("counter: channel {} out of range", hit.channel));
    auto& last = last_accept_[hit.channel];
    if (last) {
        if (hit.true_time < *last)
            throw ContractError(fmt::format("counter: hits on channel {} out of order", hit.channel));
        if (hit.true_time - *last < options_.dead_time) {
            ++bank_.dead_time_suppressed;
            return;
        }
    }
    last = hit.true_time;
    if (hit.true_time < 0.0 || hit.true_time >= options_.gate_length * static_cast<double>(options_.n_gates)) {
        ++bank_.outside_gates;
        return;
    }
    const auto gate = std::min<std::uint64_t>(static_cast<std::uint64_t>(hit.true_time / options_.gate_length),
                                              options_.n_gates - 1);
    if (!cap_used_.empty()) {
        auto& used = cap_used_[options_.cap_scope == CapScope::aggregate ? 0 : hit.channel][gate];
        if (used >= cap_budget_) {
            ++bank_.saturated;
            return;
        }
        ++used;
    }
    ++bank_.counts[hit.channel][gate];
}

CounterBank count_gated(std::span<const RawHit> hits, const CounterOptions& options)
{
    GatedCounter counter(options);
    for (const auto& h : hits)
        counter.add(h);
    return counter.bank();
}

}  // namespace qkdsim
