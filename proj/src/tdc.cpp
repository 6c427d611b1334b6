#include "qkdsim/tdc.hpp"

#include "qkdsim/calibration.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace qkdsim {

namespace {

double parse_double(std::string_view text, std::string_view what)
{
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size())
        throw ConfigError(fmt::format("bad number '{}' in {}", text, what));
    return value;
}

std::vector<std::string_view> split(std::string_view text, char sep)
{
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        auto pos = text.find(sep, start);
        parts.push_back(text.substr(start, pos - start));
        if (pos == std::string_view::npos)
            break;
        start = pos + 1;
    }
    return parts;
}

}  // namespace

void TdcConfig::validate() const
{
    if (!(clock_period > 0.0))
        throw ConfigError("tdc: clock_period must be > 0");
    if (n_taps < 2)
        throw ConfigError("tdc: n_taps must be >= 2");
    if (n_taps >= 512)
        throw ConfigError("tdc: n_taps must fit the 9-bit fine field (< 512)");
    if (n_channels < 1 || n_channels > 32)
        throw ConfigError("tdc: n_channels must be in [1, 32]");
    if (!(dead_time >= 0.0))
        throw ConfigError("tdc: dead_time must be >= 0");
    if (coarse_bits < 1 || coarse_bits > 40)
        throw ConfigError("tdc: coarse_bits must be in [1, 40]");
    if (!(dynamic_range() > kPsPerSecond))
        throw ConfigError(fmt::format("tdc: dynamic range {:.3g} ps must exceed 1 s", dynamic_range()));
}

Picoseconds TdcConfig::dynamic_range() const
{
    return std::ldexp(clock_period, static_cast<int>(coarse_bits));
}

DnlSpec parse_dnl_spec(std::string_view text)
{
    if (text == "uniform")
        return UniformTaps{};
    auto parts = split(text, ':');
    if (parts[0] == "random" && parts.size() == 2)
        return RandomDnl{parse_double(parts[1], "random dnl amplitude")};
    if (parts[0] == "comb" && parts.size() == 3) {
        auto stride = parse_double(parts[2], "comb stride");
        if (stride < 2 || stride != std::floor(stride))
            throw ConfigError("dnl comb stride must be an integer >= 2");
        return CombDnl{parse_double(parts[1], "comb width"), static_cast<std::uint32_t>(stride)};
    }
    if (parts[0] == "taps" && parts.size() == 2) {
        TapDeviations dev;
        for (auto item : split(parts[1], ',')) {
            auto kv = split(item, '=');
            if (kv.size() != 2)
                throw ConfigError(fmt::format("bad tap deviation '{}'", item));
            dev.offsets[static_cast<std::uint32_t>(parse_double(kv[0], "tap index"))] =
                parse_double(kv[1], "tap deviation");
        }
        return dev;
    }
    throw ConfigError(fmt::format("unknown dnl spec '{}'", text));
}

std::string to_string(const DnlSpec& spec)
{
    struct Visitor {
        std::string operator()(const UniformTaps&) const { return "uniform"; }
        std::string operator()(const RandomDnl& r) const { return fmt::format("random:{}", r.amplitude_lsb); }
        std::string operator()(const CombDnl& c) const { return fmt::format("comb:{}:{}", c.wide_lsb, c.stride); }
        std::string operator()(const TapDeviations& d) const
        {
            std::string out = "taps:";
            bool first = true;
            for (auto [tap, ps] : d.offsets) {
                out += fmt::format("{}{}={}", first ? "" : ",", tap, ps);
                first = false;
            }
            return out;
        }
    };
    return std::visit(Visitor{}, spec);
}

DelayLineProfile::DelayLineProfile(ChannelId channel, Picoseconds clock_period, std::vector<Picoseconds> tap_delays,
                                   Picoseconds jitter_sigma)
    : channel_(channel), clock_period_(clock_period), taps_(std::move(tap_delays)), jitter_sigma_(jitter_sigma)
{
    if (taps_.size() < 2)
        throw ConfigError("delay line needs at least two taps");
    if (!(jitter_sigma_ >= 0.0))
        throw ConfigError("tap jitter sigma must be >= 0");
    if (std::any_of(taps_.begin(), taps_.end(), [](double d) { return !(d > 0.0); }))
        throw ConfigError(fmt::format("channel {}: every tap delay must be > 0", channel));
    boundaries_.resize(taps_.size() + 1);
    boundaries_[0] = 0.0;
    std::partial_sum(taps_.begin(), taps_.end(), boundaries_.begin() + 1);
    if (std::abs(boundaries_.back() - clock_period_) > 1e-9 * clock_period_)
        throw ConfigError(fmt::format("channel {}: tap delays sum to {} ps, expected {} ps", channel,
                                      boundaries_.back(), clock_period_));
    boundaries_.back() = clock_period_;
}

Picoseconds DelayLineProfile::max_tap() const
{
    return *std::max_element(taps_.begin(), taps_.end());
}

DelayLineProfile build_delay_line(ChannelId channel, const TdcConfig& config, const DnlSpec& dnl,
                                  Picoseconds jitter_sigma, std::uint64_t seed)
{
    config.validate();
    if (!(jitter_sigma >= 0.0))
        throw ConfigError("jitter_sigma must be >= 0");

    const std::uint32_t n = config.n_taps;
    const Picoseconds lsb = config.nominal_tap();
    std::vector<Picoseconds> taps(n, lsb);

    if (const auto* dev = std::get_if<TapDeviations>(&dnl)) {
        for (auto [tap, offset] : dev->offsets) {
            if (tap >= n)
                throw ConfigError(fmt::format("tap deviation index {} out of range", tap));
            taps[tap] += offset;
        }
    } else if (const auto* rnd = std::get_if<RandomDnl>(&dnl)) {
        Rng rng(seed);
        std::uniform_real_distribution<double> u(-rnd->amplitude_lsb, rnd->amplitude_lsb);
        for (auto& t : taps)
            t = lsb * (1.0 + u(rng));
    } else if (const auto* comb = std::get_if<CombDnl>(&dnl)) {
        const double narrow = -comb->wide_lsb / static_cast<double>(comb->stride - 1);
        for (std::uint32_t i = 0; i < n; ++i)
            taps[i] = lsb * (1.0 + ((i % comb->stride == comb->stride - 1) ? comb->wide_lsb : narrow));
    }

    for (std::uint32_t i = 0; i < n; ++i)
        if (!(taps[i] > 0.0))
            throw ConfigError(fmt::format("dnl spec leaves tap {} non-positive ({} ps)", i, taps[i]));

    // Renormalize so the line spans exactly one clock period.
    const double sum = std::accumulate(taps.begin(), taps.end(), 0.0);
    const double scale = config.clock_period / sum;
    for (auto& t : taps)
        t *= scale;
    // Put the rounding residue on the widest tap so the sum check passes tightly.
    const double residue = config.clock_period - std::accumulate(taps.begin(), taps.end(), 0.0);
    *std::max_element(taps.begin(), taps.end()) += residue;

    return DelayLineProfile(channel, config.clock_period, std::move(taps), jitter_sigma);
}

void sample_thermometer_into(const DelayLineProfile& profile, Picoseconds delta, Picoseconds jitter,
                             std::span<std::uint8_t> out)
{
    auto bounds = profile.boundaries();
    const Picoseconds shifted = delta - jitter;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = bounds[i + 1] <= shifted ? 1 : 0;
}

ThermometerCode sample_thermometer(const DelayLineProfile& profile, Picoseconds delta)
{
    ThermometerCode code(profile.n_taps());
    sample_thermometer_into(profile, delta, 0.0, code);
    return code;
}

ThermometerCode sample_thermometer(const DelayLineProfile& profile, Picoseconds delta, Rng& rng)
{
    double jitter = 0.0;
    if (profile.jitter_sigma() > 0.0)
        jitter = std::normal_distribution<double>(0.0, profile.jitter_sigma())(rng);
    ThermometerCode code(profile.n_taps());
    sample_thermometer_into(profile, delta, jitter, code);
    return code;
}

std::uint32_t encode_fine(std::span<const std::uint8_t> code)
{
    const std::size_t n = code.size();
    auto filtered = [&](std::size_t i) {
        const int left = code[i == 0 ? i : i - 1] != 0;
        const int mid = code[i] != 0;
        const int right = code[i + 1 == n ? i : i + 1] != 0;
        return left + mid + right >= 2;
    };
    std::size_t lo = 0;
    std::size_t hi = n;
    while (lo < hi) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (filtered(mid))
            lo = mid + 1;
        else
            hi = mid;
    }
    return static_cast<std::uint32_t>(lo);
}

DigitizeResult digitize(const RawHit& hit, const DelayLineProfile& profile, ChannelState& state,
                        const TdcConfig& config, Rng& rng)
{
    if (hit.channel >= config.n_channels)
        throw ConfigError(fmt::format("hit on channel {} but the TDC has {} channels", hit.channel,
                                      config.n_channels));
    if (hit.channel != profile.channel())
        throw ContractError(fmt::format("hit on channel {} digitized with profile of channel {}", hit.channel,
                                        profile.channel()));
    if (!(hit.true_time >= 0.0))
        throw ContractError(fmt::format("hit time {} ps is negative", hit.true_time));
    if (profile.n_taps() != config.n_taps)
        throw ContractError("delay-line profile does not match the TDC tap count");

    DigitizeResult result;
    if (!state.enabled) {
        result.status = HitStatus::disabled;
        return result;
    }
    if (state.last_accept_time) {
        if (hit.true_time < *state.last_accept_time)
            throw ContractError(fmt::format("channel {}: hits out of time order", hit.channel));
        if (hit.true_time - *state.last_accept_time < config.dead_time) {
            result.status = HitStatus::dead_time;
            return result;
        }
    }

    const Picoseconds period = config.clock_period;
    auto edge = static_cast<std::uint64_t>(std::ceil(hit.true_time / period));
    Picoseconds delta = static_cast<double>(edge) * period - hit.true_time;
    if (delta >= period) {
        --edge;
        delta -= period;
    } else if (delta < 0.0) {
        ++edge;
        delta += period;
    }

    double jitter = 0.0;
    if (profile.jitter_sigma() > 0.0)
        jitter = std::normal_distribution<double>(0.0, profile.jitter_sigma())(rng);
    thread_local std::vector<std::uint8_t> scratch;
    scratch.resize(profile.n_taps());
    sample_thermometer_into(profile, delta, jitter, scratch);

    result.record.channel = hit.channel;
    result.record.coarse = edge & (config.coarse_modulus() - 1);
    result.record.fine = encode_fine(scratch);
    result.rollover = ((edge >> config.coarse_bits) & 1U) != 0;
    state.last_accept_time = hit.true_time;
    return result;
}

Picoseconds reconstruct_unwrapped(ChannelId channel, std::uint64_t coarse, std::uint32_t fine,
                                  const CalibrationTable& cal, const TdcConfig& config)
{
    if (cal.channel() != channel)
        throw CalibrationError(fmt::format("no calibration for channel {} (table is for channel {}); run "
                                           "code_density_calibrate for it first",
                                           channel, cal.channel()));
    return static_cast<double>(coarse) * config.clock_period - cal.bin_center(fine);
}

Picoseconds reconstruct(const TdcRecord& record, const CalibrationTable& cal, const TdcConfig& config)
{
    return reconstruct_unwrapped(record.channel, record.coarse, record.fine, cal, config);
}

Tdc::Tdc(TdcConfig config, std::vector<DelayLineProfile> profiles, std::uint64_t seed)
    : config_(config), profiles_(std::move(profiles)), states_(config.n_channels)
{
    config_.validate();
    if (profiles_.size() != config_.n_channels)
        throw ConfigError(fmt::format("expected {} delay-line profiles, got {}", config_.n_channels,
                                      profiles_.size()));
    for (ChannelId ch = 0; ch < config_.n_channels; ++ch) {
        if (profiles_[ch].channel() != ch)
            throw ConfigError(fmt::format("profile {} describes channel {}", ch, profiles_[ch].channel()));
        rngs_.emplace_back(derive_seed(seed, "tdc-jitter", ch));
    }
}

void Tdc::check_channel(ChannelId channel) const
{
    if (channel >= config_.n_channels)
        throw ConfigError(fmt::format("channel {} out of range (n_channels = {})", channel, config_.n_channels));
}

DigitizeResult Tdc::digitize(const RawHit& hit)
{
    check_channel(hit.channel);
    return qkdsim::digitize(hit, profiles_[hit.channel], states_[hit.channel], config_, rngs_[hit.channel]);
}

void Tdc::set_enabled(ChannelId channel, bool enabled)
{
    check_channel(channel);
    states_[channel].enabled = enabled;
}

const DelayLineProfile& Tdc::profile(ChannelId channel) const
{
    check_channel(channel);
    return profiles_[channel];
}

const ChannelState& Tdc::state(ChannelId channel) const
{
    check_channel(channel);
    return states_[channel];
}

}  // namespace qkdsim
