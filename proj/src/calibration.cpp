#include "qkdsim/calibration.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qkdsim {

CalibrationTable CalibrationTable::from_histogram(ChannelId channel, Picoseconds clock_period,
                                                  std::span<const std::uint64_t> counts)
{
    const std::uint64_t total = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
    if (total == 0)
        throw CalibrationError(fmt::format("channel {}: empty fine-code histogram", channel));

    CalibrationTable t;
    t.channel_ = channel;
    t.clock_period_ = clock_period;
    t.sample_count_ = total;
    t.widths_.resize(counts.size());
    t.edges_.resize(counts.size() + 1);

    const auto dtotal = static_cast<long double>(total);
    std::uint64_t cumulative = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
        t.edges_[k] = static_cast<double>(clock_period * (cumulative / dtotal));
        t.widths_[k] = static_cast<double>(clock_period * (counts[k] / dtotal));
        cumulative += counts[k];
        if (counts[k] > 0)
            t.occupied_.push_back(static_cast<std::uint32_t>(k));
    }
    t.edges_.back() = clock_period;

    const auto occ = static_cast<std::int64_t>(t.occupied_.size());
    t.lsb_ = clock_period / static_cast<double>(occ);

    // Integer numerators keep sum(dnl) and the closing INL exactly zero.
    const auto itotal = static_cast<std::int64_t>(total);
    t.dnl_.reserve(t.occupied_.size());
    t.inl_.assign(t.occupied_.size() + 1, 0.0);
    std::int64_t cum = 0;
    for (std::size_t j = 0; j < t.occupied_.size(); ++j) {
        const auto c = static_cast<std::int64_t>(counts[t.occupied_[j]]);
        t.dnl_.push_back(static_cast<double>(c * occ - itotal) / static_cast<double>(itotal));
        cum += c;
        const std::int64_t numer = cum * occ - static_cast<std::int64_t>(j + 1) * itotal;
        t.inl_[j + 1] = static_cast<double>(numer) / static_cast<double>(itotal);
    }

    t.centers_.resize(t.widths_.size());
    for (std::size_t k = 0; k < t.widths_.size(); ++k)
        t.centers_[k] = t.edges_[k] + 0.5 * t.widths_[k];
    t.centers_[0] = 0.0;
    return t;
}

CalibrationTable CalibrationTable::from_widths(ChannelId channel, Picoseconds clock_period,
                                               std::vector<Picoseconds> widths, std::uint64_t sample_count)
{
    if (widths.size() < 2)
        throw CalibrationError("calibration table needs at least two bins");
    if (std::any_of(widths.begin(), widths.end(), [](double w) { return !(w >= 0.0); }))
        throw CalibrationError(fmt::format("channel {}: negative bin width", channel));
    const double sum = std::accumulate(widths.begin(), widths.end(), 0.0);
    if (std::abs(sum - clock_period) > 1e-6 * clock_period)
        throw CalibrationError(fmt::format("channel {}: bin widths sum to {} ps, expected {} ps", channel, sum,
                                           clock_period));

    CalibrationTable t;
    t.channel_ = channel;
    t.clock_period_ = clock_period;
    t.sample_count_ = sample_count;
    t.widths_ = std::move(widths);
    t.finish_from_widths();
    return t;
}

CalibrationTable CalibrationTable::from_profile(const DelayLineProfile& profile)
{
    std::vector<Picoseconds> widths(profile.tap_delays().begin(), profile.tap_delays().end());
    widths.push_back(0.0);
    return from_widths(profile.channel(), profile.clock_period(), std::move(widths));
}

void CalibrationTable::finish_from_widths()
{
    edges_.assign(widths_.size() + 1, 0.0);
    std::partial_sum(widths_.begin(), widths_.end(), edges_.begin() + 1);
    centers_.resize(widths_.size());
    occupied_.clear();
    for (std::size_t k = 0; k < widths_.size(); ++k) {
        centers_[k] = edges_[k] + 0.5 * widths_[k];
        if (widths_[k] > 0.0)
            occupied_.push_back(static_cast<std::uint32_t>(k));
    }
    centers_[0] = 0.0;
    if (occupied_.empty())
        throw CalibrationError(fmt::format("channel {}: no occupied bins", channel_));
    lsb_ = clock_period_ / static_cast<double>(occupied_.size());
    dnl_.clear();
    inl_.assign(occupied_.size() + 1, 0.0);
    for (std::size_t j = 0; j < occupied_.size(); ++j) {
        dnl_.push_back(widths_[occupied_[j]] / lsb_ - 1.0);
        inl_[j + 1] = inl_[j] + dnl_.back();
    }
}

Picoseconds CalibrationTable::bin_center(std::uint32_t fine) const
{
    if (fine >= centers_.size())
        throw CalibrationError(
            fmt::format("channel {}: fine code {} outside calibrated range [0, {}]", channel_, fine, max_code()));
    return centers_[fine];
}

void CalibrationSet::insert(CalibrationTable table)
{
    const auto ch = table.channel();
    tables_.insert_or_assign(ch, std::move(table));
}

const CalibrationTable& CalibrationSet::at(ChannelId channel) const
{
    auto it = tables_.find(channel);
    if (it == tables_.end())
        throw CalibrationError(
            fmt::format("no calibration for channel {}; run code_density_calibrate for it first", channel));
    return it->second;
}

CalibrationTable code_density_calibrate(ChannelId channel, std::span<const std::uint64_t> fine_histogram,
                                        const TdcConfig& config)
{
    config.validate();
    if (fine_histogram.size() != config.n_taps + 1)
        throw CalibrationError(fmt::format("histogram has {} codes, expected n_taps + 1 = {}",
                                           fine_histogram.size(), config.n_taps + 1));
    const std::uint64_t total = std::accumulate(fine_histogram.begin(), fine_histogram.end(), std::uint64_t{0});
    if (total == 0)
        throw CalibrationError(fmt::format("channel {}: empty fine-code histogram", channel));
    const auto peak = std::max_element(fine_histogram.begin(), fine_histogram.end());
    if (2 * *peak > total)
        throw CalibrationError(fmt::format("channel {}: fine code {} holds {:.1f}% of all hits (broken delay line)",
                                           channel, peak - fine_histogram.begin(), 100.0 * *peak / total));
    return CalibrationTable::from_histogram(channel, config.clock_period, fine_histogram);
}

std::vector<std::uint64_t> uniform_fine_histogram(const DelayLineProfile& profile, const TdcConfig& config,
                                                  std::uint64_t n_hits, std::uint64_t seed)
{
    std::vector<std::uint64_t> histogram(config.n_taps + 1, 0);
    Rng phase_rng(derive_seed(seed, "calibration-phase"));
    Rng jitter_rng(derive_seed(seed, "calibration-jitter"));
    std::uniform_real_distribution<double> phase(0.0, config.clock_period);
    ChannelState state;
    const Picoseconds spacing = config.dead_time + config.clock_period;
    for (std::uint64_t k = 0; k < n_hits; ++k) {
        RawHit hit{profile.channel(), static_cast<double>(k) * spacing + phase(phase_rng)};
        auto r = digitize(hit, profile, state, config, jitter_rng);
        if (r.accepted())
            ++histogram[r.record.fine];
    }
    return histogram;
}

PrecisionReport precision_test(const TdcConfig& config, const DelayLineProfile& a, const DelayLineProfile& b,
                               const CalibrationTable& cal_a, const CalibrationTable& cal_b,
                               const PrecisionSetup& setup)
{
    config.validate();
    if (setup.n < 10000)
        throw ConfigError(fmt::format("precision test needs n >= 10^4 pulses, got {}", setup.n));
    const Picoseconds period = setup.period * (1.0 + setup.generator_offset_ppm * 1e-6);
    if (!(period > config.dead_time))
        throw ConfigError(fmt::format("generator period {} ps does not exceed the {} ps dead time; every hit after "
                                      "the first would be rejected",
                                      setup.period, config.dead_time));
    if (!(setup.cable_delay >= 0.0))
        throw ConfigError("cable delay must be >= 0");

    Rng rng_a(derive_seed(setup.seed, "precision-jitter", a.channel()));
    Rng rng_b(derive_seed(setup.seed, "precision-jitter", b.channel() + 64));
    Rng phase_rng(derive_seed(setup.seed, "precision-phase"));
    const Picoseconds start = std::uniform_real_distribution<double>(0.0, config.clock_period)(phase_rng);

    ChannelState state_a;
    ChannelState state_b;
    const auto modulus = config.coarse_modulus();
    double mean = 0.0;
    double m2 = 0.0;
    std::uint64_t count = 0;
    for (std::uint64_t k = 0; k < setup.n; ++k) {
        const Picoseconds t = start + static_cast<double>(k) * period;
        auto ra = digitize(RawHit{a.channel(), t}, a, state_a, config, rng_a);
        auto rb = digitize(RawHit{b.channel(), t + setup.cable_delay}, b, state_b, config, rng_b);
        if (!ra.accepted() || !rb.accepted())
            continue;
        // Coarse difference modulo the counter range, taken as the nearest signed value.
        std::uint64_t dc = (rb.record.coarse - ra.record.coarse) & (modulus - 1);
        auto signed_dc = static_cast<std::int64_t>(dc);
        if (dc >= modulus / 2)
            signed_dc -= static_cast<std::int64_t>(modulus);
        const double interval = static_cast<double>(signed_dc) * config.clock_period -
                                cal_b.bin_center(rb.record.fine) + cal_a.bin_center(ra.record.fine);
        ++count;
        const double d = interval - mean;
        mean += d / static_cast<double>(count);
        m2 += d * (interval - mean);
    }
    if (count < 2)
        throw ConfigError("precision test collected fewer than two interval samples");

    PrecisionReport report;
    report.channel_a = a.channel();
    report.channel_b = b.channel();
    report.n_samples = count;
    report.mean_interval = mean;
    report.raw_std = std::sqrt(m2 / static_cast<double>(count - 1));
    report.per_channel_rms = report.raw_std / std::sqrt(2.0);
    return report;
}

PrecisionReport precision_test(const TdcConfig& config, const DelayLineProfile& a, const DelayLineProfile& b,
                               const PrecisionSetup& setup)
{
    return precision_test(config, a, b, CalibrationTable::from_profile(a), CalibrationTable::from_profile(b), setup);
}

void write_calibration_csv(std::ostream& out, const CalibrationTable& table)
{
    out << "fine_code,width_ps,dnl_lsb,inl_lsb\n";
    auto codes = table.occupied_codes();
    for (std::size_t j = 0; j < codes.size(); ++j)
        out << fmt::format("{},{:.6f},{:.6f},{:.6f}\n", codes[j], table.bin_widths()[codes[j]], table.dnl()[j],
                           table.inl()[j]);
}

}  // namespace qkdsim
