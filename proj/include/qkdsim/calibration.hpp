#pragma once

#include "qkdsim/common.hpp"
#include "qkdsim/tdc.hpp"

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <vector>

namespace qkdsim {

class CalibrationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Per-channel fine-code calibration. Widths, edges and centers are indexed
/// densely by fine code (0..n_taps); codes never observed have zero width.
/// DNL is reported per occupied code and INL per boundary between them.
class CalibrationTable {
public:
    /// Code-density construction from raw counts (integer-exact INL closure).
    static CalibrationTable from_histogram(ChannelId channel, Picoseconds clock_period,
                                           std::span<const std::uint64_t> counts);
    /// Table from known bin widths (length n_taps + 1, summing to the period).
    static CalibrationTable from_widths(ChannelId channel, Picoseconds clock_period, std::vector<Picoseconds> widths,
                                        std::uint64_t sample_count = 0);
    /// The ideal table implied by the true tap delays.
    static CalibrationTable from_profile(const DelayLineProfile& profile);

    ChannelId channel() const { return channel_; }
    Picoseconds clock_period() const { return clock_period_; }
    std::uint32_t max_code() const { return static_cast<std::uint32_t>(widths_.size() - 1); }
    std::span<const Picoseconds> bin_widths() const { return widths_; }
    std::span<const Picoseconds> bin_edges() const { return edges_; }
    std::span<const Picoseconds> bin_centers() const { return centers_; }
    std::span<const std::uint32_t> occupied_codes() const { return occupied_; }
    std::span<const double> dnl() const { return dnl_; }
    std::span<const double> inl() const { return inl_; }
    Picoseconds lsb() const { return lsb_; }
    std::uint64_t sample_count() const { return sample_count_; }

    /// Midpoint of the bin for `fine`; 0 for fine == 0 (hit on the clock edge).
    Picoseconds bin_center(std::uint32_t fine) const;

private:
    CalibrationTable() = default;
    void finish_from_widths();

    ChannelId channel_ = 0;
    Picoseconds clock_period_ = 0.0;
    std::vector<Picoseconds> widths_;
    std::vector<Picoseconds> edges_;
    std::vector<Picoseconds> centers_;
    std::vector<std::uint32_t> occupied_;
    std::vector<double> dnl_;
    std::vector<double> inl_;
    Picoseconds lsb_ = 0.0;
    std::uint64_t sample_count_ = 0;
};

/// Tables for several channels; lookups of a missing channel fail loudly.
class CalibrationSet {
public:
    void insert(CalibrationTable table);
    bool contains(ChannelId channel) const { return tables_.count(channel) != 0; }
    const CalibrationTable& at(ChannelId channel) const;
    const std::map<ChannelId, CalibrationTable>& tables() const { return tables_; }
    bool empty() const { return tables_.empty(); }

private:
    std::map<ChannelId, CalibrationTable> tables_;
};

/// Bin widths from a code-density histogram (one count per fine code 0..n_taps).
/// Rejects an empty histogram and a histogram where one code holds > 50%.
CalibrationTable code_density_calibrate(ChannelId channel, std::span<const std::uint64_t> fine_histogram,
                                        const TdcConfig& config);

/// Drives `n_hits` uniformly-phased hits through digitize() and histograms the
/// fine codes. Hits are spaced by dead_time + one clock period.
std::vector<std::uint64_t> uniform_fine_histogram(const DelayLineProfile& profile, const TdcConfig& config,
                                                  std::uint64_t n_hits, std::uint64_t seed);

struct PrecisionSetup {
    Picoseconds period = 1.0e6;       // pulse generator period
    Picoseconds cable_delay = 5000.0;
    std::uint64_t n = 100000;
    std::uint64_t seed = 1;
    /// The generator runs off its own oscillator; this offset walks the hit
    /// phase across the TDC clock.
    double generator_offset_ppm = 11.3;
};

struct PrecisionReport {
    ChannelId channel_a = 0;
    ChannelId channel_b = 0;
    Picoseconds raw_std = 0.0;
    Picoseconds per_channel_rms = 0.0;  // raw_std / sqrt(2)
    std::uint64_t n_samples = 0;
    Picoseconds mean_interval = 0.0;
};

/// Cable-delay test: each generator edge reaches channel A at t and channel B
/// at t + cable_delay; reports the spread of the reconstructed intervals.
PrecisionReport precision_test(const TdcConfig& config, const DelayLineProfile& a, const DelayLineProfile& b,
                               const CalibrationTable& cal_a, const CalibrationTable& cal_b,
                               const PrecisionSetup& setup);

/// As above, reconstructing with the ideal tables of the true profiles.
PrecisionReport precision_test(const TdcConfig& config, const DelayLineProfile& a, const DelayLineProfile& b,
                               const PrecisionSetup& setup);

/// fine_code,width_ps,dnl_lsb,inl_lsb for every occupied code; INL at the
/// bin's lower boundary.
void write_calibration_csv(std::ostream& out, const CalibrationTable& table);

}  // namespace qkdsim
