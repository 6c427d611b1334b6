#pragma once

// Tap-level model of the multi-channel delay-line TDC: a coarse counter on
// the system clock plus a carry-chain interpolator read out as a thermometer
// code. The fine code counts delay cells the edge has passed between the hit
// and the NEXT sampling clock edge, so timestamp = coarse * T - fine_time.

#include "qkdsim/common.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace qkdsim {

class CalibrationTable;

struct TdcConfig {
    Picoseconds clock_period = 6250.0;  // 160 MHz
    std::uint32_t n_taps = 261;
    std::uint32_t n_channels = 16;
    Picoseconds dead_time = 30000.0;
    std::uint32_t coarse_bits = 40;

    /// Throws ConfigError when an invariant is violated.
    void validate() const;

    std::uint64_t coarse_modulus() const { return std::uint64_t{1} << coarse_bits; }
    Picoseconds dynamic_range() const;
    Picoseconds nominal_tap() const { return clock_period / n_taps; }
};

// Delay-line nonlinearity to inject when building a profile.
struct UniformTaps {};
/// Absolute per-tap offsets in picoseconds, keyed by tap index.
struct TapDeviations {
    std::map<std::uint32_t, Picoseconds> offsets;
};
/// Independent per-tap deviations, uniform in [-amplitude, +amplitude] LSB.
struct RandomDnl {
    double amplitude_lsb = 0.0;
};
/// Carry-chain style pattern: every stride-th tap is wide by `wide_lsb`,
/// the others narrow just enough to keep the mean deviation at zero.
struct CombDnl {
    double wide_lsb = 0.0;
    std::uint32_t stride = 4;
};
using DnlSpec = std::variant<UniformTaps, TapDeviations, RandomDnl, CombDnl>;

/// Parses "uniform", "random:<amp>", "comb:<wide>:<stride>" or
/// "taps:<i>=<ps>,<j>=<ps>".
DnlSpec parse_dnl_spec(std::string_view text);
std::string to_string(const DnlSpec& spec);

class DelayLineProfile {
public:
    /// `tap_delays` must sum to `clock_period` (1e-9 relative); the last
    /// cumulative boundary is pinned to `clock_period` exactly.
    DelayLineProfile(ChannelId channel, Picoseconds clock_period, std::vector<Picoseconds> tap_delays,
                     Picoseconds jitter_sigma);

    ChannelId channel() const { return channel_; }
    Picoseconds clock_period() const { return clock_period_; }
    std::uint32_t n_taps() const { return static_cast<std::uint32_t>(taps_.size()); }
    std::span<const Picoseconds> tap_delays() const { return taps_; }
    /// boundaries()[i] = sum of the first i taps; size n_taps + 1.
    std::span<const Picoseconds> boundaries() const { return boundaries_; }
    Picoseconds jitter_sigma() const { return jitter_sigma_; }
    Picoseconds max_tap() const;

private:
    ChannelId channel_;
    Picoseconds clock_period_;
    std::vector<Picoseconds> taps_;
    std::vector<Picoseconds> boundaries_;
    Picoseconds jitter_sigma_;
};

DelayLineProfile build_delay_line(ChannelId channel, const TdcConfig& config, const DnlSpec& dnl,
                                  Picoseconds jitter_sigma, std::uint64_t seed);

using ThermometerCode = std::vector<std::uint8_t>;

/// Noiseless sampling: bit i is set iff boundaries[i+1] <= delta.
ThermometerCode sample_thermometer(const DelayLineProfile& profile, Picoseconds delta);

/// Sampling with the profile's jitter: one Gaussian draw per digitization,
/// added to every cumulative boundary before comparison.
ThermometerCode sample_thermometer(const DelayLineProfile& profile, Picoseconds delta, Rng& rng);

void sample_thermometer_into(const DelayLineProfile& profile, Picoseconds delta, Picoseconds jitter,
                             std::span<std::uint8_t> out);

/// Majority-of-3 bubble filter (ends padded with their own value) followed by
/// a half-interval search for the 1->0 transition. Total over all inputs; the
/// result r satisfies filtered[r-1] == 1 (r > 0) and filtered[r] == 0 (r < n).
std::uint32_t encode_fine(std::span<const std::uint8_t> code);

struct RawHit {
    ChannelId channel = 0;
    Picoseconds true_time = 0.0;
};

struct TdcRecord {
    ChannelId channel = 0;
    std::uint64_t coarse = 0;
    std::uint32_t fine = 0;

    friend bool operator==(const TdcRecord&, const TdcRecord&) = default;
};

struct ChannelState {
    std::optional<Picoseconds> last_accept_time;
    bool enabled = true;
};

enum class HitStatus { accepted, dead_time, disabled };

struct DigitizeResult {
    HitStatus status = HitStatus::accepted;
    TdcRecord record;
    /// Parity of the coarse-counter epoch (bit `coarse_bits` of the unwrapped count).
    bool rollover = false;

    bool accepted() const { return status == HitStatus::accepted; }
};

/// Applies the dead-time gate and, on acceptance, samples the coarse counter
/// at the next clock edge and the fine code for the remaining interval.
/// Hits on one channel must arrive in time order.
DigitizeResult digitize(const RawHit& hit, const DelayLineProfile& profile, ChannelState& state,
                        const TdcConfig& config, Rng& rng);

/// coarse * T - bin_center(fine) from the channel's calibration table.
Picoseconds reconstruct(const TdcRecord& record, const CalibrationTable& cal, const TdcConfig& config);

/// Same as reconstruct() for a coarse count that has already been unwrapped.
Picoseconds reconstruct_unwrapped(ChannelId channel, std::uint64_t coarse, std::uint32_t fine,
                                  const CalibrationTable& cal, const TdcConfig& config);

/// The whole board: one profile, state and jitter stream per channel.
class Tdc {
public:
    Tdc(TdcConfig config, std::vector<DelayLineProfile> profiles, std::uint64_t seed);

    DigitizeResult digitize(const RawHit& hit);
    void set_enabled(ChannelId channel, bool enabled);

    const TdcConfig& config() const { return config_; }
    const DelayLineProfile& profile(ChannelId channel) const;
    const ChannelState& state(ChannelId channel) const;

private:
    void check_channel(ChannelId channel) const;

    TdcConfig config_;
    std::vector<DelayLineProfile> profiles_;
    std::vector<ChannelState> states_;
    std::vector<Rng> rngs_;
};

}  // namespace qkdsim
