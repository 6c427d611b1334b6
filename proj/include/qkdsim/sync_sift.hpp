#pragma once

#include "qkdsim/common.hpp"
#include "qkdsim/qkd_physics.hpp"

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace qkdsim {

class SyncError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ClockEstimate {
    Picoseconds offset_hat = 0.0;
    double drift_hat_ppm = 0.0;
    Picoseconds residual_rms = 0.0;
    std::uint64_t n_sync_used = 0;

    Picoseconds to_alice(Picoseconds bob) const { return bob / (1.0 + drift_hat_ppm * 1e-6) - offset_hat; }
};

struct SyncSearch {
    Picoseconds coarse_offset_bound = 1.0e8;  // the GPS bound, must be < sync_period / 2
    double drift_bound_ppm = 50.0;
};

/// Recovers Bob's clock from sync detections (any order).
///
/// 1. Coarse search: phases of drift-compensated detection times are
///    histogrammed over [-bound, bound] for a grid of drift candidates; the
///    best cell must exceed 5x the count expected from uniform background.
/// 2. Sync indices are assigned against that coarse model and a least-squares
///    line t = (i * sync_period + offset) * (1 + drift) is fitted over a
///    doubling horizon, then sigma-clipped at 5 rms until the inliers settle.
ClockEstimate recover_clock(std::span<const Picoseconds> sync_detections, Picoseconds sync_period,
                            const SyncSearch& search);

ClockEstimate recover_clock(std::span<const Picoseconds> sync_detections, Picoseconds sync_period,
                            Picoseconds coarse_offset_bound);

/// A Bob detection as the analysis sees it: timestamp and detector only.
struct Detection {
    Picoseconds time = 0.0;
    Detector detector = Detector::Z0;
};

struct MatchedPair {
    std::uint64_t slot = 0;
    Detector detector = Detector::Z0;
    Picoseconds residual = 0.0;  // Alice timebase, detection minus slot center

    friend bool operator==(const MatchedPair&, const MatchedPair&) = default;
};

struct MatchResult {
    Picoseconds window = 0.0;
    std::vector<MatchedPair> pairs;  // ascending slot
    std::uint64_t outside_window = 0;
    std::uint64_t slot_collisions = 0;  // extra detections dropped from shared slots
    std::uint64_t out_of_range = 0;     // nearest slot outside [0, slot_count)
};

/// Assigns each detection to its nearest pulse slot in Alice's timebase and
/// keeps it iff |residual| <= window / 2. In a shared slot the smallest
/// |residual| wins (ties: negative residual, then detector, then time).
MatchResult match_pulses(std::span<const Detection> detections, const ClockEstimate& clock,
                         Picoseconds pulse_period, Picoseconds window, std::uint64_t slot_count);

struct SiftOptions {
    double disclose_fraction = 0.1;
    std::uint64_t seed = 0;
    double f_ec = 1.16;
    double duration_s = 1.0;  // session length, for the rates
};

struct SiftReport {
    Picoseconds window = 0.0;
    std::uint64_t matched = 0;
    std::uint64_t sifted_bits = 0;
    std::uint64_t disclosed = 0;
    std::uint64_t errors_found = 0;
    double qber = 0.0;
    double sifted_rate = 0.0;  // all sifted bits per second
    double secure_rate = 0.0;  // from the undisclosed remainder

    friend bool operator==(const SiftReport&, const SiftReport&) = default;
};

/// Basis reconciliation and QBER estimation. Each sifted bit is disclosed
/// independently with probability disclose_fraction, decided by a hash of
/// (seed, slot), so the choice for a slot does not depend on the other pairs.
SiftReport sift(const MatchResult& matched, std::span<const CodeEntry> alice_code, const SiftOptions& options);

/// H2(x) = -x log2 x - (1-x) log2 (1-x), with H2(0) = H2(1) = 0.
double binary_entropy(double x);

/// max(0, sifted_rate * (1 - f_ec * H2(qber) - H2(qber))).
double secure_rate(double sifted_rate, double qber, double f_ec);

struct SessionData {
    std::vector<Detection> detections;
    ClockEstimate clock;
    Picoseconds pulse_period = 0.0;
    std::vector<CodeEntry> alice_code;
    SiftOptions sift;
};

/// One SiftReport per window over the same data; windows strictly ascending, at least two.
std::vector<SiftReport> window_scan(const SessionData& session, std::span<const Picoseconds> windows);

/// Match + sift for a single window.
SiftReport analyze_window(const SessionData& session, Picoseconds window);

void write_sift_csv(std::ostream& out, std::span<const SiftReport> reports);
std::string summarize(const SiftReport& report);

}  // namespace qkdsim
