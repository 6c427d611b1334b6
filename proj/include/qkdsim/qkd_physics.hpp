#pragma once

// Event source for a free-space BB84 link: Alice's biased random code, a
// lossy channel with background light, Bob's passive-basis four-detector
// receiver and the sync laser, all seen through Bob's (offset, drifting) clock.

#include "qkdsim/common.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace qkdsim {

enum class Basis : std::uint8_t { Z = 0, X = 1 };

struct CodeEntry {
    Basis basis = Basis::Z;
    std::uint8_t bit = 0;

    friend bool operator==(const CodeEntry&, const CodeEntry&) = default;
};

/// Independent draws with P(Z) = basis_bias and P(bit = 1) = bit_bias.
std::vector<CodeEntry> gen_random_code(std::uint64_t n, double basis_bias, double bit_bias, std::uint64_t seed);

enum class PulseKind : std::uint8_t { signal, sync };

struct Bb84Pulse {
    std::uint64_t index = 0;
    Picoseconds emit_time = 0.0;  // Alice clock
    Basis basis = Basis::Z;
    std::uint8_t bit = 0;
    PulseKind kind = PulseKind::signal;
};

/// Signal pulse k is emitted at k * pulse_period.
std::vector<Bb84Pulse> make_pulse_train(std::span<const CodeEntry> code, Picoseconds pulse_period);

struct LinkModel {
    double loss_db = 1.0;
    double background_rate = 5000.0;  // counts/s per detector
    Picoseconds pulse_period = 35.0e6;
    Picoseconds sync_period = 1.0e9;
    double mean_photon_number = 0.5;

    void validate() const;
    double transmittance() const;
};

struct DetectorModel {
    double efficiency = 0.5;
    double dark_rate = 300.0;  // counts/s per detector
    Picoseconds jitter_sigma = 80.0;
    Picoseconds dead_time = 50000.0;
    double intrinsic_error = 0.0175;

    void validate() const;
};

/// Bob time = (Alice time + offset) * (1 + drift_ppm * 1e-6).
struct ClockModel {
    Picoseconds offset = 0.0;
    double drift_ppm = 0.0;

    void validate() const;
    Picoseconds to_bob(Picoseconds alice) const { return (alice + offset) * (1.0 + drift_ppm * 1e-6); }
    Picoseconds to_alice(Picoseconds bob) const { return bob / (1.0 + drift_ppm * 1e-6) - offset; }
};

enum class Detector : std::uint8_t { Z0 = 0, Z1 = 1, X0 = 2, X1 = 3, Sync = 4 };

Basis basis_of(Detector d);
std::uint8_t bit_of(Detector d);
Detector detector_for(Basis basis, std::uint8_t bit);
const char* to_string(Detector d);

enum class Origin : std::uint8_t { signal, background, dark, sync };

/// A detector click in Bob's clock. `origin` and `pulse_index` are ground
/// truth for validation only; the analysis path never sees them.
struct DetectionEvent {
    Detector detector = Detector::Z0;
    Picoseconds true_time = 0.0;
    Origin origin = Origin::signal;
    std::uint64_t pulse_index = 0;
};

struct TruthLedger {
    std::uint64_t emitted = 0;
    std::uint64_t lost = 0;
    std::uint64_t detected_signal = 0;
    std::uint64_t suppressed_signal = 0;  // removed by detector dead time
    std::uint64_t noise_generated = 0;
    std::uint64_t noise_detected = 0;
    std::uint64_t noise_suppressed = 0;
    std::uint64_t signal_same_basis = 0;  // detected, Bob basis == Alice basis
    std::uint64_t signal_errors = 0;      // of those, wrong bit

    bool conserved() const { return emitted == detected_signal + lost + suppressed_signal; }
    double true_error_fraction() const
    {
        return signal_same_basis ? static_cast<double>(signal_errors) / static_cast<double>(signal_same_basis) : 0.0;
    }
};

struct LinkOutput {
    std::vector<DetectionEvent> events;  // time-ordered
    TruthLedger truth;
};

/// Pulses must be sorted by emit_time (ContractError otherwise). Sync pulses
/// in the list are ignored; use emit_sync() for the sync path.
LinkOutput simulate_link(std::span<const Bb84Pulse> pulses, const LinkModel& link, const DetectorModel& detectors,
                         const ClockModel& clock, std::uint64_t seed);

/// One SYNC click per surviving sync pulse i, at to_bob(i * sync_period) plus jitter.
std::vector<DetectionEvent> emit_sync(std::uint64_t count, Picoseconds sync_period, const ClockModel& clock,
                                      Picoseconds jitter, std::uint64_t seed, double survival = 1.0);

/// Sidecar: one byte per pulse, (basis << 1) | bit, pulse index = byte position.
void write_code_sidecar(const std::filesystem::path& path, std::span<const CodeEntry> code);
std::vector<CodeEntry> read_code_sidecar(const std::filesystem::path& path);

}  // namespace qkdsim
