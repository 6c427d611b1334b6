#pragma once

// Experiment driver shared by the CLI and the end-to-end tests: INI config,
// the simulated session pipeline (link -> TDC -> readout -> file) and the
// offline analysis (file -> clock recovery -> sifting).

#include "qkdsim/calibration.hpp"
#include "qkdsim/qkd_physics.hpp"
#include "qkdsim/readout.hpp"
#include "qkdsim/sync_sift.hpp"
#include "qkdsim/tdc.hpp"
#include "qkdsim/timetag_file.hpp"

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace qkdsim {

/// Detector -> TDC input. Index with static_cast<size_t>(Detector).
using ChannelMap = std::array<ChannelId, 5>;

struct ExperimentConfig {
    std::uint64_t seed = 0;  // mandatory in files
    std::filesystem::path output_dir = "out";

    TdcConfig tdc;
    DnlSpec dnl = UniformTaps{};
    std::map<ChannelId, DnlSpec> channel_dnl;
    Picoseconds tdc_jitter = 0.0;
    std::map<ChannelId, Picoseconds> channel_jitter;
    std::uint64_t calibration_hits = 1'000'000;

    PrecisionSetup precision;
    std::vector<std::pair<ChannelId, ChannelId>> precision_pairs;  // empty: (0,1), (2,3), ...

    LinkModel link;
    DetectorModel detectors;
    ClockModel clock;
    double basis_bias = 0.5;
    double bit_bias = 0.5;
    double session_length = 1.0;  // seconds; n_pulses = floor(length / pulse_period)

    Picoseconds sync_jitter = 50.0;
    double sync_survival = 1.0;
    SyncSearch sync_search;

    Picoseconds window = 1000.0;      // the reported window
    std::vector<Picoseconds> windows;  // extra scan windows
    double disclose_fraction = 0.1;
    double f_ec = 1.16;

    StreamOptions readout;
    ChannelMap channels{0, 1, 2, 3, 4};

    void validate() const;
    std::uint64_t n_pulses() const;
    double duration_s() const;
    DnlSpec dnl_for(ChannelId channel) const;
    Picoseconds jitter_for(ChannelId channel) const;
    /// The reported window first, then the scan windows, ascending and de-duplicated.
    std::vector<Picoseconds> analysis_windows() const;
};

/// Parses the INI text; unknown sections/keys and a missing seed are ConfigErrors.
ExperimentConfig parse_config(const std::string& ini_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, in a fixed order; parse_config(to_ini(c)) reproduces c.
std::string to_ini(const ExperimentConfig& config);

DelayLineProfile channel_profile(const ExperimentConfig& config, ChannelId channel);
/// Code-density calibration of one channel with config.calibration_hits hits.
CalibrationTable calibrate_channel(const ExperimentConfig& config, const DelayLineProfile& profile);

struct SessionStats {
    std::uint64_t n_pulses = 0;
    std::uint64_t events = 0;           // detector + sync clicks in Bob's clock
    std::uint64_t before_tdc_start = 0;  // clicks at negative Bob time
    std::uint64_t tdc_dead_time = 0;
    ReadoutBuffer readout;
    TruthLedger truth;
};

struct SimulatedSession {
    std::vector<CodeEntry> alice_code;
    std::vector<std::uint64_t> words;  // as delivered by the readout link
    CalibrationSet calibration;
    TimetagHeader header;
    SessionStats stats;
};

SimulatedSession simulate_session(const ExperimentConfig& config);

struct SessionAnalysis {
    ClockEstimate clock;
    std::uint64_t sync_detections = 0;
    std::uint64_t detections = 0;
    std::vector<SiftReport> reports;  // one per analysis window
    SiftReport primary;               // the configured window
};

/// Throws SyncError when the clock cannot be recovered.
SessionAnalysis analyze_session(const TimetagFile& file, std::span<const CodeEntry> alice_code,
                                const ExperimentConfig& config, std::span<const Picoseconds> windows);

/// SHA-256 of a byte string, lowercase hex.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Commands. Return the process exit code: 0 success, 1 sync failure or no
// key, 2 config or I/O error. Progress and summaries go to `log`.
inline constexpr int kExitOk = 0;
inline constexpr int kExitAnalysis = 1;
inline constexpr int kExitConfig = 2;

int cmd_calibrate(const ExperimentConfig& config, std::ostream& log);
int cmd_precision(const ExperimentConfig& config, std::ostream& log);
int cmd_run(const ExperimentConfig& config, std::ostream& log);
int cmd_analyze(const ExperimentConfig& config, const std::filesystem::path& timetag,
                const std::filesystem::path& sidecar, std::span<const Picoseconds> windows,
                const std::filesystem::path& out_csv, std::ostream& log);

}  // namespace qkdsim
