#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "json.hpp"
#include "qkdsim/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace qkdsim;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(QKDSIM_SOURCE_DIR) / "configs";

std::string slurp(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// A short session that still carries a few hundred syncs.
ExperimentConfig small_config(const fs::path& out)
{
    auto c = load_config(kConfigs / "reference.ini");
    c.session_length = 0.4;
    c.calibration_hits = 50'000;
    c.link.sync_period = 1e9;
    c.output_dir = out;
    return c;
}

fs::path scratch(const char* name)
{
    auto p = fs::temp_directory_path() / "qkdsim_test_experiment" / name;
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("shipped configs parse and validate")
{
    for (const char* name : {"reference.ini", "zero_noise.ini", "window_scan.ini"}) {
        CAPTURE(name);
        auto c = load_config(kConfigs / name);
        CHECK_NOTHROW(c.validate());
        CHECK(c.seed == 20240611);
    }
    auto c = load_config(kConfigs / "reference.ini");
    CHECK(to_string(c.dnl) == "random:0.3");
    CHECK(c.tdc_jitter == 17.2);
    CHECK(c.channels == ChannelMap{0, 1, 2, 3, 4});
    CHECK(c.analysis_windows() == std::vector<Picoseconds>{400, 800, 1000, 1600, 3200});
    CHECK(c.n_pulses() == static_cast<std::uint64_t>(c.session_length * 1e12 / c.link.pulse_period));
}

TEST_CASE("to_ini reproduces the config")
{
    auto c = load_config(kConfigs / "reference.ini");
    c.channel_dnl[5] = CombDnl{2.0, 4};
    c.channel_jitter[6] = 3.25;
    c.precision_pairs = {{0, 5}, {6, 7}};
    c.readout.depth = kUnboundedDepth;
    const auto text = to_ini(c);
    const auto back = parse_config(text);
    CHECK(to_ini(back) == text);
    CHECK(to_string(back.dnl_for(5)) == "comb:2:4");
    CHECK(to_string(back.dnl_for(4)) == "random:0.3");
    CHECK(back.jitter_for(6) == 3.25);
    CHECK(back.jitter_for(0) == 17.2);
    CHECK(back.readout.depth == kUnboundedDepth);
}

TEST_CASE("config errors")
{
    const std::string base = "[general]\nseed = 1\n";
    CHECK_NOTHROW(parse_config(base));
    CHECK_THROWS_WITH_AS(parse_config("[general]\noutput_dir = x\n"), doctest::Contains("seed"), ConfigError);
    CHECK_THROWS_AS(parse_config(base + "[tdc]\nn_tapz = 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config(base + "[nonsense]\na = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config(base + "[tdc]\nn_taps = many\n"), ConfigError);
    CHECK_THROWS_AS(parse_config(base + "[tdc]\ndnl = wobbly\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[general\nseed = 1\n"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.ini"), ConfigError);

    auto c = parse_config(base);
    c.channels = {0, 1, 2, 2, 4};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = parse_config(base);
    c.disclose_fraction = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = parse_config(base);
    c.tdc.coarse_bits = 32;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("simulated session: bookkeeping and analysis")
{
    auto c = small_config(scratch("session"));
    auto s = simulate_session(c);
    CHECK(s.alice_code.size() == c.n_pulses());
    CHECK(s.stats.readout.conserved());
    CHECK(s.stats.readout.drops == 0);
    CHECK(s.words.size() == s.stats.readout.delivered);
    CHECK(s.header.record_count == s.words.size());
    CHECK(s.stats.events == s.stats.before_tdc_start + s.stats.tdc_dead_time + s.stats.readout.offered);
    for (auto ch : c.channels)
        CHECK(s.calibration.contains(ch));
    CHECK_FALSE(s.calibration.contains(9));

    const auto file = decode_timetag(encode_timetag(s.header, s.words, s.calibration));
    const auto windows = c.analysis_windows();
    auto a = analyze_session(file, s.alice_code, c, windows);
    CHECK(std::abs(a.clock.offset_hat - c.clock.offset) < 50.0);
    CHECK(std::abs(a.clock.drift_hat_ppm - c.clock.drift_ppm) < 0.01);
    CHECK(a.sync_detections >= 400);
    REQUIRE(a.reports.size() == windows.size());
    CHECK(a.primary.window == c.window);
    CHECK(a.primary.sifted_bits > 1000);
    CHECK(a.primary.qber > 0.005);
    CHECK(a.primary.qber < 0.04);
}

TEST_CASE("cmd_run: outputs, manifest, determinism and replay")
{
    const auto dir_a = scratch("run_a");
    const auto dir_b = scratch("run_b");
    std::ostringstream log;
    REQUIRE(cmd_run(small_config(dir_a), log) == kExitOk);
    REQUIRE(cmd_run(small_config(dir_b), log) == kExitOk);

    for (const char* name : {"timetag.qtt", "alice_code.bin", "sift_report.csv", "calibration_ch00.csv"}) {
        CAPTURE(name);
        REQUIRE(fs::exists(dir_a / name));
        CHECK(slurp(dir_a / name) == slurp(dir_b / name));
    }

    const auto manifest = nlohmann::json::parse(slurp(dir_a / "manifest.json"));
    CHECK(manifest["command"] == "run");
    CHECK(manifest["seed"] == 20240611);
    CHECK(manifest["config_sha256"] == sha256_hex(slurp(dir_a / "config_resolved.ini")));
    for (const auto& f : manifest["files"]) {
        const auto path = dir_a / f["path"].get<std::string>();
        CHECK(f["bytes"] == fs::file_size(path));
        CHECK(f["sha256"] == sha256_file(path));
    }
    CHECK(load_config(dir_a / "config_resolved.ini").seed == 20240611);

    // Replaying the file reproduces the report.
    const auto replay = dir_a / "replay.csv";
    CHECK(cmd_analyze(small_config(dir_a), dir_a / "timetag.qtt", dir_a / "alice_code.bin", {}, replay, log) ==
          kExitOk);
    CHECK(slurp(replay) == slurp(dir_a / "sift_report.csv"));

    const std::vector<Picoseconds> backwards{800.0, 400.0};
    CHECK(cmd_analyze(small_config(dir_a), dir_a / "timetag.qtt", dir_a / "alice_code.bin", backwards, replay,
                      log) == kExitConfig);
    CHECK(cmd_analyze(small_config(dir_a), dir_a / "missing.qtt", dir_a / "alice_code.bin", {}, replay, log) ==
          kExitConfig);

    auto other = small_config(scratch("run_seed"));
    other.seed += 1;
    REQUIRE(cmd_run(other, log) == kExitOk);
    CHECK(slurp(other.output_dir / "timetag.qtt") != slurp(dir_a / "timetag.qtt"));
}

TEST_CASE("cmd_run reports a sync failure with exit code 1")
{
    auto c = small_config(scratch("no_sync"));
    c.sync_survival = 0.0;
    std::ostringstream log;
    CHECK(cmd_run(c, log) == kExitAnalysis);
    CHECK(log.str().find("clock recovery failed") != std::string::npos);
    const auto manifest = nlohmann::json::parse(slurp(c.output_dir / "manifest.json"));
    CHECK(manifest["summary"]["status"] == "sync_failed");
}

TEST_CASE("cmd_calibrate and cmd_precision write their tables")
{
    auto c = small_config(scratch("calibrate"));
    c.tdc.n_channels = 6;
    c.precision.n = 10'000;
    std::ostringstream log;
    REQUIRE(cmd_calibrate(c, log) == kExitOk);
    CHECK(fs::exists(c.output_dir / "calibration.qtt"));
    CHECK(fs::exists(c.output_dir / "calibration_ch05.csv"));
    const auto summary = slurp(c.output_dir / "calibration_summary.csv");
    CHECK(summary.rfind("channel,lsb_ps,dnl_min_lsb,dnl_max_lsb,inl_min_lsb,inl_max_lsb,samples\n", 0) == 0);
    CHECK(std::count(summary.begin(), summary.end(), '\n') == 7);
    CHECK(read_timetag_file(c.output_dir / "calibration.qtt").calibration.contains(5));

    REQUIRE(cmd_precision(c, log) == kExitOk);
    const auto precision = slurp(c.output_dir / "precision.csv");
    CHECK(std::count(precision.begin(), precision.end(), '\n') == 4);  // header + 3 pairs

    c.precision.n = 100;
    CHECK(cmd_precision(c, log) == kExitConfig);
}
