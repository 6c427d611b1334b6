#include "qkdsim/experiment.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace {

using namespace qkdsim;

std::vector<Picoseconds> parse_window_list(const std::string& text)
{
    std::vector<Picoseconds> out;
    std::size_t start = 0;
    while (start < text.size()) {
        const auto comma = text.find(',', start);
        const auto item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        std::size_t used = 0;
        const double value = std::stod(item, &used);
        if (used != item.size())
            throw ConfigError("cannot parse window '" + item + "'");
        out.push_back(value);
        if (comma == std::string::npos)
            break;
        start = comma + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Delay-line TDC and BB84 time-tagging simulator"};
    app.set_version_flag("--version", std::string(QKDSIM_VERSION));
    app.require_subcommand(1);

    std::string config_path;
    std::string output_dir;
    std::optional<std::uint64_t> seed;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "INI configuration file")->required();
        sub->add_option("-o,--output-dir", output_dir, "Override [general] output_dir");
        sub->add_option("--seed", seed, "Override [general] seed");
    };

    auto* calibrate = app.add_subcommand("calibrate", "Code-density calibration of every channel");
    auto* precision = app.add_subcommand("precision", "Cable-delay precision test over channel pairs");
    auto* run = app.add_subcommand("run", "Simulate a BB84 session, write the time-tag file and sift it");
    auto* analyze = app.add_subcommand("analyze", "Re-run clock recovery and sifting on a time-tag file");
    for (auto* sub : {calibrate, precision, run, analyze})
        add_common(sub);

    std::string timetag;
    std::string sidecar;
    std::string windows_text;
    std::string out_csv = "sift_report.csv";
    analyze->add_option("--timetag", timetag, "Time-tag file")->required();
    analyze->add_option("--sidecar", sidecar, "Alice code sidecar")->required();
    analyze->add_option("--windows", windows_text, "Comma-separated windows in ps (default: from config)");
    analyze->add_option("--out", out_csv, "Output CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitConfig;
    }

    ExperimentConfig config;
    std::vector<Picoseconds> windows;
    try {
        config = load_config(config_path);
        if (!output_dir.empty())
            config.output_dir = output_dir;
        if (seed)
            config.seed = *seed;
        if (!windows_text.empty())
            windows = parse_window_list(windows_text);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }

    if (*calibrate)
        return cmd_calibrate(config, std::cout);
    if (*precision)
        return cmd_precision(config, std::cout);
    if (*run)
        return cmd_run(config, std::cout);
    return cmd_analyze(config, timetag, sidecar, windows, out_csv, std::cout);
}
