#include "qkdsim/experiment.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include "json.hpp"
#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>

namespace qkdsim {

namespace {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t");
    if (first == std::string_view::npos)
        return {};
    const auto last = s.find_last_not_of(" \t");
    return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(std::string_view text)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto comma = text.find(',', start);
        const auto item = trim(text.substr(start, comma == std::string_view::npos ? text.npos : comma - start));
        if (!item.empty())
            out.push_back(item);
        if (comma == std::string_view::npos)
            break;
        start = comma + 1;
    }
    return out;
}

template <typename T>
T parse_number(std::string_view text, std::string_view where)
{
    const std::string s = trim(text);
    T value{};
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (ec != std::errc{} || ptr != end || s.empty())
        throw ConfigError(fmt::format("{}: cannot parse '{}' as a number", where, s));
    return value;
}

bool parse_bool(std::string_view text, std::string_view where)
{
    const std::string s = trim(text);
    if (s == "true" || s == "1" || s == "yes")
        return true;
    if (s == "false" || s == "0" || s == "no")
        return false;
    throw ConfigError(fmt::format("{}: expected true/false, got '{}'", where, s));
}

std::vector<Picoseconds> parse_windows(std::string_view text, std::string_view where)
{
    std::vector<Picoseconds> out;
    for (const auto& item : split_list(text))
        out.push_back(parse_number<double>(item, where));
    return out;
}

std::string join(const std::vector<Picoseconds>& values)
{
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i)
        out += fmt::format("{}{}", i ? "," : "", values[i]);
    return out;
}

constexpr std::array<const char*, 5> kChannelKeys{"z0", "z1", "x0", "x1", "sync"};

void write_text(const std::filesystem::path& path, std::string_view text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError(fmt::format("cannot open {} for writing", path.string()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out)
        throw IoError(fmt::format("write to {} failed", path.string()));
}

void ensure_dir(const std::filesystem::path& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec)
        throw IoError(fmt::format("cannot create output directory {}: {}", dir.string(), ec.message()));
}

/// Lists `files` (relative to `dir`) with their digests; written last.
void write_manifest(const ExperimentConfig& config, std::string_view command, const std::string& config_ini,
                    const std::vector<std::string>& files, nlohmann::ordered_json summary)
{
    nlohmann::ordered_json manifest;
    manifest["tool"] = "qkdsim";
    manifest["version"] = QKDSIM_VERSION;
    manifest["command"] = command;
    manifest["seed"] = config.seed;
    manifest["config_sha256"] = sha256_hex(config_ini);
    auto& list = manifest["files"] = nlohmann::ordered_json::array();
    for (const auto& name : files) {
        const auto path = config.output_dir / name;
        list.push_back({{"path", name}, {"bytes", std::filesystem::file_size(path)}, {"sha256", sha256_file(path)}});
    }
    manifest["summary"] = std::move(summary);
    write_text(config.output_dir / "manifest.json", manifest.dump(2) + "\n");
}

template <typename Body>
int guarded(std::ostream& log, Body&& body)
{
    try {
        return body();
    } catch (const SyncError& e) {
        log << "error: clock recovery failed: " << e.what() << "\n";
        return kExitAnalysis;
    } catch (const std::exception& e) {
        log << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}

}  // namespace

void ExperimentConfig::validate() const
{
    tdc.validate();
    if (tdc.n_channels > 32)
        throw ConfigError("tdc: n_channels must be <= 32 (5-bit channel field)");
    if (tdc.n_taps + 1 > (1U << kFineWidth))
        throw ConfigError(fmt::format("tdc: n_taps must be < {} (9-bit fine field)", 1U << kFineWidth));
    if (tdc.coarse_bits != kCoarseWidth)
        throw ConfigError(fmt::format("tdc: coarse_bits must be {} to match the event word", kCoarseWidth));
    if (!(tdc_jitter >= 0.0))
        throw ConfigError("tdc: jitter_ps must be >= 0");
    for (auto [ch, j] : channel_jitter)
        if (ch >= tdc.n_channels || !(j >= 0.0))
            throw ConfigError(fmt::format("tdc: jitter override for channel {} invalid", ch));
    for (const auto& [ch, spec] : channel_dnl)
        if (ch >= tdc.n_channels)
            throw ConfigError(fmt::format("tdc: dnl override for channel {} beyond n_channels", ch));
    if (calibration_hits == 0)
        throw ConfigError("tdc: calibration_hits must be > 0");
    for (auto [a, b] : precision_pairs)
        if (a >= tdc.n_channels || b >= tdc.n_channels || a == b)
            throw ConfigError(fmt::format("precision: invalid pair {}-{}", a, b));
    link.validate();
    detectors.validate();
    clock.validate();
    if (!(basis_bias >= 0.0 && basis_bias <= 1.0) || !(bit_bias >= 0.0 && bit_bias <= 1.0))
        throw ConfigError("link: basis_bias and bit_bias must lie in [0, 1]");
    if (!(session_length > 0.0))
        throw ConfigError("general: session_length must be > 0");
    if (n_pulses() == 0)
        throw ConfigError("general: session_length is shorter than one pulse period");
    if (!(sync_jitter >= 0.0) || !(sync_survival >= 0.0 && sync_survival <= 1.0))
        throw ConfigError("sync: jitter_ps must be >= 0 and survival in [0, 1]");
    if (!(sync_search.coarse_offset_bound > 0.0) || !(sync_search.coarse_offset_bound < link.sync_period / 2))
        throw ConfigError("sync: offset_bound_ps must lie in (0, sync_period / 2)");
    if (!(window > 0.0))
        throw ConfigError("sift: window_ps must be > 0");
    for (auto w : windows)
        if (!(w > 0.0))
            throw ConfigError("sift: windows must be > 0");
    if (!(disclose_fraction > 0.0 && disclose_fraction <= 1.0))
        throw ConfigError("sift: disclose_fraction must lie in (0, 1]");
    if (!(f_ec >= 1.0))
        throw ConfigError("sift: f_ec must be >= 1");
    ReadoutLink probe(readout);
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (channels[i] >= tdc.n_channels)
            throw ConfigError(fmt::format("channels: {} mapped to channel {} beyond n_channels", kChannelKeys[i],
                                          channels[i]));
        for (std::size_t j = 0; j < i; ++j)
            if (channels[i] == channels[j])
                throw ConfigError(fmt::format("channels: {} and {} share channel {}", kChannelKeys[j],
                                              kChannelKeys[i], channels[i]));
    }
}

std::uint64_t ExperimentConfig::n_pulses() const
{
    return static_cast<std::uint64_t>(std::floor(session_length * kPsPerSecond / link.pulse_period + 1e-9));
}

double ExperimentConfig::duration_s() const
{
    return static_cast<double>(n_pulses()) * link.pulse_period / kPsPerSecond;
}

DnlSpec ExperimentConfig::dnl_for(ChannelId channel) const
{
    auto it = channel_dnl.find(channel);
    return it == channel_dnl.end() ? dnl : it->second;
}

Picoseconds ExperimentConfig::jitter_for(ChannelId channel) const
{
    auto it = channel_jitter.find(channel);
    return it == channel_jitter.end() ? tdc_jitter : it->second;
}

std::vector<Picoseconds> ExperimentConfig::analysis_windows() const
{
    std::vector<Picoseconds> out = windows;
    out.push_back(window);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

ExperimentConfig parse_config(const std::string& ini_text)
{
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(ini_text);
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(fmt::format("config line {}: {}", e.line(), e.message()));
    }

    ExperimentConfig c;
    bool have_seed = false;
    using Setter = std::function<void(const std::string&, const std::string&)>;
    auto num = [](auto& field) {
        return [&field](const std::string& v, const std::string& where) {
            field = parse_number<std::remove_reference_t<decltype(field)>>(v, where);
        };
    };
    const std::map<std::string, std::map<std::string, Setter>> schema{
        {"general",
         {{"seed", [&](const std::string& v, const std::string& w) {
               c.seed = parse_number<std::uint64_t>(v, w);
               have_seed = true;
           }},
          {"output_dir", [&](const std::string& v, const std::string&) { c.output_dir = trim(v); }},
          {"session_length_s", num(c.session_length)}}},
        {"tdc",
         {{"clock_period_ps", num(c.tdc.clock_period)},
          {"n_taps", num(c.tdc.n_taps)},
          {"n_channels", num(c.tdc.n_channels)},
          {"dead_time_ps", num(c.tdc.dead_time)},
          {"coarse_bits", num(c.tdc.coarse_bits)},
          {"dnl", [&](const std::string& v, const std::string&) { c.dnl = parse_dnl_spec(trim(v)); }},
          {"jitter_ps", num(c.tdc_jitter)},
          {"calibration_hits", num(c.calibration_hits)}}},
        {"precision",
         {{"period_ps", num(c.precision.period)},
          {"cable_delay_ps", num(c.precision.cable_delay)},
          {"n", num(c.precision.n)},
          {"generator_offset_ppm", num(c.precision.generator_offset_ppm)},
          {"pairs",
           [&](const std::string& v, const std::string& w) {
               c.precision_pairs.clear();
               for (const auto& item : split_list(v)) {
                   const auto dash = item.find('-');
                   if (dash == std::string::npos)
                       throw ConfigError(fmt::format("{}: pair '{}' is not a-b", w, item));
                   c.precision_pairs.emplace_back(parse_number<ChannelId>(item.substr(0, dash), w),
                                                  parse_number<ChannelId>(item.substr(dash + 1), w));
               }
           }}}},
        {"link",
         {{"loss_db", num(c.link.loss_db)},
          {"background_rate", num(c.link.background_rate)},
          {"pulse_period_ps", num(c.link.pulse_period)},
          {"sync_period_ps", num(c.link.sync_period)},
          {"mean_photon_number", num(c.link.mean_photon_number)},
          {"basis_bias", num(c.basis_bias)},
          {"bit_bias", num(c.bit_bias)}}},
        {"detector",
         {{"efficiency", num(c.detectors.efficiency)},
          {"dark_rate", num(c.detectors.dark_rate)},
          {"jitter_ps", num(c.detectors.jitter_sigma)},
          {"dead_time_ps", num(c.detectors.dead_time)},
          {"intrinsic_error", num(c.detectors.intrinsic_error)}}},
        {"clock", {{"offset_ps", num(c.clock.offset)}, {"drift_ppm", num(c.clock.drift_ppm)}}},
        {"sync",
         {{"jitter_ps", num(c.sync_jitter)},
          {"survival", num(c.sync_survival)},
          {"offset_bound_ps", num(c.sync_search.coarse_offset_bound)},
          {"drift_bound_ppm", num(c.sync_search.drift_bound_ppm)}}},
        {"sift",
         {{"window_ps", num(c.window)},
          {"windows_ps", [&](const std::string& v, const std::string& w) { c.windows = parse_windows(v, w); }},
          {"disclose_fraction", num(c.disclose_fraction)},
          {"f_ec", num(c.f_ec)}}},
        {"readout",
         {{"depth", num(c.readout.depth)},
          {"link_rate", num(c.readout.link_rate)},
          {"word_size", num(c.readout.word_size)},
          {"tick_ps", num(c.readout.tick)},
          {"drain_tail", [&](const std::string& v, const std::string& w) { c.readout.drain_tail = parse_bool(v, w); }}}},
        {"channels",
         {{"z0", num(c.channels[0])},
          {"z1", num(c.channels[1])},
          {"x0", num(c.channels[2])},
          {"x1", num(c.channels[3])},
          {"sync", num(c.channels[4])}}},
    };

    for (const auto& [section, body] : tree) {
        if (body.empty())
            throw ConfigError(fmt::format("config: key '{}' outside any section", section));
        auto sec = schema.find(section);
        if (sec == schema.end())
            throw ConfigError(fmt::format("config: unknown section [{}]", section));
        for (const auto& [key, value] : body) {
            const std::string where = fmt::format("[{}] {}", section, key);
            if (section == "tdc" && key.rfind("dnl_ch", 0) == 0) {
                c.channel_dnl[parse_number<ChannelId>(key.substr(6), where)] = parse_dnl_spec(trim(value.data()));
                continue;
            }
            if (section == "tdc" && key.rfind("jitter_ch", 0) == 0) {
                c.channel_jitter[parse_number<ChannelId>(key.substr(9), where)] =
                    parse_number<double>(value.data(), where);
                continue;
            }
            auto setter = sec->second.find(key);
            if (setter == sec->second.end())
                throw ConfigError(fmt::format("config: unknown key {}", where));
            setter->second(value.data(), where);
        }
    }
    if (!have_seed)
        throw ConfigError("config: [general] seed is mandatory");
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError(fmt::format("cannot open config file {}", path.string()));
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

std::string to_ini(const ExperimentConfig& c)
{
    std::string s;
    auto line = [&s](std::string_view key, const auto& value) { s += fmt::format("{} = {}\n", key, value); };
    s += "[general]\n";
    line("seed", c.seed);
    line("output_dir", c.output_dir.string());
    line("session_length_s", c.session_length);
    s += "\n[tdc]\n";
    line("clock_period_ps", c.tdc.clock_period);
    line("n_taps", c.tdc.n_taps);
    line("n_channels", c.tdc.n_channels);
    line("dead_time_ps", c.tdc.dead_time);
    line("coarse_bits", c.tdc.coarse_bits);
    line("dnl", to_string(c.dnl));
    line("jitter_ps", c.tdc_jitter);
    line("calibration_hits", c.calibration_hits);
    for (const auto& [ch, spec] : c.channel_dnl)
        line(fmt::format("dnl_ch{}", ch), to_string(spec));
    for (auto [ch, j] : c.channel_jitter)
        line(fmt::format("jitter_ch{}", ch), j);
    s += "\n[precision]\n";
    line("period_ps", c.precision.period);
    line("cable_delay_ps", c.precision.cable_delay);
    line("n", c.precision.n);
    line("generator_offset_ppm", c.precision.generator_offset_ppm);
    std::string pairs;
    for (auto [a, b] : c.precision_pairs)
        pairs += fmt::format("{}{}-{}", pairs.empty() ? "" : ",", a, b);
    line("pairs", pairs);
    s += "\n[link]\n";
    line("loss_db", c.link.loss_db);
    line("background_rate", c.link.background_rate);
    line("pulse_period_ps", c.link.pulse_period);
    line("sync_period_ps", c.link.sync_period);
    line("mean_photon_number", c.link.mean_photon_number);
    line("basis_bias", c.basis_bias);
    line("bit_bias", c.bit_bias);
    s += "\n[detector]\n";
    line("efficiency", c.detectors.efficiency);
    line("dark_rate", c.detectors.dark_rate);
    line("jitter_ps", c.detectors.jitter_sigma);
    line("dead_time_ps", c.detectors.dead_time);
    line("intrinsic_error", c.detectors.intrinsic_error);
    s += "\n[clock]\n";
    line("offset_ps", c.clock.offset);
    line("drift_ppm", c.clock.drift_ppm);
    s += "\n[sync]\n";
    line("jitter_ps", c.sync_jitter);
    line("survival", c.sync_survival);
    line("offset_bound_ps", c.sync_search.coarse_offset_bound);
    line("drift_bound_ppm", c.sync_search.drift_bound_ppm);
    s += "\n[sift]\n";
    line("window_ps", c.window);
    line("windows_ps", join(c.windows));
    line("disclose_fraction", c.disclose_fraction);
    line("f_ec", c.f_ec);
    s += "\n[readout]\n";
    line("depth", c.readout.depth);
    line("link_rate", c.readout.link_rate);
    line("word_size", c.readout.word_size);
    line("tick_ps", c.readout.tick);
    line("drain_tail", c.readout.drain_tail ? "true" : "false");
    s += "\n[channels]\n";
    for (std::size_t i = 0; i < kChannelKeys.size(); ++i)
        line(kChannelKeys[i], c.channels[i]);
    return s;
}

DelayLineProfile channel_profile(const ExperimentConfig& config, ChannelId channel)
{
    return build_delay_line(channel, config.tdc, config.dnl_for(channel), config.jitter_for(channel),
                            derive_seed(config.seed, "delay-line", channel));
}

CalibrationTable calibrate_channel(const ExperimentConfig& config, const DelayLineProfile& profile)
{
    const auto histogram = uniform_fine_histogram(profile, config.tdc, config.calibration_hits,
                                                  derive_seed(config.seed, "calibration", profile.channel()));
    return code_density_calibrate(profile.channel(), histogram, config.tdc);
}

SimulatedSession simulate_session(const ExperimentConfig& config)
{
    config.validate();
    SimulatedSession session;
    SessionStats& stats = session.stats;
    stats.n_pulses = config.n_pulses();

    session.alice_code =
        gen_random_code(stats.n_pulses, config.basis_bias, config.bit_bias, derive_seed(config.seed, "alice-code"));
    const auto pulses = make_pulse_train(session.alice_code, config.link.pulse_period);
    auto link = simulate_link(pulses, config.link, config.detectors, config.clock, derive_seed(config.seed, "link"));
    stats.truth = link.truth;

    const Picoseconds span = static_cast<double>(stats.n_pulses) * config.link.pulse_period;
    const auto n_sync = static_cast<std::uint64_t>(std::ceil(span / config.link.sync_period));
    const auto sync = emit_sync(n_sync, config.link.sync_period, config.clock, config.sync_jitter,
                                derive_seed(config.seed, "sync"), config.sync_survival);

    std::vector<RawHit> hits;
    hits.reserve(link.events.size() + sync.size());
    for (const auto* events : std::array<const std::vector<DetectionEvent>*, 2>{&link.events, &sync}) {
        for (const auto& ev : *events) {
            ++stats.events;
            if (ev.true_time < 0.0) {
                ++stats.before_tdc_start;
                continue;
            }
            hits.push_back(RawHit{config.channels[static_cast<std::size_t>(ev.detector)], ev.true_time});
        }
    }
    std::sort(hits.begin(), hits.end(), [](const RawHit& a, const RawHit& b) {
        return a.true_time != b.true_time ? a.true_time < b.true_time : a.channel < b.channel;
    });

    std::vector<DelayLineProfile> profiles;
    profiles.reserve(config.tdc.n_channels);
    for (ChannelId ch = 0; ch < config.tdc.n_channels; ++ch)
        profiles.push_back(channel_profile(config, ch));
    for (ChannelId ch : config.channels)
        session.calibration.insert(calibrate_channel(config, profiles[ch]));

    Tdc tdc(config.tdc, std::move(profiles), derive_seed(config.seed, "tdc"));
    ReadoutLink readout(config.readout);
    for (const auto& hit : hits) {
        const auto r = tdc.digitize(hit);
        if (!r.accepted()) {
            ++stats.tdc_dead_time;
            continue;
        }
        readout.offer(hit.true_time, pack(r.record, r.rollover));
    }
    readout.finish();
    stats.readout = readout.buffer();
    session.words = readout.take_delivered_words();

    session.header.clock_period = config.tdc.clock_period;
    session.header.n_taps = static_cast<std::uint16_t>(config.tdc.n_taps);
    session.header.n_channels = static_cast<std::uint16_t>(config.tdc.n_channels);
    session.header.record_count = session.words.size();
    return session;
}

SessionAnalysis analyze_session(const TimetagFile& file, std::span<const CodeEntry> alice_code,
                                const ExperimentConfig& config, std::span<const Picoseconds> windows)
{
    if (file.header.n_taps != config.tdc.n_taps || file.header.clock_period != config.tdc.clock_period)
        throw ConfigError("time-tag file geometry (clock period, n_taps) differs from the config");
    TdcConfig tdc = config.tdc;
    tdc.n_channels = file.header.n_channels;

    std::array<std::optional<Detector>, 32> by_channel{};
    for (std::size_t d = 0; d < config.channels.size(); ++d)
        by_channel.at(config.channels[d]) = static_cast<Detector>(d);

    CoarseUnwrapper unwrapper(tdc.coarse_bits, 32);
    std::vector<Picoseconds> sync_times;
    std::vector<Detection> detections;
    detections.reserve(file.words.size());
    for (auto word : file.words) {
        const auto u = unpack(word);
        const auto det = by_channel.at(u.record.channel);
        if (!det)
            continue;
        const auto coarse = unwrapper.unwrap(u.record.channel, u.record.coarse, u.rollover);
        const Picoseconds t =
            reconstruct_unwrapped(u.record.channel, coarse, u.record.fine, file.calibration.at(u.record.channel), tdc);
        if (*det == Detector::Sync)
            sync_times.push_back(t);
        else
            detections.push_back({t, *det});
    }

    SessionAnalysis analysis;
    analysis.sync_detections = sync_times.size();
    analysis.detections = detections.size();
    analysis.clock = recover_clock(sync_times, config.link.sync_period, config.sync_search);

    SessionData data;
    data.detections = std::move(detections);
    data.clock = analysis.clock;
    data.pulse_period = config.link.pulse_period;
    data.alice_code.assign(alice_code.begin(), alice_code.end());
    data.sift.disclose_fraction = config.disclose_fraction;
    data.sift.seed = derive_seed(config.seed, "disclosure");
    data.sift.f_ec = config.f_ec;
    data.sift.duration_s = static_cast<double>(alice_code.size()) * config.link.pulse_period / kPsPerSecond;

    for (auto w : windows)
        analysis.reports.push_back(analyze_window(data, w));
    auto it = std::find_if(analysis.reports.begin(), analysis.reports.end(),
                           [&](const SiftReport& r) { return r.window == config.window; });
    analysis.primary = it != analysis.reports.end() ? *it : analyze_window(data, config.window);
    return analysis;
}

std::string sha256_hex(std::string_view bytes)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 failed");
    std::string hex;
    for (unsigned int i = 0; i < length; ++i)
        hex += fmt::format("{:02x}", digest[i]);
    return hex;
}

std::string sha256_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError(fmt::format("cannot open {}", path.string()));
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(bytes);
}

int cmd_calibrate(const ExperimentConfig& config, std::ostream& log)
{
    return guarded(log, [&] {
        config.validate();
        ensure_dir(config.output_dir);
        const std::string ini = to_ini(config);
        write_text(config.output_dir / "config_resolved.ini", ini);
        std::vector<std::string> files{"config_resolved.ini"};

        CalibrationSet set;
        std::string summary_csv = "channel,lsb_ps,dnl_min_lsb,dnl_max_lsb,inl_min_lsb,inl_max_lsb,samples\n";
        auto summary = nlohmann::ordered_json::array();
        for (ChannelId ch = 0; ch < config.tdc.n_channels; ++ch) {
            auto table = calibrate_channel(config, channel_profile(config, ch));
            const auto [dmin, dmax] = std::minmax_element(table.dnl().begin(), table.dnl().end());
            const auto [imin, imax] = std::minmax_element(table.inl().begin(), table.inl().end());
            summary_csv += fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{}\n", ch, table.lsb(), *dmin, *dmax,
                                       *imin, *imax, table.sample_count());
            summary.push_back({{"channel", ch},
                               {"lsb_ps", table.lsb()},
                               {"dnl_min_lsb", *dmin},
                               {"dnl_max_lsb", *dmax},
                               {"inl_min_lsb", *imin},
                               {"inl_max_lsb", *imax}});
            log << fmt::format("channel {:2}: LSB {:.3f} ps, DNL [{:+.3f}, {:+.3f}] LSB, INL [{:+.3f}, {:+.3f}] LSB\n",
                               ch, table.lsb(), *dmin, *dmax, *imin, *imax);
            std::ostringstream csv;
            write_calibration_csv(csv, table);
            const auto name = fmt::format("calibration_ch{:02}.csv", ch);
            write_text(config.output_dir / name, csv.str());
            files.push_back(name);
            set.insert(std::move(table));
        }
        write_text(config.output_dir / "calibration_summary.csv", summary_csv);
        files.push_back("calibration_summary.csv");

        TimetagHeader header;
        header.clock_period = config.tdc.clock_period;
        header.n_taps = static_cast<std::uint16_t>(config.tdc.n_taps);
        header.n_channels = static_cast<std::uint16_t>(config.tdc.n_channels);
        write_timetag_file(config.output_dir / "calibration.qtt", header, {}, set);
        files.push_back("calibration.qtt");
        write_manifest(config, "calibrate", ini, files, {{"channels", summary}});
        return kExitOk;
    });
}

int cmd_precision(const ExperimentConfig& config, std::ostream& log)
{
    return guarded(log, [&] {
        config.validate();
        auto pairs = config.precision_pairs;
        if (pairs.empty())
            for (ChannelId ch = 0; ch + 1 < config.tdc.n_channels; ch += 2)
                pairs.emplace_back(ch, ch + 1);
        if (config.precision.n < 10000)
            throw ConfigError(fmt::format("precision: n = {} is below the 10^4 minimum", config.precision.n));

        ensure_dir(config.output_dir);
        const std::string ini = to_ini(config);
        write_text(config.output_dir / "config_resolved.ini", ini);

        std::map<ChannelId, std::pair<DelayLineProfile, CalibrationTable>> channels;
        auto get = [&](ChannelId ch) -> const std::pair<DelayLineProfile, CalibrationTable>& {
            auto it = channels.find(ch);
            if (it == channels.end()) {
                auto profile = channel_profile(config, ch);
                auto table = calibrate_channel(config, profile);
                it = channels.emplace(ch, std::pair{std::move(profile), std::move(table)}).first;
            }
            return it->second;
        };

        std::string csv = "channel_a,channel_b,raw_std_ps,per_channel_rms_ps,mean_interval_ps,n_samples\n";
        auto summary = nlohmann::ordered_json::array();
        for (auto [a, b] : pairs) {
            const auto& [pa, ca] = get(a);
            const auto& [pb, cb] = get(b);
            PrecisionSetup setup = config.precision;
            setup.seed = derive_seed(config.seed, "precision", (std::uint64_t{a} << 32) | b);
            const auto r = precision_test(config.tdc, pa, pb, ca, cb, setup);
            csv += fmt::format("{},{},{:.6f},{:.6f},{:.6f},{}\n", a, b, r.raw_std, r.per_channel_rms, r.mean_interval,
                               r.n_samples);
            summary.push_back({{"channel_a", a}, {"channel_b", b}, {"per_channel_rms_ps", r.per_channel_rms}});
            log << fmt::format("channels {:2}-{:2}: interval {:.2f} ps, std {:.3f} ps, per-channel RMS {:.3f} ps\n", a,
                               b, r.mean_interval, r.raw_std, r.per_channel_rms);
        }
        write_text(config.output_dir / "precision.csv", csv);
        write_manifest(config, "precision", ini, {"config_resolved.ini", "precision.csv"}, {{"pairs", summary}});
        return kExitOk;
    });
}

int cmd_run(const ExperimentConfig& config, std::ostream& log)
{
    return guarded(log, [&] {
        config.validate();
        ensure_dir(config.output_dir);
        const std::string ini = to_ini(config);
        write_text(config.output_dir / "config_resolved.ini", ini);
        std::vector<std::string> files{"config_resolved.ini"};

        const auto session = simulate_session(config);
        const auto& st = session.stats;
        write_timetag_file(config.output_dir / "timetag.qtt", session.header, session.words, session.calibration);
        files.push_back("timetag.qtt");
        write_code_sidecar(config.output_dir / "alice_code.bin", session.alice_code);
        files.push_back("alice_code.bin");
        for (const auto& [ch, table] : session.calibration.tables()) {
            std::ostringstream csv;
            write_calibration_csv(csv, table);
            const auto name = fmt::format("calibration_ch{:02}.csv", ch);
            write_text(config.output_dir / name, csv.str());
            files.push_back(name);
        }
        log << fmt::format("simulated {} pulses ({:.3f} s): {} clicks, {} words delivered, {} readout drops\n",
                           st.n_pulses, config.duration_s(), st.events, st.readout.delivered, st.readout.drops);

        nlohmann::ordered_json summary;
        summary["n_pulses"] = st.n_pulses;
        summary["events"] = st.events;
        summary["before_tdc_start"] = st.before_tdc_start;
        summary["tdc_dead_time"] = st.tdc_dead_time;
        summary["words_offered"] = st.readout.offered;
        summary["words_delivered"] = st.readout.delivered;
        summary["readout_drops"] = st.readout.drops;
        summary["true_error_fraction"] = st.truth.true_error_fraction();

        // Analyze what was written, so an offline replay sees identical input.
        const auto file = read_timetag_file(config.output_dir / "timetag.qtt");
        const auto windows = config.analysis_windows();
        SessionAnalysis analysis;
        try {
            analysis = analyze_session(file, session.alice_code, config, windows);
        } catch (const SyncError& e) {
            summary["status"] = "sync_failed";
            write_manifest(config, "run", ini, files, summary);
            throw;
        }

        std::ostringstream csv;
        write_sift_csv(csv, analysis.reports);
        write_text(config.output_dir / "sift_report.csv", csv.str());
        files.push_back("sift_report.csv");

        const auto& p = analysis.primary;
        summary["offset_hat_ps"] = analysis.clock.offset_hat;
        summary["drift_hat_ppm"] = analysis.clock.drift_hat_ppm;
        summary["sync_residual_rms_ps"] = analysis.clock.residual_rms;
        summary["window_ps"] = p.window;
        summary["sifted_bits"] = p.sifted_bits;
        summary["qber"] = p.qber;
        summary["sifted_rate_bps"] = p.sifted_rate;
        summary["secure_rate_bps"] = p.secure_rate;
        summary["status"] = p.sifted_bits > 0 ? "ok" : "no_key";
        write_manifest(config, "run", ini, files, summary);

        log << fmt::format("clock: offset {:.1f} ps, drift {:.4f} ppm, sync residual {:.1f} ps ({} syncs)\n",
                           analysis.clock.offset_hat, analysis.clock.drift_hat_ppm, analysis.clock.residual_rms,
                           analysis.clock.n_sync_used);
        log << summarize(p) << "\n";
        if (p.sifted_bits == 0) {
            log << "error: no sifted bits\n";
            return kExitAnalysis;
        }
        return kExitOk;
    });
}

int cmd_analyze(const ExperimentConfig& config, const std::filesystem::path& timetag,
                const std::filesystem::path& sidecar, std::span<const Picoseconds> windows,
                const std::filesystem::path& out_csv, std::ostream& log)
{
    return guarded(log, [&] {
        config.validate();
        const auto file = read_timetag_file(timetag);
        const auto code = read_code_sidecar(sidecar);
        std::vector<Picoseconds> ws(windows.begin(), windows.end());
        if (ws.empty())
            ws = config.analysis_windows();
        for (std::size_t i = 0; i < ws.size(); ++i)
            if (!(ws[i] > 0.0) || (i > 0 && !(ws[i] > ws[i - 1])))
                throw ConfigError("windows must be positive and strictly ascending");
        const auto analysis = analyze_session(file, code, config, ws);
        std::ostringstream csv;
        write_sift_csv(csv, analysis.reports);
        if (!out_csv.empty() && out_csv.has_parent_path())
            ensure_dir(out_csv.parent_path());
        write_text(out_csv, csv.str());
        for (const auto& r : analysis.reports)
            log << summarize(r) << "\n";
        return analysis.primary.sifted_bits > 0 ? kExitOk : kExitAnalysis;
    });
}

}  // namespace qkdsim
