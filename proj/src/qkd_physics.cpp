#include "qkdsim/qkd_physics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>

namespace qkdsim {

namespace {

bool is_probability(double p)
{
    return p >= 0.0 && p <= 1.0;
}

struct PendingClick {
    DetectionEvent event;
    bool same_basis = false;
    bool wrong_bit = false;
};

}  // namespace

std::vector<CodeEntry> gen_random_code(std::uint64_t n, double basis_bias, double bit_bias, std::uint64_t seed)
{
    if (!is_probability(basis_bias) || !is_probability(bit_bias))
        throw ConfigError("code biases must lie in [0, 1]");
    Rng rng(seed);
    // 53-bit uniforms; u < bias keeps bias = 1 always true and bias = 0 never.
    auto uniform = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
    std::vector<CodeEntry> code(n);
    for (auto& entry : code) {
        entry.basis = uniform() < basis_bias ? Basis::Z : Basis::X;
        entry.bit = uniform() < bit_bias ? 1 : 0;
    }
    return code;
}

std::vector<Bb84Pulse> make_pulse_train(std::span<const CodeEntry> code, Picoseconds pulse_period)
{
    if (!(pulse_period > 0.0))
        throw ConfigError("pulse_period must be > 0");
    std::vector<Bb84Pulse> pulses;
    pulses.reserve(code.size());
    for (std::uint64_t k = 0; k < code.size(); ++k)
        pulses.push_back({k, static_cast<double>(k) * pulse_period, code[k].basis, code[k].bit, PulseKind::signal});
    return pulses;
}

void LinkModel::validate() const
{
    if (!(loss_db >= 0.0))
        throw ConfigError("link: loss_db must be >= 0");
    if (!(background_rate >= 0.0))
        throw ConfigError("link: background_rate must be >= 0");
    if (!(pulse_period > 0.0) || !(sync_period > 0.0))
        throw ConfigError("link: pulse_period and sync_period must be > 0");
    if (!(mean_photon_number > 0.0))
        throw ConfigError("link: mean_photon_number must be > 0");
}

double LinkModel::transmittance() const
{
    return std::pow(10.0, -loss_db / 10.0);
}

void DetectorModel::validate() const
{
    if (!is_probability(efficiency))
        throw ConfigError("detector: efficiency must lie in [0, 1]");
    if (!(dark_rate >= 0.0) || !(jitter_sigma >= 0.0) || !(dead_time >= 0.0))
        throw ConfigError("detector: dark_rate, jitter and dead_time must be >= 0");
    if (!(intrinsic_error >= 0.0 && intrinsic_error <= 0.5))
        throw ConfigError("detector: intrinsic_error must lie in [0, 0.5]");
}

void ClockModel::validate() const
{
    if (!std::isfinite(offset))
        throw ConfigError("clock: offset must be finite");
    if (!(std::abs(drift_ppm) < 1000.0))
        throw ConfigError("clock: |drift_ppm| must be < 1000");
}

Basis basis_of(Detector d)
{
    switch (d) {
    case Detector::Z0:
    case Detector::Z1:
        return Basis::Z;
    case Detector::X0:
    case Detector::X1:
        return Basis::X;
    case Detector::Sync:
        break;
    }
    throw ContractError("the sync detector has no basis");
}

std::uint8_t bit_of(Detector d)
{
    switch (d) {
    case Detector::Z0:
    case Detector::X0:
        return 0;
    case Detector::Z1:
    case Detector::X1:
        return 1;
    case Detector::Sync:
        break;
    }
    throw ContractError("the sync detector carries no bit");
}

Detector detector_for(Basis basis, std::uint8_t bit)
{
    if (basis == Basis::Z)
        return bit ? Detector::Z1 : Detector::Z0;
    return bit ? Detector::X1 : Detector::X0;
}

const char* to_string(Detector d)
{
    static constexpr std::array<const char*, 5> names{"Z0", "Z1", "X0", "X1", "SYNC"};
    return names.at(static_cast<std::size_t>(d));
}

LinkOutput simulate_link(std::span<const Bb84Pulse> pulses, const LinkModel& link, const DetectorModel& detectors,
                         const ClockModel& clock, std::uint64_t seed)
{
    link.validate();
    detectors.validate();
    clock.validate();
    for (std::size_t i = 1; i < pulses.size(); ++i)
        if (pulses[i].emit_time < pulses[i - 1].emit_time)
            throw ContractError(fmt::format("pulses not sorted by emit_time at position {}", i));

    LinkOutput out;
    TruthLedger& truth = out.truth;
    std::array<std::vector<PendingClick>, 4> per_detector;

    Rng rng(derive_seed(seed, "link-signal"));
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::normal_distribution<double> jitter(0.0, 1.0);
    const double survival = std::min(1.0, link.mean_photon_number * link.transmittance() * detectors.efficiency);

    Picoseconds first_emit = 0.0;
    Picoseconds last_emit = 0.0;
    bool any_signal = false;
    for (const auto& pulse : pulses) {
        if (pulse.kind != PulseKind::signal)
            continue;
        if (!any_signal)
            first_emit = pulse.emit_time;
        any_signal = true;
        last_emit = pulse.emit_time;
        ++truth.emitted;
        if (!(uniform(rng) < survival)) {
            ++truth.lost;
            continue;
        }
        const Basis bob_basis = uniform(rng) < 0.5 ? Basis::Z : Basis::X;
        std::uint8_t bit;
        if (bob_basis == pulse.basis)
            bit = uniform(rng) < detectors.intrinsic_error ? static_cast<std::uint8_t>(1 - pulse.bit) : pulse.bit;
        else
            bit = uniform(rng) < 0.5 ? 1 : 0;
        const Detector det = detector_for(bob_basis, bit);
        const Picoseconds t = clock.to_bob(pulse.emit_time) + detectors.jitter_sigma * jitter(rng);
        per_detector[static_cast<std::size_t>(det)].push_back(
            {{det, t, Origin::signal, pulse.index}, bob_basis == pulse.basis, bit != pulse.bit});
    }

    // Background and dark counts: homogeneous Poisson processes over Bob's view of the session.
    if (any_signal) {
        const Picoseconds begin = clock.to_bob(first_emit);
        const Picoseconds end = clock.to_bob(last_emit + link.pulse_period);
        for (std::size_t d = 0; d < 4; ++d) {
            const auto det = static_cast<Detector>(d);
            const std::array<std::pair<double, Origin>, 2> sources{
                std::pair{link.background_rate, Origin::background}, std::pair{detectors.dark_rate, Origin::dark}};
            for (auto [rate, origin] : sources) {
                if (rate <= 0.0)
                    continue;
                Rng noise_rng(derive_seed(seed, origin == Origin::background ? "link-background" : "link-dark", d));
                std::exponential_distribution<double> gap(rate / kPsPerSecond);
                for (Picoseconds t = begin + gap(noise_rng); t < end; t += gap(noise_rng)) {
                    per_detector[d].push_back({{det, t, origin, 0}, false, false});
                    ++truth.noise_generated;
                }
            }
        }
    }

    // Non-paralyzable detector dead time, per detector.
    for (auto& clicks : per_detector) {
        std::stable_sort(clicks.begin(), clicks.end(), [](const PendingClick& a, const PendingClick& b) {
            return a.event.true_time < b.event.true_time;
        });
        bool have_last = false;
        Picoseconds last = 0.0;
        for (const auto& click : clicks) {
            const auto& ev = click.event;
            const bool accept = !have_last || ev.true_time - last >= detectors.dead_time;
            const bool is_signal = ev.origin == Origin::signal;
            if (!accept) {
                ++(is_signal ? truth.suppressed_signal : truth.noise_suppressed);
                continue;
            }
            have_last = true;
            last = ev.true_time;
            ++(is_signal ? truth.detected_signal : truth.noise_detected);
            if (is_signal && click.same_basis) {
                ++truth.signal_same_basis;
                if (click.wrong_bit)
                    ++truth.signal_errors;
            }
            out.events.push_back(ev);
        }
    }
    std::stable_sort(out.events.begin(), out.events.end(), [](const DetectionEvent& a, const DetectionEvent& b) {
        if (a.true_time != b.true_time)
            return a.true_time < b.true_time;
        return a.detector < b.detector;
    });
    return out;
}

std::vector<DetectionEvent> emit_sync(std::uint64_t count, Picoseconds sync_period, const ClockModel& clock,
                                      Picoseconds jitter, std::uint64_t seed, double survival)
{
    if (!(sync_period > 0.0))
        throw ConfigError("sync_period must be > 0");
    if (!(jitter >= 0.0) || !is_probability(survival))
        throw ConfigError("sync jitter must be >= 0 and survival in [0, 1]");
    clock.validate();
    Rng rng(derive_seed(seed, "sync"));
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<DetectionEvent> events;
    events.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const double n = noise(rng);
        if (survival < 1.0 && !(uniform(rng) < survival))
            continue;
        const Picoseconds t = clock.to_bob(static_cast<double>(i) * sync_period) + jitter * n;
        events.push_back({Detector::Sync, t, Origin::sync, i});
    }
    return events;
}

void write_code_sidecar(const std::filesystem::path& path, std::span<const CodeEntry> code)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
    std::vector<char> bytes;
    bytes.reserve(code.size());
    for (const auto& entry : code)
        bytes.push_back(static_cast<char>((static_cast<unsigned>(entry.basis) << 1) | (entry.bit & 1U)));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw std::runtime_error(fmt::format("write to {} failed", path.string()));
}

std::vector<CodeEntry> read_code_sidecar(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error(fmt::format("cannot open sidecar {}", path.string()));
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<CodeEntry> code;
    code.reserve(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const auto b = static_cast<unsigned char>(bytes[i]);
        if (b > 3)
            throw std::runtime_error(fmt::format("sidecar {}: invalid byte 0x{:02x} at offset {}", path.string(), b, i));
        code.push_back({static_cast<Basis>(b >> 1), static_cast<std::uint8_t>(b & 1U)});
    }
    return code;
}

}  // namespace qkdsim
