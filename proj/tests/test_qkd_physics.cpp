#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "qkdsim/qkd_physics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace qkdsim;

namespace {

// |observed - n p| within k binomial standard deviations.
bool within_binomial(std::uint64_t observed, std::uint64_t n, double p, double k = 5.0)
{
    const double mean = static_cast<double>(n) * p;
    const double sd = std::sqrt(static_cast<double>(n) * p * (1.0 - p));
    return std::abs(static_cast<double>(observed) - mean) <= k * sd + 1e-9;
}

std::vector<Bb84Pulse> train(std::uint64_t n, Picoseconds period, std::uint64_t seed)
{
    return make_pulse_train(gen_random_code(n, 0.5, 0.5, seed), period);
}

}  // namespace

TEST_CASE("random code statistics and determinism")
{
    const std::uint64_t n = 200'000;
    auto code = gen_random_code(n, 0.7, 0.5, 3);
    REQUIRE(code.size() == n);
    const auto z = std::count_if(code.begin(), code.end(), [](const CodeEntry& e) { return e.basis == Basis::Z; });
    const auto ones = std::count_if(code.begin(), code.end(), [](const CodeEntry& e) { return e.bit == 1; });
    CHECK(within_binomial(z, n, 0.7));
    CHECK(within_binomial(ones, n, 0.5));
    CHECK(code == gen_random_code(n, 0.7, 0.5, 3));
    CHECK(code != gen_random_code(n, 0.7, 0.5, 4));

    auto all_z = gen_random_code(1000, 1.0, 0.0, 1);
    CHECK(std::all_of(all_z.begin(), all_z.end(), [](const CodeEntry& e) { return e.basis == Basis::Z && e.bit == 0; }));
    CHECK_THROWS_AS(gen_random_code(10, 1.5, 0.5, 1), ConfigError);
}

TEST_CASE("pulse train")
{
    auto pulses = train(5, 35e6, 1);
    CHECK(pulses[3].index == 3);
    CHECK(pulses[3].emit_time == 3 * 35e6);
    CHECK_THROWS_AS(make_pulse_train(gen_random_code(2, 0.5, 0.5, 0), 0.0), ConfigError);
}

TEST_CASE("detector mapping")
{
    for (Basis b : {Basis::Z, Basis::X})
        for (std::uint8_t bit : {0, 1}) {
            const auto d = detector_for(b, bit);
            CHECK(basis_of(d) == b);
            CHECK(bit_of(d) == bit);
        }
    CHECK_THROWS_AS(basis_of(Detector::Sync), ContractError);
    CHECK_THROWS_AS(bit_of(Detector::Sync), ContractError);
    CHECK(std::string(to_string(Detector::X1)) == "X1");
}

TEST_CASE("clock model")
{
    ClockModel clock{42e6, 3.5};
    for (double t : {0.0, 1.0, 1e9, 1e12, 3.3e13})
        CHECK(std::abs(clock.to_alice(clock.to_bob(t)) - t) < 1e-3);
    // 10 ppm accumulates 10 us per second.
    ClockModel drift{0.0, 10.0};
    CHECK(drift.to_bob(1e12) - 1e12 == doctest::Approx(1e7));
    CHECK_THROWS_AS((ClockModel{0.0, 1500.0}.validate()), ConfigError);
}

TEST_CASE("link: detection probability and intrinsic error")
{
    LinkModel link;
    link.background_rate = 0.0;
    DetectorModel det;
    det.dark_rate = 0.0;
    const std::uint64_t n = 200'000;
    auto out = simulate_link(train(n, link.pulse_period, 7), link, det, ClockModel{}, 11);
    const auto& t = out.truth;
    CHECK(t.conserved());
    CHECK(t.emitted == n);
    const double survival = link.mean_photon_number * link.transmittance() * det.efficiency;
    CHECK(link.transmittance() == doctest::Approx(0.794328).epsilon(1e-5));
    CHECK(within_binomial(t.detected_signal, n, survival));
    CHECK(t.noise_generated == 0);
    // Bob's basis matches Alice's half of the time.
    CHECK(within_binomial(t.signal_same_basis, t.detected_signal, 0.5));
    CHECK(within_binomial(t.signal_errors, t.signal_same_basis, det.intrinsic_error));
    CHECK(out.events.size() == t.detected_signal);
    CHECK(std::is_sorted(out.events.begin(), out.events.end(),
                         [](const DetectionEvent& a, const DetectionEvent& b) { return a.true_time < b.true_time; }));
}

TEST_CASE("link: signal arrives in Bob's clock with detector jitter")
{
    LinkModel link;
    link.background_rate = 0.0;
    DetectorModel det;
    det.dark_rate = 0.0;
    ClockModel clock{1e6, 2.0};
    auto pulses = train(50'000, link.pulse_period, 1);
    auto out = simulate_link(pulses, link, det, clock, 2);
    double sum = 0.0, sum2 = 0.0;
    for (const auto& ev : out.events) {
        const double r = ev.true_time - clock.to_bob(pulses[ev.pulse_index].emit_time);
        sum += r;
        sum2 += r * r;
    }
    const double n = static_cast<double>(out.events.size());
    CHECK(std::abs(sum / n) < 5.0 * det.jitter_sigma / std::sqrt(n));
    CHECK(std::sqrt(sum2 / n) == doctest::Approx(det.jitter_sigma).epsilon(0.03));
}

TEST_CASE("link: noise is Poisson (Kolmogorov-Smirnov on inter-arrival gaps)")
{
    LinkModel link;
    link.background_rate = 2e5;
    link.pulse_period = 1e6;
    DetectorModel det;
    det.efficiency = 0.0;
    det.dark_rate = 0.0;
    det.dead_time = 0.0;
    auto out = simulate_link(train(1'000'000, link.pulse_period, 1), link, det, ClockModel{}, 5);
    CHECK(out.truth.detected_signal == 0);
    std::vector<double> gaps;
    Picoseconds last = -1.0;
    for (const auto& ev : out.events) {
        if (ev.detector != Detector::Z0)
            continue;
        if (last >= 0.0)
            gaps.push_back(ev.true_time - last);
        last = ev.true_time;
    }
    // 2e5/s over 1 s.
    CHECK(within_binomial(gaps.size() + 1, 1'000'000, 0.2));
    std::sort(gaps.begin(), gaps.end());
    const double rate = link.background_rate / kPsPerSecond;
    double d = 0.0;
    const double m = static_cast<double>(gaps.size());
    for (std::size_t i = 0; i < gaps.size(); ++i) {
        const double cdf = 1.0 - std::exp(-rate * gaps[i]);
        d = std::max({d, std::abs(cdf - i / m), std::abs(cdf - (i + 1) / m)});
    }
    // Critical value at the 0.1% level.
    CHECK(d < 1.95 / std::sqrt(m));
}

TEST_CASE("link: detector dead time")
{
    LinkModel link;
    link.background_rate = 5e7;
    link.pulse_period = 1e5;
    DetectorModel det;
    det.dead_time = 50'000.0;
    auto out = simulate_link(train(20'000, link.pulse_period, 2), link, det, ClockModel{}, 9);
    const auto& t = out.truth;
    CHECK(t.conserved());
    CHECK(t.noise_generated == t.noise_detected + t.noise_suppressed);
    CHECK(t.noise_suppressed > 0);
    std::array<Picoseconds, 4> last{-1e18, -1e18, -1e18, -1e18};
    for (const auto& ev : out.events) {
        auto& l = last[static_cast<std::size_t>(ev.detector)];
        REQUIRE(ev.true_time - l >= det.dead_time);
        l = ev.true_time;
    }
}

TEST_CASE("link rejects unsorted pulses and bad models")
{
    auto pulses = train(3, 1e6, 0);
    std::swap(pulses[0], pulses[2]);
    CHECK_THROWS_AS(simulate_link(pulses, LinkModel{}, DetectorModel{}, ClockModel{}, 0), ContractError);
    DetectorModel bad;
    bad.efficiency = 1.2;
    CHECK_THROWS_AS(simulate_link(train(3, 1e6, 0), LinkModel{}, bad, ClockModel{}, 0), ConfigError);
}

TEST_CASE("sync emission")
{
    ClockModel clock{1000.0, 0.0};
    auto s = emit_sync(10, 1e9, clock, 0.0, 1);
    REQUIRE(s.size() == 10);
    CHECK(s[4].true_time == doctest::Approx(4e9 + 1000.0));
    CHECK(s[4].detector == Detector::Sync);
    auto lossy = emit_sync(100'000, 1e6, clock, 10.0, 1, 0.3);
    CHECK(within_binomial(lossy.size(), 100'000, 0.3));
}

TEST_CASE("code sidecar roundtrip")
{
    const auto path = std::filesystem::temp_directory_path() / "qkdsim_test_sidecar.bin";
    auto code = gen_random_code(10'000, 0.5, 0.5, 8);
    write_code_sidecar(path, code);
    CHECK(std::filesystem::file_size(path) == code.size());
    CHECK(read_code_sidecar(path) == code);
    {
        std::ofstream out(path, std::ios::binary | std::ios::app);
        out.put(static_cast<char>(7));
    }
    CHECK_THROWS_WITH(read_code_sidecar(path), doctest::Contains("offset 10000"));
    std::filesystem::remove(path);
}
