#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "qkdsim/calibration.hpp"
#include "qkdsim/tdc.hpp"

#include <cmath>
#include <numeric>

using namespace qkdsim;

namespace {

// Independent reference: majority-of-3 with edge padding, evaluated eagerly.
std::vector<int> majority_filter(const std::vector<std::uint8_t>& code)
{
    const std::size_t n = code.size();
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int l = code[i == 0 ? 0 : i - 1];
        const int r = code[i + 1 == n ? i : i + 1];
        out[i] = (l + code[i] + r) >= 2;
    }
    return out;
}

DelayLineProfile uniform_profile(ChannelId ch = 0, Picoseconds jitter = 0.0)
{
    return build_delay_line(ch, TdcConfig{}, UniformTaps{}, jitter, 1);
}

}  // namespace

TEST_CASE("config defaults and validation")
{
    TdcConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.nominal_tap() == doctest::Approx(23.946).epsilon(1e-4));
    CHECK(c.dynamic_range() > 1e12);

    auto bad = c;
    bad.n_taps = 512;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.coarse_bits = 27;  // 2^27 * 6.25 ns < 1 s
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.n_channels = 33;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.clock_period = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("dnl specs parse and print back")
{
    for (const char* text : {"uniform", "random:0.3", "comb:2:4", "taps:3=12.5,7=-4"})
        CHECK(to_string(parse_dnl_spec(text)) == text);
    CHECK_THROWS_AS(parse_dnl_spec("comb:2:1"), ConfigError);
    CHECK_THROWS_AS(parse_dnl_spec("random"), ConfigError);
    CHECK_THROWS_AS(parse_dnl_spec("sine:1"), ConfigError);
    CHECK_THROWS_AS(parse_dnl_spec("taps:3"), ConfigError);
}

TEST_CASE("delay lines span exactly one clock period")
{
    TdcConfig c;
    for (const char* text : {"uniform", "random:0.5", "comb:2:4", "taps:0=10,100=-20"}) {
        auto p = build_delay_line(2, c, parse_dnl_spec(text), 0.0, 99);
        CHECK(p.n_taps() == c.n_taps);
        CHECK(p.boundaries().back() == c.clock_period);
        const double sum = std::accumulate(p.tap_delays().begin(), p.tap_delays().end(), 0.0);
        CHECK(std::abs(sum - c.clock_period) < 1e-9 * c.clock_period);
        for (auto t : p.tap_delays())
            CHECK(t > 0.0);
    }

    SUBCASE("comb pattern keeps the mean tap at the nominal width")
    {
        auto p = build_delay_line(0, c, CombDnl{2.0, 4}, 0.0, 0);
        const double lsb = c.nominal_tap();
        // Stride 4 does not divide 261, so renormalization moves every tap slightly.
        CHECK(p.tap_delays()[3] == doctest::Approx(3.0 * lsb).epsilon(0.01));
        CHECK(p.tap_delays()[0] == doctest::Approx(lsb / 3.0).epsilon(0.01));
    }

    CHECK_THROWS_AS(build_delay_line(0, c, parse_dnl_spec("taps:0=-30"), 0.0, 0), ConfigError);
    CHECK_THROWS_AS(build_delay_line(0, c, parse_dnl_spec("taps:261=1"), 0.0, 0), ConfigError);
    CHECK_THROWS_AS(DelayLineProfile(0, 100.0, {40.0, 50.0}, 0.0), ConfigError);
}

TEST_CASE("thermometer sampling")
{
    DelayLineProfile p(0, 100.0, {20.0, 30.0, 25.0, 25.0}, 0.0);
    CHECK(sample_thermometer(p, 0.0) == ThermometerCode{0, 0, 0, 0});
    CHECK(sample_thermometer(p, 20.0) == ThermometerCode{1, 0, 0, 0});
    CHECK(sample_thermometer(p, 49.9) == ThermometerCode{1, 0, 0, 0});
    CHECK(sample_thermometer(p, 50.0) == ThermometerCode{1, 1, 0, 0});
    CHECK(sample_thermometer(p, 99.9) == ThermometerCode{1, 1, 1, 0});
}

TEST_CASE("encode_fine")
{
    CHECK(encode_fine(std::vector<std::uint8_t>{1, 1, 0, 1, 0, 0, 0}) == 3);
    CHECK(encode_fine(std::vector<std::uint8_t>{0, 0, 0, 0}) == 0);
    CHECK(encode_fine(std::vector<std::uint8_t>{1, 1, 1, 1}) == 4);
    CHECK(encode_fine(std::vector<std::uint8_t>{1, 0, 1, 1, 0, 0}) == 4);  // bubble at 1 is filtered

    SUBCASE("exhaustive against the eager filter, n <= 16")
    {
        for (std::size_t n = 1; n <= 16; ++n) {
            for (std::uint32_t bits = 0; bits < (1U << n); ++bits) {
                std::vector<std::uint8_t> code(n);
                for (std::size_t i = 0; i < n; ++i)
                    code[i] = (bits >> i) & 1U;
                const auto f = majority_filter(code);
                const auto r = encode_fine(code);
                REQUIRE(r <= n);
                if (r > 0)
                    REQUIRE(f[r - 1] == 1);
                if (r < n)
                    REQUIRE(f[r] == 0);
                // For a clean thermometer the result is its population.
                if (std::is_sorted(f.begin(), f.end(), std::greater<>()))
                    REQUIRE(r == static_cast<std::uint32_t>(std::count(f.begin(), f.end(), 1)));
            }
        }
    }
}

TEST_CASE("digitize: coarse edge, fine code and reconstruction")
{
    TdcConfig c;
    auto p = uniform_profile();
    auto cal = CalibrationTable::from_profile(p);
    Rng rng(5);
    ChannelState state;
    const double lsb = c.nominal_tap();

    std::uniform_real_distribution<double> u(0.0, 1e9);
    double t = 0.0;
    for (int k = 0; k < 2000; ++k) {
        t += c.dead_time + u(rng);
        auto r = digitize({0, t}, p, state, c, rng);
        REQUIRE(r.accepted());
        const auto edge = static_cast<std::uint64_t>(std::ceil(t / c.clock_period));
        CHECK(r.record.coarse == edge);
        const double delta = static_cast<double>(edge) * c.clock_period - t;
        CHECK(r.record.fine == static_cast<std::uint32_t>(std::floor(delta / lsb + 1e-9)));
        // Reconstruction error is bounded by one bin (half a bin except for code 0).
        CHECK(std::abs(reconstruct(r.record, cal, c) - t) <= lsb + 1e-6);
    }
}

TEST_CASE("dead time is non-paralyzable and per channel")
{
    TdcConfig c;
    auto p0 = uniform_profile(0);
    auto p1 = uniform_profile(1);
    Rng rng(1);
    ChannelState s0, s1;
    CHECK(digitize({0, 1000.0}, p0, s0, c, rng).accepted());
    CHECK(digitize({0, 1000.0 + 29999.0}, p0, s0, c, rng).status == HitStatus::dead_time);
    CHECK(digitize({1, 1000.0 + 100.0}, p1, s1, c, rng).accepted());
    // Rejected hits do not extend the dead time.
    CHECK(digitize({0, 1000.0 + 30000.0}, p0, s0, c, rng).accepted());
    CHECK_THROWS_AS(digitize({0, 10.0}, p0, s0, c, rng), ContractError);
    CHECK_THROWS_AS(digitize({1, 10.0}, p0, s0, c, rng), ContractError);
    ChannelState fresh;
    CHECK_THROWS_AS(digitize({0, -1.0}, p0, fresh, c, rng), ContractError);
    CHECK_THROWS_AS(digitize({40, 1e9}, p0, s0, c, rng), ConfigError);

    ChannelState off;
    off.enabled = false;
    CHECK(digitize({0, 5e6}, p0, off, c, rng).status == HitStatus::disabled);
}

TEST_CASE("coarse counter wraps with an epoch parity flag")
{
    TdcConfig c;
    c.coarse_bits = 28;
    auto p = uniform_profile();
    Rng rng(2);
    ChannelState state;
    const double wrap = std::ldexp(c.clock_period, 28);
    auto before = digitize({0, wrap - 3.0 * c.clock_period - 100.0}, p, state, c, rng);
    auto after = digitize({0, wrap + 30000.0 + 1.0}, p, state, c, rng);
    CHECK(before.record.coarse == (std::uint64_t{1} << 28) - 3);
    CHECK_FALSE(before.rollover);
    CHECK(after.record.coarse == 5);  // ceil(30001 / 6250)
    CHECK(after.rollover);
}

TEST_CASE("jitter is one draw per digitization")
{
    // A common-mode shift moves the whole line: the fine code spread for a
    // fixed delta follows sigma / LSB, and no bubble patterns appear.
    TdcConfig c;
    auto p = uniform_profile(0, 24.0);
    Rng rng(11);
    const double lsb = c.nominal_tap();
    const double delta = 100.5 * lsb;
    double sum = 0.0, sum2 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        auto code = sample_thermometer(p, delta, rng);
        REQUIRE(std::is_sorted(code.begin(), code.end(), std::greater<>()));
        const double f = encode_fine(code);
        sum += f;
        sum2 += f * f;
    }
    const double mean = sum / n;
    const double sd = std::sqrt(sum2 / n - mean * mean);
    CHECK(mean == doctest::Approx(100.0).epsilon(0.01));
    // Quantized Gaussian: sqrt(sigma^2 + LSB^2 / 12) in LSB units.
    CHECK(sd == doctest::Approx(std::sqrt(1.0 + 1.0 / 12.0) * 24.0 / lsb).epsilon(0.05));
}

TEST_CASE("Tdc board routes channels to their own state")
{
    TdcConfig c;
    c.n_channels = 2;
    Tdc tdc(c, {uniform_profile(0), uniform_profile(1)}, 3);
    CHECK(tdc.digitize({0, 100.0}).accepted());
    CHECK(tdc.digitize({1, 200.0}).accepted());
    CHECK(tdc.digitize({0, 300.0}).status == HitStatus::dead_time);
    tdc.set_enabled(1, false);
    CHECK(tdc.digitize({1, 1e6}).status == HitStatus::disabled);
    CHECK_THROWS_AS(tdc.digitize({2, 1e6}), ConfigError);
    CHECK_THROWS_AS(Tdc(c, {uniform_profile(0)}, 0), ConfigError);
    CHECK_THROWS_AS(Tdc(c, {uniform_profile(1), uniform_profile(0)}, 0), ConfigError);
}

TEST_CASE("hit exactly on a clock edge")
{
    TdcConfig c;
    Rng rng(0);
    ChannelState state;
    auto r = digitize({0, 12'500.0}, uniform_profile(), state, c, rng);
    CHECK(r.record.coarse == 2);
    CHECK(r.record.fine == 0);
}

TEST_CASE("zero-jitter properties on a nonuniform line")
{
    TdcConfig c;
    auto p = build_delay_line(0, c, RandomDnl{0.9}, 0.0, 4);
    const double widest = *std::max_element(p.tap_delays().begin(), p.tap_delays().end());

    // Monotone in delta.
    std::uint32_t previous = 0;
    for (double delta = 0.0; delta < c.clock_period; delta += 0.37) {
        const auto code = encode_fine(sample_thermometer(p, delta));
        REQUIRE(code >= previous);
        previous = code;
    }

    // Reconstruction with the true widths stays within the widest tap.
    auto cal = CalibrationTable::from_profile(p);
    Rng rng(9);
    std::uniform_real_distribution<double> u(c.dead_time, 3.0 * c.dead_time);
    ChannelState state;
    double t = 0.0;
    for (int k = 0; k < 20'000; ++k) {
        t += u(rng);
        auto r = digitize({0, t}, p, state, c, rng);
        REQUIRE(r.accepted());
        REQUIRE(std::abs(reconstruct(r.record, cal, c) - t) < widest);
    }
}
