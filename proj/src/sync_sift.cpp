#include "qkdsim/sync_sift.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qkdsim {

namespace {

struct LineFit {
    double intercept = 0.0;  // ps
    double slope = 0.0;      // ps per sync index
    double rms = 0.0;
    std::uint64_t used = 0;
};

// Least-squares t = intercept + slope * i over detections whose residual
// against `guess` is within `gate`.
LineFit fit_sync_line(std::span<const Picoseconds> times, const LineFit& guess, Picoseconds gate)
{
    std::vector<std::pair<long double, long double>> pts;
    pts.reserve(times.size());
    for (auto t : times) {
        const double index = std::round((t - guess.intercept) / guess.slope);
        const double predicted = guess.intercept + guess.slope * index;
        if (std::abs(t - predicted) <= gate)
            pts.emplace_back(index, t);
    }
    if (pts.size() < 2)
        throw SyncError(fmt::format("only {} sync detections fit the coarse clock model", pts.size()));

    long double mx = 0, my = 0;
    for (auto [x, y] : pts) {
        mx += x;
        my += y;
    }
    mx /= pts.size();
    my /= pts.size();
    long double sxx = 0, sxy = 0;
    for (auto [x, y] : pts) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if (sxx == 0)
        throw SyncError("all usable sync detections map to one sync pulse");

    LineFit fit;
    const long double slope = sxy / sxx;
    const long double intercept = my - slope * mx;
    long double ss = 0;
    for (auto [x, y] : pts) {
        const long double r = y - (intercept + slope * x);
        ss += r * r;
    }
    fit.slope = static_cast<double>(slope);
    fit.intercept = static_cast<double>(intercept);
    fit.rms = static_cast<double>(std::sqrt(ss / pts.size()));
    fit.used = pts.size();
    return fit;
}

}  // namespace

ClockEstimate recover_clock(std::span<const Picoseconds> sync_detections, Picoseconds sync_period,
                            const SyncSearch& search)
{
    if (sync_detections.size() < 2)
        throw SyncError(fmt::format("need at least two sync detections, got {}", sync_detections.size()));
    if (!(sync_period > 0.0))
        throw ConfigError("sync_period must be > 0");
    const Picoseconds bound = search.coarse_offset_bound;
    if (!(bound >= 0.0) || !(bound < sync_period / 2))
        throw ConfigError(fmt::format("offset bound {} ps must lie in [0, sync_period/2 = {} ps)", bound,
                                      sync_period / 2));
    if (!(search.drift_bound_ppm >= 0.0))
        throw ConfigError("drift bound must be >= 0");

    std::vector<Picoseconds> times(sync_detections.begin(), sync_detections.end());
    std::sort(times.begin(), times.end());
    const Picoseconds span = std::max(times.back() - times.front(), sync_period);

    // Coarse correlation against the sync comb.
    constexpr int kBins = 64;
    const Picoseconds bin = std::max(2.0 * bound / kBins, 1000.0);
    const int n_bins = static_cast<int>(std::ceil(2.0 * bound / bin)) + 2;
    const Picoseconds lo = -bound - bin;
    double drift_step = bin / span * 1e6;
    if (search.drift_bound_ppm > 0.0)
        drift_step = std::max(drift_step, search.drift_bound_ppm / 1000.0);
    const int n_drift = search.drift_bound_ppm > 0.0 ? static_cast<int>(std::ceil(search.drift_bound_ppm / drift_step))
                                                     : 0;

    std::vector<std::uint32_t> counts(n_bins);
    std::uint64_t best_count = 0;
    double best_drift = 0.0;
    double best_offset = 0.0;
    for (int j = -n_drift; j <= n_drift; ++j) {
        const double drift = j * drift_step;
        const double scale = 1.0 / (1.0 + drift * 1e-6);
        std::fill(counts.begin(), counts.end(), 0);
        for (auto t : times) {
            const double u = t * scale;
            const double phase = u - sync_period * std::round(u / sync_period);
            const int b = static_cast<int>(std::floor((phase - lo) / bin));
            if (b >= 0 && b < n_bins)
                ++counts[b];
        }
        for (int b = 0; b + 1 < n_bins; ++b) {
            const std::uint64_t pair = counts[b] + counts[b + 1];
            // Ties prefer the smallest |drift| so the result does not depend on scan order.
            if (pair > best_count || (pair == best_count && std::abs(drift) < std::abs(best_drift))) {
                best_count = pair;
                best_drift = drift;
                best_offset = lo + bin * (b + 1);
            }
        }
    }
    const double expected_background = static_cast<double>(times.size()) * 2.0 * bin / sync_period;
    if (best_count < 2 || static_cast<double>(best_count) < 5.0 * expected_background)
        throw SyncError(fmt::format("no sync correlation peak: best {} counts vs {:.2f} expected from background",
                                    best_count, expected_background));

    // Refine: fit over a doubling horizon so drift errors never outgrow the gate.
    LineFit model;
    model.slope = sync_period * (1.0 + best_drift * 1e-6);
    model.intercept = best_offset * (1.0 + best_drift * 1e-6);
    Picoseconds horizon = 64.0 * sync_period;
    while (true) {
        auto end = std::upper_bound(times.begin(), times.end(), times.front() + horizon);
        std::span<const Picoseconds> head(times.data(), static_cast<std::size_t>(end - times.begin()));
        if (head.size() >= 2)
            model = fit_sync_line(head, model, 2.0 * bin);
        if (end == times.end())
            break;
        horizon *= 2.0;
    }
    // Sigma-clip at 5 rms until the inlier set is stable.
    for (int pass = 0; pass < 32; ++pass) {
        const auto previous = model.used;
        model = fit_sync_line(times, model, std::max(5.0 * model.rms, 1.0));
        if (pass > 0 && model.used == previous)
            break;
    }

    ClockEstimate est;
    est.drift_hat_ppm = (model.slope / sync_period - 1.0) * 1e6;
    est.offset_hat = model.intercept / (1.0 + est.drift_hat_ppm * 1e-6);
    est.residual_rms = model.rms;
    est.n_sync_used = model.used;
    return est;
}

ClockEstimate recover_clock(std::span<const Picoseconds> sync_detections, Picoseconds sync_period,
                            Picoseconds coarse_offset_bound)
{
    return recover_clock(sync_detections, sync_period, SyncSearch{coarse_offset_bound});
}

MatchResult match_pulses(std::span<const Detection> detections, const ClockEstimate& clock,
                         Picoseconds pulse_period, Picoseconds window, std::uint64_t slot_count)
{
    if (!(pulse_period > 0.0))
        throw ConfigError("pulse_period must be > 0");
    if (!(window > 0.0) || !(window < pulse_period / 2))
        throw ConfigError(fmt::format("coincidence window {} ps must lie in (0, pulse_period/2 = {} ps)", window,
                                      pulse_period / 2));

    struct Candidate {
        MatchedPair pair;
        Picoseconds time;
    };
    MatchResult result;
    result.window = window;
    std::vector<Candidate> candidates;
    candidates.reserve(detections.size());
    const Picoseconds half = window / 2;
    for (const auto& d : detections) {
        if (d.detector == Detector::Sync)
            continue;
        const Picoseconds alice = clock.to_alice(d.time);
        const double k = std::round(alice / pulse_period);
        if (k < 0.0 || k >= static_cast<double>(slot_count)) {
            ++result.out_of_range;
            continue;
        }
        const Picoseconds residual = alice - k * pulse_period;
        if (std::abs(residual) > half) {
            ++result.outside_window;
            continue;
        }
        candidates.push_back({{static_cast<std::uint64_t>(k), d.detector, residual}, d.time});
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.pair.slot != b.pair.slot)
            return a.pair.slot < b.pair.slot;
        const double ra = std::abs(a.pair.residual);
        const double rb = std::abs(b.pair.residual);
        if (ra != rb)
            return ra < rb;
        if (a.pair.residual != b.pair.residual)
            return a.pair.residual < b.pair.residual;
        if (a.pair.detector != b.pair.detector)
            return a.pair.detector < b.pair.detector;
        return a.time < b.time;
    });
    result.pairs.reserve(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (i > 0 && candidates[i].pair.slot == candidates[i - 1].pair.slot) {
            ++result.slot_collisions;
            continue;
        }
        result.pairs.push_back(candidates[i].pair);
    }
    return result;
}

double binary_entropy(double x)
{
    if (x <= 0.0 || x >= 1.0)
        return 0.0;
    return -x * std::log2(x) - (1.0 - x) * std::log2(1.0 - x);
}

double secure_rate(double sifted_rate, double qber, double f_ec)
{
    if (!(qber >= 0.0 && qber <= 0.5))
        throw ContractError(fmt::format("qber {} outside [0, 0.5]", qber));
    if (!(f_ec >= 1.0))
        throw ContractError(fmt::format("error-correction inefficiency {} must be >= 1", f_ec));
    const double h = binary_entropy(qber);
    return std::max(0.0, sifted_rate * (1.0 - f_ec * h - h));
}

SiftReport sift(const MatchResult& matched, std::span<const CodeEntry> alice_code, const SiftOptions& options)
{
    if (!(options.disclose_fraction > 0.0 && options.disclose_fraction <= 1.0))
        throw ConfigError(fmt::format("disclose_fraction {} must lie in (0, 1]", options.disclose_fraction));
    if (!(options.f_ec >= 1.0))
        throw ConfigError("f_ec must be >= 1");
    if (!(options.duration_s > 0.0))
        throw ConfigError("session duration must be > 0");

    SiftReport report;
    report.window = matched.window;
    report.matched = matched.pairs.size();
    for (const auto& pair : matched.pairs) {
        if (pair.slot >= alice_code.size())
            throw ContractError(fmt::format("matched slot {} is beyond Alice's {} pulses", pair.slot,
                                            alice_code.size()));
        const auto& alice = alice_code[pair.slot];
        if (basis_of(pair.detector) != alice.basis)
            continue;
        ++report.sifted_bits;
        const double u = static_cast<double>(splitmix64(options.seed ^ splitmix64(pair.slot)) >> 11) * 0x1.0p-53;
        if (u < options.disclose_fraction) {
            ++report.disclosed;
            if (bit_of(pair.detector) != alice.bit)
                ++report.errors_found;
        }
    }
    report.sifted_rate = static_cast<double>(report.sifted_bits) / options.duration_s;
    if (report.disclosed > 0) {
        report.qber = static_cast<double>(report.errors_found) / static_cast<double>(report.disclosed);
        const double key_rate = static_cast<double>(report.sifted_bits - report.disclosed) / options.duration_s;
        report.secure_rate = report.qber <= 0.5 ? secure_rate(key_rate, report.qber, options.f_ec) : 0.0;
    }
    return report;
}

SiftReport analyze_window(const SessionData& session, Picoseconds window)
{
    auto matched =
        match_pulses(session.detections, session.clock, session.pulse_period, window, session.alice_code.size());
    return sift(matched, session.alice_code, session.sift);
}

std::vector<SiftReport> window_scan(const SessionData& session, std::span<const Picoseconds> windows)
{
    if (windows.size() < 2)
        throw ContractError("window scan needs at least two windows");
    for (std::size_t i = 1; i < windows.size(); ++i)
        if (!(windows[i] > windows[i - 1]))
            throw ContractError("window scan windows must be strictly ascending");
    std::vector<SiftReport> reports;
    reports.reserve(windows.size());
    for (auto w : windows)
        reports.push_back(analyze_window(session, w));
    return reports;
}

void write_sift_csv(std::ostream& out, std::span<const SiftReport> reports)
{
    out << "window_ps,matched,sifted_bits,disclosed,errors_found,qber,sifted_rate_bps,secure_rate_bps\n";
    for (const auto& r : reports)
        out << fmt::format("{},{},{},{},{},{},{},{}\n", r.window, r.matched, r.sifted_bits, r.disclosed,
                           r.errors_found, r.qber, r.sifted_rate, r.secure_rate);
}

std::string summarize(const SiftReport& r)
{
    return fmt::format("window {:.0f} ps: matched {}, sifted {}, disclosed {} ({} errors), QBER {:.3f}%, "
                       "sifted rate {:.1f} bit/s, secure rate {:.1f} bit/s",
                       r.window, r.matched, r.sifted_bits, r.disclosed, r.errors_found, 100.0 * r.qber, r.sifted_rate,
                       r.secure_rate);
}

}  // namespace qkdsim
