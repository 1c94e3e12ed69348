#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "aggdet/errors.hpp"
#include "aggdet/pipeline.hpp"

namespace aggdet {

struct LatencySummary {
    std::size_t images = 0;
    std::size_t repetitions = 0;
    double median_added_ms = 0.0;          ///< end-to-end: switches on minus switches off
    double p95_added_ms = 0.0;
    double median_aggregation_ms = 0.0;    ///< time inside the aggregation steps only
    double p95_aggregation_ms = 0.0;
    double median_baseline_ms = 0.0;
    double median_aggregated_ms = 0.0;
    std::vector<double> repetition_medians_ms;  ///< per repetition, median aggregation time over images
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Nearest-rank percentile, p in (0,100].
inline double percentile_of(std::vector<double> v, double p) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(v.size())));
    return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

/// Times `aggregated` against the same config with every switch off. Each
/// image gets one untimed warm-up pass of both, then `repetitions` timed
/// alternating passes. `next_record` yields records until it returns nullopt,
/// so images can be streamed from disk.
inline LatencySummary latency_bench(const std::function<std::optional<ImageRecord>()>& next_record,
                                    const Pipeline& aggregated, const Pipeline& baseline, std::size_t repetitions) {
    if (repetitions < 3) throw ContractError("latency_bench: at least 3 repetitions are required");
    if (baseline.config().switches.any()) throw ContractError("latency_bench: baseline pipeline must have every switch off");

    std::vector<double> added;
    std::vector<double> inside;
    std::vector<double> base_ms;
    std::vector<double> agg_ms;
    std::vector<std::vector<double>> per_rep(repetitions);
    LatencySummary out;
    out.repetitions = repetitions;

    while (auto rec = next_record()) {
        (void)aggregated.run_image(*rec);
        (void)baseline.run_image(*rec);
        std::vector<double> on, off, agg;
        for (std::size_t r = 0; r < repetitions; ++r) {
            const auto a = aggregated.run_image(*rec);
            const auto b = baseline.run_image(*rec);
            on.push_back(a.total_seconds * 1e3);
            off.push_back(b.total_seconds * 1e3);
            agg.push_back(a.aggregation_seconds * 1e3);
            per_rep[r].push_back(a.aggregation_seconds * 1e3);
        }
        const double on_m = median_of(on);
        const double off_m = median_of(off);
        added.push_back(on_m - off_m);
        inside.push_back(median_of(agg));
        base_ms.push_back(off_m);
        agg_ms.push_back(on_m);
        ++out.images;
    }
    out.median_added_ms = median_of(added);
    out.p95_added_ms = percentile_of(added, 95.0);
    out.median_aggregation_ms = median_of(inside);
    out.p95_aggregation_ms = percentile_of(inside, 95.0);
    out.median_baseline_ms = median_of(base_ms);
    out.median_aggregated_ms = median_of(agg_ms);
    for (auto& r : per_rep) out.repetition_medians_ms.push_back(median_of(r));
    return out;
}

}  // namespace aggdet
