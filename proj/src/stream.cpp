#include "realm/stream.hpp"

#include <algorithm>

namespace realm::stream {

double percentile_nearest_rank(std::vector<double> samples, double p) {
    if (samples.empty()) fail("percentile: empty sample set");
    if (p <= 0.0 || p > 100.0) fail("percentile: p must be in (0,100]");
    std::sort(samples.begin(), samples.end());
    const auto n = static_cast<double>(samples.size());
    const auto rank = static_cast<size_t>(std::ceil(p / 100.0 * n));
    return samples[std::max<size_t>(rank, 1) - 1];
}

LatencyReport summarize_latencies(const std::vector<double>& step_ms, double deadline_ms) {
    LatencyReport r;
    r.n_steps = static_cast<int64_t>(step_ms.size());
    r.deadline_ms = deadline_ms;
    double total = 0.0;
    for (double v : step_ms) {
        total += v;
        if (v > deadline_ms) ++r.miss_count;
    }
    r.mean_ms = total / static_cast<double>(step_ms.size());
    r.p50_ms = percentile_nearest_rank(step_ms, 50.0);
    r.p95_ms = percentile_nearest_rank(step_ms, 95.0);
    r.fps = r.mean_ms > 0.0 ? 1000.0 / r.mean_ms : 0.0;
    return r;
}

}  // namespace realm::stream
