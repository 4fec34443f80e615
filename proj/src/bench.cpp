#include "mbq/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "mbq/pack.hpp"
#include "mbq/quantizer.hpp"

namespace mbq {

std::vector<GemvShape> table6_shapes() {
    return {{3584, 3584}, {3584, 10752}, {3584, 18944}, {18944, 3584}};
}

TrafficReport gemv_traffic(const GemvShape& shape, int group_size) {
    const std::size_t rows = static_cast<std::size_t>(shape.oc);
    const std::size_t cols = static_cast<std::size_t>(shape.ic);
    TrafficReport t;
    t.ref_bytes = rows * cols * 4;
    t.packed_code_bytes = rows * cols * 3 / 8;
    t.packed_meta_bytes = rows * (cols / static_cast<std::size_t>(group_size)) * 8;
    return t;
}

namespace {

double median_ms(std::vector<double>& samples) {
    std::sort(samples.begin(), samples.end());
    const std::size_t n = samples.size();
    return n % 2 == 1 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

template <class F>
double time_ms(F&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

}  // namespace

BenchReport bench_gemv(const std::vector<GemvShape>& shapes, const BenchConfig& cfg) {
    BenchReport report;
    report.config = cfg;
    Rng rng(cfg.seed);

    for (const GemvShape& shape : shapes) {
        const int rows = shape.oc;
        const int cols = shape.ic;
        const int gs = std::min(cfg.group_size, cols);
        if (cols % gs != 0) throw ConfigError("bench_gemv: group size does not divide input channels");

        std::vector<float> wdata(static_cast<std::size_t>(rows) * cols);
        for (float& v : wdata) v = rng.uniform(-1.0f, 1.0f);
        const Matrix w(rows, cols, std::move(wdata));
        std::vector<float> x(cols);
        for (float& v : x) v = rng.uniform(-1.0f, 1.0f);

        const QuantizedTensor q = quantize_asym_group(w, QuantSpec::asym_group(3, gs));
        const PackedW3 packed = pack_w3_tensor(q);
        const Matrix w_deq = dequantize(packed);

        // two-path equivalence check ahead of any timing
        const std::vector<float> y_ref_deq = gemv_ref(w_deq, x);
        const std::vector<float> y_fused = gemv_w3_fused(packed, x, cfg.workers);
        double y_inf = 0.0, max_err = 0.0;
        for (int i = 0; i < rows; ++i) y_inf = std::max(y_inf, std::fabs(static_cast<double>(y_ref_deq[i])));
        for (int i = 0; i < rows; ++i)
            max_err = std::max(max_err, std::fabs(static_cast<double>(y_fused[i]) - static_cast<double>(y_ref_deq[i])));
        const double tol = 1e-4 * (1.0 + y_inf);
        if (max_err > tol)
            throw DomainError("bench_gemv: fused/reference divergence " + std::to_string(max_err) + " on " +
                              shape.label());

        BenchEntry entry;
        entry.shape = shape;
        entry.group_size = gs;
        entry.traffic = gemv_traffic(shape, gs);
        entry.max_abs_err = max_err;
        entry.err_tolerance = tol;

        std::vector<float> sink;
        for (int it = 0; it < cfg.warmup_iters; ++it) {
            sink = gemv_ref(w, x);
            sink = gemv_w3_fused(packed, x, cfg.workers);
        }
        std::vector<double> ref_times, fused_times;
        for (int it = 0; it < cfg.timed_iters; ++it) {
            ref_times.push_back(time_ms([&] { sink = gemv_ref(w, x); }));
            fused_times.push_back(time_ms([&] { sink = gemv_w3_fused(packed, x, cfg.workers); }));
        }
        entry.ref_ms = median_ms(ref_times);
        entry.fused_ms = median_ms(fused_times);
        entry.speedup = entry.fused_ms > 0.0 ? entry.ref_ms / entry.fused_ms : 0.0;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace mbq
