#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mbq/tensor.hpp"

namespace mbq {

/// Weight matrix shape for the GEMV microbenchmark, given as
/// input-channels x output-channels; the weight matrix is oc rows by ic cols
/// and x has length ic.
struct GemvShape {
    int ic = 0;
    int oc = 0;

    std::string label() const { return std::to_string(ic) + "x" + std::to_string(oc); }
};

/// The four decode-stage projection shapes used by the shape sweep.
std::vector<GemvShape> table6_shapes();

/// Analytic weight-traffic model for one shape. Reference path moves
/// rows*cols*4 bytes; the packed path moves rows*cols*3/8 code bytes plus
/// 8 bytes of (scale, zero) metadata per group.
struct TrafficReport {
    std::size_t ref_bytes = 0;
    std::size_t packed_code_bytes = 0;
    std::size_t packed_meta_bytes = 0;

    std::size_t packed_bytes() const { return packed_code_bytes + packed_meta_bytes; }
    double ratio() const { return static_cast<double>(packed_bytes()) / static_cast<double>(ref_bytes); }
};

TrafficReport gemv_traffic(const GemvShape& shape, int group_size);

struct BenchEntry {
    GemvShape shape;
    int group_size = 0;
    double ref_ms = 0.0;    // median wall time, FP32 GEMV
    double fused_ms = 0.0;  // median wall time, fused packed GEMV
    TrafficReport traffic;
    double speedup = 0.0;         // ref_ms / fused_ms
    double max_abs_err = 0.0;     // fused vs dequantize-then-ref, checked before timing
    double err_tolerance = 0.0;
};

struct BenchConfig {
    int warmup_iters = 2;
    int timed_iters = 9;
    int group_size = 128;  // clamped to ic when ic < group_size
    int workers = 1;       // fused path; timings are single-threaded by default
    std::uint64_t seed = 7;
};

struct BenchReport {
    BenchConfig config;
    std::vector<BenchEntry> entries;
};

/// Correctness is re-verified (fused vs dequantize-then-ref) before timing;
/// a tolerance violation raises DomainError.
BenchReport bench_gemv(const std::vector<GemvShape>& shapes, const BenchConfig& cfg = {});

}  // namespace mbq
