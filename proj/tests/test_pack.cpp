#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mbq/bench.hpp"
#include "mbq/pack.hpp"

using namespace mbq;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> data(static_cast<std::size_t>(rows) * cols);
    for (float& v : data) v = rng.uniform(lo, hi);
    return Matrix(rows, cols, std::move(data));
}

}  // namespace

TEST_CASE("w3 bit layout is pinned") {
    CHECK(pack_w3({1, 0, 0, 0, 0, 0, 0, 0}) == std::vector<std::uint8_t>{0x01, 0x00, 0x00});
    CHECK(pack_w3({7, 7, 7, 7, 7, 7, 7, 7}) == std::vector<std::uint8_t>{0xFF, 0xFF, 0xFF});
    // code i sits at bits [3i, 3i+3) of the little-endian 24-bit word
    CHECK(pack_w3({0, 1, 0, 0, 0, 0, 0, 0}) == std::vector<std::uint8_t>{0x08, 0x00, 0x00});
    CHECK(pack_w3({0, 0, 0, 0, 0, 0, 0, 7}) == std::vector<std::uint8_t>{0x00, 0x00, 0xE0});
}

TEST_CASE("w3 round-trip: random tuples and single-nonzero tuples") {
    Rng rng(2024);
    std::vector<std::uint8_t> codes(8);
    for (int trial = 0; trial < 100000; ++trial) {
        for (auto& c : codes) c = static_cast<std::uint8_t>(rng.next_below(8));
        CHECK(unpack_w3(pack_w3(codes), 8) == codes);
    }
    for (int pos = 0; pos < 8; ++pos) {
        for (std::uint8_t v = 1; v < 8; ++v) {
            std::vector<std::uint8_t> t(8, 0);
            t[pos] = v;
            CHECK(unpack_w3(pack_w3(t), 8) == t);
        }
    }
}

TEST_CASE("w3 codec errors") {
    CHECK_THROWS_AS(pack_w3({1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(pack_w3({8, 0, 0, 0, 0, 0, 0, 0}), DomainError);
    CHECK_THROWS_AS(unpack_w3({0x00, 0x00}, 8), FormatError);
}

TEST_CASE("w4 nibble layout and round-trip") {
    CHECK(pack_w4({0x1, 0x2}) == std::vector<std::uint8_t>{0x21});
    CHECK(pack_w4({0xF, 0xF}) == std::vector<std::uint8_t>{0xFF});
    CHECK_THROWS_AS(pack_w4({16, 0}), DomainError);
    CHECK_THROWS_AS(pack_w4({1}), ShapeError);

    Rng rng(4);
    std::vector<std::uint8_t> codes(16);
    for (int trial = 0; trial < 20000; ++trial) {
        for (auto& c : codes) c = static_cast<std::uint8_t>(rng.next_below(16));
        CHECK(unpack_w4(pack_w4(codes), 16) == codes);
    }
}

TEST_CASE("exhaustive 8-tuple sweep") {
    // all 8^8 = 16.7M tuples
    std::vector<std::uint8_t> codes(8);
    for (std::uint32_t word = 0; word < (1u << 24); ++word) {
        for (int i = 0; i < 8; ++i) codes[i] = (word >> (3 * i)) & 0x7;
        const std::vector<std::uint8_t> packed = pack_w3(codes);
        const std::uint32_t repacked = static_cast<std::uint32_t>(packed[0]) |
                                       (static_cast<std::uint32_t>(packed[1]) << 8) |
                                       (static_cast<std::uint32_t>(packed[2]) << 16);
        if (repacked != word) {
            REQUIRE(repacked == word);  // report only on failure to keep the sweep fast
        }
    }
}

TEST_CASE("packed tensor storage formula and round-trip") {
    Rng rng(8);
    for (const auto& [rows, cols, gs] : {std::tuple{4, 64, 16}, std::tuple{3, 12, 4}, std::tuple{2, 24, 24}}) {
        const Matrix w = random_matrix(rng, rows, cols);
        const QuantizedTensor q = quantize_asym_group(w, QuantSpec::asym_group(3, gs));
        const PackedW3 p = pack_w3_tensor(q);
        CHECK(p.bytes.size() == static_cast<std::size_t>(rows) * ((cols + 7) / 8 * 8) * 3 / 8);
        CHECK(p.scales.size() == static_cast<std::size_t>(rows) * (cols / gs));
        const QuantizedTensor back = unpack_w3_tensor(p);
        CHECK(back.codes == q.codes);
        CHECK(back.scales == q.scales);
        CHECK(back.zeros == q.zeros);
    }
}

TEST_CASE("gemv_ref basics and oracle") {
    Rng rng(12);
    const Matrix w = random_matrix(rng, 9, 7);
    std::vector<float> x(7);
    for (float& v : x) v = rng.uniform(-1.0f, 1.0f);

    const std::vector<float> ye = gemv_ref(Matrix::identity(7), x);
    CHECK(ye == x);
    CHECK(gemv_ref(w, std::vector<float>(7, 0.0f)) == std::vector<float>(9, 0.0f));

    const std::vector<float> y = gemv_ref(w, x);
    for (int i = 0; i < 9; ++i) {
        double acc = 0.0;
        for (int j = 0; j < 7; ++j) acc += static_cast<double>(w(i, j)) * static_cast<double>(x[j]);
        CHECK(y[i] == static_cast<float>(acc));
    }
    CHECK_THROWS_AS(gemv_ref(w, std::vector<float>(6, 0.0f)), ShapeError);
}

TEST_CASE("fused gemv unit vectors reproduce dequantized columns") {
    Rng rng(23);
    const Matrix w = random_matrix(rng, 5, 16);
    const QuantizedTensor q = quantize_asym_group(w, QuantSpec::asym_group(3, 8));
    const PackedW3 p = pack_w3_tensor(q);
    const Matrix deq = dequantize(p);
    for (int j = 0; j < 16; ++j) {
        std::vector<float> e(16, 0.0f);
        e[j] = 1.0f;
        const std::vector<float> y = gemv_w3_fused(p, e);
        for (int i = 0; i < 5; ++i) CHECK(y[i] == deq(i, j));
    }
    CHECK(gemv_w3_fused(p, std::vector<float>(16, 0.0f)) == std::vector<float>(5, 0.0f));
}

TEST_CASE("fused gemv matches the two-step path") {
    Rng rng(34);
    for (const auto& [rows, cols, gs] : {std::tuple{64, 128, 128}, std::tuple{33, 96, 32}, std::tuple{7, 12, 4}}) {
        const Matrix w = random_matrix(rng, rows, cols, -2.0f, 2.0f);
        const QuantizedTensor q = quantize_asym_group(w, QuantSpec::asym_group(3, gs));
        const PackedW3 p = pack_w3_tensor(q);
        std::vector<float> x(cols);
        for (float& v : x) v = rng.uniform(-2.0f, 2.0f);

        const std::vector<float> y_two = gemv_ref(dequantize(p), x);
        const std::vector<float> y_fused = gemv_w3_fused(p, x);
        double y_inf = 0.0;
        for (float v : y_two) y_inf = std::max(y_inf, std::fabs(static_cast<double>(v)));
        for (int i = 0; i < rows; ++i)
            CHECK(std::fabs(static_cast<double>(y_fused[i]) - y_two[i]) <= 1e-4 * (1.0 + y_inf));

        const std::vector<float> y_par = gemv_w3_fused(p, x, 2);
        CHECK(y_par == y_fused);
    }
}

TEST_CASE("packed blob round-trip across formats") {
    Rng rng(45);
    const std::string path = (std::filesystem::temp_directory_path() / "mbq_blob.bin").string();
    const Matrix w = random_matrix(rng, 6, 32, -1.5f, 1.5f);

    SUBCASE("asym w3") {
        const QuantizedTensor q = quantize_asym_group(w, QuantSpec::asym_group(3, 16));
        save_packed_blob(path, q);
        const QuantizedTensor back = load_packed_blob(path);
        CHECK(back.codes == q.codes);
        CHECK(back.scales == q.scales);
        CHECK(back.zeros == q.zeros);
        CHECK(back.spec.bits == 3);
    }
    SUBCASE("asym w4") {
        const QuantizedTensor q = quantize_asym_group(w, QuantSpec::asym_group(4, 16));
        save_packed_blob(path, q);
        const QuantizedTensor back = load_packed_blob(path);
        CHECK(back.codes == q.codes);
        CHECK(back.scales == q.scales);
    }
    SUBCASE("sym w4 stores signed codes offset-binary") {
        const QuantizedTensor q = quantize_sym(w, QuantSpec::sym_per_channel(4));
        save_packed_blob(path, q);
        const QuantizedTensor back = load_packed_blob(path);
        CHECK(back.codes == q.codes);
        CHECK(back.spec.mode == QuantMode::Symmetric);
        CHECK(back.zeros.empty());
    }
    SUBCASE("sym w8 one byte per code") {
        const QuantizedTensor q = quantize_sym(w, QuantSpec::sym_per_channel(8));
        save_packed_blob(path, q);
        const QuantizedTensor back = load_packed_blob(path);
        CHECK(back.codes == q.codes);
    }
    std::filesystem::remove(path);
}

TEST_CASE("traffic analytics match the declared layout") {
    // group 128: ratio = (3/8 + 8/128) / 4 = 7/64
    for (const GemvShape& shape : table6_shapes()) {
        const TrafficReport t = gemv_traffic(shape, 128);
        CHECK(t.packed_bytes() * 64 == t.ref_bytes * 7);
        CHECK(t.ratio() == doctest::Approx(7.0 / 64.0).epsilon(1e-12));
    }
}

TEST_CASE("bench runs on a degenerate shape") {
    BenchConfig cfg;
    cfg.warmup_iters = 1;
    cfg.timed_iters = 3;
    const BenchReport report = bench_gemv({{8, 8}}, cfg);
    REQUIRE(report.entries.size() == 1);
    CHECK(report.entries[0].group_size == 8);  // clamped from 128
    CHECK(report.entries[0].ref_ms > 0.0);
    CHECK(report.entries[0].fused_ms > 0.0);
    CHECK(report.entries[0].max_abs_err <= report.entries[0].err_tolerance);
}

TEST_CASE("bench reports analytic bytes for a mid-size shape") {
    BenchConfig cfg;
    cfg.warmup_iters = 0;
    cfg.timed_iters = 1;
    const BenchReport report = bench_gemv({{256, 64}}, cfg);
    const BenchEntry& e = report.entries[0];
    CHECK(e.traffic.ref_bytes == 64u * 256u * 4u);
    CHECK(e.traffic.packed_code_bytes == 64u * 256u * 3u / 8u);
    CHECK(e.traffic.packed_meta_bytes == 64u * 2u * 8u);
}
