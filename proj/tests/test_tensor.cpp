#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mbq/tensor.hpp"

using namespace mbq;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> data(static_cast<std::size_t>(rows) * cols);
    for (float& v : data) v = rng.uniform(lo, hi);
    return Matrix(rows, cols, std::move(data));
}

// Independent oracle: element-by-element triple loop, f64 accumulation in
// ascending k (the same summation order the contract pins down).
Matrix matmul_oracle(const Matrix& a, const Matrix& b) {
    std::vector<float> out(static_cast<std::size_t>(a.rows()) * b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols(); ++k)
                acc += static_cast<double>(a(i, k)) * static_cast<double>(b(k, j));
            out[static_cast<std::size_t>(i) * b.cols() + j] = static_cast<float>(acc);
        }
    return Matrix(a.rows(), b.cols(), std::move(out));
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("matrix constructor validates") {
    CHECK_THROWS_AS(Matrix(2, 2, {1.0f, 2.0f, 3.0f}), ShapeError);
    CHECK_THROWS_AS(Matrix(1, 2, {1.0f, std::nanf("")}), DomainError);
    CHECK_THROWS_AS(Matrix(1, 1, {INFINITY}), DomainError);
    const Matrix empty;
    CHECK(empty.rows() == 0);
}

TEST_CASE("matmul identity and scalar") {
    Rng rng(11);
    const Matrix m = random_matrix(rng, 3, 5);
    CHECK(bitwise_equal(matmul(Matrix::identity(3), m), m));

    const Matrix a(1, 1, {2.0f});
    const Matrix b(1, 1, {3.0f});
    CHECK(matmul(a, b)(0, 0) == 6.0f);
}

TEST_CASE("matmul matches triple-loop oracle exactly") {
    Rng rng(42);
    const Matrix a = random_matrix(rng, 5, 4);
    const Matrix b = random_matrix(rng, 4, 3);
    CHECK(bitwise_equal(matmul(a, b), matmul_oracle(a, b)));
}

TEST_CASE("matmul deterministic across worker counts") {
    Rng rng(7);
    const Matrix a = random_matrix(rng, 33, 17);
    const Matrix b = random_matrix(rng, 17, 9);
    const Matrix one = matmul(a, b, 1);
    CHECK(bitwise_equal(one, matmul(a, b, 2)));
    CHECK(bitwise_equal(one, matmul(a, b, 3)));
    CHECK(bitwise_equal(matmul_nt(a, transpose(b), 2), one));
}

TEST_CASE("matmul_nt equals matmul with transposed operand") {
    Rng rng(13);
    const Matrix a = random_matrix(rng, 6, 10);
    const Matrix b = random_matrix(rng, 8, 10);
    CHECK(bitwise_equal(matmul_nt(a, b), matmul(a, transpose(b))));
}

TEST_CASE("matmul shape error") {
    CHECK_THROWS_AS(matmul(Matrix::zeros(2, 3), Matrix::zeros(2, 3)), ShapeError);
}

TEST_CASE("scale_cols basics") {
    Rng rng(3);
    const Matrix m = random_matrix(rng, 4, 3);
    CHECK(bitwise_equal(scale_cols(m, {1.0f, 1.0f, 1.0f}), m));

    const Matrix ones = Matrix::filled(2, 2, 1.0f);
    const Matrix scaled = scale_cols(ones, {2.0f, 3.0f});
    CHECK(scaled(0, 0) == 2.0f);
    CHECK(scaled(0, 1) == 3.0f);
    CHECK(scaled(1, 0) == 2.0f);
    CHECK(scaled(1, 1) == 3.0f);

    CHECK_THROWS_AS(scale_cols(m, {1.0f, -2.0f, 1.0f}), DomainError);
    CHECK_THROWS_AS(scale_cols(m, {1.0f, 0.0f, 1.0f}), DomainError);
    CHECK_THROWS_AS(scale_cols(m, {1.0f, 1.0f}), ShapeError);
}

TEST_CASE("scale_cols round-trip within 1e-6 relative") {
    Rng rng(5);
    const Matrix m = random_matrix(rng, 6, 8);
    std::vector<float> f(8);
    for (float& v : f) v = rng.uniform(0.1f, 10.0f);
    std::vector<float> inv(8);
    for (int j = 0; j < 8; ++j) inv[j] = 1.0f / f[j];
    const Matrix round = scale_cols(scale_cols(m, f), inv);
    for (std::size_t i = 0; i < m.size(); ++i)
        CHECK(std::fabs(round.data()[i] - m.data()[i]) <= 1e-6f * std::max(1.0f, std::fabs(m.data()[i])));
}

TEST_CASE("split_by_tag basics") {
    Rng rng(9);
    const Matrix tokens = random_matrix(rng, 3, 4);

    SUBCASE("all language") {
        const ModalBatch b(tokens, {Modality::Language, Modality::Language, Modality::Language});
        const auto [vis, lang] = split_by_tag(b);
        CHECK(vis.rows() == 0);
        CHECK(bitwise_equal(lang, tokens));
    }
    SUBCASE("interleaved order preserved") {
        const ModalBatch b(tokens, {Modality::Vision, Modality::Language, Modality::Vision});
        const auto [vis, lang] = split_by_tag(b);
        REQUIRE(vis.rows() == 2);
        REQUIRE(lang.rows() == 1);
        for (int j = 0; j < 4; ++j) {
            CHECK(vis(0, j) == tokens(0, j));
            CHECK(vis(1, j) == tokens(2, j));
            CHECK(lang(0, j) == tokens(1, j));
        }
    }
}

TEST_CASE("split then interleave is the identity") {
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 1 + static_cast<int>(rng.next_below(12));
        const Matrix tokens = random_matrix(rng, n, 5);
        std::vector<Modality> tags(n);
        for (Modality& t : tags) t = rng.next_below(2) == 0 ? Modality::Vision : Modality::Language;
        const ModalBatch b(tokens, tags);
        const auto [vis, lang] = split_by_tag(b);
        const ModalBatch round = interleave_by_tag(vis, lang, tags);
        CHECK(bitwise_equal(round.tokens, tokens));
    }
}

TEST_CASE("modal batch tag count must match") {
    CHECK_THROWS_AS(ModalBatch(Matrix::zeros(2, 2), {Modality::Vision}), ShapeError);
}

TEST_CASE("rng determinism and children") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng parent1(42), parent2(42);
    Rng c0 = parent1.child(0);
    Rng c1 = parent1.child(1);
    CHECK(c0.next_u64() != c1.next_u64());
    Rng c0_again = parent2.child(0);
    Rng c0_ref = parent2.child(0);
    CHECK(c0_again.next_u64() == c0_ref.next_u64());

    Rng u(9);
    for (int i = 0; i < 1000; ++i) {
        const double d = u.next_double();
        CHECK(d >= 0.0);
        CHECK(d < 1.0);
    }
    CHECK_THROWS_AS(u.next_below(0), DomainError);
}

TEST_CASE("mbt1 round-trip") {
    Rng rng(31);
    const Matrix m = random_matrix(rng, 7, 5);
    const std::string path = (std::filesystem::temp_directory_path() / "mbq_test_tensor.mbt").string();

    SUBCASE("without tags") {
        save_mbt(path, m);
        const MbtTensor loaded = load_mbt(path);
        CHECK(bitwise_equal(loaded.matrix, m));
        CHECK(!loaded.tags.has_value());
    }
    SUBCASE("with tags") {
        std::vector<Modality> tags(7);
        for (int i = 0; i < 7; ++i) tags[i] = i % 2 == 0 ? Modality::Vision : Modality::Language;
        save_mbt(path, m, tags);
        const MbtTensor loaded = load_mbt(path);
        CHECK(bitwise_equal(loaded.matrix, m));
        REQUIRE(loaded.tags.has_value());
        CHECK(*loaded.tags == tags);
    }
    std::filesystem::remove(path);
}

TEST_CASE("mbt1 rejects malformed files") {
    const std::string path = (std::filesystem::temp_directory_path() / "mbq_bad.mbt").string();
    {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        std::fputs("NOTMAGIC\n{}\n", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_mbt(path), FormatError);
    CHECK_THROWS_AS(load_mbt(path + ".missing"), FormatError);
    std::filesystem::remove(path);
}

TEST_CASE("vstack and transpose") {
    Rng rng(17);
    const Matrix a = random_matrix(rng, 2, 3);
    const Matrix b = random_matrix(rng, 1, 3);
    const Matrix s = vstack({a, b});
    REQUIRE(s.rows() == 3);
    CHECK(s(2, 1) == b(0, 1));
    CHECK_THROWS_AS(vstack({a, Matrix::zeros(1, 2)}), ShapeError);

    const Matrix t = transpose(a);
    CHECK(t.rows() == 3);
    CHECK(t(2, 1) == a(1, 2));
}
