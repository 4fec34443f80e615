#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mbq/errors.hpp"

namespace mbq {

/// Dense row-major 2-D tensor of 32-bit floats.
///
/// Immutable after construction: every operation returns a new value, so
/// matrices are safe to share read-only across workers. Constructors reject
/// non-finite entries; reductions downstream rely on that.
class Matrix {
  public:
    Matrix() = default;  // 0x0
    Matrix(int rows, int cols, std::vector<float> data);

    static Matrix zeros(int rows, int cols);
    static Matrix filled(int rows, int cols, float value);
    static Matrix identity(int n);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    float operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
    const float* row(int i) const { return data_.data() + static_cast<std::size_t>(i) * cols_; }
    const std::vector<float>& data() const { return data_; }

    bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

  private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<float> data_;
};

enum class Modality : std::uint8_t { Vision = 0, Language = 1 };

/// Stacked token activations with a per-row modality tag.
struct ModalBatch {
    Matrix tokens;                // n_tokens x d_model
    std::vector<Modality> tags;   // one per row

    ModalBatch() = default;
    ModalBatch(Matrix tokens_, std::vector<Modality> tags_);

    int n_tokens() const { return tokens.rows(); }
    int n_vision() const;
    int n_language() const;
};

/// Small-state splitmix64 generator. Identical seed, identical stream.
/// Single-owner by convention; parallel work derives child generators
/// through child(worker_index).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double next_double();
    /// Uniform float in [lo, hi).
    float uniform(float lo, float hi);
    /// Uniform integer in [0, n). Requires n > 0.
    std::uint64_t next_below(std::uint64_t n);
    /// Standard normal via Box-Muller (pairs are cached).
    double next_normal();

    /// Deterministic child generator for worker `index`.
    Rng child(std::uint64_t index) const;

  private:
    std::uint64_t state_;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

// ---- Operations -----------------------------------------------------------

/// Standard product. Inner accumulation in 64-bit floats, summed in ascending
/// index order per output element, then narrowed to 32-bit; bitwise identical
/// across runs and worker counts.
Matrix matmul(const Matrix& a, const Matrix& b, int workers = 1);

Matrix transpose(const Matrix& m);

/// matmul(a, transpose(b)) without materializing the transpose; identical
/// summation order, so results are bitwise equal to the two-step form.
Matrix matmul_nt(const Matrix& a, const Matrix& b, int workers = 1);

Matrix add(const Matrix& a, const Matrix& b);

/// out[i][j] = m[i][j] * f[j]. All factors must be strictly positive.
Matrix scale_cols(const Matrix& m, const std::vector<float>& factors);

/// Stack matrices with identical column counts, top to bottom.
Matrix vstack(const std::vector<Matrix>& parts);

/// Row-select by tag, preserving original row order within each modality.
/// Returns (vision, language); either part may have zero rows.
std::pair<Matrix, Matrix> split_by_tag(const ModalBatch& b);

/// Inverse of split_by_tag under the original tag order.
ModalBatch interleave_by_tag(const Matrix& vision, const Matrix& language, const std::vector<Modality>& tags);

// ---- MBT1 tensor file format ----------------------------------------------
// ASCII magic line "MBTENS1", one JSON metadata line {"shape":[r,c],"tags":[...]}
// (tags optional, 0 = vision / 1 = language, length r), then a raw
// little-endian f32 payload of r*c values.

void save_mbt(const std::string& path, const Matrix& m,
              const std::optional<std::vector<Modality>>& tags = std::nullopt);

struct MbtTensor {
    Matrix matrix;
    std::optional<std::vector<Modality>> tags;
};

MbtTensor load_mbt(const std::string& path);

}  // namespace mbq
