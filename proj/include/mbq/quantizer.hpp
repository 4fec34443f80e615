#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mbq/tensor.hpp"

namespace mbq {

enum class QuantMode : std::uint8_t { Asymmetric, Symmetric };

enum class Granularity : std::uint8_t { PerGroup, PerOutputChannel, PerToken };

/// Declarative description of a uniform integer quantization scheme.
/// Asymmetric pairs only with PerGroup; Symmetric pairs with
/// PerOutputChannel (weight rows) or PerToken (activation rows).
struct QuantSpec {
    int bits = 4;  // one of {3, 4, 8}
    QuantMode mode = QuantMode::Asymmetric;
    Granularity granularity = Granularity::PerGroup;
    int group_size = 128;

    void validate() const;

    static QuantSpec asym_group(int bits, int group_size = 128);
    static QuantSpec sym_per_channel(int bits);
    static QuantSpec sym_per_token(int bits);
};

std::string to_string(QuantMode m);
std::string to_string(Granularity g);
QuantMode quant_mode_from_string(const std::string& s);
Granularity granularity_from_string(const std::string& s);

/// Integer codes plus per-group/per-channel/per-token scales and zero points.
/// Codes are signed for Symmetric and unsigned for Asymmetric; both fit in
/// int32 storage. zeros is empty for Symmetric.
struct QuantizedTensor {
    std::vector<std::int32_t> codes;  // row-major, rows*cols
    std::vector<float> scales;        // one per group (asym) or per row (sym)
    std::vector<float> zeros;         // one per group, asymmetric only
    QuantSpec spec;
    int rows = 0;
    int cols = 0;

    int groups_per_row() const;
};

/// round(x) = sign(x) * floor(|x| + 0.5); clamping happens after rounding.
std::int32_t round_half_away(double x);

/// Group-wise asymmetric quantization along the input-channel (column)
/// direction within each row: Z = min, S = (max - Z) / (2^N - 1).
/// A constant group degenerates to S = 1 with all codes 0 (dequant = Z).
QuantizedTensor quantize_asym_group(const Matrix& w, const QuantSpec& spec);

/// Row-wise symmetric quantization: S = absmax / (2^(N-1) - 1), codes in
/// [-(2^(N-1)-1), 2^(N-1)-1]. An all-zero row degenerates to S = 1, codes 0.
/// PerOutputChannel quantizes weight rows; PerToken quantizes activation rows.
QuantizedTensor quantize_sym(const Matrix& m, const QuantSpec& spec);

Matrix dequantize(const QuantizedTensor& q);

/// Quantize-then-dequantize; idempotent under a fixed spec.
Matrix fake_quant(const Matrix& m, const QuantSpec& spec);

}  // namespace mbq
