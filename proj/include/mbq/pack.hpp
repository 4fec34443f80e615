#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mbq/quantizer.hpp"
#include "mbq/tensor.hpp"

namespace mbq {

// ---- 3-bit / 4-bit code streams ---------------------------------------
// W3 layout: each chunk of eight 3-bit codes forms one 24-bit little-endian
// value (code i occupies bits [3i, 3i+3)), stored as three bytes.
// W4 layout: two codes per byte, low nibble first.

/// codes.size() must be a multiple of 8; every code < 8.
std::vector<std::uint8_t> pack_w3(const std::vector<std::uint8_t>& codes);

/// Exact inverse of pack_w3 on the logical prefix.
/// bytes.size() must equal ceil(logical_len / 8) * 3.
std::vector<std::uint8_t> unpack_w3(const std::vector<std::uint8_t>& bytes, std::size_t logical_len);

/// codes.size() must be a multiple of 2; every code < 16.
std::vector<std::uint8_t> pack_w4(const std::vector<std::uint8_t>& codes);

std::vector<std::uint8_t> unpack_w4(const std::vector<std::uint8_t>& bytes, std::size_t logical_len);

// ---- Packed 3-bit weight matrix ----------------------------------------

/// Row-major packed 3-bit weight codes with per-group asymmetric
/// (scale, zero) metadata. Rows are padded independently to a multiple of
/// eight codes with code 0; `cols` is the logical column count.
struct PackedW3 {
    int rows = 0;
    int cols = 0;        // logical columns
    int group_size = 0;  // divides cols
    std::vector<std::uint8_t> bytes;  // rows * padded_cols() * 3/8
    std::vector<float> scales;        // rows * (cols / group_size)
    std::vector<float> zeros;         // same count as scales

    int padded_cols() const { return (cols + 7) / 8 * 8; }
    std::size_t bytes_per_row() const { return static_cast<std::size_t>(padded_cols()) / 8 * 3; }
    int groups_per_row() const { return cols / group_size; }
};

/// Pack a 3-bit asymmetric per-group QuantizedTensor.
PackedW3 pack_w3_tensor(const QuantizedTensor& q);

/// Recover the full QuantizedTensor (codes, scales, zeros).
QuantizedTensor unpack_w3_tensor(const PackedW3& p);

/// Materialize the dequantized weights (code*S + Z per element).
Matrix dequantize(const PackedW3& p);

// ---- GEMV paths -----------------------------------------------------------

/// y_i = sum_j w[i][j] * x[j], f64 accumulation in ascending j.
std::vector<float> gemv_ref(const Matrix& w, const std::vector<float>& x);

/// Streams packed bytes once, dequantizing codes to f32 in registers and
/// accumulating per group into a group-local f64, then into the row total.
/// Never materializes the full-precision weight matrix. Matches
/// gemv_ref(dequantize(p), x) within max-abs 1e-4 * (1 + |y|_inf).
std::vector<float> gemv_w3_fused(const PackedW3& p, const std::vector<float>& x, int workers = 1);

// ---- Packed weight blob (checkpoint entry) ---------------------------------
// ASCII magic line "MBQPACK1", one JSON header line
// {"rows","cols","logical_cols","group_size","bits","mode"}, then per-row
// packed code bytes (3-bit / 4-bit streams; one byte per code for 8-bit;
// symmetric codes are stored offset by +(2^(bits-1)-1)), then scales as
// little-endian f32 row-major per group, then zeros (asymmetric only).

void save_packed_blob(const std::string& path, const QuantizedTensor& q);
QuantizedTensor load_packed_blob(const std::string& path);

/// Serialized byte size of a blob's payload sections (codes + scales + zeros),
/// excluding the ASCII header.
std::size_t packed_payload_bytes(const QuantizedTensor& q);

}  // namespace mbq
