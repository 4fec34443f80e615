#include "mbq/pack.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace mbq {

std::vector<std::uint8_t> pack_w3(const std::vector<std::uint8_t>& codes) {
    if (codes.size() % 8 != 0) throw ShapeError("pack_w3: length must be a multiple of 8");
    std::vector<std::uint8_t> out;
    out.reserve(codes.size() / 8 * 3);
    for (std::size_t base = 0; base < codes.size(); base += 8) {
        std::uint32_t word = 0;
        for (int i = 0; i < 8; ++i) {
            const std::uint8_t c = codes[base + i];
            if (c >= 8) throw DomainError("pack_w3: code out of range");
            word |= static_cast<std::uint32_t>(c) << (3 * i);
        }
        out.push_back(static_cast<std::uint8_t>(word & 0xFF));
        out.push_back(static_cast<std::uint8_t>((word >> 8) & 0xFF));
        out.push_back(static_cast<std::uint8_t>((word >> 16) & 0xFF));
    }
    return out;
}

std::vector<std::uint8_t> unpack_w3(const std::vector<std::uint8_t>& bytes, std::size_t logical_len) {
    const std::size_t chunks = (logical_len + 7) / 8;
    if (bytes.size() != chunks * 3) throw FormatError("unpack_w3: byte length mismatch");
    std::vector<std::uint8_t> out(logical_len);
    for (std::size_t ch = 0; ch < chunks; ++ch) {
        const std::uint32_t word = static_cast<std::uint32_t>(bytes[ch * 3]) |
                                   (static_cast<std::uint32_t>(bytes[ch * 3 + 1]) << 8) |
                                   (static_cast<std::uint32_t>(bytes[ch * 3 + 2]) << 16);
        const std::size_t n = std::min<std::size_t>(8, logical_len - ch * 8);
        for (std::size_t i = 0; i < n; ++i) out[ch * 8 + i] = (word >> (3 * i)) & 0x7;
    }
    return out;
}

std::vector<std::uint8_t> pack_w4(const std::vector<std::uint8_t>& codes) {
    if (codes.size() % 2 != 0) throw ShapeError("pack_w4: length must be a multiple of 2");
    std::vector<std::uint8_t> out;
    out.reserve(codes.size() / 2);
    for (std::size_t i = 0; i < codes.size(); i += 2) {
        if (codes[i] >= 16 || codes[i + 1] >= 16) throw DomainError("pack_w4: code out of range");
        out.push_back(static_cast<std::uint8_t>(codes[i] | (codes[i + 1] << 4)));
    }
    return out;
}

std::vector<std::uint8_t> unpack_w4(const std::vector<std::uint8_t>& bytes, std::size_t logical_len) {
    if (bytes.size() != (logical_len + 1) / 2) throw FormatError("unpack_w4: byte length mismatch");
    std::vector<std::uint8_t> out(logical_len);
    for (std::size_t i = 0; i < logical_len; ++i) {
        const std::uint8_t b = bytes[i / 2];
        out[i] = (i % 2 == 0) ? (b & 0xF) : (b >> 4);
    }
    return out;
}

PackedW3 pack_w3_tensor(const QuantizedTensor& q) {
    if (q.spec.bits != 3 || q.spec.mode != QuantMode::Asymmetric)
        throw ConfigError("pack_w3_tensor: expects 3-bit asymmetric per-group codes");
    PackedW3 p;
    p.rows = q.rows;
    p.cols = q.cols;
    p.group_size = q.spec.group_size;
    p.scales = q.scales;
    p.zeros = q.zeros;
    p.bytes.reserve(static_cast<std::size_t>(q.rows) * p.bytes_per_row());
    std::vector<std::uint8_t> row(p.padded_cols(), 0);
    for (int i = 0; i < q.rows; ++i) {
        for (int j = 0; j < q.cols; ++j) {
            const std::int32_t c = q.codes[static_cast<std::size_t>(i) * q.cols + j];
            if (c < 0 || c >= 8) throw DomainError("pack_w3_tensor: code out of range");
            row[j] = static_cast<std::uint8_t>(c);
        }
        for (int j = q.cols; j < p.padded_cols(); ++j) row[j] = 0;
        const std::vector<std::uint8_t> packed = pack_w3(row);
        p.bytes.insert(p.bytes.end(), packed.begin(), packed.end());
    }
    return p;
}

QuantizedTensor unpack_w3_tensor(const PackedW3& p) {
    QuantizedTensor q;
    q.spec = QuantSpec::asym_group(3, p.group_size);
    q.rows = p.rows;
    q.cols = p.cols;
    q.scales = p.scales;
    q.zeros = p.zeros;
    q.codes.resize(static_cast<std::size_t>(p.rows) * p.cols);
    for (int i = 0; i < p.rows; ++i) {
        const std::vector<std::uint8_t> row_bytes(p.bytes.begin() + static_cast<std::ptrdiff_t>(i * p.bytes_per_row()),
                                                  p.bytes.begin() + static_cast<std::ptrdiff_t>((i + 1) * p.bytes_per_row()));
        const std::vector<std::uint8_t> codes = unpack_w3(row_bytes, p.cols);
        for (int j = 0; j < p.cols; ++j) q.codes[static_cast<std::size_t>(i) * p.cols + j] = codes[j];
    }
    return q;
}

Matrix dequantize(const PackedW3& p) { return dequantize(unpack_w3_tensor(p)); }

std::vector<float> gemv_ref(const Matrix& w, const std::vector<float>& x) {
    if (static_cast<int>(x.size()) != w.cols()) throw ShapeError("gemv_ref: length mismatch");
    std::vector<float> y(w.rows());
    for (int i = 0; i < w.rows(); ++i) {
        const float* row = w.row(i);
        double acc = 0.0;
        for (int j = 0; j < w.cols(); ++j) acc += static_cast<double>(row[j]) * static_cast<double>(x[j]);
        y[i] = static_cast<float>(acc);
    }
    return y;
}

namespace {

void gemv_w3_rows(const PackedW3& p, const float* x, float* y, int row_begin, int row_end) {
    const int gs = p.group_size;
    const int n_groups = p.groups_per_row();
    for (int i = row_begin; i < row_end; ++i) {
        const std::uint8_t* bytes = p.bytes.data() + static_cast<std::size_t>(i) * p.bytes_per_row();
        const float* scales = p.scales.data() + static_cast<std::size_t>(i) * n_groups;
        const float* zeros = p.zeros.data() + static_cast<std::size_t>(i) * n_groups;
        double row_acc = 0.0;
        int j = 0;
        for (int g = 0; g < n_groups; ++g) {
            const float s = scales[g];
            const float z = zeros[g];
            double group_acc = 0.0;
            const int group_end = std::min((g + 1) * gs, p.cols);
            while (j < group_end) {
                // one 24-bit chunk = eight codes; pad codes past cols are never read
                const std::size_t ch = static_cast<std::size_t>(j) / 8;
                const std::uint32_t word = static_cast<std::uint32_t>(bytes[ch * 3]) |
                                           (static_cast<std::uint32_t>(bytes[ch * 3 + 1]) << 8) |
                                           (static_cast<std::uint32_t>(bytes[ch * 3 + 2]) << 16);
                const int in_chunk = j % 8;
                const int n = std::min({8 - in_chunk, group_end - j});
                for (int t = 0; t < n; ++t) {
                    const float wv = static_cast<float>((word >> (3 * (in_chunk + t))) & 0x7) * s + z;
                    group_acc += static_cast<double>(wv) * static_cast<double>(x[j + t]);
                }
                j += n;
            }
            row_acc += group_acc;
        }
        y[i] = static_cast<float>(row_acc);
    }
}

}  // namespace

std::vector<float> gemv_w3_fused(const PackedW3& p, const std::vector<float>& x, int workers) {
    if (static_cast<int>(x.size()) != p.cols) throw ShapeError("gemv_w3_fused: length mismatch");
    std::vector<float> y(p.rows);
    if (workers <= 1 || p.rows < 2 * workers) {
        gemv_w3_rows(p, x.data(), y.data(), 0, p.rows);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (p.rows + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            const int lo = w * chunk;
            const int hi = std::min(p.rows, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back([&, lo, hi] { gemv_w3_rows(p, x.data(), y.data(), lo, hi); });
        }
        for (auto& t : pool) t.join();
    }
    return y;
}

namespace {

constexpr char kBlobMagic[] = "MBQPACK1";

void append_f32_le(std::vector<std::uint8_t>& out, const std::vector<float>& vals) {
    for (float v : vals) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        out.push_back(static_cast<std::uint8_t>(bits & 0xFF));
        out.push_back(static_cast<std::uint8_t>((bits >> 8) & 0xFF));
        out.push_back(static_cast<std::uint8_t>((bits >> 16) & 0xFF));
        out.push_back(static_cast<std::uint8_t>((bits >> 24) & 0xFF));
    }
}

std::vector<float> read_f32_le(const std::uint8_t* p, std::size_t count) {
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(p[i * 4]) | (static_cast<std::uint32_t>(p[i * 4 + 1]) << 8) |
                                   (static_cast<std::uint32_t>(p[i * 4 + 2]) << 16) |
                                   (static_cast<std::uint32_t>(p[i * 4 + 3]) << 24);
        std::memcpy(&out[i], &bits, 4);
    }
    return out;
}

int padded_cols_for_bits(int cols, int bits) {
    if (bits == 3) return (cols + 7) / 8 * 8;
    if (bits == 4) return (cols + 1) / 2 * 2;
    return cols;
}

std::size_t code_bytes_per_row(int cols, int bits) {
    const int padded = padded_cols_for_bits(cols, bits);
    if (bits == 3) return static_cast<std::size_t>(padded) / 8 * 3;
    if (bits == 4) return static_cast<std::size_t>(padded) / 2;
    return static_cast<std::size_t>(padded);
}

// Symmetric codes are stored offset-binary: stored = code + (2^(bits-1) - 1).
std::int32_t sym_offset(int bits) { return (1 << (bits - 1)) - 1; }

std::vector<std::uint8_t> encode_code_rows(const QuantizedTensor& q) {
    const int offset = q.spec.mode == QuantMode::Symmetric ? sym_offset(q.spec.bits) : 0;
    const int padded = padded_cols_for_bits(q.cols, q.spec.bits);
    std::vector<std::uint8_t> out;
    out.reserve(static_cast<std::size_t>(q.rows) * code_bytes_per_row(q.cols, q.spec.bits));
    std::vector<std::uint8_t> row(padded, 0);
    for (int i = 0; i < q.rows; ++i) {
        for (int j = 0; j < q.cols; ++j) {
            const std::int32_t c = q.codes[static_cast<std::size_t>(i) * q.cols + j] + offset;
            if (c < 0 || c > 255) throw DomainError("packed blob: code out of storable range");
            row[j] = static_cast<std::uint8_t>(c);
        }
        for (int j = q.cols; j < padded; ++j) row[j] = 0;
        if (q.spec.bits == 3) {
            const auto packed = pack_w3(row);
            out.insert(out.end(), packed.begin(), packed.end());
        } else if (q.spec.bits == 4) {
            const auto packed = pack_w4(row);
            out.insert(out.end(), packed.begin(), packed.end());
        } else {
            out.insert(out.end(), row.begin(), row.end());
        }
    }
    return out;
}

}  // namespace

std::size_t packed_payload_bytes(const QuantizedTensor& q) {
    return static_cast<std::size_t>(q.rows) * code_bytes_per_row(q.cols, q.spec.bits) + q.scales.size() * 4 +
           q.zeros.size() * 4;
}

void save_packed_blob(const std::string& path, const QuantizedTensor& q) {
    nlohmann::json header;
    header["rows"] = q.rows;
    header["cols"] = padded_cols_for_bits(q.cols, q.spec.bits);
    header["logical_cols"] = q.cols;
    header["group_size"] = q.spec.granularity == Granularity::PerGroup ? q.spec.group_size : 0;
    header["bits"] = q.spec.bits;
    header["mode"] = to_string(q.spec.mode);

    std::vector<std::uint8_t> payload = encode_code_rows(q);
    append_f32_le(payload, q.scales);
    append_f32_le(payload, q.zeros);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("save_packed_blob: cannot open " + path);
    f << kBlobMagic << "\n" << header.dump() << "\n";
    f.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!f) throw FormatError("save_packed_blob: write failed for " + path);
}

QuantizedTensor load_packed_blob(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("load_packed_blob: cannot open " + path);
    std::string magic, header_line;
    if (!std::getline(f, magic) || magic != kBlobMagic) throw FormatError("load_packed_blob: bad magic in " + path);
    if (!std::getline(f, header_line)) throw FormatError("load_packed_blob: missing header in " + path);
    nlohmann::json header = nlohmann::json::parse(header_line, nullptr, false);
    if (header.is_discarded()) throw FormatError("load_packed_blob: bad header in " + path);

    QuantizedTensor q;
    q.rows = header.at("rows").get<int>();
    q.cols = header.at("logical_cols").get<int>();
    const int bits = header.at("bits").get<int>();
    const QuantMode mode = quant_mode_from_string(header.at("mode").get<std::string>());
    const int group_size = header.at("group_size").get<int>();
    if (mode == QuantMode::Asymmetric) {
        q.spec = QuantSpec::asym_group(bits, group_size);
    } else {
        q.spec = QuantSpec::sym_per_channel(bits);
    }

    const std::size_t n_scales = static_cast<std::size_t>(q.rows) *
                                 (mode == QuantMode::Asymmetric ? static_cast<std::size_t>(q.cols / group_size) : 1);
    const std::size_t n_zeros = mode == QuantMode::Asymmetric ? n_scales : 0;
    const std::size_t codes_size = static_cast<std::size_t>(q.rows) * code_bytes_per_row(q.cols, bits);

    std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (payload.size() != codes_size + (n_scales + n_zeros) * 4)
        throw FormatError("load_packed_blob: payload size mismatch in " + path);

    const int offset = mode == QuantMode::Symmetric ? sym_offset(bits) : 0;
    const std::size_t per_row = code_bytes_per_row(q.cols, bits);
    q.codes.resize(static_cast<std::size_t>(q.rows) * q.cols);
    for (int i = 0; i < q.rows; ++i) {
        const std::vector<std::uint8_t> row_bytes(payload.begin() + static_cast<std::ptrdiff_t>(i * per_row),
                                                  payload.begin() + static_cast<std::ptrdiff_t>((i + 1) * per_row));
        std::vector<std::uint8_t> codes;
        if (bits == 3) {
            codes = unpack_w3(row_bytes, q.cols);
        } else if (bits == 4) {
            codes = unpack_w4(row_bytes, q.cols);
        } else {
            codes.assign(row_bytes.begin(), row_bytes.begin() + q.cols);
        }
        for (int j = 0; j < q.cols; ++j)
            q.codes[static_cast<std::size_t>(i) * q.cols + j] = static_cast<std::int32_t>(codes[j]) - offset;
    }
    q.scales = read_f32_le(payload.data() + codes_size, n_scales);
    q.zeros = read_f32_le(payload.data() + codes_size + n_scales * 4, n_zeros);
    return q;
}

}  // namespace mbq
