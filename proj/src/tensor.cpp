#include "mbq/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace mbq {

Matrix::Matrix(int rows, int cols, std::vector<float> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows < 0 || cols < 0) throw ShapeError("Matrix: negative dimension");
    if (data_.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
        throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " + std::to_string(rows) +
                         "x" + std::to_string(cols));
    for (float v : data_)
        if (!std::isfinite(v)) throw DomainError("Matrix: non-finite entry");
}

Matrix Matrix::zeros(int rows, int cols) {
    return Matrix(rows, cols, std::vector<float>(static_cast<std::size_t>(rows) * cols, 0.0f));
}

Matrix Matrix::filled(int rows, int cols, float value) {
    return Matrix(rows, cols, std::vector<float>(static_cast<std::size_t>(rows) * cols, value));
}

Matrix Matrix::identity(int n) {
    std::vector<float> d(static_cast<std::size_t>(n) * n, 0.0f);
    for (int i = 0; i < n; ++i) d[static_cast<std::size_t>(i) * n + i] = 1.0f;
    return Matrix(n, n, std::move(d));
}

ModalBatch::ModalBatch(Matrix tokens_, std::vector<Modality> tags_) : tokens(std::move(tokens_)), tags(std::move(tags_)) {
    if (static_cast<int>(tags.size()) != tokens.rows())
        throw ShapeError("ModalBatch: tag count != token rows");
}

int ModalBatch::n_vision() const {
    int n = 0;
    for (Modality t : tags) n += (t == Modality::Vision);
    return n;
}

int ModalBatch::n_language() const { return n_tokens() - n_vision(); }

std::uint64_t Rng::next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

float Rng::uniform(float lo, float hi) { return lo + static_cast<float>(next_double()) * (hi - lo); }

std::uint64_t Rng::next_below(std::uint64_t n) {
    if (n == 0) throw DomainError("Rng::next_below: n == 0");
    return next_u64() % n;
}

double Rng::next_normal() {
    if (have_cached_) {
        have_cached_ = false;
        return cached_;
    }
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
}

Rng Rng::child(std::uint64_t index) const {
    Rng probe(state_ ^ (0xA0761D6478BD642FULL * (index + 1)));
    return Rng(probe.next_u64());
}

namespace {

// Per output element, the k-sum is accumulated in one f64 in ascending k,
// regardless of which worker owns the row.
void matmul_rows(const Matrix& a, const Matrix& b, std::vector<float>& out, int row_begin, int row_end) {
    const int k_dim = a.cols();
    const int m = b.cols();
    std::vector<double> acc(static_cast<std::size_t>(m));
    for (int i = row_begin; i < row_end; ++i) {
        for (int j = 0; j < m; ++j) acc[j] = 0.0;
        const float* arow = a.row(i);
        for (int k = 0; k < k_dim; ++k) {
            const double av = arow[k];
            const float* brow = b.row(k);
            for (int j = 0; j < m; ++j) acc[j] += av * static_cast<double>(brow[j]);
        }
        float* orow = out.data() + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) orow[j] = static_cast<float>(acc[j]);
    }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b, int workers) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
    std::vector<float> out(static_cast<std::size_t>(a.rows()) * b.cols());
    if (workers <= 1 || a.rows() < 2 * workers) {
        matmul_rows(a, b, out, 0, a.rows());
    } else {
        std::vector<std::thread> pool;
        const int n = a.rows();
        const int chunk = (n + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            const int lo = w * chunk;
            const int hi = std::min(n, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back([&, lo, hi] { matmul_rows(a, b, out, lo, hi); });
        }
        for (auto& t : pool) t.join();
    }
    return Matrix(a.rows(), b.cols(), std::move(out));
}

namespace {

void matmul_nt_rows(const Matrix& a, const Matrix& b, std::vector<float>& out, int row_begin, int row_end) {
    const int k_dim = a.cols();
    const int m = b.rows();
    for (int i = row_begin; i < row_end; ++i) {
        const float* arow = a.row(i);
        float* orow = out.data() + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const float* brow = b.row(j);
            double acc = 0.0;
            for (int k = 0; k < k_dim; ++k) acc += static_cast<double>(arow[k]) * static_cast<double>(brow[k]);
            orow[j] = static_cast<float>(acc);
        }
    }
}

}  // namespace

Matrix matmul_nt(const Matrix& a, const Matrix& b, int workers) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dimensions " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
    std::vector<float> out(static_cast<std::size_t>(a.rows()) * b.rows());
    if (workers <= 1 || a.rows() < 2 * workers) {
        matmul_nt_rows(a, b, out, 0, a.rows());
    } else {
        std::vector<std::thread> pool;
        const int n = a.rows();
        const int chunk = (n + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            const int lo = w * chunk;
            const int hi = std::min(n, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back([&, lo, hi] { matmul_nt_rows(a, b, out, lo, hi); });
        }
        for (auto& t : pool) t.join();
    }
    return Matrix(a.rows(), b.rows(), std::move(out));
}

Matrix transpose(const Matrix& m) {
    std::vector<float> out(m.size());
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(j) * m.rows() + i] = m(i, j);
    return Matrix(m.cols(), m.rows(), std::move(out));
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
    std::vector<float> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Matrix(a.rows(), a.cols(), std::move(out));
}

Matrix scale_cols(const Matrix& m, const std::vector<float>& factors) {
    if (static_cast<int>(factors.size()) != m.cols()) throw ShapeError("scale_cols: factor count != cols");
    for (float f : factors)
        if (!(f > 0.0f) || !std::isfinite(f)) throw DomainError("scale_cols: nonpositive factor");
    std::vector<float> out(m.size());
    for (int i = 0; i < m.rows(); ++i) {
        const float* src = m.row(i);
        float* dst = out.data() + static_cast<std::size_t>(i) * m.cols();
        for (int j = 0; j < m.cols(); ++j) dst[j] = src[j] * factors[j];
    }
    return Matrix(m.rows(), m.cols(), std::move(out));
}

Matrix vstack(const std::vector<Matrix>& parts) {
    if (parts.empty()) return Matrix();
    const int cols = parts.front().cols();
    int rows = 0;
    for (const Matrix& p : parts) {
        if (p.cols() != cols) throw ShapeError("vstack: column mismatch");
        rows += p.rows();
    }
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(rows) * cols);
    for (const Matrix& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return Matrix(rows, cols, std::move(out));
}

std::pair<Matrix, Matrix> split_by_tag(const ModalBatch& b) {
    const int cols = b.tokens.cols();
    std::vector<float> vis, lang;
    int nv = 0, nl = 0;
    for (int i = 0; i < b.tokens.rows(); ++i) {
        const float* r = b.tokens.row(i);
        if (b.tags[i] == Modality::Vision) {
            vis.insert(vis.end(), r, r + cols);
            ++nv;
        } else {
            lang.insert(lang.end(), r, r + cols);
            ++nl;
        }
    }
    return {Matrix(nv, cols, std::move(vis)), Matrix(nl, cols, std::move(lang))};
}

ModalBatch interleave_by_tag(const Matrix& vision, const Matrix& language, const std::vector<Modality>& tags) {
    const int cols = vision.rows() > 0 ? vision.cols() : language.cols();
    if (vision.rows() > 0 && language.rows() > 0 && vision.cols() != language.cols())
        throw ShapeError("interleave_by_tag: column mismatch");
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(tags.size()) * cols);
    int iv = 0, il = 0;
    for (Modality t : tags) {
        const Matrix& src = (t == Modality::Vision) ? vision : language;
        int& idx = (t == Modality::Vision) ? iv : il;
        if (idx >= src.rows()) throw ShapeError("interleave_by_tag: not enough rows for tags");
        const float* r = src.row(idx++);
        out.insert(out.end(), r, r + cols);
    }
    if (iv != vision.rows() || il != language.rows()) throw ShapeError("interleave_by_tag: leftover rows");
    return ModalBatch(Matrix(static_cast<int>(tags.size()), cols, std::move(out)), tags);
}

namespace {

constexpr char kMbtMagic[] = "MBTENS1";

void put_f32_le(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    out.push_back(static_cast<char>(bits & 0xFF));
    out.push_back(static_cast<char>((bits >> 8) & 0xFF));
    out.push_back(static_cast<char>((bits >> 16) & 0xFF));
    out.push_back(static_cast<char>((bits >> 24) & 0xFF));
}

float get_f32_le(const unsigned char* p) {
    const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void save_mbt(const std::string& path, const Matrix& m, const std::optional<std::vector<Modality>>& tags) {
    nlohmann::json meta;
    meta["shape"] = {m.rows(), m.cols()};
    if (tags) {
        if (static_cast<int>(tags->size()) != m.rows()) throw ShapeError("save_mbt: tag count != rows");
        std::vector<int> t;
        t.reserve(tags->size());
        for (Modality mod : *tags) t.push_back(mod == Modality::Vision ? 0 : 1);
        meta["tags"] = t;
    }
    std::string payload;
    payload.reserve(m.size() * 4);
    for (float v : m.data()) put_f32_le(payload, v);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("save_mbt: cannot open " + path);
    f << kMbtMagic << "\n" << meta.dump() << "\n" << payload;
    if (!f) throw FormatError("save_mbt: write failed for " + path);
}

MbtTensor load_mbt(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("load_mbt: cannot open " + path);
    std::string magic, meta_line;
    if (!std::getline(f, magic) || magic != kMbtMagic) throw FormatError("load_mbt: bad magic in " + path);
    if (!std::getline(f, meta_line)) throw FormatError("load_mbt: missing metadata in " + path);
    nlohmann::json meta = nlohmann::json::parse(meta_line, nullptr, false);
    if (meta.is_discarded() || !meta.contains("shape")) throw FormatError("load_mbt: bad metadata in " + path);
    const int rows = meta["shape"].at(0).get<int>();
    const int cols = meta["shape"].at(1).get<int>();
    const std::size_t n = static_cast<std::size_t>(rows) * cols;

    std::string payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (payload.size() != n * 4) throw FormatError("load_mbt: payload size mismatch in " + path);
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i)
        data[i] = get_f32_le(reinterpret_cast<const unsigned char*>(payload.data()) + i * 4);

    MbtTensor out{Matrix(rows, cols, std::move(data)), std::nullopt};
    if (meta.contains("tags")) {
        std::vector<Modality> tags;
        for (const auto& t : meta["tags"]) tags.push_back(t.get<int>() == 0 ? Modality::Vision : Modality::Language);
        if (static_cast<int>(tags.size()) != rows) throw FormatError("load_mbt: tag count != rows in " + path);
        out.tags = std::move(tags);
    }
    return out;
}

}  // namespace mbq
