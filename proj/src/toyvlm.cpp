#include "mbq/toyvlm.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mbq/parallel.hpp"

namespace mbq {

namespace {

constexpr double kNormEps = 1e-6;
constexpr int kSepToken = 0;

Matrix emap(const Matrix& m, float (*fn)(float)) {
    std::vector<float> out(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = fn(m.data()[i]);
    return Matrix(m.rows(), m.cols(), std::move(out));
}

float gelu_f(float x) {
    const double xd = x;
    return static_cast<float>(xd * 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0))));
}

float gelu_grad_f(float x) {
    const double xd = x;
    const double phi_cdf = 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0)));
    const double phi_pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
    return static_cast<float>(phi_cdf + xd * phi_pdf);
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    std::vector<float> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Matrix(a.rows(), a.cols(), std::move(out));
}

Matrix escale(const Matrix& m, float c) {
    std::vector<float> out(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = m.data()[i] * c;
    return Matrix(m.rows(), m.cols(), std::move(out));
}

struct NormPass {
    Matrix normed;
    std::vector<double> inv;  // per-row 1/sqrt(mean(x^2) + eps)
};

NormPass rmsnorm_fwd(const Matrix& x, const Matrix& gamma) {
    const int d = x.cols();
    std::vector<float> out(x.size());
    std::vector<double> inv(x.rows());
    for (int i = 0; i < x.rows(); ++i) {
        const float* row = x.row(i);
        double ms = 0.0;
        for (int j = 0; j < d; ++j) ms += static_cast<double>(row[j]) * static_cast<double>(row[j]);
        ms /= d;
        inv[i] = 1.0 / std::sqrt(ms + kNormEps);
        float* orow = out.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j)
            orow[j] = static_cast<float>(static_cast<double>(row[j]) * inv[i] * static_cast<double>(gamma(0, j)));
    }
    return {Matrix(x.rows(), d, std::move(out)), std::move(inv)};
}

struct NormGrad {
    Matrix dx;
    Matrix dgamma;  // 1 x d
};

NormGrad rmsnorm_bwd(const Matrix& dy, const Matrix& x, const Matrix& gamma, const std::vector<double>& inv) {
    const int d = x.cols();
    std::vector<float> dx(x.size());
    std::vector<double> dg(d, 0.0);
    for (int i = 0; i < x.rows(); ++i) {
        const float* xr = x.row(i);
        const float* dyr = dy.row(i);
        const double r = inv[i];
        double dot = 0.0;
        for (int j = 0; j < d; ++j)
            dot += static_cast<double>(dyr[j]) * static_cast<double>(gamma(0, j)) * static_cast<double>(xr[j]);
        float* dxr = dx.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            const double g = gamma(0, j);
            dxr[j] = static_cast<float>(r * g * dyr[j] - r * r * r * static_cast<double>(xr[j]) * dot / d);
            dg[j] += static_cast<double>(dyr[j]) * static_cast<double>(xr[j]) * r;
        }
    }
    std::vector<float> dgf(d);
    for (int j = 0; j < d; ++j) dgf[j] = static_cast<float>(dg[j]);
    return {Matrix(x.rows(), d, std::move(dx)), Matrix(1, d, std::move(dgf))};
}

Matrix causal_softmax(const Matrix& scores) {
    const int t = scores.rows();
    std::vector<float> out(static_cast<std::size_t>(t) * t, 0.0f);
    for (int i = 0; i < t; ++i) {
        const float* srow = scores.row(i);
        double mx = srow[0];
        for (int j = 1; j <= i; ++j) mx = std::max(mx, static_cast<double>(srow[j]));
        double denom = 0.0;
        for (int j = 0; j <= i; ++j) denom += std::exp(static_cast<double>(srow[j]) - mx);
        float* orow = out.data() + static_cast<std::size_t>(i) * t;
        for (int j = 0; j <= i; ++j)
            orow[j] = static_cast<float>(std::exp(static_cast<double>(srow[j]) - mx) / denom);
    }
    return Matrix(t, t, std::move(out));
}

Matrix causal_softmax_bwd(const Matrix& probs, const Matrix& dprobs) {
    const int t = probs.rows();
    std::vector<float> out(static_cast<std::size_t>(t) * t, 0.0f);
    for (int i = 0; i < t; ++i) {
        const float* pr = probs.row(i);
        const float* dp = dprobs.row(i);
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) dot += static_cast<double>(dp[j]) * static_cast<double>(pr[j]);
        float* orow = out.data() + static_cast<std::size_t>(i) * t;
        for (int j = 0; j <= i; ++j)
            orow[j] = static_cast<float>(static_cast<double>(pr[j]) * (static_cast<double>(dp[j]) - dot));
    }
    return Matrix(t, t, std::move(out));
}

struct BlockPass {
    Matrix h_in;
    Matrix n1;
    std::vector<double> inv1;
    Matrix q, k, v;
    Matrix probs;
    Matrix att;
    Matrix o;
    Matrix h_mid;
    Matrix n2;
    std::vector<double> inv2;
    Matrix u;
    Matrix g;
    Matrix z;
    Matrix h_out;
};

struct FullPass {
    Matrix x0;
    std::vector<BlockPass> blocks;
    Matrix nf;
    std::vector<double> invf;
    Matrix logits;
};

// y = x W^T with an optional per-layer override (effective weight, E^-1 input
// scaling, per-token activation fake-quant).
Matrix linear_apply(const Matrix& x, const Matrix& w, int layer_idx, const LinearOverrides* overrides) {
    if (overrides != nullptr && layer_idx < static_cast<int>(overrides->size()) && (*overrides)[layer_idx]) {
        const LinearOverride& ov = *(*overrides)[layer_idx];
        Matrix xe = ov.input_scale ? scale_cols(x, *ov.input_scale) : x;
        if (ov.act_spec) xe = fake_quant(xe, *ov.act_spec);
        return matmul_nt(xe, ov.weight);
    }
    return matmul_nt(x, w);
}

FullPass run_forward(const ToyModel& m, const std::vector<int>& ids, const LinearOverrides* overrides) {
    if (ids.empty()) throw DomainError("forward: empty sequence");
    for (int id : ids)
        if (id < 0 || id >= m.cfg.vocab()) throw DomainError("forward: token id out of range");

    const int t = static_cast<int>(ids.size());
    const int d = m.cfg.d_model;
    FullPass pass;

    std::vector<float> x0(static_cast<std::size_t>(t) * d);
    for (int i = 0; i < t; ++i) {
        const float* row = m.embedding.row(ids[i]);
        std::copy(row, row + d, x0.data() + static_cast<std::size_t>(i) * d);
    }
    pass.x0 = Matrix(t, d, std::move(x0));

    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
    Matrix h = pass.x0;
    for (int b = 0; b < m.cfg.n_blocks; ++b) {
        const ToyBlock& blk = m.blocks[b];
        BlockPass bp;
        bp.h_in = h;
        NormPass np1 = rmsnorm_fwd(bp.h_in, blk.norm1_gamma);
        bp.n1 = std::move(np1.normed);
        bp.inv1 = std::move(np1.inv);
        bp.q = linear_apply(bp.n1, blk.wq, linear_index(b, LinearKind::Q), overrides);
        bp.k = linear_apply(bp.n1, blk.wk, linear_index(b, LinearKind::K), overrides);
        bp.v = linear_apply(bp.n1, blk.wv, linear_index(b, LinearKind::V), overrides);
        bp.probs = causal_softmax(escale(matmul_nt(bp.q, bp.k), inv_sqrt_d));
        bp.att = matmul(bp.probs, bp.v);
        bp.o = linear_apply(bp.att, blk.wo, linear_index(b, LinearKind::Out), overrides);
        bp.h_mid = add(bp.h_in, bp.o);
        NormPass np2 = rmsnorm_fwd(bp.h_mid, blk.norm2_gamma);
        bp.n2 = std::move(np2.normed);
        bp.inv2 = std::move(np2.inv);
        bp.u = linear_apply(bp.n2, blk.w1, linear_index(b, LinearKind::Fc1), overrides);
        bp.g = emap(bp.u, gelu_f);
        bp.z = linear_apply(bp.g, blk.w2, linear_index(b, LinearKind::Fc2), overrides);
        bp.h_out = add(bp.h_mid, bp.z);
        h = bp.h_out;
        pass.blocks.push_back(std::move(bp));
    }
    NormPass npf = rmsnorm_fwd(h, m.final_norm_gamma);
    pass.nf = std::move(npf.normed);
    pass.invf = std::move(npf.inv);
    pass.logits = matmul_nt(pass.nf, m.head);
    return pass;
}

// Positions whose prediction carries loss: t predicts ids[t+1].
std::vector<int> loss_positions(const SyntheticSample& s, LossMask mask) {
    std::vector<int> pos;
    const int t = s.seq_len();
    if (mask == LossMask::AllPositions) {
        for (int i = 0; i + 1 < t; ++i) pos.push_back(i);
    } else {
        const int tb = s.target_begin();
        for (int i = 0; i + 1 < t; ++i)
            if (i + 1 >= tb && i + 1 < tb + s.target_len()) pos.push_back(i);
    }
    return pos;
}

double masked_ce(const Matrix& logits, const std::vector<int>& ids, const std::vector<int>& positions,
                 Matrix* dlogits_out) {
    if (positions.empty()) throw DomainError("sft_loss: no unmasked positions");
    const int v = logits.cols();
    std::vector<float> dlogits(dlogits_out != nullptr ? logits.size() : 0, 0.0f);
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(positions.size());
    for (int p : positions) {
        const int label = ids[p + 1];
        if (label < 0 || label >= v) throw DomainError("sft_loss: label out of range");
        const float* row = logits.row(p);
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        const double log_denom = std::log(denom);
        loss += (log_denom + mx) - static_cast<double>(row[label]);
        if (dlogits_out != nullptr) {
            float* drow = dlogits.data() + static_cast<std::size_t>(p) * v;
            for (int j = 0; j < v; ++j) {
                const double soft = std::exp(static_cast<double>(row[j]) - mx - log_denom);
                drow[j] = static_cast<float>((soft - (j == label ? 1.0 : 0.0)) * inv_n);
            }
        }
    }
    if (dlogits_out != nullptr) *dlogits_out = Matrix(logits.rows(), v, std::move(dlogits));
    return loss * inv_n;
}

}  // namespace

int ToyConfig::n_digits() const {
    int digits = 1;
    int span = kDigitBase;
    while (span < n_keys) {
        span *= kDigitBase;
        ++digits;
    }
    return digits;
}

void ToyConfig::validate() const {
    if (d_model <= 0 || n_blocks <= 0 || mlp_hidden <= 0) throw ConfigError("ToyConfig: nonpositive dimension");
    if (n_keys < 2) throw ConfigError("ToyConfig: need at least 2 keys");
    if (key_repeats < 4) throw ConfigError("ToyConfig: vision block must repeat the key at least 4 times");
    if (prefix_len < 1) throw ConfigError("ToyConfig: prefix must hold at least the separator");
    if (target_len < 1) throw ConfigError("ToyConfig: empty target");
    if (n_lang < 2) throw ConfigError("ToyConfig: language id space too small");
}

std::vector<int> key_digits(int key, const ToyConfig& cfg) {
    std::vector<int> digits(cfg.n_digits());
    for (int i = 0; i < cfg.n_digits(); ++i) {
        digits[i] = key % ToyConfig::kDigitBase;
        key /= ToyConfig::kDigitBase;
    }
    return digits;
}

int key_from_vision_ids(const std::vector<int>& vision_ids, const ToyConfig& cfg) {
    if (static_cast<int>(vision_ids.size()) < cfg.n_digits())
        throw DomainError("key_from_vision_ids: vision block too short");
    int key = 0;
    for (int i = cfg.n_digits() - 1; i >= 0; --i) {
        const int digit = vision_ids[i] - cfg.n_lang - i * ToyConfig::kDigitBase;
        if (digit < 0 || digit >= ToyConfig::kDigitBase) throw DomainError("key_from_vision_ids: bad pattern id");
        key = key * ToyConfig::kDigitBase + digit;
    }
    return key;
}

namespace {

int digit_sum(int key, const ToyConfig& cfg) {
    int sum = 0;
    for (int d : key_digits(key, cfg)) sum += d;
    return sum;
}

// Keys whose digit sum is even calibrate; odd keys evaluate. Both halves see
// every pattern embedding, but the key sets are disjoint.
std::vector<int> keys_in_subset(const ToyConfig& cfg, KeySubset subset) {
    std::vector<int> keys;
    for (int k = 0; k < cfg.n_keys; ++k) {
        const int parity = digit_sum(k, cfg) % 2;
        if (subset == KeySubset::All || (subset == KeySubset::CalibHalf && parity == 0) ||
            (subset == KeySubset::EvalHalf && parity == 1))
            keys.push_back(k);
    }
    return keys;
}

}  // namespace

std::vector<int> SyntheticSample::full_ids() const {
    std::vector<int> ids = vision_ids;
    ids.insert(ids.end(), language_ids.begin(), language_ids.end());
    return ids;
}

std::vector<int> target_for_key(int key, const ToyConfig& cfg) {
    Rng rng(cfg.task_seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(key + 1)));
    std::vector<int> target(cfg.target_len);
    for (int& t : target) t = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.n_lang - 1)));
    return target;
}

std::vector<SyntheticSample> gen_data(Rng& rng, int n_samples, const ToyConfig& cfg, KeySubset subset) {
    cfg.validate();
    if (n_samples < 1) throw ConfigError("gen_data: n_samples must be >= 1");
    const std::vector<int> pool = keys_in_subset(cfg, subset);
    if (pool.empty()) throw ConfigError("gen_data: key subset is empty");
    std::vector<SyntheticSample> out;
    out.reserve(n_samples);
    for (int s = 0; s < n_samples; ++s) {
        const int key = pool[rng.next_below(pool.size())];
        SyntheticSample sample;
        sample.key = key;
        sample.n_prefix = cfg.prefix_len;
        const std::vector<int> digits = key_digits(key, cfg);
        sample.vision_ids.reserve(cfg.vision_len());
        for (int rep = 0; rep < cfg.key_repeats; ++rep)
            for (int i = 0; i < cfg.n_digits(); ++i)
                sample.vision_ids.push_back(cfg.n_lang + i * ToyConfig::kDigitBase + digits[i]);
        for (int i = 0; i + 1 < cfg.prefix_len; ++i)
            sample.language_ids.push_back(1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.n_lang - 1))));
        sample.language_ids.push_back(kSepToken);
        const std::vector<int> target = target_for_key(key, cfg);
        sample.language_ids.insert(sample.language_ids.end(), target.begin(), target.end());
        sample.tags.assign(sample.vision_ids.size(), Modality::Vision);
        sample.tags.insert(sample.tags.end(), sample.language_ids.size(), Modality::Language);
        out.push_back(std::move(sample));
    }
    return out;
}

void save_dataset(const std::string& path, const std::vector<SyntheticSample>& samples) {
    std::ofstream f(path);
    if (!f) throw FormatError("save_dataset: cannot open " + path);
    for (const SyntheticSample& s : samples) {
        nlohmann::json j;
        j["vision_ids"] = s.vision_ids;
        j["language_ids"] = s.language_ids;
        std::vector<int> tags;
        for (Modality t : s.tags) tags.push_back(t == Modality::Vision ? 0 : 1);
        j["tags"] = tags;
        j["n_prefix"] = s.n_prefix;
        j["key"] = s.key;
        f << j.dump() << "\n";
    }
}

std::vector<SyntheticSample> load_dataset(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("load_dataset: cannot open " + path);
    std::vector<SyntheticSample> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw FormatError("load_dataset: bad JSON line in " + path);
        SyntheticSample s;
        s.vision_ids = j.at("vision_ids").get<std::vector<int>>();
        s.language_ids = j.at("language_ids").get<std::vector<int>>();
        for (int t : j.at("tags").get<std::vector<int>>())
            s.tags.push_back(t == 0 ? Modality::Vision : Modality::Language);
        s.n_prefix = j.at("n_prefix").get<int>();
        s.key = j.at("key").get<int>();
        if (s.tags.size() != s.vision_ids.size() + s.language_ids.size())
            throw FormatError("load_dataset: tag count mismatch in " + path);
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, double stddev) {
    std::vector<float> data(static_cast<std::size_t>(rows) * cols);
    for (float& v : data) v = static_cast<float>(rng.next_normal() * stddev);
    return Matrix(rows, cols, std::move(data));
}

}  // namespace

ToyModel init_model(const ToyConfig& cfg, Rng& rng) {
    cfg.validate();
    ToyModel m;
    m.cfg = cfg;
    const double w_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double h_std = 1.0 / std::sqrt(static_cast<double>(cfg.mlp_hidden));
    m.embedding = random_matrix(rng, cfg.vocab(), cfg.d_model, 0.5);
    // Heavy channels: the residual stream of trained transformers keeps
    // persistent outlier channels, which is what channel equalization acts
    // on; RMSNorm preserves the cross-channel structure. Vision patterns get
    // an extra set of hot channels of their own, mirroring how image-token
    // statistics differ from text-token statistics.
    {
        const int n_heavy = std::max(2, cfg.d_model / 16);
        std::vector<float> data = m.embedding.data();
        for (int i = 0; i < m.embedding.rows(); ++i) {
            for (int j = 0; j < n_heavy; ++j) data[static_cast<std::size_t>(i) * cfg.d_model + j] *= 6.0f;
            if (i >= cfg.n_lang && 2 * n_heavy <= cfg.d_model)
                for (int j = n_heavy; j < 2 * n_heavy; ++j) data[static_cast<std::size_t>(i) * cfg.d_model + j] *= 12.0f;
        }
        m.embedding = Matrix(m.embedding.rows(), cfg.d_model, std::move(data));
    }
    for (int b = 0; b < cfg.n_blocks; ++b) {
        ToyBlock blk;
        blk.wq = random_matrix(rng, cfg.d_model, cfg.d_model, w_std);
        blk.wk = random_matrix(rng, cfg.d_model, cfg.d_model, w_std);
        blk.wv = random_matrix(rng, cfg.d_model, cfg.d_model, w_std);
        blk.wo = random_matrix(rng, cfg.d_model, cfg.d_model, w_std);
        blk.w1 = random_matrix(rng, cfg.mlp_hidden, cfg.d_model, w_std);
        blk.w2 = random_matrix(rng, cfg.d_model, cfg.mlp_hidden, h_std);
        blk.norm1_gamma = Matrix::filled(1, cfg.d_model, 1.0f);
        blk.norm2_gamma = Matrix::filled(1, cfg.d_model, 1.0f);
        m.blocks.push_back(std::move(blk));
    }
    m.final_norm_gamma = Matrix::filled(1, cfg.d_model, 1.0f);
    m.head = random_matrix(rng, cfg.vocab(), cfg.d_model, w_std);
    return m;
}

std::vector<ParamRef> param_refs(ToyModel& m) {
    std::vector<ParamRef> refs;
    refs.push_back({"emb", &m.embedding});
    for (int b = 0; b < m.cfg.n_blocks; ++b) {
        const std::string p = "b" + std::to_string(b) + ".";
        ToyBlock& blk = m.blocks[b];
        refs.push_back({p + "wq", &blk.wq});
        refs.push_back({p + "wk", &blk.wk});
        refs.push_back({p + "wv", &blk.wv});
        refs.push_back({p + "wo", &blk.wo});
        refs.push_back({p + "w1", &blk.w1});
        refs.push_back({p + "w2", &blk.w2});
        refs.push_back({p + "norm1", &blk.norm1_gamma});
        refs.push_back({p + "norm2", &blk.norm2_gamma});
    }
    refs.push_back({"norm_f", &m.final_norm_gamma});
    refs.push_back({"head", &m.head});
    return refs;
}

int n_linear_layers(const ToyConfig& cfg) { return cfg.n_blocks * kLinearsPerBlock; }

int linear_index(int block, LinearKind kind) { return block * kLinearsPerBlock + static_cast<int>(kind); }

std::string layer_name(int block, LinearKind kind) {
    static const char* names[kLinearsPerBlock] = {"q_proj", "k_proj", "v_proj", "out_proj", "fc1", "fc2"};
    return "b" + std::to_string(block) + "." + names[static_cast<int>(kind)];
}

std::vector<std::string> layer_names(const ToyConfig& cfg) {
    std::vector<std::string> names;
    for (int b = 0; b < cfg.n_blocks; ++b)
        for (int k = 0; k < kLinearsPerBlock; ++k) names.push_back(layer_name(b, static_cast<LinearKind>(k)));
    return names;
}

int layer_index_by_name(const ToyConfig& cfg, const std::string& name) {
    const std::vector<std::string> names = layer_names(cfg);
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    throw ConfigError("unknown layer name: " + name);
}

ForwardResult forward(const ToyModel& m, const std::vector<int>& ids, const LinearOverrides* overrides) {
    FullPass pass = run_forward(m, ids, overrides);
    ForwardResult r;
    r.logits = std::move(pass.logits);
    r.x0 = std::move(pass.x0);
    r.linears.reserve(static_cast<std::size_t>(n_linear_layers(m.cfg)));
    for (BlockPass& bp : pass.blocks) {
        r.linears.push_back({bp.n1, bp.q});
        r.linears.push_back({bp.n1, bp.k});
        r.linears.push_back({bp.n1, bp.v});
        r.linears.push_back({bp.att, bp.o});
        r.linears.push_back({bp.n2, bp.u});
        r.linears.push_back({bp.g, bp.z});
    }
    return r;
}

ForwardResult forward(const ToyModel& m, const SyntheticSample& sample, const LinearOverrides* overrides) {
    return forward(m, sample.full_ids(), overrides);
}

double sft_loss(const Matrix& logits, const SyntheticSample& sample) {
    if (logits.rows() != sample.seq_len()) throw ShapeError("sft_loss: logits rows != sequence length");
    return masked_ce(logits, sample.full_ids(), loss_positions(sample, LossMask::TargetsOnly), nullptr);
}

BackwardResult backward(const ToyModel& m, const SyntheticSample& sample, LossMask mask) {
    const std::vector<int> ids = sample.full_ids();
    FullPass pass = run_forward(m, ids, nullptr);
    const int d = m.cfg.d_model;
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));

    BackwardResult result;
    result.layer_output_grads.resize(static_cast<std::size_t>(n_linear_layers(m.cfg)));

    Matrix dlogits;
    result.loss = masked_ce(pass.logits, ids, loss_positions(sample, mask), &dlogits);

    // head: logits = nf head^T
    result.param_grads.emplace("head", matmul(transpose(dlogits), pass.nf));
    Matrix dnf = matmul(dlogits, m.head);

    Matrix h_final = pass.blocks.empty() ? pass.x0 : pass.blocks.back().h_out;
    NormGrad ngf = rmsnorm_bwd(dnf, h_final, m.final_norm_gamma, pass.invf);
    result.param_grads.emplace("norm_f", std::move(ngf.dgamma));
    Matrix dh = std::move(ngf.dx);

    for (int b = m.cfg.n_blocks - 1; b >= 0; --b) {
        const ToyBlock& blk = m.blocks[b];
        BlockPass& bp = pass.blocks[b];
        const std::string p = "b" + std::to_string(b) + ".";

        // h_out = h_mid + z, z = g w2^T, g = gelu(u), u = n2 w1^T
        const Matrix& dz = dh;
        result.layer_output_grads[linear_index(b, LinearKind::Fc2)] = dz;
        result.param_grads.emplace(p + "w2", matmul(transpose(dz), bp.g));
        Matrix dg = matmul(dz, blk.w2);
        Matrix du = hadamard(dg, emap(bp.u, gelu_grad_f));
        result.layer_output_grads[linear_index(b, LinearKind::Fc1)] = du;
        result.param_grads.emplace(p + "w1", matmul(transpose(du), bp.n2));
        Matrix dn2 = matmul(du, blk.w1);
        NormGrad ng2 = rmsnorm_bwd(dn2, bp.h_mid, blk.norm2_gamma, bp.inv2);
        result.param_grads.emplace(p + "norm2", std::move(ng2.dgamma));
        Matrix dh_mid = add(dh, ng2.dx);

        // h_mid = h_in + o, o = att wo^T, att = probs v
        const Matrix& do_ = dh_mid;
        result.layer_output_grads[linear_index(b, LinearKind::Out)] = do_;
        result.param_grads.emplace(p + "wo", matmul(transpose(do_), bp.att));
        Matrix datt = matmul(do_, blk.wo);
        Matrix dprobs = matmul_nt(datt, bp.v);
        Matrix dv = matmul(transpose(bp.probs), datt);
        Matrix dscores = causal_softmax_bwd(bp.probs, dprobs);
        Matrix dq = escale(matmul(dscores, bp.k), inv_sqrt_d);
        Matrix dk = escale(matmul(transpose(dscores), bp.q), inv_sqrt_d);
        result.layer_output_grads[linear_index(b, LinearKind::Q)] = dq;
        result.layer_output_grads[linear_index(b, LinearKind::K)] = dk;
        result.layer_output_grads[linear_index(b, LinearKind::V)] = dv;
        result.param_grads.emplace(p + "wq", matmul(transpose(dq), bp.n1));
        result.param_grads.emplace(p + "wk", matmul(transpose(dk), bp.n1));
        result.param_grads.emplace(p + "wv", matmul(transpose(dv), bp.n1));
        Matrix dn1 = add(add(matmul(dq, blk.wq), matmul(dk, blk.wk)), matmul(dv, blk.wv));
        NormGrad ng1 = rmsnorm_bwd(dn1, bp.h_in, blk.norm1_gamma, bp.inv1);
        result.param_grads.emplace(p + "norm1", std::move(ng1.dgamma));
        dh = add(dh_mid, ng1.dx);
    }

    // embedding scatter
    std::vector<double> demb(static_cast<std::size_t>(m.cfg.vocab()) * d, 0.0);
    for (int t = 0; t < static_cast<int>(ids.size()); ++t) {
        const float* row = dh.row(t);
        double* dst = demb.data() + static_cast<std::size_t>(ids[t]) * d;
        for (int j = 0; j < d; ++j) dst[j] += static_cast<double>(row[j]);
    }
    std::vector<float> dembf(demb.size());
    for (std::size_t i = 0; i < demb.size(); ++i) dembf[i] = static_cast<float>(demb[i]);
    result.param_grads.emplace("emb", Matrix(m.cfg.vocab(), d, std::move(dembf)));
    return result;
}

ToyModel train(const ToyModel& model, const std::vector<SyntheticSample>& data, const TrainConfig& tc, Rng& rng,
               TrainStats* stats) {
    if (data.empty()) throw ConfigError("train: empty dataset");
    ToyModel m = model;
    if (stats != nullptr) stats->initial_loss = dataset_loss(m, data, nullptr, tc.workers);

    std::vector<ParamRef> refs = param_refs(m);
    std::vector<std::vector<double>> adam_m(refs.size()), adam_v(refs.size());
    for (std::size_t p = 0; p < refs.size(); ++p) {
        adam_m[p].assign(refs[p].matrix->size(), 0.0);
        adam_v[p].assign(refs[p].matrix->size(), 0.0);
    }

    for (int step = 0; step < tc.steps; ++step) {
        try {
            std::vector<std::vector<double>> grad_acc(refs.size());
            for (std::size_t p = 0; p < refs.size(); ++p) grad_acc[p].assign(refs[p].matrix->size(), 0.0);
            std::vector<std::size_t> batch_idx(tc.batch_size);
            for (int s = 0; s < tc.batch_size; ++s) batch_idx[s] = rng.next_below(data.size());
            std::vector<BackwardResult> backs(tc.batch_size);
            parallel_index(tc.batch_size, tc.workers,
                           [&](int s) { backs[s] = backward(m, data[batch_idx[s]]); });
            double batch_loss = 0.0;
            for (int s = 0; s < tc.batch_size; ++s) {
                batch_loss += backs[s].loss;
                for (std::size_t p = 0; p < refs.size(); ++p) {
                    const Matrix& g = backs[s].param_grads.at(refs[p].name);
                    for (std::size_t i = 0; i < g.size(); ++i) grad_acc[p][i] += static_cast<double>(g.data()[i]);
                }
            }
            batch_loss /= tc.batch_size;
            if (!std::isfinite(batch_loss)) throw TrainError("train: diverged at step " + std::to_string(step));

            double grad_sq = 0.0;
            for (std::size_t p = 0; p < refs.size(); ++p)
                for (double g : grad_acc[p]) grad_sq += (g / tc.batch_size) * (g / tc.batch_size);
            double clip_scale = 1.0;
            if (tc.clip_norm > 0.0) {
                const double norm = std::sqrt(grad_sq);
                if (norm > tc.clip_norm) clip_scale = tc.clip_norm / norm;
            }

            // cosine decay from lr to lr * lr_min_frac over the run
            double lr = tc.lr;
            if (tc.steps > 1) {
                const double progress = static_cast<double>(step) / static_cast<double>(tc.steps - 1);
                const double lo = tc.lr * tc.lr_min_frac;
                lr = lo + 0.5 * (tc.lr - lo) * (1.0 + std::cos(M_PI * progress));
            }

            const int t = step + 1;
            const double bc1 = 1.0 - std::pow(tc.beta1, t);
            const double bc2 = 1.0 - std::pow(tc.beta2, t);
            for (std::size_t p = 0; p < refs.size(); ++p) {
                const Matrix& w = *refs[p].matrix;
                std::vector<float> next(w.size());
                for (std::size_t i = 0; i < w.size(); ++i) {
                    const double g = clip_scale * grad_acc[p][i] / tc.batch_size;
                    adam_m[p][i] = tc.beta1 * adam_m[p][i] + (1.0 - tc.beta1) * g;
                    adam_v[p][i] = tc.beta2 * adam_v[p][i] + (1.0 - tc.beta2) * g * g;
                    const double mhat = adam_m[p][i] / bc1;
                    const double vhat = adam_v[p][i] / bc2;
                    next[i] = static_cast<float>(static_cast<double>(w.data()[i]) -
                                                 lr * mhat / (std::sqrt(vhat) + tc.eps));
                }
                *refs[p].matrix = Matrix(w.rows(), w.cols(), std::move(next));
            }
        } catch (const TrainError&) {
            throw;
        } catch (const DomainError& e) {
            throw TrainError("train: diverged at step " + std::to_string(step) + " (" + e.what() + ")");
        }
    }
    if (stats != nullptr) stats->final_loss = dataset_loss(m, data, nullptr, tc.workers);
    return m;
}

double dataset_loss(const ToyModel& m, const std::vector<SyntheticSample>& data, const LinearOverrides* overrides,
                    int workers) {
    if (data.empty()) throw ConfigError("dataset_loss: empty dataset");
    std::vector<double> losses(data.size());
    parallel_index(static_cast<int>(data.size()), workers, [&](int i) {
        const ForwardResult fr = forward(m, data[i], overrides);
        losses[i] = sft_loss(fr.logits, data[i]);
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return total / static_cast<double>(data.size());
}

std::pair<double, double> modal_abs_mean(const Matrix& g, const std::vector<Modality>& tags) {
    if (static_cast<int>(tags.size()) != g.rows()) throw ShapeError("modal_abs_mean: tag count != rows");
    double sum_v = 0.0, sum_l = 0.0;
    std::size_t n_v = 0, n_l = 0;
    for (int i = 0; i < g.rows(); ++i) {
        const float* row = g.row(i);
        double s = 0.0;
        for (int j = 0; j < g.cols(); ++j) s += std::fabs(static_cast<double>(row[j]));
        if (tags[i] == Modality::Vision) {
            sum_v += s;
            n_v += g.cols();
        } else {
            sum_l += s;
            n_l += g.cols();
        }
    }
    return {n_v > 0 ? sum_v / static_cast<double>(n_v) : 0.0, n_l > 0 ? sum_l / static_cast<double>(n_l) : 0.0};
}

SensitivityProfile sensitivity_profile(const ToyModel& m, const std::vector<SyntheticSample>& data, LossMask mask,
                                       int workers) {
    if (data.empty()) throw DomainError("sensitivity_profile: empty dataset");
    if (mask == LossMask::TargetsOnly) {
        bool any_targets = false;
        for (const SyntheticSample& s : data) any_targets = any_targets || s.target_len() > 0;
        if (!any_targets) throw DomainError("sensitivity_profile: dataset has no language targets");
    }
    const int n_layers = n_linear_layers(m.cfg);
    std::vector<std::vector<std::pair<double, double>>> per_sample(data.size());
    parallel_index(static_cast<int>(data.size()), workers, [&](int i) {
        const BackwardResult back = backward(m, data[i], mask);
        per_sample[i].resize(n_layers);
        for (int l = 0; l < n_layers; ++l) per_sample[i][l] = modal_abs_mean(back.layer_output_grads[l], data[i].tags);
    });
    std::vector<double> acc_v(n_layers, 0.0), acc_l(n_layers, 0.0);
    for (const auto& sample_means : per_sample)
        for (int l = 0; l < n_layers; ++l) {
            acc_v[l] += sample_means[l].first;
            acc_l[l] += sample_means[l].second;
        }
    SensitivityProfile profile;
    const std::vector<std::string> names = layer_names(m.cfg);
    for (int l = 0; l < n_layers; ++l)
        profile.layers.push_back(
            {names[l], acc_v[l] / static_cast<double>(data.size()), acc_l[l] / static_cast<double>(data.size())});
    return profile;
}

std::vector<double> token_grad_weights(const ToyModel& m, const std::vector<SyntheticSample>& data, int layer_index) {
    if (layer_index < 0 || layer_index >= n_linear_layers(m.cfg))
        throw ConfigError("token_grad_weights: layer index out of range");
    std::vector<double> weights;
    for (const SyntheticSample& s : data) {
        BackwardResult back = backward(m, s);
        const Matrix& g = back.layer_output_grads[layer_index];
        for (int i = 0; i < g.rows(); ++i) {
            const float* row = g.row(i);
            double sum = 0.0;
            for (int j = 0; j < g.cols(); ++j) sum += std::fabs(static_cast<double>(row[j]));
            weights.push_back(sum / static_cast<double>(g.cols()));
        }
    }
    return weights;
}

void save_model(const std::string& dir, const ToyModel& m) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "mbt1-dir";
    manifest["d_model"] = m.cfg.d_model;
    manifest["n_blocks"] = m.cfg.n_blocks;
    manifest["mlp_hidden"] = m.cfg.mlp_hidden;
    manifest["n_keys"] = m.cfg.n_keys;
    manifest["key_repeats"] = m.cfg.key_repeats;
    manifest["prefix_len"] = m.cfg.prefix_len;
    manifest["target_len"] = m.cfg.target_len;
    manifest["n_lang"] = m.cfg.n_lang;
    manifest["task_seed"] = m.cfg.task_seed;

    ToyModel& mut = const_cast<ToyModel&>(m);
    nlohmann::json tensors = nlohmann::json::array();
    for (const ParamRef& ref : param_refs(mut)) {
        const std::string file = ref.name + ".mbt";
        save_mbt(dir + "/" + file, *ref.matrix);
        tensors.push_back({{"name", ref.name}, {"file", file}, {"shape", {ref.matrix->rows(), ref.matrix->cols()}}});
    }
    manifest["tensors"] = tensors;
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw FormatError("save_model: cannot open manifest in " + dir);
    f << manifest.dump(2) << "\n";
}

ToyModel load_model(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw FormatError("load_model: cannot open manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(f, nullptr, false);
    if (manifest.is_discarded()) throw FormatError("load_model: bad manifest in " + dir);

    ToyConfig cfg;
    cfg.d_model = manifest.at("d_model").get<int>();
    cfg.n_blocks = manifest.at("n_blocks").get<int>();
    cfg.mlp_hidden = manifest.at("mlp_hidden").get<int>();
    cfg.n_keys = manifest.at("n_keys").get<int>();
    cfg.key_repeats = manifest.at("key_repeats").get<int>();
    cfg.prefix_len = manifest.at("prefix_len").get<int>();
    cfg.target_len = manifest.at("target_len").get<int>();
    cfg.n_lang = manifest.at("n_lang").get<int>();
    cfg.task_seed = manifest.at("task_seed").get<std::uint64_t>();

    Rng dummy(0);
    ToyModel m = init_model(cfg, dummy);
    for (const ParamRef& ref : param_refs(m)) {
        MbtTensor t = load_mbt(dir + "/" + ref.name + ".mbt");
        if (t.matrix.rows() != ref.matrix->rows() || t.matrix.cols() != ref.matrix->cols())
            throw FormatError("load_model: shape mismatch for " + ref.name);
        *ref.matrix = std::move(t.matrix);
    }
    return m;
}

}  // namespace mbq
