#include "mbq/calibration.hpp"

#include <algorithm>
#include <cmath>

namespace mbq {

EqualizationVector::EqualizationVector(std::vector<float> f) : factors(std::move(f)) {
    for (float v : factors)
        if (!(v > 0.0f) || !std::isfinite(v)) throw DomainError("EqualizationVector: factors must be positive finite");
}

EqualizationVector EqualizationVector::ones(int n) {
    return EqualizationVector(std::vector<float>(static_cast<std::size_t>(n), 1.0f));
}

std::vector<float> EqualizationVector::reciprocal() const {
    std::vector<float> r(factors.size());
    for (std::size_t i = 0; i < factors.size(); ++i) r[i] = 1.0f / factors[i];
    return r;
}

std::string to_string(ObjectiveKind k) {
    switch (k) {
        case ObjectiveKind::CweMse: return "cwe-mse";
        case ObjectiveKind::BalancedCwe: return "balanced-cwe";
        case ObjectiveKind::MbqMse: return "mbq-mse";
        case ObjectiveKind::MbqMae: return "mbq-mae";
        case ObjectiveKind::RandomSplit: return "random-split";
        default: return "token-wise";
    }
}

ObjectiveKind objective_kind_from_string(const std::string& s) {
    if (s == "cwe-mse" || s == "cwe") return ObjectiveKind::CweMse;
    if (s == "balanced-cwe") return ObjectiveKind::BalancedCwe;
    if (s == "mbq-mse") return ObjectiveKind::MbqMse;
    if (s == "mbq-mae") return ObjectiveKind::MbqMae;
    if (s == "random-split") return ObjectiveKind::RandomSplit;
    if (s == "token-wise") return ObjectiveKind::TokenWise;
    throw ConfigError("unknown objective kind: " + s);
}

ChannelStats channel_stats(const ModalBatch& x, const Matrix& w) {
    if (x.tokens.cols() != w.cols()) throw ShapeError("channel_stats: input dimensions differ");
    const int d = w.cols();
    ChannelStats s;
    s.act_abs_mean.assign(d, 0.0);
    s.weight_abs_mean.assign(d, 0.0);
    for (int i = 0; i < x.tokens.rows(); ++i) {
        const float* row = x.tokens.row(i);
        for (int j = 0; j < d; ++j) s.act_abs_mean[j] += std::fabs(static_cast<double>(row[j]));
    }
    for (int i = 0; i < w.rows(); ++i) {
        const float* row = w.row(i);
        for (int j = 0; j < d; ++j) s.weight_abs_mean[j] += std::fabs(static_cast<double>(row[j]));
    }
    for (int j = 0; j < d; ++j) {
        s.act_abs_mean[j] = x.tokens.rows() > 0 ? s.act_abs_mean[j] / x.tokens.rows() : 0.0;
        s.weight_abs_mean[j] = w.rows() > 0 ? s.weight_abs_mean[j] / w.rows() : 0.0;
        s.act_abs_mean[j] = std::max(s.act_abs_mean[j], 1e-8);
        s.weight_abs_mean[j] = std::max(s.weight_abs_mean[j], 1e-8);
    }
    return s;
}

EqualizationVector candidate_equalization(const ChannelStats& stats, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("candidate_equalization: alpha outside [0, 1]");
    const std::size_t d = stats.act_abs_mean.size();
    std::vector<double> e(d);
    double log_sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        e[j] = std::pow(stats.act_abs_mean[j], alpha) / std::pow(stats.weight_abs_mean[j], 1.0 - alpha);
        log_sum += std::log(e[j]);
    }
    const double geo_mean = std::exp(log_sum / static_cast<double>(d));
    std::vector<float> out(d);
    for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>(e[j] / geo_mean);
    return EqualizationVector(std::move(out));
}

namespace {

struct ModalErrors {
    double mse_vision = 0.0;
    double mse_language = 0.0;
    double mae_vision = 0.0;
    double mae_language = 0.0;
};

// Element means per modality, accumulated in f64 in row-major order.
ModalErrors modal_errors(const Matrix& y_ref, const Matrix& y_hat, const std::vector<Modality>& tags) {
    ModalErrors m;
    double se_v = 0.0, se_l = 0.0, ae_v = 0.0, ae_l = 0.0;
    std::size_t n_v = 0, n_l = 0;
    const int cols = y_ref.cols();
    for (int i = 0; i < y_ref.rows(); ++i) {
        const float* a = y_ref.row(i);
        const float* b = y_hat.row(i);
        double se = 0.0, ae = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = static_cast<double>(a[j]) - static_cast<double>(b[j]);
            se += d * d;
            ae += std::fabs(d);
        }
        if (tags[i] == Modality::Vision) {
            se_v += se;
            ae_v += ae;
            n_v += cols;
        } else {
            se_l += se;
            ae_l += ae;
            n_l += cols;
        }
    }
    if (n_v > 0) {
        m.mse_vision = se_v / static_cast<double>(n_v);
        m.mae_vision = ae_v / static_cast<double>(n_v);
    }
    if (n_l > 0) {
        m.mse_language = se_l / static_cast<double>(n_l);
        m.mae_language = ae_l / static_cast<double>(n_l);
    }
    return m;
}

Matrix quantized_output(const Matrix& w, const ModalBatch& x, const EqualizationVector& e, const QuantSpec& spec_w,
                        const std::optional<QuantSpec>& spec_a, QuantTarget target) {
    if (e.size() != w.cols()) throw ShapeError("recon_loss: equalization length != input dimension");
    const Matrix w_eq = scale_cols(w, e.factors);
    const Matrix w_q = fake_quant(w_eq, spec_w);
    Matrix x_eq = scale_cols(x.tokens, e.reciprocal());
    if (target == QuantTarget::WeightActivation) {
        if (!spec_a) throw ConfigError("recon_loss: weight-activation mode requires an activation spec");
        x_eq = fake_quant(x_eq, *spec_a);
    }
    return matmul(x_eq, transpose(w_q));
}

double objective_from_errors(const ModalErrors& m, const CalibObjective& objective,
                             const std::optional<GradientWeights>& sens, std::size_t n_v, std::size_t n_l) {
    switch (objective.kind) {
        case ObjectiveKind::CweMse: {
            // plain MSE over all elements
            const double total = static_cast<double>(n_v + n_l);
            if (total == 0.0) return 0.0;
            return (m.mse_vision * static_cast<double>(n_v) + m.mse_language * static_cast<double>(n_l)) / total;
        }
        case ObjectiveKind::BalancedCwe:
            return m.mse_language + objective.vision_factor * m.mse_vision;
        case ObjectiveKind::MbqMse:
            if (!sens) throw ConfigError("recon_loss: MBQ objective requires a sensitivity pair");
            return sens->language * m.mse_language + sens->vision * m.mse_vision;
        case ObjectiveKind::MbqMae:
            if (!sens) throw ConfigError("recon_loss: MBQ objective requires a sensitivity pair");
            return sens->language * m.mae_language + sens->vision * m.mae_vision;
        default:
            throw ConfigError("recon_loss: objective kind needs its dedicated search entry point");
    }
}

}  // namespace

namespace {

double recon_loss_with_ref(const Matrix& y_ref, const Matrix& w, const ModalBatch& x, const EqualizationVector& e,
                           const QuantSpec& spec_w, const std::optional<QuantSpec>& spec_a,
                           const CalibObjective& objective, const std::optional<GradientWeights>& sens) {
    const Matrix y_hat = quantized_output(w, x, e, spec_w, spec_a, objective.target);
    const ModalErrors m = modal_errors(y_ref, y_hat, x.tags);
    const std::size_t n_v = static_cast<std::size_t>(x.n_vision()) * y_ref.cols();
    const std::size_t n_l = static_cast<std::size_t>(x.n_language()) * y_ref.cols();
    return objective_from_errors(m, objective, sens, n_v, n_l);
}

double recon_loss_tokenwise_with_ref(const Matrix& y_ref, const Matrix& w, const ModalBatch& x,
                                     const EqualizationVector& e, const QuantSpec& spec_w,
                                     const std::optional<QuantSpec>& spec_a,
                                     const std::vector<double>& token_weights) {
    if (static_cast<int>(token_weights.size()) != x.n_tokens())
        throw ShapeError("recon_loss_tokenwise: one weight per token required");
    for (double wt : token_weights)
        if (wt < 0.0 || !std::isfinite(wt)) throw DomainError("recon_loss_tokenwise: negative token weight");
    const QuantTarget target = spec_a ? QuantTarget::WeightActivation : QuantTarget::WeightOnly;
    const Matrix y_hat = quantized_output(w, x, e, spec_w, spec_a, target);
    double total = 0.0;
    for (int i = 0; i < y_ref.rows(); ++i) {
        const float* a = y_ref.row(i);
        const float* b = y_hat.row(i);
        double ae = 0.0;
        for (int j = 0; j < y_ref.cols(); ++j)
            ae += std::fabs(static_cast<double>(a[j]) - static_cast<double>(b[j]));
        total += token_weights[i] * (ae / static_cast<double>(y_ref.cols()));
    }
    return total;
}

}  // namespace

double recon_loss(const Matrix& w, const ModalBatch& x, const EqualizationVector& e, const QuantSpec& spec_w,
                  const std::optional<QuantSpec>& spec_a, const CalibObjective& objective,
                  const std::optional<GradientWeights>& sens) {
    const Matrix y_ref = matmul(x.tokens, transpose(w));
    return recon_loss_with_ref(y_ref, w, x, e, spec_w, spec_a, objective, sens);
}

double recon_loss_tokenwise(const Matrix& w, const ModalBatch& x, const EqualizationVector& e,
                            const QuantSpec& spec_w, const std::optional<QuantSpec>& spec_a,
                            const std::vector<double>& token_weights) {
    const Matrix y_ref = matmul(x.tokens, transpose(w));
    return recon_loss_tokenwise_with_ref(y_ref, w, x, e, spec_w, spec_a, token_weights);
}

std::vector<double> default_alpha_grid() {
    std::vector<double> grid(21);
    for (int i = 0; i <= 20; ++i) grid[i] = static_cast<double>(i) / 20.0;
    return grid;
}

namespace {

// Shared argmin scaffold: evaluates the identity candidate plus every grid
// candidate through `loss_at`, in ascending alpha order.
template <class LossFn>
CalibResult run_search(const Matrix& w, const ModalBatch& x, const std::vector<double>& grid, LossFn&& loss_at) {
    if (grid.empty()) throw ConfigError("search: empty alpha grid");
    const ChannelStats stats = channel_stats(x, w);

    CalibResult result;
    result.identity_value = loss_at(EqualizationVector::ones(w.cols()));

    int best = -1;
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
        EqualizationVector e = candidate_equalization(stats, grid[gi]);
        const double value = loss_at(e);
        result.candidate_values.push_back({grid[gi], value});
        if (best < 0 || value < result.candidate_values[best].value) {
            best = static_cast<int>(gi);
            result.e = std::move(e);
        }
    }
    result.alpha = result.candidate_values[best].alpha;
    result.objective_value = result.candidate_values[best].value;
    if (result.identity_value < result.objective_value) {
        result.alpha = kIdentityAlpha;
        result.objective_value = result.identity_value;
        result.e = EqualizationVector::ones(w.cols());
    }
    return result;
}

}  // namespace

CalibResult search(const Matrix& w, const ModalBatch& x, const QuantSpec& spec_w,
                   const std::optional<QuantSpec>& spec_a, const CalibObjective& objective,
                   const std::optional<GradientWeights>& sens, const std::vector<double>& grid) {
    if ((objective.kind == ObjectiveKind::MbqMse || objective.kind == ObjectiveKind::MbqMae) && !sens)
        throw ConfigError("search: MBQ objective requires a sensitivity pair");
    if (objective.target == QuantTarget::WeightActivation && !spec_a)
        throw ConfigError("search: weight-activation mode requires an activation spec");
    const Matrix y_ref = matmul(x.tokens, transpose(w));
    return run_search(w, x, grid, [&](const EqualizationVector& e) {
        return recon_loss_with_ref(y_ref, w, x, e, spec_w, spec_a, objective, sens);
    });
}

CalibResult ablation_random_split(const Matrix& w, const ModalBatch& x, const QuantSpec& spec_w,
                                  const std::optional<QuantSpec>& spec_a, const GradientWeights& sens,
                                  const std::vector<double>& grid, Rng& rng) {
    const int n = x.n_tokens();
    if (n < 2) throw ShapeError("ablation_random_split: need at least 2 tokens");
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(i) + 1));
        std::swap(order[i], order[j]);
    }
    // fake modality partition: first half takes the vision weight
    std::vector<Modality> fake_tags(n, Modality::Language);
    for (int i = 0; i < n / 2; ++i) fake_tags[order[i]] = Modality::Vision;
    const ModalBatch fake(x.tokens, std::move(fake_tags));

    CalibObjective objective;
    objective.kind = ObjectiveKind::MbqMae;
    objective.target = spec_a ? QuantTarget::WeightActivation : QuantTarget::WeightOnly;
    return search(w, fake, spec_w, spec_a, objective, sens, grid);
}

CalibResult ablation_tokenwise(const Matrix& w, const ModalBatch& x, const std::vector<double>& token_grads,
                               const QuantSpec& spec_w, const std::optional<QuantSpec>& spec_a,
                               const std::vector<double>& grid) {
    const Matrix y_ref = matmul(x.tokens, transpose(w));
    return run_search(w, x, grid, [&](const EqualizationVector& e) {
        return recon_loss_tokenwise_with_ref(y_ref, w, x, e, spec_w, spec_a, token_grads);
    });
}

}  // namespace mbq
