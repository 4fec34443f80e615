#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mbq/quantizer.hpp"
#include "mbq/tensor.hpp"

namespace mbq {

/// Per-input-channel positive scaling factors E. Applied as W*E on weight
/// columns and E^-1 * X on activation columns; lossless in FP, shifts
/// quantization difficulty between weights and activations.
struct EqualizationVector {
    std::vector<float> factors;

    explicit EqualizationVector(std::vector<float> f);
    static EqualizationVector ones(int n);

    int size() const { return static_cast<int>(factors.size()); }
    std::vector<float> reciprocal() const;
};

enum class ObjectiveKind {
    CweMse,       // plain MSE over all output elements
    BalancedCwe,  // MSE_language + vision_factor * MSE_vision
    MbqMse,       // g_l * MSE_l + g_v * MSE_v
    MbqMae,       // g_l * MAE_l + g_v * MAE_v
    RandomSplit,  // MbqMae over a random fake modality partition
    TokenWise,    // sum_t weight_t * MAE(row t)
};

enum class QuantTarget { WeightOnly, WeightActivation };

struct CalibObjective {
    ObjectiveKind kind = ObjectiveKind::CweMse;
    double vision_factor = 0.1;  // BalancedCwe only
    QuantTarget target = QuantTarget::WeightOnly;
};

std::string to_string(ObjectiveKind k);
ObjectiveKind objective_kind_from_string(const std::string& s);

/// Mean absolute output gradient of one linear layer, split by modality.
struct GradientWeights {
    double vision = 0.0;
    double language = 0.0;
};

/// Per-input-channel mean |x| over tokens and mean |w| over output rows.
/// Zero statistics are floored at 1e-8.
struct ChannelStats {
    std::vector<double> act_abs_mean;
    std::vector<double> weight_abs_mean;
};

ChannelStats channel_stats(const ModalBatch& x, const Matrix& w);

/// Candidate family E_c = act_c^alpha / weight_c^(1-alpha), normalized to
/// geometric mean 1. alpha in [0, 1].
EqualizationVector candidate_equalization(const ChannelStats& stats, double alpha);

/// Reconstruction objective at a fixed E. Reference Y = X W^T; quantized
/// Y^ = (X * E^-1) fake_quant(W*E)^T, with the scaled activations additionally
/// fake-quantized per token in WeightActivation mode. Per-modality error terms
/// are element means; an empty modality partition contributes 0.
/// MBQ objectives require `sens`; WeightActivation requires `spec_a`.
double recon_loss(const Matrix& w, const ModalBatch& x, const EqualizationVector& e, const QuantSpec& spec_w,
                  const std::optional<QuantSpec>& spec_a, const CalibObjective& objective,
                  const std::optional<GradientWeights>& sens);

/// As recon_loss, with the objective replaced by sum_t weights[t] * MAE(row t).
/// Weights must be nonnegative, one per token.
double recon_loss_tokenwise(const Matrix& w, const ModalBatch& x, const EqualizationVector& e,
                            const QuantSpec& spec_w, const std::optional<QuantSpec>& spec_a,
                            const std::vector<double>& token_weights);

/// Sentinel alpha reported when the identity (RTN-equivalent) candidate wins.
inline constexpr double kIdentityAlpha = -1.0;

struct GridPoint {
    double alpha = 0.0;
    double value = 0.0;
};

struct CalibResult {
    EqualizationVector e = EqualizationVector::ones(0);
    double alpha = 0.0;           // winning grid alpha, or kIdentityAlpha
    double objective_value = 0.0; // == min(identity_value, min over candidate_values)
    std::vector<GridPoint> candidate_values;  // one entry per grid alpha
    double identity_value = 0.0;  // objective at E = 1
};

std::vector<double> default_alpha_grid();

/// Evaluates every grid candidate plus the identity E, in ascending alpha
/// order. Returns the best grid candidate (ties toward the smallest alpha);
/// the identity candidate wins only when strictly better than every grid
/// point. Deterministic regardless of worker count.
CalibResult search(const Matrix& w, const ModalBatch& x, const QuantSpec& spec_w,
                   const std::optional<QuantSpec>& spec_a, const CalibObjective& objective,
                   const std::optional<GradientWeights>& sens, const std::vector<double>& grid);

/// Reweighting ablation: tokens are shuffled into two equal halves; the first
/// half receives the vision gradient weight and the second the language one,
/// then the search proceeds as MbqMae over this fake partition.
CalibResult ablation_random_split(const Matrix& w, const ModalBatch& x, const QuantSpec& spec_w,
                                  const std::optional<QuantSpec>& spec_a, const GradientWeights& sens,
                                  const std::vector<double>& grid, Rng& rng);

/// Reweighting ablation: per-token gradient weights. Tokens with zero weight
/// contribute nothing to the objective, so their reconstruction error is
/// invisible to the search.
CalibResult ablation_tokenwise(const Matrix& w, const ModalBatch& x, const std::vector<double>& token_grads,
                               const QuantSpec& spec_w, const std::optional<QuantSpec>& spec_a,
                               const std::vector<double>& grid);

}  // namespace mbq
