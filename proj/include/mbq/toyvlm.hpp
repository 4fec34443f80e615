#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mbq/quantizer.hpp"
#include "mbq/tensor.hpp"

namespace mbq {

/// Miniature decoder-only multimodal transformer: shared embedding over
/// language ids and vision-pattern ids, pre-RMSNorm blocks with single-head
/// causal attention and a GELU MLP, untied output head.
struct ToyConfig {
    int d_model = 64;
    int n_blocks = 4;
    int mlp_hidden = 256;
    int n_keys = 32;      // keys split between calibration and eval by digit-sum parity
    int key_repeats = 8;  // times the key's digit tuple is repeated in the vision block, >= 4
    int prefix_len = 4;   // random fillers then a fixed separator
    int target_len = 4;
    int n_lang = 64;      // language id space; vision patterns follow
    std::uint64_t task_seed = 0x5EEDF00DULL;  // fixes the key -> target map

    // Keys are encoded as base-8 digit tuples over a shared pattern alphabet,
    // so both key halves exercise the same vision-pattern embeddings.
    static constexpr int kDigitBase = 8;
    int n_digits() const;
    int vocab() const { return n_lang + n_digits() * kDigitBase; }
    int vision_len() const { return key_repeats * n_digits(); }
    int seq_len() const { return vision_len() + prefix_len + target_len; }
    void validate() const;
};

/// Digit tuple (low digit first) for one key under the config's encoding.
std::vector<int> key_digits(int key, const ToyConfig& cfg);
/// Inverse of the vision encoding; reads the first digit tuple.
int key_from_vision_ids(const std::vector<int>& vision_ids, const ToyConfig& cfg);

/// One synthetic image-caption pair: the key is encoded redundantly as a
/// repeated vision-pattern token; the language part is a random filler prefix,
/// a separator, and a target continuation that is a deterministic function of
/// the key.
struct SyntheticSample {
    std::vector<int> vision_ids;
    std::vector<int> language_ids;  // prefix (n_prefix ids) then target
    std::vector<Modality> tags;     // per token of the full sequence
    int n_prefix = 0;
    int key = 0;

    std::vector<int> full_ids() const;
    int seq_len() const { return static_cast<int>(vision_ids.size() + language_ids.size()); }
    int target_len() const { return static_cast<int>(language_ids.size()) - n_prefix; }
    /// First sequence position holding a target token.
    int target_begin() const { return static_cast<int>(vision_ids.size()) + n_prefix; }
};

enum class KeySubset { All, CalibHalf, EvalHalf };

/// Deterministic target continuation for a key (the task definition).
std::vector<int> target_for_key(int key, const ToyConfig& cfg);

/// Keys drawn uniformly from the subset; fillers drawn per sample.
std::vector<SyntheticSample> gen_data(Rng& rng, int n_samples, const ToyConfig& cfg,
                                      KeySubset subset = KeySubset::All);

void save_dataset(const std::string& path, const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> load_dataset(const std::string& path);

// ---- Model ------------------------------------------------------------

struct ToyBlock {
    Matrix wq, wk, wv, wo;  // d x d
    Matrix w1;              // hidden x d
    Matrix w2;              // d x hidden
    Matrix norm1_gamma;     // 1 x d
    Matrix norm2_gamma;     // 1 x d
};

struct ToyModel {
    ToyConfig cfg;
    Matrix embedding;         // vocab x d
    std::vector<ToyBlock> blocks;
    Matrix final_norm_gamma;  // 1 x d
    Matrix head;              // vocab x d (untied)
};

ToyModel init_model(const ToyConfig& cfg, Rng& rng);

/// Mutable references to every parameter, in a fixed enumeration order.
struct ParamRef {
    std::string name;
    Matrix* matrix;
};
std::vector<ParamRef> param_refs(ToyModel& m);

// ---- Linear layer enumeration -------------------------------------------

enum class LinearKind : int { Q = 0, K, V, Out, Fc1, Fc2 };
inline constexpr int kLinearsPerBlock = 6;

int n_linear_layers(const ToyConfig& cfg);
int linear_index(int block, LinearKind kind);
std::string layer_name(int block, LinearKind kind);
std::vector<std::string> layer_names(const ToyConfig& cfg);
/// Inverse of layer_name / linear_index.
int layer_index_by_name(const ToyConfig& cfg, const std::string& name);

// ---- Forward ----------------------------------------------------------

/// Per-layer replacement used when evaluating a quantized model: the weight
/// is swapped for an effective (dequantized) one, the input is scaled by
/// E^-1 per column, and optionally fake-quantized per token.
struct LinearOverride {
    Matrix weight;
    std::optional<std::vector<float>> input_scale;
    std::optional<QuantSpec> act_spec;
};
using LinearOverrides = std::vector<std::optional<LinearOverride>>;  // size n_linear_layers

struct LayerCache {
    Matrix input;   // X as fed to the linear layer (before any override scaling)
    Matrix output;  // Y, pre-residual
};

struct ForwardResult {
    Matrix logits;                   // T x vocab
    Matrix x0;                       // embedding output, T x d
    std::vector<LayerCache> linears; // n_linear_layers entries
};

ForwardResult forward(const ToyModel& m, const std::vector<int>& ids, const LinearOverrides* overrides = nullptr);
ForwardResult forward(const ToyModel& m, const SyntheticSample& sample, const LinearOverrides* overrides = nullptr);

// ---- Loss -------------------------------------------------------------

/// Mean cross-entropy over positions predicting target tokens; vision and
/// prefix positions are masked out. Gradient still reaches vision tokens
/// through attention.
double sft_loss(const Matrix& logits, const SyntheticSample& sample);

enum class LossMask { TargetsOnly, AllPositions };

// ---- Backward ---------------------------------------------------------

struct BackwardResult {
    double loss = 0.0;
    std::map<std::string, Matrix> param_grads;
    std::vector<Matrix> layer_output_grads;  // dL/dY per linear layer, T x out_dim
};

/// Full reverse-mode pass (head, MLP, attention incl. softmax, RMSNorm,
/// embedding). LossMask::AllPositions swaps in next-token loss at every
/// position, used for sensitivity contrast experiments.
BackwardResult backward(const ToyModel& m, const SyntheticSample& sample,
                        LossMask mask = LossMask::TargetsOnly);

// ---- Training ---------------------------------------------------------

struct TrainConfig {
    int steps = 500;
    int batch_size = 8;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr_min_frac = 0.1;  // cosine decay from lr to lr * lr_min_frac
    double clip_norm = 1.0;    // global gradient-norm clip; 0 disables
    int workers = 2;  // per-sample forward/backward; gradients reduce in sample order
};

struct TrainStats {
    double initial_loss = 0.0;  // dataset mean loss before training
    double final_loss = 0.0;    // dataset mean loss after training
};

/// Adam over all parameters; deterministic given the rng seed. Divergence
/// (non-finite loss or parameters) raises TrainError with the step index.
ToyModel train(const ToyModel& model, const std::vector<SyntheticSample>& data, const TrainConfig& tc, Rng& rng,
               TrainStats* stats = nullptr);

double dataset_loss(const ToyModel& m, const std::vector<SyntheticSample>& data,
                    const LinearOverrides* overrides = nullptr, int workers = 1);

// ---- Sensitivity ---------------------------------------------------------

/// (mean |g| over vision rows, mean |g| over language rows) of one matrix.
std::pair<double, double> modal_abs_mean(const Matrix& g, const std::vector<Modality>& tags);

struct LayerSensitivity {
    std::string layer;
    double g_vision = 0.0;
    double g_language = 0.0;
};

/// Per linear layer: mean absolute SFT-loss gradient of the layer output,
/// split by modality. Averaging order: per-sample element mean, then mean
/// over samples.
struct SensitivityProfile {
    std::vector<LayerSensitivity> layers;  // indexed by flat linear index
};

SensitivityProfile sensitivity_profile(const ToyModel& m, const std::vector<SyntheticSample>& data,
                                       LossMask mask = LossMask::TargetsOnly, int workers = 1);

/// Per-token mean |dL/dY_t| for one linear layer, stacked sample-major in
/// dataset order (aligned with calibration batch stacking). Zero entries are
/// expected for some vision tokens.
std::vector<double> token_grad_weights(const ToyModel& m, const std::vector<SyntheticSample>& data, int layer_index);

// ---- Checkpoint IO ------------------------------------------------------
// Directory of MBT1 tensors plus manifest.json (shapes, hyperparameters).

void save_model(const std::string& dir, const ToyModel& m);
ToyModel load_model(const std::string& dir);

}  // namespace mbq
