#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mbq/calibration.hpp"
#include "mbq/toyvlm.hpp"

namespace mbq {

enum class Method { Fp, Rtn, CweMse, BalancedCwe, MbqMse, MbqMae, RandomSplit, TokenWise };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
bool method_needs_profile(Method m);

/// Quantization format: weight-only W3/W4 (asymmetric group-wise weights) or
/// weight-activation W4A8/W8A8 (symmetric per-output-channel weights plus
/// per-token symmetric activations).
enum class BitMode { W3, W4, W4A8, W8A8 };

std::string to_string(BitMode b);
BitMode bit_mode_from_string(const std::string& s);
/// ("weight-only" | "weight-activation", weight bits) -> BitMode.
BitMode make_bit_mode(const std::string& quant_mode, int bits);
bool is_weight_activation(BitMode b);
int weight_bits(BitMode b);
QuantSpec weight_quant_spec(BitMode b, int group_size);
std::optional<QuantSpec> act_quant_spec(BitMode b);

struct MethodSpec {
    Method method = Method::Rtn;
    BitMode mode = BitMode::W3;

    std::string label() const { return to_string(method) + "(" + to_string(mode) + ")"; }
};

struct PipelineConfig {
    std::uint64_t seed = 1;
    int n_seeds = 5;
    ToyConfig model;
    TrainConfig training;
    int n_train = 256;
    int n_calib = 128;  // calibration set, even keys
    int n_eval = 512;   // held-out set, odd keys
    int group_size = 32;
    double balanced_vision_factor = 0.1;
    int workers = 2;  // within-stage parallelism; results reduce in fixed order
    std::vector<double> grid = default_alpha_grid();
    std::vector<MethodSpec> methods;  // empty -> default matrix

    void validate() const;
};

PipelineConfig default_config();
std::vector<MethodSpec> default_methods();

std::string config_to_json(const PipelineConfig& cfg);
PipelineConfig config_from_json(const std::string& text);
PipelineConfig load_config(const std::string& path);

// ---- Per-seed data/rng derivation ----------------------------------------

struct SeedStreams {
    Rng init;
    Rng train_data;
    Rng calib_data;
    Rng eval_data;
    Rng train_loop;
};
SeedStreams seed_streams(std::uint64_t seed);
/// Deterministic rng for the random-split ablation at one layer.
Rng split_rng(std::uint64_t seed, int layer_index);

// ---- Quantized model ------------------------------------------------------

struct LayerQuantRecord {
    std::string name;
    QuantizedTensor weights;  // quantization of W*E
    EqualizationVector e = EqualizationVector::ones(0);
    double alpha = 0.0;  // kIdentityAlpha when the identity candidate was used
    double objective_value = 0.0;
    double identity_value = 0.0;
    std::vector<GridPoint> curve;   // empty for RTN
    double g_vision = 0.0;          // objective weights (0 unless MBQ/random-split)
    double g_language = 0.0;
    double recon_mse = 0.0;  // unweighted MSE at the chosen E
};

struct QuantizedModel {
    Method method = Method::Rtn;
    BitMode mode = BitMode::W3;
    int group_size = 0;
    std::vector<LayerQuantRecord> layers;  // flat linear-layer order
};

/// FP forward over the calibration set, stacking each linear layer's inputs
/// sample-major with per-token modality tags.
std::vector<ModalBatch> capture_calibration_inputs(const ToyModel& model,
                                                   const std::vector<SyntheticSample>& calib, int workers = 1);

/// Layer-by-layer calibration and quantization. Gradient-weighted methods
/// require `profile`. The random-split partition is derived from cfg.seed and
/// the layer index, so results are reproducible from the config alone.
QuantizedModel quantize_model(const ToyModel& model, Method method, BitMode mode,
                              const std::vector<SyntheticSample>& calib, const SensitivityProfile* profile,
                              const PipelineConfig& cfg);

/// Effective per-layer overrides for evaluating a quantized model:
/// dequantized fake-quant weights, E^-1 input scaling, and per-token
/// activation fake-quant in weight-activation modes.
LinearOverrides overrides_for(const QuantizedModel& qm, const ToyModel& model);

// ---- Evaluation ------------------------------------------------------------

struct EvalMetrics {
    double loss = 0.0;         // teacher-forced mean loss
    double exact_match = 0.0;  // greedy argmax correct at every target position
};

EvalMetrics eval_task(const ToyModel& model, const std::vector<SyntheticSample>& eval_data,
                      const LinearOverrides* overrides = nullptr, int workers = 1);

// ---- Matrix report ----------------------------------------------------------

struct LayerReconRow {
    std::string layer;
    double alpha = 0.0;
    double objective_value = 0.0;
    double recon_mse = 0.0;
};

struct MethodRow {
    std::string method;
    std::string mode;  // empty for FP
    double loss = 0.0;
    double exact_match = 0.0;
    double delta_loss = 0.0;  // vs FP baseline
    double delta_exact_match = 0.0;
    std::vector<LayerReconRow> layer_recon;
};

struct BlockSensitivity {
    double g_vision = 0.0;
    double g_language = 0.0;
    double ratio = 0.0;  // language / vision
};

struct SeedReport {
    std::uint64_t seed = 0;
    double train_initial_loss = 0.0;
    double train_final_loss = 0.0;
    BlockSensitivity final_block;
    std::vector<LayerSensitivity> profile;
    std::vector<MethodRow> rows;  // FP first
};

struct MedianRow {
    std::string method;
    std::string mode;
    double loss = 0.0;
    double exact_match = 0.0;
    double delta_loss = 0.0;
    double delta_exact_match = 0.0;
};

struct MatrixReport {
    PipelineConfig config;
    std::vector<SeedReport> seeds;
    std::vector<MedianRow> medians;  // over seeds, per method
};

/// Runs every configured method under identical per-seed data and models.
/// Deterministic: a fixed config yields a byte-identical JSON report.
MatrixReport run_matrix(const PipelineConfig& cfg);

std::string report_to_json(const MatrixReport& report);
/// Aligned text table for humans.
std::string report_to_text(const MatrixReport& report);

// ---- Calibration report (per-layer curves) ---------------------------------

std::string calibration_report_json(const QuantizedModel& qm);

// ---- Quantized checkpoint ---------------------------------------------------
// Directory: manifest.json plus one packed blob and one MBT1 equalization
// vector per layer.

void save_quantized(const std::string& dir, const QuantizedModel& qm, const PipelineConfig& cfg);
QuantizedModel load_quantized(const std::string& dir);

struct VerifyResult {
    bool ok = false;
    int layers_checked = 0;
    std::string detail;  // first mismatch, if any
};

/// Recomputes every stored objective value at the stored E from a fresh
/// calibration capture; exact equality is required.
VerifyResult verify_checkpoint(const ToyModel& model, const QuantizedModel& qm, const PipelineConfig& cfg);

// ---- Sensitivity profile JSON ----------------------------------------------

std::string profile_to_json(const SensitivityProfile& profile, const ToyConfig& cfg);
SensitivityProfile profile_from_json(const std::string& text);

}  // namespace mbq
