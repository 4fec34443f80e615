#include "mbq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mbq/pack.hpp"
#include "mbq/parallel.hpp"

namespace mbq {

std::string to_string(Method m) {
    switch (m) {
        case Method::Fp: return "fp";
        case Method::Rtn: return "rtn";
        case Method::CweMse: return "cwe-mse";
        case Method::BalancedCwe: return "balanced-cwe";
        case Method::MbqMse: return "mbq-mse";
        case Method::MbqMae: return "mbq-mae";
        case Method::RandomSplit: return "random-split";
        default: return "token-wise";
    }
}

Method method_from_string(const std::string& s) {
    if (s == "fp" || s == "fp32") return Method::Fp;
    if (s == "rtn") return Method::Rtn;
    if (s == "cwe-mse" || s == "cwe") return Method::CweMse;
    if (s == "balanced-cwe") return Method::BalancedCwe;
    if (s == "mbq-mse") return Method::MbqMse;
    if (s == "mbq-mae") return Method::MbqMae;
    if (s == "random-split") return Method::RandomSplit;
    if (s == "token-wise") return Method::TokenWise;
    throw ConfigError("unknown method: " + s);
}

bool method_needs_profile(Method m) {
    return m == Method::MbqMse || m == Method::MbqMae || m == Method::RandomSplit;
}

std::string to_string(BitMode b) {
    switch (b) {
        case BitMode::W3: return "w3";
        case BitMode::W4: return "w4";
        case BitMode::W4A8: return "w4a8";
        default: return "w8a8";
    }
}

BitMode bit_mode_from_string(const std::string& s) {
    if (s == "w3") return BitMode::W3;
    if (s == "w4") return BitMode::W4;
    if (s == "w4a8") return BitMode::W4A8;
    if (s == "w8a8") return BitMode::W8A8;
    throw ConfigError("unknown bit mode: " + s);
}

BitMode make_bit_mode(const std::string& quant_mode, int bits) {
    if (quant_mode == "weight-only") {
        if (bits == 3) return BitMode::W3;
        if (bits == 4) return BitMode::W4;
        throw ConfigError("weight-only mode supports 3 or 4 bits");
    }
    if (quant_mode == "weight-activation") {
        if (bits == 4) return BitMode::W4A8;
        if (bits == 8) return BitMode::W8A8;
        throw ConfigError("weight-activation mode supports 4 or 8 weight bits");
    }
    throw ConfigError("unknown quant mode: " + quant_mode);
}

bool is_weight_activation(BitMode b) { return b == BitMode::W4A8 || b == BitMode::W8A8; }

int weight_bits(BitMode b) {
    switch (b) {
        case BitMode::W3: return 3;
        case BitMode::W4:
        case BitMode::W4A8: return 4;
        default: return 8;
    }
}

QuantSpec weight_quant_spec(BitMode b, int group_size) {
    if (is_weight_activation(b)) return QuantSpec::sym_per_channel(weight_bits(b));
    return QuantSpec::asym_group(weight_bits(b), group_size);
}

std::optional<QuantSpec> act_quant_spec(BitMode b) {
    if (!is_weight_activation(b)) return std::nullopt;
    return QuantSpec::sym_per_token(8);
}

void PipelineConfig::validate() const {
    model.validate();
    if (n_seeds < 1) throw ConfigError("config: n_seeds must be >= 1");
    if (n_train < 1 || n_calib < 1 || n_eval < 1) throw ConfigError("config: dataset sizes must be >= 1");
    if (group_size < 1) throw ConfigError("config: group_size must be >= 1");
    if (grid.empty()) throw ConfigError("config: empty alpha grid");
    for (const MethodSpec& ms : methods)
        if (ms.method == Method::Fp) throw ConfigError("config: fp is the implicit baseline, not a method entry");
}

std::vector<MethodSpec> default_methods() {
    return {
        {Method::Rtn, BitMode::W3},        {Method::CweMse, BitMode::W3},    {Method::BalancedCwe, BitMode::W3},
        {Method::MbqMse, BitMode::W3},     {Method::MbqMae, BitMode::W3},    {Method::RandomSplit, BitMode::W3},
        {Method::TokenWise, BitMode::W3},  {Method::Rtn, BitMode::W8A8},
    };
}

PipelineConfig default_config() {
    PipelineConfig cfg;
    cfg.methods = default_methods();
    return cfg;
}

std::string config_to_json(const PipelineConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["n_seeds"] = cfg.n_seeds;
    j["model"] = {{"d_model", cfg.model.d_model},       {"n_blocks", cfg.model.n_blocks},
                  {"mlp_hidden", cfg.model.mlp_hidden}, {"n_keys", cfg.model.n_keys},
                  {"key_repeats", cfg.model.key_repeats}, {"prefix_len", cfg.model.prefix_len},
                  {"target_len", cfg.model.target_len}, {"n_lang", cfg.model.n_lang},
                  {"task_seed", cfg.model.task_seed}};
    j["training"] = {{"steps", cfg.training.steps}, {"batch_size", cfg.training.batch_size},
                     {"lr", cfg.training.lr},       {"beta1", cfg.training.beta1},
                     {"beta2", cfg.training.beta2}, {"eps", cfg.training.eps},
                     {"lr_min_frac", cfg.training.lr_min_frac}, {"clip_norm", cfg.training.clip_norm},
                     {"workers", cfg.training.workers}};
    j["n_train"] = cfg.n_train;
    j["n_calib"] = cfg.n_calib;
    j["n_eval"] = cfg.n_eval;
    j["group_size"] = cfg.group_size;
    j["balanced_vision_factor"] = cfg.balanced_vision_factor;
    j["workers"] = cfg.workers;
    j["grid"] = cfg.grid;
    nlohmann::json methods = nlohmann::json::array();
    for (const MethodSpec& ms : cfg.methods)
        methods.push_back({{"method", to_string(ms.method)}, {"mode", to_string(ms.mode)}});
    j["methods"] = methods;
    return j.dump(2);
}

namespace {

PipelineConfig config_from_parsed(const nlohmann::json& j) {
    PipelineConfig cfg = default_config();
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("n_seeds")) cfg.n_seeds = j["n_seeds"].get<int>();
    if (j.contains("model")) {
        const auto& m = j["model"];
        if (m.contains("d_model")) cfg.model.d_model = m["d_model"].get<int>();
        if (m.contains("n_blocks")) cfg.model.n_blocks = m["n_blocks"].get<int>();
        if (m.contains("mlp_hidden")) cfg.model.mlp_hidden = m["mlp_hidden"].get<int>();
        if (m.contains("n_keys")) cfg.model.n_keys = m["n_keys"].get<int>();
        if (m.contains("key_repeats")) cfg.model.key_repeats = m["key_repeats"].get<int>();
        if (m.contains("prefix_len")) cfg.model.prefix_len = m["prefix_len"].get<int>();
        if (m.contains("target_len")) cfg.model.target_len = m["target_len"].get<int>();
        if (m.contains("n_lang")) cfg.model.n_lang = m["n_lang"].get<int>();
        if (m.contains("task_seed")) cfg.model.task_seed = m["task_seed"].get<std::uint64_t>();
    }
    if (j.contains("training")) {
        const auto& t = j["training"];
        if (t.contains("steps")) cfg.training.steps = t["steps"].get<int>();
        if (t.contains("batch_size")) cfg.training.batch_size = t["batch_size"].get<int>();
        if (t.contains("lr")) cfg.training.lr = t["lr"].get<double>();
        if (t.contains("beta1")) cfg.training.beta1 = t["beta1"].get<double>();
        if (t.contains("beta2")) cfg.training.beta2 = t["beta2"].get<double>();
        if (t.contains("eps")) cfg.training.eps = t["eps"].get<double>();
        if (t.contains("lr_min_frac")) cfg.training.lr_min_frac = t["lr_min_frac"].get<double>();
        if (t.contains("clip_norm")) cfg.training.clip_norm = t["clip_norm"].get<double>();
        if (t.contains("workers")) cfg.training.workers = t["workers"].get<int>();
    }
    if (j.contains("n_train")) cfg.n_train = j["n_train"].get<int>();
    if (j.contains("n_calib")) cfg.n_calib = j["n_calib"].get<int>();
    if (j.contains("n_eval")) cfg.n_eval = j["n_eval"].get<int>();
    if (j.contains("group_size")) cfg.group_size = j["group_size"].get<int>();
    if (j.contains("balanced_vision_factor")) cfg.balanced_vision_factor = j["balanced_vision_factor"].get<double>();
    if (j.contains("workers")) cfg.workers = j["workers"].get<int>();
    if (j.contains("grid")) cfg.grid = j["grid"].get<std::vector<double>>();
    if (j.contains("methods")) {
        cfg.methods.clear();
        for (const auto& ms : j["methods"])
            cfg.methods.push_back({method_from_string(ms.at("method").get<std::string>()),
                                   bit_mode_from_string(ms.at("mode").get<std::string>())});
    }
    cfg.validate();
    return cfg;
}

}  // namespace

PipelineConfig config_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw FormatError("config: invalid JSON");
    return config_from_parsed(j);
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return config_from_json(ss.str());
}

SeedStreams seed_streams(std::uint64_t seed) {
    const Rng root(seed);
    return {root.child(0), root.child(1), root.child(2), root.child(3), root.child(4)};
}

Rng split_rng(std::uint64_t seed, int layer_index) {
    return Rng(seed).child(100 + static_cast<std::uint64_t>(layer_index));
}

std::vector<ModalBatch> capture_calibration_inputs(const ToyModel& model,
                                                   const std::vector<SyntheticSample>& calib, int workers) {
    const int n_layers = n_linear_layers(model.cfg);
    std::vector<ForwardResult> passes(calib.size());
    parallel_index(static_cast<int>(calib.size()), workers,
                   [&](int i) { passes[i] = forward(model, calib[i]); });
    std::vector<Modality> tags;
    for (const SyntheticSample& s : calib) tags.insert(tags.end(), s.tags.begin(), s.tags.end());
    std::vector<ModalBatch> captures;
    captures.reserve(static_cast<std::size_t>(n_layers));
    for (int l = 0; l < n_layers; ++l) {
        std::vector<Matrix> parts;
        parts.reserve(passes.size());
        for (const ForwardResult& fr : passes) parts.push_back(fr.linears[l].input);
        captures.push_back(ModalBatch(vstack(parts), tags));
    }
    return captures;
}

namespace {

const Matrix& layer_weight(const ToyModel& m, int layer_index) {
    const ToyBlock& blk = m.blocks[layer_index / kLinearsPerBlock];
    switch (static_cast<LinearKind>(layer_index % kLinearsPerBlock)) {
        case LinearKind::Q: return blk.wq;
        case LinearKind::K: return blk.wk;
        case LinearKind::V: return blk.wv;
        case LinearKind::Out: return blk.wo;
        case LinearKind::Fc1: return blk.w1;
        default: return blk.w2;
    }
}

int effective_group_size(int requested, int cols) {
    const int gs = std::min(requested, cols);
    if (cols % gs != 0)
        throw ConfigError("group size " + std::to_string(gs) + " does not divide layer width " + std::to_string(cols));
    return gs;
}

// One backward pass per sample covering token weights for every layer.
std::vector<std::vector<double>> all_token_grad_weights(const ToyModel& m,
                                                        const std::vector<SyntheticSample>& data, int workers) {
    const int n_layers = n_linear_layers(m.cfg);
    std::vector<std::vector<std::vector<double>>> per_sample(data.size());
    parallel_index(static_cast<int>(data.size()), workers, [&](int si) {
        const BackwardResult back = backward(m, data[si]);
        per_sample[si].resize(n_layers);
        for (int l = 0; l < n_layers; ++l) {
            const Matrix& g = back.layer_output_grads[l];
            for (int i = 0; i < g.rows(); ++i) {
                const float* row = g.row(i);
                double sum = 0.0;
                for (int j = 0; j < g.cols(); ++j) sum += std::fabs(static_cast<double>(row[j]));
                per_sample[si][l].push_back(sum / static_cast<double>(g.cols()));
            }
        }
    });
    std::vector<std::vector<double>> weights(static_cast<std::size_t>(n_layers));
    for (const auto& sample_weights : per_sample)
        for (int l = 0; l < n_layers; ++l)
            weights[l].insert(weights[l].end(), sample_weights[l].begin(), sample_weights[l].end());
    return weights;
}

}  // namespace

QuantizedModel quantize_model(const ToyModel& model, Method method, BitMode mode,
                              const std::vector<SyntheticSample>& calib, const SensitivityProfile* profile,
                              const PipelineConfig& cfg) {
    if (method == Method::Fp) throw ConfigError("quantize_model: fp is not a quantization method");
    if (method_needs_profile(method) && profile == nullptr)
        throw ConfigError("quantize_model: method " + to_string(method) + " requires a sensitivity profile");

    const std::vector<ModalBatch> captures = capture_calibration_inputs(model, calib, cfg.workers);
    std::vector<std::vector<double>> token_weights;
    if (method == Method::TokenWise) token_weights = all_token_grad_weights(model, calib, cfg.workers);

    const std::optional<QuantSpec> spec_a = act_quant_spec(mode);
    const QuantTarget target = is_weight_activation(mode) ? QuantTarget::WeightActivation : QuantTarget::WeightOnly;

    QuantizedModel qm;
    qm.method = method;
    qm.mode = mode;
    qm.group_size = cfg.group_size;

    const int n_layers = n_linear_layers(model.cfg);
    std::vector<LayerQuantRecord> records(static_cast<std::size_t>(n_layers));
    parallel_index(n_layers, cfg.workers, [&](int l) {
        const Matrix& w = layer_weight(model, l);
        const ModalBatch& x = captures[l];
        const QuantSpec spec_w = weight_quant_spec(mode, effective_group_size(cfg.group_size, w.cols()));

        LayerQuantRecord rec;
        rec.name = layer_name(l / kLinearsPerBlock, static_cast<LinearKind>(l % kLinearsPerBlock));

        CalibObjective objective;
        objective.target = target;
        objective.vision_factor = cfg.balanced_vision_factor;

        if (method == Method::Rtn) {
            rec.e = EqualizationVector::ones(w.cols());
            rec.alpha = kIdentityAlpha;
            objective.kind = ObjectiveKind::CweMse;
            rec.objective_value = recon_loss(w, x, rec.e, spec_w, spec_a, objective, std::nullopt);
            rec.identity_value = rec.objective_value;
        } else {
            CalibResult result = [&] {
                switch (method) {
                    case Method::CweMse:
                        objective.kind = ObjectiveKind::CweMse;
                        return search(w, x, spec_w, spec_a, objective, std::nullopt, cfg.grid);
                    case Method::BalancedCwe:
                        objective.kind = ObjectiveKind::BalancedCwe;
                        return search(w, x, spec_w, spec_a, objective, std::nullopt, cfg.grid);
                    case Method::MbqMse:
                    case Method::MbqMae: {
                        objective.kind = method == Method::MbqMse ? ObjectiveKind::MbqMse : ObjectiveKind::MbqMae;
                        const GradientWeights gw{profile->layers[l].g_vision, profile->layers[l].g_language};
                        rec.g_vision = gw.vision;
                        rec.g_language = gw.language;
                        return search(w, x, spec_w, spec_a, objective, gw, cfg.grid);
                    }
                    case Method::RandomSplit: {
                        const GradientWeights gw{profile->layers[l].g_vision, profile->layers[l].g_language};
                        rec.g_vision = gw.vision;
                        rec.g_language = gw.language;
                        Rng rng = split_rng(cfg.seed, l);
                        return ablation_random_split(w, x, spec_w, spec_a, gw, cfg.grid, rng);
                    }
                    default:
                        return ablation_tokenwise(w, x, token_weights[l], spec_w, spec_a, cfg.grid);
                }
            }();
            rec.e = result.e;
            rec.alpha = result.alpha;
            rec.objective_value = result.objective_value;
            rec.identity_value = result.identity_value;
            rec.curve = std::move(result.candidate_values);
        }

        CalibObjective mse_probe;
        mse_probe.kind = ObjectiveKind::CweMse;
        mse_probe.target = target;
        rec.recon_mse = recon_loss(w, x, rec.e, spec_w, spec_a, mse_probe, std::nullopt);

        rec.weights = spec_w.mode == QuantMode::Asymmetric ? quantize_asym_group(scale_cols(w, rec.e.factors), spec_w)
                                                           : quantize_sym(scale_cols(w, rec.e.factors), spec_w);
        records[l] = std::move(rec);
    });
    qm.layers = std::move(records);
    return qm;
}

LinearOverrides overrides_for(const QuantizedModel& qm, const ToyModel& model) {
    const int n_layers = n_linear_layers(model.cfg);
    if (static_cast<int>(qm.layers.size()) != n_layers)
        throw ShapeError("overrides_for: layer count mismatch");
    LinearOverrides overrides(static_cast<std::size_t>(n_layers));
    const std::optional<QuantSpec> spec_a = act_quant_spec(qm.mode);
    for (int l = 0; l < n_layers; ++l) {
        LinearOverride ov;
        ov.weight = dequantize(qm.layers[l].weights);
        ov.input_scale = qm.layers[l].e.reciprocal();
        ov.act_spec = spec_a;
        overrides[l] = std::move(ov);
    }
    return overrides;
}

EvalMetrics eval_task(const ToyModel& model, const std::vector<SyntheticSample>& eval_data,
                      const LinearOverrides* overrides, int workers) {
    if (eval_data.empty()) throw ConfigError("eval_task: empty dataset");
    std::vector<double> losses(eval_data.size());
    std::vector<char> matched(eval_data.size(), 0);
    parallel_index(static_cast<int>(eval_data.size()), workers, [&](int i) {
        const SyntheticSample& s = eval_data[i];
        const ForwardResult fr = forward(model, s, overrides);
        losses[i] = sft_loss(fr.logits, s);
        bool all_correct = true;
        const std::vector<int> ids = s.full_ids();
        for (int t = s.target_begin() - 1; t + 1 < s.target_begin() + s.target_len(); ++t) {
            const float* row = fr.logits.row(t);
            int argmax = 0;
            for (int j = 1; j < fr.logits.cols(); ++j)
                if (row[j] > row[argmax]) argmax = j;
            if (argmax != ids[t + 1]) {
                all_correct = false;
                break;
            }
        }
        matched[i] = all_correct ? 1 : 0;
    });
    double total_loss = 0.0;
    int matches = 0;
    for (std::size_t i = 0; i < eval_data.size(); ++i) {
        total_loss += losses[i];
        matches += matched[i];
    }
    return {total_loss / static_cast<double>(eval_data.size()),
            static_cast<double>(matches) / static_cast<double>(eval_data.size())};
}

namespace {

BlockSensitivity final_block_sensitivity(const SensitivityProfile& profile, const ToyConfig& cfg) {
    BlockSensitivity bs;
    const int first = (cfg.n_blocks - 1) * kLinearsPerBlock;
    for (int l = first; l < first + kLinearsPerBlock; ++l) {
        bs.g_vision += profile.layers[l].g_vision;
        bs.g_language += profile.layers[l].g_language;
    }
    bs.g_vision /= kLinearsPerBlock;
    bs.g_language /= kLinearsPerBlock;
    bs.ratio = bs.g_vision > 0.0 ? bs.g_language / bs.g_vision : std::numeric_limits<double>::infinity();
    return bs;
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

MatrixReport run_matrix(const PipelineConfig& cfg_in) {
    PipelineConfig cfg = cfg_in;
    cfg.validate();
    if (cfg.methods.empty()) cfg.methods = default_methods();

    MatrixReport report;
    report.config = cfg;

    for (int si = 0; si < cfg.n_seeds; ++si) {
        PipelineConfig seed_cfg = cfg;
        seed_cfg.seed = cfg.seed + static_cast<std::uint64_t>(si);
        SeedStreams streams = seed_streams(seed_cfg.seed);

        const std::vector<SyntheticSample> train_data = gen_data(streams.train_data, cfg.n_train, cfg.model, KeySubset::All);
        const std::vector<SyntheticSample> calib_data =
            gen_data(streams.calib_data, cfg.n_calib, cfg.model, KeySubset::CalibHalf);
        const std::vector<SyntheticSample> eval_data =
            gen_data(streams.eval_data, cfg.n_eval, cfg.model, KeySubset::EvalHalf);

        const ToyModel initial = init_model(cfg.model, streams.init);
        TrainStats tstats;
        const ToyModel model = train(initial, train_data, cfg.training, streams.train_loop, &tstats);
        const SensitivityProfile profile = sensitivity_profile(model, calib_data, LossMask::TargetsOnly, cfg.workers);

        SeedReport sr;
        sr.seed = seed_cfg.seed;
        sr.train_initial_loss = tstats.initial_loss;
        sr.train_final_loss = tstats.final_loss;
        sr.final_block = final_block_sensitivity(profile, cfg.model);
        sr.profile = profile.layers;

        const EvalMetrics fp = eval_task(model, eval_data, nullptr, cfg.workers);
        MethodRow fp_row;
        fp_row.method = "fp";
        fp_row.loss = fp.loss;
        fp_row.exact_match = fp.exact_match;
        sr.rows.push_back(fp_row);

        for (const MethodSpec& ms : cfg.methods) {
            const QuantizedModel qm = quantize_model(model, ms.method, ms.mode, calib_data,
                                                     method_needs_profile(ms.method) ? &profile : nullptr, seed_cfg);
            const LinearOverrides ov = overrides_for(qm, model);
            const EvalMetrics metrics = eval_task(model, eval_data, &ov, cfg.workers);
            MethodRow row;
            row.method = to_string(ms.method);
            row.mode = to_string(ms.mode);
            row.loss = metrics.loss;
            row.exact_match = metrics.exact_match;
            row.delta_loss = metrics.loss - fp.loss;
            row.delta_exact_match = metrics.exact_match - fp.exact_match;
            for (const LayerQuantRecord& rec : qm.layers)
                row.layer_recon.push_back({rec.name, rec.alpha, rec.objective_value, rec.recon_mse});
            sr.rows.push_back(std::move(row));
        }
        report.seeds.push_back(std::move(sr));
    }

    // medians over seeds, row-aligned across seeds by construction
    const std::size_t n_rows = report.seeds.front().rows.size();
    for (std::size_t r = 0; r < n_rows; ++r) {
        std::vector<double> losses, ems, dlosses, dems;
        for (const SeedReport& sr : report.seeds) {
            losses.push_back(sr.rows[r].loss);
            ems.push_back(sr.rows[r].exact_match);
            dlosses.push_back(sr.rows[r].delta_loss);
            dems.push_back(sr.rows[r].delta_exact_match);
        }
        MedianRow mr;
        mr.method = report.seeds.front().rows[r].method;
        mr.mode = report.seeds.front().rows[r].mode;
        mr.loss = median_of(losses);
        mr.exact_match = median_of(ems);
        mr.delta_loss = median_of(dlosses);
        mr.delta_exact_match = median_of(dems);
        report.medians.push_back(mr);
    }
    return report;
}

namespace {

nlohmann::json row_json(const MethodRow& row) {
    nlohmann::json j;
    j["method"] = row.method;
    j["mode"] = row.mode;
    j["loss"] = row.loss;
    j["exact_match"] = row.exact_match;
    j["delta_loss"] = row.delta_loss;
    j["delta_exact_match"] = row.delta_exact_match;
    if (!row.layer_recon.empty()) {
        nlohmann::json layers = nlohmann::json::array();
        for (const LayerReconRow& lr : row.layer_recon)
            layers.push_back({{"layer", lr.layer},
                              {"alpha", lr.alpha},
                              {"objective_value", lr.objective_value},
                              {"recon_mse", lr.recon_mse}});
        j["layers"] = layers;
    }
    return j;
}

}  // namespace

std::string report_to_json(const MatrixReport& report) {
    nlohmann::json j;
    j["config"] = nlohmann::json::parse(config_to_json(report.config));
    nlohmann::json seeds = nlohmann::json::array();
    for (const SeedReport& sr : report.seeds) {
        nlohmann::json s;
        s["seed"] = sr.seed;
        s["train"] = {{"initial_loss", sr.train_initial_loss}, {"final_loss", sr.train_final_loss}};
        s["final_block_sensitivity"] = {{"g_vision", sr.final_block.g_vision},
                                        {"g_language", sr.final_block.g_language},
                                        {"ratio", sr.final_block.ratio}};
        nlohmann::json prof = nlohmann::json::array();
        for (const LayerSensitivity& ls : sr.profile)
            prof.push_back({{"layer", ls.layer}, {"g_vision", ls.g_vision}, {"g_language", ls.g_language}});
        s["profile"] = prof;
        nlohmann::json rows = nlohmann::json::array();
        for (const MethodRow& row : sr.rows) rows.push_back(row_json(row));
        s["rows"] = rows;
        seeds.push_back(std::move(s));
    }
    j["seeds"] = seeds;
    nlohmann::json medians = nlohmann::json::array();
    for (const MedianRow& mr : report.medians)
        medians.push_back({{"method", mr.method},
                           {"mode", mr.mode},
                           {"loss", mr.loss},
                           {"exact_match", mr.exact_match},
                           {"delta_loss", mr.delta_loss},
                           {"delta_exact_match", mr.delta_exact_match}});
    j["medians"] = medians;
    return j.dump(2);
}

std::string report_to_text(const MatrixReport& report) {
    std::ostringstream out;
    out << "method            mode   median_loss  median_em  d_loss     d_em\n";
    char line[160];
    for (const MedianRow& mr : report.medians) {
        std::snprintf(line, sizeof(line), "%-17s %-6s %11.5f %10.4f %9.5f %8.4f\n", mr.method.c_str(),
                      mr.mode.empty() ? "-" : mr.mode.c_str(), mr.loss, mr.exact_match, mr.delta_loss,
                      mr.delta_exact_match);
        out << line;
    }
    for (const SeedReport& sr : report.seeds) {
        std::snprintf(line, sizeof(line), "seed %llu: train %.4f -> %.4f, final-block g_l/g_v = %.3g\n",
                      static_cast<unsigned long long>(sr.seed), sr.train_initial_loss, sr.train_final_loss,
                      sr.final_block.ratio);
        out << line;
    }
    return out.str();
}

std::string calibration_report_json(const QuantizedModel& qm) {
    nlohmann::json j;
    j["method"] = to_string(qm.method);
    j["mode"] = to_string(qm.mode);
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerQuantRecord& rec : qm.layers) {
        nlohmann::json l;
        l["layer"] = rec.name;
        l["objective"] = to_string(qm.method);
        l["alpha"] = rec.alpha;
        l["objective_value"] = rec.objective_value;
        l["identity_value"] = rec.identity_value;
        l["g_vision"] = rec.g_vision;
        l["g_language"] = rec.g_language;
        l["recon_mse"] = rec.recon_mse;
        nlohmann::json curve = nlohmann::json::array();
        for (const GridPoint& gp : rec.curve) curve.push_back({gp.alpha, gp.value});
        l["curve"] = curve;
        layers.push_back(std::move(l));
    }
    j["layers"] = layers;
    return j.dump(2);
}

void save_quantized(const std::string& dir, const QuantizedModel& qm, const PipelineConfig& cfg) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "mbq-quantized-dir";
    manifest["method"] = to_string(qm.method);
    manifest["mode"] = to_string(qm.mode);
    manifest["group_size"] = qm.group_size;
    manifest["config"] = nlohmann::json::parse(config_to_json(cfg));
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerQuantRecord& rec : qm.layers) {
        const std::string blob_file = rec.name + ".blob";
        const std::string e_file = rec.name + ".e.mbt";
        save_packed_blob(dir + "/" + blob_file, rec.weights);
        save_mbt(dir + "/" + e_file, Matrix(1, rec.e.size(), rec.e.factors));
        nlohmann::json l;
        l["name"] = rec.name;
        l["blob"] = blob_file;
        l["e"] = e_file;
        l["alpha"] = rec.alpha;
        l["objective_value"] = rec.objective_value;
        l["identity_value"] = rec.identity_value;
        l["g_vision"] = rec.g_vision;
        l["g_language"] = rec.g_language;
        l["recon_mse"] = rec.recon_mse;
        nlohmann::json curve = nlohmann::json::array();
        for (const GridPoint& gp : rec.curve) curve.push_back({gp.alpha, gp.value});
        l["curve"] = curve;
        layers.push_back(std::move(l));
    }
    manifest["layers"] = layers;
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw FormatError("save_quantized: cannot open manifest in " + dir);
    f << manifest.dump(2) << "\n";
}

QuantizedModel load_quantized(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw FormatError("load_quantized: cannot open manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(f, nullptr, false);
    if (manifest.is_discarded()) throw FormatError("load_quantized: bad manifest in " + dir);

    QuantizedModel qm;
    qm.method = method_from_string(manifest.at("method").get<std::string>());
    qm.mode = bit_mode_from_string(manifest.at("mode").get<std::string>());
    qm.group_size = manifest.at("group_size").get<int>();
    for (const auto& l : manifest.at("layers")) {
        LayerQuantRecord rec;
        rec.name = l.at("name").get<std::string>();
        rec.weights = load_packed_blob(dir + "/" + l.at("blob").get<std::string>());
        const MbtTensor e = load_mbt(dir + "/" + l.at("e").get<std::string>());
        rec.e = EqualizationVector(e.matrix.data());
        rec.alpha = l.at("alpha").get<double>();
        rec.objective_value = l.at("objective_value").get<double>();
        rec.identity_value = l.at("identity_value").get<double>();
        rec.g_vision = l.at("g_vision").get<double>();
        rec.g_language = l.at("g_language").get<double>();
        rec.recon_mse = l.at("recon_mse").get<double>();
        for (const auto& gp : l.at("curve")) rec.curve.push_back({gp.at(0).get<double>(), gp.at(1).get<double>()});
        qm.layers.push_back(std::move(rec));
    }
    return qm;
}

VerifyResult verify_checkpoint(const ToyModel& model, const QuantizedModel& qm, const PipelineConfig& cfg) {
    SeedStreams streams = seed_streams(cfg.seed);
    const std::vector<SyntheticSample> calib = gen_data(streams.calib_data, cfg.n_calib, cfg.model, KeySubset::CalibHalf);
    SensitivityProfile profile;
    const SensitivityProfile* profile_ptr = nullptr;
    if (method_needs_profile(qm.method)) {
        profile = sensitivity_profile(model, calib);
        profile_ptr = &profile;
    }
    const QuantizedModel recomputed = quantize_model(model, qm.method, qm.mode, calib, profile_ptr, cfg);

    VerifyResult vr;
    vr.layers_checked = static_cast<int>(qm.layers.size());
    for (std::size_t l = 0; l < qm.layers.size(); ++l) {
        const LayerQuantRecord& a = qm.layers[l];
        const LayerQuantRecord& b = recomputed.layers[l];
        if (a.objective_value != b.objective_value || a.alpha != b.alpha) {
            vr.ok = false;
            vr.detail = "layer " + a.name + ": stored objective " + std::to_string(a.objective_value) +
                        " != recomputed " + std::to_string(b.objective_value);
            return vr;
        }
        if (a.weights.codes != b.weights.codes) {
            vr.ok = false;
            vr.detail = "layer " + a.name + ": stored codes differ from recomputation";
            return vr;
        }
    }
    vr.ok = true;
    return vr;
}

std::string profile_to_json(const SensitivityProfile& profile, const ToyConfig& cfg) {
    nlohmann::json j;
    j["n_blocks"] = cfg.n_blocks;
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerSensitivity& ls : profile.layers)
        layers.push_back({{"layer", ls.layer}, {"g_vision", ls.g_vision}, {"g_language", ls.g_language}});
    j["layers"] = layers;
    return j.dump(2);
}

SensitivityProfile profile_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw FormatError("profile: invalid JSON");
    SensitivityProfile profile;
    for (const auto& l : j.at("layers"))
        profile.layers.push_back({l.at("layer").get<std::string>(), l.at("g_vision").get<double>(),
                                  l.at("g_language").get<double>()});
    return profile;
}

}  // namespace mbq
