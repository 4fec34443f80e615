#include "mbq/quantizer.hpp"

#include <algorithm>
#include <cmath>

namespace mbq {

void QuantSpec::validate() const {
    if (bits != 3 && bits != 4 && bits != 8)
        throw ConfigError("QuantSpec: unsupported bit-width " + std::to_string(bits));
    if (mode == QuantMode::Asymmetric && granularity != Granularity::PerGroup)
        throw ConfigError("QuantSpec: asymmetric mode requires per-group granularity");
    if (mode == QuantMode::Symmetric && granularity == Granularity::PerGroup)
        throw ConfigError("QuantSpec: symmetric mode is per-output-channel or per-token");
    if (granularity == Granularity::PerGroup && group_size <= 0)
        throw ConfigError("QuantSpec: group_size must be positive");
}

QuantSpec QuantSpec::asym_group(int bits, int group_size) {
    QuantSpec s{bits, QuantMode::Asymmetric, Granularity::PerGroup, group_size};
    s.validate();
    return s;
}

QuantSpec QuantSpec::sym_per_channel(int bits) {
    QuantSpec s{bits, QuantMode::Symmetric, Granularity::PerOutputChannel, 0};
    s.validate();
    return s;
}

QuantSpec QuantSpec::sym_per_token(int bits) {
    QuantSpec s{bits, QuantMode::Symmetric, Granularity::PerToken, 0};
    s.validate();
    return s;
}

std::string to_string(QuantMode m) { return m == QuantMode::Asymmetric ? "asym" : "sym"; }

std::string to_string(Granularity g) {
    switch (g) {
        case Granularity::PerGroup: return "per-group";
        case Granularity::PerOutputChannel: return "per-output-channel";
        default: return "per-token";
    }
}

QuantMode quant_mode_from_string(const std::string& s) {
    if (s == "asym") return QuantMode::Asymmetric;
    if (s == "sym") return QuantMode::Symmetric;
    throw ConfigError("unknown quant mode: " + s);
}

Granularity granularity_from_string(const std::string& s) {
    if (s == "per-group") return Granularity::PerGroup;
    if (s == "per-output-channel") return Granularity::PerOutputChannel;
    if (s == "per-token") return Granularity::PerToken;
    throw ConfigError("unknown granularity: " + s);
}

int QuantizedTensor::groups_per_row() const {
    if (spec.granularity == Granularity::PerGroup) return cols / spec.group_size;
    return 1;
}

std::int32_t round_half_away(double x) {
    return static_cast<std::int32_t>(x >= 0.0 ? std::floor(x + 0.5) : -std::floor(-x + 0.5));
}

QuantizedTensor quantize_asym_group(const Matrix& w, const QuantSpec& spec) {
    spec.validate();
    if (spec.mode != QuantMode::Asymmetric) throw ConfigError("quantize_asym_group: spec must be asymmetric");
    if (w.cols() % spec.group_size != 0)
        throw ShapeError("quantize_asym_group: group_size " + std::to_string(spec.group_size) +
                         " does not divide cols " + std::to_string(w.cols()));

    const int n_groups = w.cols() / spec.group_size;
    const std::int32_t qmax = (1 << spec.bits) - 1;

    QuantizedTensor q;
    q.spec = spec;
    q.rows = w.rows();
    q.cols = w.cols();
    q.codes.resize(w.size());
    q.scales.reserve(static_cast<std::size_t>(w.rows()) * n_groups);
    q.zeros.reserve(static_cast<std::size_t>(w.rows()) * n_groups);

    for (int i = 0; i < w.rows(); ++i) {
        const float* row = w.row(i);
        for (int g = 0; g < n_groups; ++g) {
            const int begin = g * spec.group_size;
            float lo = row[begin], hi = row[begin];
            for (int j = begin + 1; j < begin + spec.group_size; ++j) {
                lo = std::min(lo, row[j]);
                hi = std::max(hi, row[j]);
            }
            float scale = 1.0f;
            const float zero = lo;
            std::int32_t* codes = q.codes.data() + static_cast<std::size_t>(i) * w.cols() + begin;
            if (hi == lo) {
                for (int j = 0; j < spec.group_size; ++j) codes[j] = 0;
            } else {
                scale = (hi - lo) / static_cast<float>(qmax);
                for (int j = 0; j < spec.group_size; ++j) {
                    const std::int32_t c = round_half_away((static_cast<double>(row[begin + j]) - zero) / scale);
                    codes[j] = std::clamp(c, 0, qmax);
                }
            }
            q.scales.push_back(scale);
            q.zeros.push_back(zero);
        }
    }
    return q;
}

QuantizedTensor quantize_sym(const Matrix& m, const QuantSpec& spec) {
    spec.validate();
    if (spec.mode != QuantMode::Symmetric) throw ConfigError("quantize_sym: spec must be symmetric");

    const std::int32_t qmax = (1 << (spec.bits - 1)) - 1;

    QuantizedTensor q;
    q.spec = spec;
    q.rows = m.rows();
    q.cols = m.cols();
    q.codes.resize(m.size());
    q.scales.reserve(m.rows());

    for (int i = 0; i < m.rows(); ++i) {
        const float* row = m.row(i);
        float absmax = 0.0f;
        for (int j = 0; j < m.cols(); ++j) absmax = std::max(absmax, std::fabs(row[j]));
        float scale = 1.0f;
        std::int32_t* codes = q.codes.data() + static_cast<std::size_t>(i) * m.cols();
        if (absmax == 0.0f) {
            for (int j = 0; j < m.cols(); ++j) codes[j] = 0;
        } else {
            scale = absmax / static_cast<float>(qmax);
            for (int j = 0; j < m.cols(); ++j) {
                const std::int32_t c = round_half_away(static_cast<double>(row[j]) / scale);
                codes[j] = std::clamp(c, -qmax, qmax);
            }
        }
        q.scales.push_back(scale);
    }
    return q;
}

Matrix dequantize(const QuantizedTensor& q) {
    std::vector<float> out(static_cast<std::size_t>(q.rows) * q.cols);
    if (q.spec.mode == QuantMode::Asymmetric) {
        const int gs = q.spec.group_size;
        const int n_groups = q.cols / gs;
        for (int i = 0; i < q.rows; ++i) {
            for (int g = 0; g < n_groups; ++g) {
                const float s = q.scales[static_cast<std::size_t>(i) * n_groups + g];
                const float z = q.zeros[static_cast<std::size_t>(i) * n_groups + g];
                const std::size_t base = static_cast<std::size_t>(i) * q.cols + static_cast<std::size_t>(g) * gs;
                for (int j = 0; j < gs; ++j) out[base + j] = static_cast<float>(q.codes[base + j]) * s + z;
            }
        }
    } else {
        for (int i = 0; i < q.rows; ++i) {
            const float s = q.scales[i];
            const std::size_t base = static_cast<std::size_t>(i) * q.cols;
            for (int j = 0; j < q.cols; ++j) out[base + j] = static_cast<float>(q.codes[base + j]) * s;
        }
    }
    return Matrix(q.rows, q.cols, std::move(out));
}

Matrix fake_quant(const Matrix& m, const QuantSpec& spec) {
    if (spec.mode == QuantMode::Asymmetric) return dequantize(quantize_asym_group(m, spec));
    return dequantize(quantize_sym(m, spec));
}

}  // namespace mbq
