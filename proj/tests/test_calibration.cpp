#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mbq/calibration.hpp"

using namespace mbq;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> data(static_cast<std::size_t>(rows) * cols);
    for (float& v : data) v = rng.uniform(lo, hi);
    return Matrix(rows, cols, std::move(data));
}

ModalBatch random_batch(Rng& rng, int n_tokens, int d, int n_vision) {
    std::vector<Modality> tags(n_tokens, Modality::Language);
    for (int i = 0; i < n_vision; ++i) tags[i] = Modality::Vision;
    return ModalBatch(random_matrix(rng, n_tokens, d), tags);
}

}  // namespace

TEST_CASE("channel stats basics") {
    const ModalBatch ones(Matrix::filled(4, 3, 1.0f), std::vector<Modality>(4, Modality::Language));
    Rng rng(1);
    const Matrix w = random_matrix(rng, 2, 3);
    const ChannelStats s = channel_stats(ones, w);
    for (double v : s.act_abs_mean) CHECK(v == 1.0);

    const ModalBatch two_tok(Matrix(2, 1, {-2.0f, 2.0f}), {Modality::Vision, Modality::Language});
    const ChannelStats s1 = channel_stats(two_tok, Matrix::filled(3, 1, 0.5f));
    CHECK(s1.act_abs_mean[0] == 2.0);
    CHECK(s1.weight_abs_mean[0] == 0.5);
}

TEST_CASE("channel stats match a per-column loop oracle") {
    Rng rng(2);
    const ModalBatch x = random_batch(rng, 9, 6, 4);
    const Matrix w = random_matrix(rng, 5, 6);
    const ChannelStats s = channel_stats(x, w);
    for (int j = 0; j < 6; ++j) {
        double xa = 0.0, wa = 0.0;
        for (int i = 0; i < 9; ++i) xa += std::fabs(static_cast<double>(x.tokens(i, j)));
        for (int i = 0; i < 5; ++i) wa += std::fabs(static_cast<double>(w(i, j)));
        CHECK(s.act_abs_mean[j] == doctest::Approx(xa / 9.0).epsilon(1e-12));
        CHECK(s.weight_abs_mean[j] == doctest::Approx(wa / 5.0).epsilon(1e-12));
    }
    CHECK_THROWS_AS(channel_stats(x, Matrix::zeros(5, 7)), ShapeError);
}

TEST_CASE("channel stats floor zeros") {
    const ModalBatch x(Matrix::zeros(3, 2), std::vector<Modality>(3, Modality::Language));
    const ChannelStats s = channel_stats(x, Matrix::zeros(2, 2));
    for (double v : s.act_abs_mean) CHECK(v == 1e-8);
    for (double v : s.weight_abs_mean) CHECK(v == 1e-8);
}

TEST_CASE("candidate equalization") {
    SUBCASE("uniform stats give the all-ones vector") {
        ChannelStats s;
        s.act_abs_mean.assign(5, 0.37);
        s.weight_abs_mean.assign(5, 2.1);
        for (double alpha : {0.0, 0.3, 1.0}) {
            const EqualizationVector e = candidate_equalization(s, alpha);
            for (float f : e.factors) CHECK(f == doctest::Approx(1.0f).epsilon(1e-6));
        }
    }
    SUBCASE("alpha zero is proportional to 1/weight_stat") {
        ChannelStats s;
        s.act_abs_mean = {1.0, 2.0, 3.0};
        s.weight_abs_mean = {0.5, 1.0, 4.0};
        const EqualizationVector e = candidate_equalization(s, 0.0);
        const double r0 = e.factors[0] * s.weight_abs_mean[0];
        for (int j = 1; j < 3; ++j)
            CHECK(e.factors[j] * s.weight_abs_mean[j] == doctest::Approx(r0).epsilon(1e-6));
    }
    SUBCASE("matches the direct formula at alpha 0.5") {
        Rng rng(3);
        ChannelStats s;
        for (int j = 0; j < 8; ++j) {
            s.act_abs_mean.push_back(0.05 + rng.next_double());
            s.weight_abs_mean.push_back(0.05 + rng.next_double());
        }
        const EqualizationVector e = candidate_equalization(s, 0.5);
        std::vector<double> raw(8);
        double log_sum = 0.0;
        for (int j = 0; j < 8; ++j) {
            raw[j] = std::pow(s.act_abs_mean[j], 0.5) / std::pow(s.weight_abs_mean[j], 0.5);
            log_sum += std::log(raw[j]);
        }
        const double gm = std::exp(log_sum / 8.0);
        for (int j = 0; j < 8; ++j)
            CHECK(e.factors[j] == doctest::Approx(static_cast<float>(raw[j] / gm)).epsilon(1e-6));
        CHECK_THROWS_AS(candidate_equalization(s, 1.5), DomainError);
    }
}

TEST_CASE("recon loss is zero for exactly representable weights") {
    // integer W spanning [0, 255]: N=8 group quantization has S=1, Z=0
    std::vector<float> wdata = {0, 255, 17, 101, 255, 0, 3, 250};
    const Matrix w(2, 4, std::move(wdata));
    Rng rng(4);
    const ModalBatch x = random_batch(rng, 6, 4, 3);
    CalibObjective obj;
    obj.kind = ObjectiveKind::CweMse;
    const double loss =
        recon_loss(w, x, EqualizationVector::ones(4), QuantSpec::asym_group(8, 4), std::nullopt, obj, std::nullopt);
    CHECK(loss == 0.0);
}

TEST_CASE("recon loss matches a hand-rolled straight-line oracle") {
    const Matrix w(2, 2, {0.8f, -1.3f, 2.1f, 0.4f});
    const Matrix xt(3, 2, {0.5f, -0.25f, 1.5f, 0.75f, -2.0f, 0.1f});
    const ModalBatch x(xt, {Modality::Vision, Modality::Language, Modality::Language});
    const EqualizationVector e(std::vector<float>{1.25f, 0.8f});
    const QuantSpec spec = QuantSpec::asym_group(3, 2);

    // oracle: materialize Q(W*E), E^-1*X and the error norms directly
    float we[2][2], wq[2][2], xe[3][2];
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) we[i][j] = w(i, j) * e.factors[j];
    for (int i = 0; i < 2; ++i) {
        const float lo = std::min(we[i][0], we[i][1]);
        const float hi = std::max(we[i][0], we[i][1]);
        const float scale = (hi - lo) / 7.0f;
        for (int j = 0; j < 2; ++j) {
            const double q = std::floor(std::fabs((static_cast<double>(we[i][j]) - lo) / scale) + 0.5);
            wq[i][j] = static_cast<float>(std::min(q, 7.0)) * scale + lo;
        }
    }
    const float inv_e[2] = {1.0f / e.factors[0], 1.0f / e.factors[1]};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) xe[i][j] = xt(i, j) * inv_e[j];
    double mse_v = 0.0, mse_l = 0.0, mae_v = 0.0, mae_l = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int o = 0; o < 2; ++o) {
            const double y_ref = static_cast<double>(xt(i, 0)) * w(o, 0) + static_cast<double>(xt(i, 1)) * w(o, 1);
            const double y_hat = static_cast<double>(xe[i][0]) * wq[o][0] + static_cast<double>(xe[i][1]) * wq[o][1];
            const double diff = static_cast<float>(y_ref) - static_cast<float>(y_hat);
            if (i == 0) {
                mse_v += diff * diff;
                mae_v += std::fabs(diff);
            } else {
                mse_l += diff * diff;
                mae_l += std::fabs(diff);
            }
        }
    mse_v /= 2.0;
    mae_v /= 2.0;
    mse_l /= 4.0;
    mae_l /= 4.0;

    CalibObjective mse_obj;
    mse_obj.kind = ObjectiveKind::CweMse;
    const double got_mse = recon_loss(w, x, e, spec, std::nullopt, mse_obj, std::nullopt);
    CHECK(got_mse == doctest::Approx((mse_v * 2 + mse_l * 4) / 6.0).epsilon(1e-12));

    CalibObjective mae_obj;
    mae_obj.kind = ObjectiveKind::MbqMae;
    const GradientWeights gw{0.25, 2.0};
    const double got_mae = recon_loss(w, x, e, spec, std::nullopt, mae_obj, gw);
    CHECK(got_mae == doctest::Approx(0.25 * mae_v + 2.0 * mae_l).epsilon(1e-12));
}

TEST_CASE("mbq-mae with unit weights is the sum of partition means") {
    Rng rng(5);
    const Matrix w = random_matrix(rng, 4, 6);
    const ModalBatch x = random_batch(rng, 8, 6, 3);
    const EqualizationVector e = EqualizationVector::ones(6);
    const QuantSpec spec = QuantSpec::asym_group(3, 6);

    CalibObjective obj;
    obj.kind = ObjectiveKind::MbqMae;
    const double got = recon_loss(w, x, e, spec, std::nullopt, obj, GradientWeights{1.0, 1.0});

    // independent: compute both partition element-mean MAEs directly
    const Matrix y_ref = matmul(x.tokens, transpose(w));
    const Matrix y_hat = matmul(x.tokens, transpose(fake_quant(w, spec)));
    double ae_v = 0.0, ae_l = 0.0;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 4; ++j) {
            const double d = std::fabs(static_cast<double>(y_ref(i, j)) - y_hat(i, j));
            (i < 3 ? ae_v : ae_l) += d;
        }
    CHECK(got == doctest::Approx(ae_v / 12.0 + ae_l / 20.0).epsilon(1e-12));
}

TEST_CASE("empty modality contributes zero under MBQ objectives") {
    Rng rng(6);
    const Matrix w = random_matrix(rng, 3, 4);
    const ModalBatch all_lang = random_batch(rng, 5, 4, 0);
    const QuantSpec spec = QuantSpec::asym_group(3, 4);
    CalibObjective obj;
    obj.kind = ObjectiveKind::MbqMae;
    const double g5 = recon_loss(w, all_lang, EqualizationVector::ones(4), spec, std::nullopt, obj,
                                 GradientWeights{5.0, 1.0});
    const double g0 = recon_loss(w, all_lang, EqualizationVector::ones(4), spec, std::nullopt, obj,
                                 GradientWeights{0.0, 1.0});
    CHECK(g5 == g0);  // vision weight multiplies an empty partition
}

TEST_CASE("recon loss precondition errors") {
    Rng rng(7);
    const Matrix w = random_matrix(rng, 3, 4);
    const ModalBatch x = random_batch(rng, 5, 4, 2);
    const QuantSpec spec = QuantSpec::asym_group(3, 4);
    CalibObjective mbq;
    mbq.kind = ObjectiveKind::MbqMse;
    CHECK_THROWS_AS(recon_loss(w, x, EqualizationVector::ones(4), spec, std::nullopt, mbq, std::nullopt), ConfigError);
    CalibObjective wa;
    wa.kind = ObjectiveKind::CweMse;
    wa.target = QuantTarget::WeightActivation;
    CHECK_THROWS_AS(recon_loss(w, x, EqualizationVector::ones(4), spec, std::nullopt, wa, std::nullopt), ConfigError);
}

TEST_CASE("weight-activation mode fake-quantizes scaled activations per token") {
    Rng rng(8);
    const Matrix w = random_matrix(rng, 4, 4);
    const ModalBatch x = random_batch(rng, 6, 4, 2);
    const EqualizationVector e(std::vector<float>{1.5f, 0.7f, 1.1f, 0.9f});
    const QuantSpec spec_w = QuantSpec::sym_per_channel(8);
    const QuantSpec spec_a = QuantSpec::sym_per_token(8);
    CalibObjective obj;
    obj.kind = ObjectiveKind::CweMse;
    obj.target = QuantTarget::WeightActivation;
    const double got = recon_loss(w, x, e, spec_w, spec_a, obj, std::nullopt);

    const Matrix y_ref = matmul(x.tokens, transpose(w));
    const Matrix y_hat = matmul(fake_quant(scale_cols(x.tokens, e.reciprocal()), spec_a),
                                transpose(fake_quant(scale_cols(w, e.factors), spec_w)));
    double se = 0.0;
    for (std::size_t i = 0; i < y_ref.size(); ++i) {
        const double d = static_cast<double>(y_ref.data()[i]) - y_hat.data()[i];
        se += d * d;
    }
    CHECK(got == doctest::Approx(se / static_cast<double>(y_ref.size())).epsilon(1e-12));
}

TEST_CASE("search: singleton grid") {
    Rng rng(9);
    const Matrix w = random_matrix(rng, 4, 8);
    const ModalBatch x = random_batch(rng, 10, 8, 4);
    CalibObjective obj;
    obj.kind = ObjectiveKind::CweMse;
    const CalibResult r = search(w, x, QuantSpec::asym_group(3, 8), std::nullopt, obj, std::nullopt, {0.0});
    REQUIRE(r.candidate_values.size() == 1);
    CHECK(r.candidate_values[0].alpha == 0.0);
    if (r.alpha != kIdentityAlpha) CHECK(r.alpha == 0.0);
    CHECK(r.objective_value == std::min(r.identity_value, r.candidate_values[0].value));
    CHECK_THROWS_AS(search(w, x, QuantSpec::asym_group(3, 8), std::nullopt, obj, std::nullopt, {}), ConfigError);
}

TEST_CASE("search: argmin dominance over every candidate and identity") {
    Rng rng(10);
    const Matrix w = random_matrix(rng, 6, 16);
    const ModalBatch x = random_batch(rng, 12, 16, 5);
    const QuantSpec spec = QuantSpec::asym_group(3, 16);
    CalibObjective obj;
    obj.kind = ObjectiveKind::BalancedCwe;
    obj.vision_factor = 0.1;
    const CalibResult r = search(w, x, spec, std::nullopt, obj, std::nullopt, default_alpha_grid());

    for (const GridPoint& gp : r.candidate_values) CHECK(r.objective_value <= gp.value);
    CHECK(r.objective_value <= r.identity_value);

    // re-evaluate the winner and the identity through the public entry point
    const double re = recon_loss(w, x, r.e, spec, std::nullopt, obj, std::nullopt);
    CHECK(re == r.objective_value);
    const double id = recon_loss(w, x, EqualizationVector::ones(16), spec, std::nullopt, obj, std::nullopt);
    CHECK(id == r.identity_value);
}

TEST_CASE("search: full tie returns the smallest grid alpha") {
    // an all-zero W quantizes exactly under any equalization, so every
    // candidate (and the identity) costs exactly zero
    const Matrix w = Matrix::zeros(2, 2);
    Rng rng(11);
    const ModalBatch x = random_batch(rng, 4, 2, 2);
    CalibObjective obj;
    obj.kind = ObjectiveKind::CweMse;
    const CalibResult r = search(w, x, QuantSpec::asym_group(8, 2), std::nullopt, obj, std::nullopt, {0.25, 0.75});
    CHECK(r.objective_value == 0.0);
    CHECK(r.identity_value == 0.0);
    CHECK(r.alpha == 0.25);  // ties go to the smaller grid alpha, identity only wins strictly
}

TEST_CASE("cross-objective dominance of the mbq-mae argmin") {
    Rng rng(12);
    const Matrix w = random_matrix(rng, 8, 16);
    const ModalBatch x = random_batch(rng, 14, 16, 6);
    const QuantSpec spec = QuantSpec::asym_group(3, 16);
    const GradientWeights gw{0.08, 1.4};
    const std::vector<double> grid = default_alpha_grid();

    CalibObjective mae;
    mae.kind = ObjectiveKind::MbqMae;
    const CalibResult r_mae = search(w, x, spec, std::nullopt, mae, gw, grid);

    CalibObjective mse;
    mse.kind = ObjectiveKind::CweMse;
    const CalibResult r_mse = search(w, x, spec, std::nullopt, mse, std::nullopt, grid);

    const double mae_at_mse_choice = recon_loss(w, x, r_mse.e, spec, std::nullopt, mae, gw);
    CHECK(r_mae.objective_value <= mae_at_mse_choice);
}

TEST_CASE("argmin is invariant under positive scaling of the gradient pair") {
    Rng rng(13);
    const Matrix w = random_matrix(rng, 6, 8);
    const ModalBatch x = random_batch(rng, 10, 8, 4);
    const QuantSpec spec = QuantSpec::asym_group(3, 8);
    CalibObjective obj;
    obj.kind = ObjectiveKind::MbqMae;
    const std::vector<double> grid = default_alpha_grid();

    const CalibResult base = search(w, x, spec, std::nullopt, obj, GradientWeights{0.11, 0.9}, grid);
    const CalibResult scaled = search(w, x, spec, std::nullopt, obj, GradientWeights{4.0 * 0.11, 4.0 * 0.9}, grid);
    CHECK(scaled.alpha == base.alpha);
    CHECK(scaled.objective_value == 4.0 * base.objective_value);  // power-of-two scaling is exact
    for (std::size_t i = 0; i < grid.size(); ++i)
        CHECK(scaled.candidate_values[i].value == 4.0 * base.candidate_values[i].value);
}

TEST_CASE("equal gradients reduce mbq-mse to balanced-cwe with factor one") {
    Rng rng(14);
    const Matrix w = random_matrix(rng, 6, 8);
    const ModalBatch x = random_batch(rng, 10, 8, 3);
    const QuantSpec spec = QuantSpec::asym_group(4, 8);
    const std::vector<double> grid = default_alpha_grid();

    CalibObjective mbq;
    mbq.kind = ObjectiveKind::MbqMse;
    const CalibResult r1 = search(w, x, spec, std::nullopt, mbq, GradientWeights{1.0, 1.0}, grid);

    CalibObjective bal;
    bal.kind = ObjectiveKind::BalancedCwe;
    bal.vision_factor = 1.0;
    const CalibResult r2 = search(w, x, spec, std::nullopt, bal, std::nullopt, grid);

    CHECK(r1.alpha == r2.alpha);
    CHECK(r1.objective_value == r2.objective_value);
}

TEST_CASE("equalization is lossless before quantization") {
    Rng rng(15);
    const Matrix w = random_matrix(rng, 5, 12);
    const Matrix x = random_matrix(rng, 9, 12);
    std::vector<float> e(12);
    for (float& v : e) v = rng.uniform(0.2f, 5.0f);
    std::vector<float> inv(12);
    for (int j = 0; j < 12; ++j) inv[j] = 1.0f / e[j];

    const Matrix y_ref = matmul(x, transpose(w));
    const Matrix y_eq = matmul(scale_cols(x, inv), transpose(scale_cols(w, e)));
    for (std::size_t i = 0; i < y_ref.size(); ++i)
        CHECK(std::fabs(y_eq.data()[i] - y_ref.data()[i]) <= 1e-5f * std::max(1.0f, std::fabs(y_ref.data()[i])));
}

TEST_CASE("random split ablation") {
    Rng rng(16);
    const Matrix w = random_matrix(rng, 6, 8);
    const ModalBatch x = random_batch(rng, 12, 8, 6);
    const QuantSpec spec = QuantSpec::asym_group(3, 8);
    const std::vector<double> grid = default_alpha_grid();

    SUBCASE("unit weights on both halves match the true-partition unit search") {
        // equal halves: both objectives are exactly twice the global MAE mean
        Rng r1(77);
        const CalibResult split = ablation_random_split(w, x, spec, std::nullopt, GradientWeights{1.0, 1.0}, grid, r1);
        CalibObjective obj;
        obj.kind = ObjectiveKind::MbqMae;
        const CalibResult direct = search(w, x, spec, std::nullopt, obj, GradientWeights{1.0, 1.0}, grid);
        CHECK(split.alpha == direct.alpha);
        for (std::size_t i = 0; i < grid.size(); ++i)
            CHECK(split.candidate_values[i].value == doctest::Approx(direct.candidate_values[i].value).epsilon(1e-12));
    }
    SUBCASE("fixed seed reproduces the partition and the result") {
        Rng r1(123), r2(123);
        const CalibResult a = ablation_random_split(w, x, spec, std::nullopt, GradientWeights{0.1, 1.0}, grid, r1);
        const CalibResult b = ablation_random_split(w, x, spec, std::nullopt, GradientWeights{0.1, 1.0}, grid, r2);
        CHECK(a.alpha == b.alpha);
        CHECK(a.objective_value == b.objective_value);
        CHECK(a.e.factors == b.e.factors);
    }
    SUBCASE("needs at least two tokens") {
        Rng r(1);
        const ModalBatch one(Matrix::zeros(1, 8), {Modality::Language});
        CHECK_THROWS_AS(ablation_random_split(w, one, spec, std::nullopt, GradientWeights{1.0, 1.0}, grid, r),
                        ShapeError);
    }
}

TEST_CASE("token-wise ablation") {
    Rng rng(17);
    const Matrix w = random_matrix(rng, 6, 8);
    const ModalBatch x = random_batch(rng, 10, 8, 4);
    const QuantSpec spec = QuantSpec::asym_group(3, 8);
    const std::vector<double> grid = default_alpha_grid();

    SUBCASE("uniform weights reduce to an unweighted search") {
        const CalibResult half = ablation_tokenwise(w, x, std::vector<double>(10, 0.5), spec, std::nullopt, grid);
        const CalibResult unit = ablation_tokenwise(w, x, std::vector<double>(10, 1.0), spec, std::nullopt, grid);
        CHECK(half.alpha == unit.alpha);
        CHECK(half.objective_value == 0.5 * unit.objective_value);
    }
    SUBCASE("all-zero weights collapse the objective and pick the smallest alpha") {
        const CalibResult r = ablation_tokenwise(w, x, std::vector<double>(10, 0.0), spec, std::nullopt, grid);
        CHECK(r.objective_value == 0.0);
        CHECK(r.alpha == grid.front());
        for (const GridPoint& gp : r.candidate_values) CHECK(gp.value == 0.0);
    }
    SUBCASE("modality-proportional weights reproduce mbq-mae") {
        // mbq-mae is the token-wise objective with weight g_m / n_m per token
        const GradientWeights gw{0.3, 1.7};
        std::vector<double> weights(10);
        for (int i = 0; i < 10; ++i) weights[i] = i < 4 ? gw.vision / 4.0 : gw.language / 6.0;
        const CalibResult tok = ablation_tokenwise(w, x, weights, spec, std::nullopt, grid);
        CalibObjective obj;
        obj.kind = ObjectiveKind::MbqMae;
        const CalibResult mae = search(w, x, spec, std::nullopt, obj, gw, grid);
        CHECK(tok.alpha == mae.alpha);
        for (std::size_t i = 0; i < grid.size(); ++i)
            CHECK(tok.candidate_values[i].value == doctest::Approx(mae.candidate_values[i].value).epsilon(1e-12));
    }
    SUBCASE("weight validation") {
        CHECK_THROWS_AS(ablation_tokenwise(w, x, std::vector<double>(10, -1.0), spec, std::nullopt, grid),
                        DomainError);
        CHECK_THROWS_AS(ablation_tokenwise(w, x, std::vector<double>(3, 1.0), spec, std::nullopt, grid), ShapeError);
    }
}
