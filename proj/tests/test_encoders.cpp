#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <utility>

#include "oracles.hpp"
#include "ssmcond/bench.hpp"
#include "ssmcond/encoders.hpp"
#include "ssmcond/model.hpp"

using namespace ssmcond;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab = 12;
    c.d_token = 5;
    c.d_h = 4;
    c.d_s = 3;
    c.d_ssm = 6;
    c.kernel = 5;
    c.text_layers = 2;
    c.expressive_layers = 2;
    c.temporal_layers = 2;
    c.mel_bins = 7;
    c.aligner_hidden = 8;
    c.seed = 41;
    return c;
}

class Encoders : public ::testing::Test {
  protected:
    Rng rng{43};
    ConditioningModel m = init_conditioning_model(tiny_config());
    Tensor rnd(std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) { return oracle::random(r, c, rng, lo, hi); }
};

// Row-broadcast AdaLN written out element by element.
Tensor adaln_oracle(const Tensor &z, const Tensor &e, const AdaLNParams &p) {
    const Tensor ln = oracle::layer_norm(z, p.eps);
    const Tensor gamma = oracle::add_bias(oracle::matmul(e, p.gamma_w), p.gamma_b);
    const Tensor beta = oracle::add_bias(oracle::matmul(e, p.beta_w), p.beta_b);
    Tensor y(z.rows(), z.cols());
    for (std::size_t t = 0; t < z.rows(); ++t)
        for (std::size_t c = 0; c < z.cols(); ++c)
            y(t, c) = gamma[c] * ln(t, c) + beta[c];
    return y;
}

Tensor cat_cols(const Tensor &a, const Tensor &b) {
    Tensor y(a.rows(), a.cols() + b.cols());
    for (std::size_t t = 0; t < a.rows(); ++t) {
        for (std::size_t c = 0; c < a.cols(); ++c)
            y(t, c) = a(t, c);
        for (std::size_t c = 0; c < b.cols(); ++c)
            y(t, a.cols() + c) = b(t, c);
    }
    return y;
}

Tensor fusion_oracle(const Tensor &a, const Tensor &b, const GatedFusionParams &p, Tensor *gates = nullptr) {
    const Tensor cat = cat_cols(a, b);
    const Tensor logits = oracle::matmul(cat, p.w_g);
    Tensor gated(cat.rows(), cat.cols());
    Tensor g(cat.rows(), cat.cols());
    for (std::size_t i = 0; i < cat.size(); ++i) {
        g[i] = oracle::sigmoid(logits[i] / p.tau);
        gated[i] = g[i] * cat[i];
    }
    if (gates != nullptr)
        *gates = g;
    return oracle::matmul(gated, p.w_o);
}

Tensor gated_transform_oracle(const Tensor &z, const Tensor &u) {
    const Tensor logits = oracle::matmul(z, u);
    Tensor y = z;
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] *= oracle::sigmoid(logits[i]);
    return y;
}

Tensor stack_oracle(Tensor x, const std::vector<MambaLayer> &layers, bool causal) {
    for (const auto &l : layers)
        x = oracle::mamba_block(x, l, causal);
    return x;
}

} // namespace

// ─── AdaLN ───────────────────────────────────────────────────────────────────

TEST_F(Encoders, AdaLNDefaultInitIsLayerNorm) {
    Tensor z = rnd(5, 4);
    StyleEmbedding zero{Tensor(1, 3)};
    EXPECT_EQ(adaln(z, zero, m.text.adaln), layer_norm(z, m.text.adaln.eps));
}

TEST_F(Encoders, AdaLNZeroGammaGivesBetaRows) {
    AdaLNParams p = m.text.adaln;
    p.gamma_b = Tensor(1, 4);
    p.beta_b = rnd(1, 4);
    StyleEmbedding e{rnd(1, 3)};
    const Tensor beta = add_row(matmul(e.values, p.beta_w), p.beta_b);
    const Tensor y = adaln(rnd(6, 4), e, p);
    for (std::size_t t = 0; t < 6; ++t)
        EXPECT_EQ(slice_rows(y, t, t + 1), beta);
}

TEST_F(Encoders, AdaLNMatchesBroadcastOracle) {
    AdaLNParams p = m.text.adaln;
    p.gamma_w = rnd(3, 4);
    p.gamma_b = rnd(1, 4);
    p.beta_b = rnd(1, 4);
    Tensor z = rnd(7, 4), e = rnd(1, 3);
    EXPECT_LT(max_abs_diff(adaln(z, StyleEmbedding{e}, p), adaln_oracle(z, e, p)), 1e-12);
}

// ─── Gated fusion ────────────────────────────────────────────────────────────

TEST_F(Encoders, FusionZeroGateWeightsHalve) {
    GatedFusionParams p = m.text.fusion;
    p.w_g = Tensor(8, 8);
    Tensor a = rnd(5, 4), b = rnd(5, 4);
    Tensor half = cat_cols(a, b);
    for (double &v : half.values())
        v *= 0.5;
    EXPECT_LT(max_abs_diff(gated_fusion(a, b, p), oracle::matmul(half, p.w_o)), 1e-14);
}

TEST_F(Encoders, FusionZeroInputsGiveZeros) {
    EXPECT_EQ(gated_fusion(Tensor(3, 4), Tensor(3, 4), m.text.fusion), Tensor(3, 4));
}

TEST_F(Encoders, FusionMatchesOracleOverTemperatures) {
    Tensor a = rnd(6, 4), b = rnd(6, 4);
    for (double tau : {0.7, 1.0, 1.3}) {
        GatedFusionParams p = init_gated_fusion(4, tau, rng);
        Tensor gates_ref;
        const Tensor ref = fusion_oracle(a, b, p, &gates_ref);
        Eager be;
        auto got = gated_fusion(be, a, b, p);
        EXPECT_LT(max_abs_diff(got.out, ref), 1e-12) << tau;
        EXPECT_LT(max_abs_diff(got.gates, gates_ref), 1e-14) << tau;
        for (double g : got.gates.values()) {
            ASSERT_GT(g, 0.0);
            ASSERT_LT(g, 1.0);
        }
    }
}

TEST_F(Encoders, FusionRejectsNonPositiveTemperature) {
    EXPECT_THROW(init_gated_fusion(4, 0.0, rng), Error);
    EXPECT_THROW(init_gated_fusion(4, -1.0, rng), Error);
    GatedFusionParams p = m.text.fusion;
    p.tau = 0.0;
    EXPECT_THROW(gated_fusion(rnd(2, 4), rnd(2, 4), p), Error);
}

TEST_F(Encoders, GateLogitMovesValueTowardUngated) {
    // One coordinate: gated value g*v with g = sigmoid(logit / tau). Raising the
    // logit must shrink |g*v - v| monotonically.
    GatedFusionParams p = init_gated_fusion(1, 1.0, rng);
    Tensor a = Tensor::from_rows({{0.8}}), b = Tensor::from_rows({{-0.6}});
    p.w_o = Tensor::from_rows({{1.0}, {0.0}}); // read out the forward coordinate
    double prev_gap = std::numeric_limits<double>::infinity();
    for (double w = -4.0; w <= 4.0; w += 0.5) {
        p.w_g = Tensor::from_rows({{w, 0.3}, {0.0, -0.2}}); // logit of coordinate 0 = 0.8 w
        const double gated = gated_fusion(a, b, p)[0];
        const double gap = std::abs(gated - 0.8);
        EXPECT_LT(gap, prev_gap) << w;
        prev_gap = gap;
    }
}

// ─── Text encoder ────────────────────────────────────────────────────────────

TEST_F(Encoders, TextSingleTokenTiedDirections) {
    TextEncoderParams p = m.text;
    p.bwd = p.fwd;
    Tensor x = rnd(1, 5);
    Eager be;
    const Tensor h = add_row(matmul(x, p.in_proj), p.in_bias);
    auto [h_f, h_b] = bidirectional_scan(be, h, p.fwd, p.bwd);
    EXPECT_EQ(h_f, h_b);
    auto enc = text_encode(x, StyleEmbedding{rnd(1, 3)}, p);
    EXPECT_EQ(enc.h_ts.rows(), 1u);
    EXPECT_EQ(enc.gates.cols(), 8u);
}

TEST_F(Encoders, TextZeroPathGivesBetaRows) {
    TextEncoderParams p = m.text;
    p.in_proj = Tensor(5, 4);
    StyleEmbedding e{rnd(1, 3)};
    p.adaln.beta_b = rnd(1, 4);
    // Zero input to every block stays zero (residual of zero), LN of zeros is
    // zero, so only beta(e) survives.
    const Tensor y = text_encode(rnd(4, 5), e, p).h_ts;
    const Tensor beta = add_row(matmul(e.values, p.adaln.beta_w), p.adaln.beta_b);
    for (std::size_t t = 0; t < 4; ++t)
        EXPECT_LT(max_abs_diff(slice_rows(y, t, t + 1), beta), 1e-15);
}

TEST_F(Encoders, TextMatchesCompositionOracle) {
    Tensor x = rnd(9, 5), e = rnd(1, 3);
    TextEncoderParams p = m.text;
    p.adaln.gamma_w = rnd(3, 4);
    const Tensor h = oracle::add_bias(oracle::matmul(x, p.in_proj), p.in_bias);
    const Tensor h_f = stack_oracle(h, p.fwd, true);
    const Tensor h_b = oracle::reverse(stack_oracle(oracle::reverse(h), p.bwd, true));
    Tensor gates_ref;
    const Tensor fused = fusion_oracle(h_f, h_b, p.fusion, &gates_ref);
    const Tensor ref = adaln_oracle(fused, e, p.adaln);
    auto got = text_encode(x, StyleEmbedding{e}, p);
    EXPECT_LT(max_abs_diff(got.h_ts, ref), 1e-12);
    EXPECT_LT(max_abs_diff(got.gates, gates_ref), 1e-12);
}

TEST_F(Encoders, TextDepthScalesLinearly) {
    ModelConfig c = bench::small_config(3);
    c.text_layers = 6;
    ConditioningModel deep = init_conditioning_model(c);
    TextEncoderParams shallow = deep.text;
    shallow.fwd.resize(3);
    shallow.bwd.resize(3);
    Rng r(44);
    const Tensor x = oracle::random(2048, c.d_token, r);
    const StyleEmbedding e{oracle::random(1, c.d_s, r)};
    std::vector<double> t3, t6;
    for (int i = 0; i < 7; ++i) {
        t3.push_back(bench::time_ms([&] { text_encode(x, e, shallow); }));
        t6.push_back(bench::time_ms([&] { text_encode(x, e, deep.text); }));
    }
    const double ratio = bench::median(t6) / bench::median(t3);
    EXPECT_GE(ratio, 1.7);
    EXPECT_LE(ratio, 2.3);
}

// ─── Expressive encoder ──────────────────────────────────────────────────────

TEST_F(Encoders, ExpressiveSilenceFirstRowMatchesSingleFrame) {
    // Identical frames give identical rows up to the Mamba stack; with a
    // single-tap conv the first output only sees frame 0 and a zero state.
    ModelConfig c = tiny_config();
    c.kernel = 1;
    ConditioningModel k1 = init_conditioning_model(c);
    MelSpectrogram silence{Tensor(7, 10, std::log(kEps))};
    StyleEmbedding e{rnd(1, 3)};
    const Tensor full = expressive_encode(silence, e, k1.expressive);
    const Tensor one = expressive_encode(MelSpectrogram{Tensor(7, 1, std::log(kEps))}, e, k1.expressive);
    EXPECT_EQ(slice_rows(full, 0, 1), one);
    EXPECT_TRUE(full.all_finite());
}

TEST_F(Encoders, GatedTransformZeroUHalves) {
    Tensor z = rnd(4, 4);
    Eager be;
    Tensor half = z;
    for (double &v : half.values())
        v *= 0.5;
    EXPECT_EQ(gated_transform(be, z, Tensor(4, 4)), half);
}

TEST_F(Encoders, ExpressiveMatchesCompositionOracle) {
    MelSpectrogram mel{rnd(7, 11, -11.0, 1.0)};
    Tensor e = rnd(1, 3);
    const ExpressiveParams &p = m.expressive;
    const Tensor z = oracle::add_bias(oracle::matmul(transpose(mel.values), p.in_proj), p.in_bias);
    const Tensor h_ms = adaln_oracle(gated_transform_oracle(z, p.gate_u), e, p.adaln);
    const Tensor ref = stack_oracle(h_ms, p.layers, false);
    EXPECT_LT(max_abs_diff(expressive_encode(mel, StyleEmbedding{e}, p), ref), 1e-12);
}

// ─── Temporal encoder ────────────────────────────────────────────────────────

TEST_F(Encoders, TemporalZeroFusionGivesZeros) {
    TemporalParams p = m.temporal;
    p.w_f = Tensor(8, 4);
    EXPECT_EQ(temporal_encode(StyleEmbedding{rnd(1, 3)}, 6, p), Tensor(6, 4));
}

TEST_F(Encoders, TemporalSingleFrameTiedDirections) {
    TemporalParams p = m.temporal;
    p.bwd = p.fwd;
    p.w_f = Tensor(8, 4);
    for (std::size_t c = 0; c < 4; ++c) {
        p.w_f(c, c) = 1.0;      // h_f
        p.w_f(4 + c, c) = -1.0; // minus h_b
    }
    EXPECT_EQ(temporal_encode(StyleEmbedding{rnd(1, 3)}, 1, p), Tensor(1, 4));
}

namespace {

// Forward and backward stack outputs of the temporal encoder.
std::pair<Tensor, Tensor> temporal_directions(const Tensor &e, std::size_t frames, const TemporalParams &p) {
    const Tensor z = oracle::add_bias(oracle::matmul(e, p.in_proj), p.in_bias);
    const Tensor row = gated_transform_oracle(z, p.gate_u);
    Tensor h_s(frames, row.cols());
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t c = 0; c < row.cols(); ++c)
            h_s(t, c) = row[c];
    Tensor u = oracle::conv(h_s, p.conv, false);
    for (std::size_t i = 0; i < u.size(); ++i)
        u[i] += h_s[i];
    return {stack_oracle(u, p.fwd, true), oracle::reverse(stack_oracle(oracle::reverse(u), p.bwd, true))};
}

} // namespace

TEST_F(Encoders, TemporalMatchesCompositionOracle) {
    Tensor e = rnd(1, 3);
    auto [h_f, h_b] = temporal_directions(e, 12, m.temporal);
    const Tensor ref = oracle::matmul(cat_cols(h_f, h_b), m.temporal.w_f);
    EXPECT_LT(max_abs_diff(temporal_encode(StyleEmbedding{e}, 12, m.temporal), ref), 1e-12);
}

TEST_F(Encoders, TemporalGatedVariantUsesFusion) {
    ModelConfig c = tiny_config();
    c.temporal_gated_fusion = true;
    ConditioningModel g = init_conditioning_model(c);
    ASSERT_TRUE(g.temporal.gated_fusion);
    Tensor e = rnd(1, 3);
    auto [h_f, h_b] = temporal_directions(e, 9, g.temporal);
    EXPECT_LT(max_abs_diff(temporal_encode(StyleEmbedding{e}, 9, g.temporal), fusion_oracle(h_f, h_b, g.temporal.fusion)),
              1e-12);
}

TEST_F(Encoders, TemporalRejectsZeroFrames) {
    EXPECT_THROW(temporal_encode(StyleEmbedding{rnd(1, 3)}, 0, m.temporal), ShapeError);
}

// ─── Memory ──────────────────────────────────────────────────────────────────

TEST_F(Encoders, PeakActivationIsLinearInLength) {
    ModelConfig c = bench::small_config(5);
    ConditioningModel big = init_conditioning_model(c);
    Rng r(45);
    auto peak = [&](std::size_t t) {
        const Tensor x = oracle::random(t, c.d_token, r);
        const MelSpectrogram mel{oracle::random(c.mel_bins, t, r)};
        const StyleEmbedding e{oracle::random(1, c.d_s, r)};
        audit::Scope scope;
        text_encode(x, e, big.text);
        expressive_encode(mel, e, big.expressive);
        temporal_encode(e, t, big.temporal);
        return static_cast<double>(scope.peak_delta());
    };
    const double ratio = peak(2048) / peak(1024);
    EXPECT_GT(ratio, 1.8);
    EXPECT_LT(ratio, 2.2);
}
