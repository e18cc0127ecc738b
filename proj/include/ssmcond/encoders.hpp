#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ssmcond/eager.hpp"
#include "ssmcond/frontend.hpp"
#include "ssmcond/numerics.hpp"
#include "ssmcond/ssm.hpp"

namespace ssmcond {

// ─── AdaLN ───────────────────────────────────────────────────────────────────

// gamma(e) = e·gamma_w + gamma_b, beta(e) = e·beta_w + beta_b. gamma starts
// as the constant 1 (zero weights, unit bias) so the initial modulation is the
// identity at e = 0.
struct AdaLNParams {
    Tensor gamma_w; // d_s × d_h
    Tensor gamma_b; // 1 × d_h
    Tensor beta_w;  // d_s × d_h
    Tensor beta_b;  // 1 × d_h
    double eps = kEps;

    template <class F> void for_each(F &&f) {
        f("gamma_w", gamma_w);
        f("gamma_b", gamma_b);
        f("beta_w", beta_w);
        f("beta_b", beta_b);
    }
};

inline AdaLNParams init_adaln(std::size_t d_s, std::size_t d_h, Rng &rng) {
    return AdaLNParams{Tensor(d_s, d_h), Tensor(1, d_h, 1.0), init_dense(d_s, d_h, rng), Tensor(1, d_h), kEps};
}

template <class Backend>
typename Backend::Value adaln(Backend &be, const typename Backend::Value &z, const typename Backend::Value &e,
                              const AdaLNParams &p) {
    auto gamma = be.add_row(be.matmul(e, be.param(p.gamma_w)), be.param(p.gamma_b));
    auto beta = be.add_row(be.matmul(e, be.param(p.beta_w)), be.param(p.beta_b));
    return be.add_row(be.mul_row(be.layer_norm(z, p.eps), gamma), beta);
}

inline Tensor adaln(const Tensor &z, const StyleEmbedding &e, const AdaLNParams &p) {
    Eager be;
    return adaln(be, z, e.values, p);
}

// ─── Gated fusion ────────────────────────────────────────────────────────────

struct GatedFusionParams {
    Tensor w_g; // 2d_h × 2d_h
    Tensor w_o; // 2d_h × d_h
    double tau = 1.0;

    template <class F> void for_each(F &&f) {
        f("w_g", w_g);
        f("w_o", w_o);
    }
};

inline GatedFusionParams init_gated_fusion(std::size_t d_h, double tau, Rng &rng) {
    if (!(tau > 0.0))
        throw Error(detail::concat("gated fusion temperature must be positive, got ", tau));
    return GatedFusionParams{init_dense(2 * d_h, 2 * d_h, rng), init_dense(2 * d_h, d_h, rng), tau};
}

template <class Value> struct FusionResult {
    Value out;
    Value gates; // T × 2d_h sigmoid activations; forward half first
};

// (sigmoid(W_g [a;b] / tau) ⊙ [a;b]) W_o
template <class Backend>
FusionResult<typename Backend::Value> gated_fusion(Backend &be, const typename Backend::Value &a,
                                                   const typename Backend::Value &b, const GatedFusionParams &p) {
    if (!(p.tau > 0.0))
        throw Error(detail::concat("gated_fusion: temperature must be positive, got ", p.tau));
    auto cat = be.concat_cols(a, b);
    auto gates = be.sigmoid(be.scale(be.matmul(cat, be.param(p.w_g)), 1.0 / p.tau));
    auto out = be.matmul(be.mul(gates, cat), be.param(p.w_o));
    return {std::move(out), std::move(gates)};
}

inline Tensor gated_fusion(const Tensor &h_f, const Tensor &h_b, const GatedFusionParams &p) {
    require_same_shape(h_f, h_b, "gated_fusion");
    Eager be;
    return gated_fusion(be, h_f, h_b, p).out;
}

// z ⊙ sigmoid(z·U)
template <class Backend>
typename Backend::Value gated_transform(Backend &be, const typename Backend::Value &z, const Tensor &u) {
    return be.mul(z, be.sigmoid(be.matmul(z, be.param(u))));
}

// ─── Text encoder ────────────────────────────────────────────────────────────

struct TextEncoderParams {
    Tensor in_proj; // d × d_h
    Tensor in_bias; // 1 × d_h
    std::vector<MambaLayer> fwd;
    std::vector<MambaLayer> bwd;
    GatedFusionParams fusion;
    AdaLNParams adaln;

    template <class F> void for_each(F &&f) {
        f("in_proj", in_proj);
        f("in_bias", in_bias);
        for (std::size_t i = 0; i < fwd.size(); ++i)
            fwd[i].for_each([&](const std::string &n, Tensor &t) { f("fwd." + std::to_string(i) + "." + n, t); });
        for (std::size_t i = 0; i < bwd.size(); ++i)
            bwd[i].for_each([&](const std::string &n, Tensor &t) { f("bwd." + std::to_string(i) + "." + n, t); });
        fusion.for_each([&](const std::string &n, Tensor &t) { f("fusion." + n, t); });
        adaln.for_each([&](const std::string &n, Tensor &t) { f("adaln." + n, t); });
    }
};

template <class Value> struct TextEncoding {
    Value h_ts;  // T_x × d_h, style conditioned
    Value gates; // T_x × 2d_h
};

template <class Backend>
TextEncoding<typename Backend::Value> text_encode(Backend &be, const typename Backend::Value &x,
                                                  const typename Backend::Value &e, const TextEncoderParams &p) {
    auto h = be.add_row(be.matmul(x, be.param(p.in_proj)), be.param(p.in_bias));
    auto [h_f, h_b] = bidirectional_scan(be, h, p.fwd, p.bwd);
    auto fused = gated_fusion(be, h_f, h_b, p.fusion);
    return {adaln(be, fused.out, e, p.adaln), std::move(fused.gates)};
}

inline TextEncoding<Tensor> text_encode(const Tensor &x, const StyleEmbedding &e, const TextEncoderParams &p) {
    Eager be;
    return text_encode(be, x, e.values, p);
}

// ─── Expressive encoder ──────────────────────────────────────────────────────

struct ExpressiveParams {
    Tensor in_proj; // F × d_h
    Tensor in_bias; // 1 × d_h
    Tensor gate_u;  // d_h × d_h
    AdaLNParams adaln;
    std::vector<MambaLayer> layers;

    template <class F> void for_each(F &&f) {
        f("in_proj", in_proj);
        f("in_bias", in_bias);
        f("gate_u", gate_u);
        adaln.for_each([&](const std::string &n, Tensor &t) { f("adaln." + n, t); });
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].for_each([&](const std::string &n, Tensor &t) { f("layers." + std::to_string(i) + "." + n, t); });
    }
};

// mel frames (T_m × F) → linear → gated transform → AdaLN(e) → Mamba stack.
template <class Backend>
typename Backend::Value expressive_encode(Backend &be, const typename Backend::Value &mel_frames,
                                          const typename Backend::Value &e, const ExpressiveParams &p) {
    auto z = be.add_row(be.matmul(mel_frames, be.param(p.in_proj)), be.param(p.in_bias));
    auto h_ms = adaln(be, gated_transform(be, z, p.gate_u), e, p.adaln);
    return mamba_stack(be, h_ms, p.layers, Padding::same);
}

inline Tensor expressive_encode(const MelSpectrogram &m, const StyleEmbedding &e, const ExpressiveParams &p) {
    Eager be;
    return expressive_encode(be, m.frames_major(), e.values, p);
}

// ─── Temporal encoder ────────────────────────────────────────────────────────

struct TemporalParams {
    Tensor in_proj; // d_s × d_h
    Tensor in_bias; // 1 × d_h
    Tensor gate_u;  // d_h × d_h
    Tensor conv;    // d_h × k, parallel local branch
    std::vector<MambaLayer> fwd;
    std::vector<MambaLayer> bwd;
    Tensor w_f; // 2d_h × d_h, linear fusion
    bool gated_fusion = false;
    GatedFusionParams fusion; // only with gated_fusion (ablation)

    template <class F> void for_each(F &&f) {
        f("in_proj", in_proj);
        f("in_bias", in_bias);
        f("gate_u", gate_u);
        f("conv", conv);
        for (std::size_t i = 0; i < fwd.size(); ++i)
            fwd[i].for_each([&](const std::string &n, Tensor &t) { f("fwd." + std::to_string(i) + "." + n, t); });
        for (std::size_t i = 0; i < bwd.size(); ++i)
            bwd[i].for_each([&](const std::string &n, Tensor &t) { f("bwd." + std::to_string(i) + "." + n, t); });
        f("w_f", w_f);
        if (gated_fusion)
            fusion.for_each([&](const std::string &n, Tensor &t) { f("fusion." + n, t); });
    }
};

// The style vector is transformed once and broadcast over frames (every
// per-frame op before the scans would see identical rows anyway); a depthwise
// conv branch is added to the input of both directions, and the directions are
// fused linearly: h_B = [h_f; h_b] W_f.
template <class Backend>
typename Backend::Value temporal_encode(Backend &be, const typename Backend::Value &e, std::size_t frames,
                                        const TemporalParams &p) {
    if (frames == 0)
        throw ShapeError("temporal_encode: zero frames");
    auto z = be.add_row(be.matmul(e, be.param(p.in_proj)), be.param(p.in_bias));
    auto h_s = be.broadcast_rows(gated_transform(be, z, p.gate_u), frames);
    auto u = be.add(h_s, be.depthwise_conv1d(h_s, be.param(p.conv), Padding::same));
    auto [h_f, h_b] = bidirectional_scan(be, u, p.fwd, p.bwd);
    if (p.gated_fusion)
        return gated_fusion(be, h_f, h_b, p.fusion).out;
    return be.matmul(be.concat_cols(h_f, h_b), be.param(p.w_f));
}

inline Tensor temporal_encode(const StyleEmbedding &e, std::size_t frames, const TemporalParams &p) {
    Eager be;
    return temporal_encode(be, e.values, frames, p);
}

} // namespace ssmcond
