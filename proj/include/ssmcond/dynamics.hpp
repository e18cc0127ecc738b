#pragma once

#include <cmath>
#include <string>

#include "ssmcond/encoders.hpp"
#include "ssmcond/pitch.hpp"
#include "ssmcond/ssm.hpp"

namespace ssmcond {

// ─── Speech dynamics ─────────────────────────────────────────────────────────

struct DynamicsParams {
    Tensor conv; // d_h × k
    MambaLayer block;
    GatedFusionParams fusion;
    Tensor f0_w;    // d_h × 1
    Tensor f0_b;    // 1 × 1
    Tensor noise_w; // d_h × d_h

    template <class F> void for_each(F &&f) {
        f("conv", conv);
        block.for_each([&](const std::string &n, Tensor &t) { f("block." + n, t); });
        fusion.for_each([&](const std::string &n, Tensor &t) { f("fusion." + n, t); });
        f("f0_w", f0_w);
        f("f0_b", f0_b);
        f("noise_w", noise_w);
    }
};

inline DynamicsParams init_dynamics(std::size_t d_h, std::size_t d_ssm, std::size_t k, double tau, Rng &rng) {
    DynamicsParams p;
    p.conv = init_uniform(d_h, k, 1.0 / std::sqrt(static_cast<double>(k)), rng);
    p.block = init_mamba_layer(d_h, d_ssm, k, rng);
    p.fusion = init_gated_fusion(d_h, tau, rng);
    p.f0_w = init_dense(d_h, 1, rng);
    p.f0_b = Tensor(1, 1);
    p.noise_w = init_dense(d_h, d_h, rng);
    return p;
}

// Conv1D followed by a Mamba block: the rhythm-aware representation h_Tm.
template <class Backend>
typename Backend::Value temporal_predict(Backend &be, const typename Backend::Value &h_a, const DynamicsParams &p) {
    auto c = be.depthwise_conv1d(h_a, be.param(p.conv), Padding::same);
    return mamba_block(be, c, p.block, Padding::same);
}

inline Tensor temporal_predict(const Tensor &h_a, const DynamicsParams &p) {
    require_finite(h_a, "temporal_predict");
    Eager be;
    return temporal_predict(be, h_a, p);
}

// h_D = [F0_hat ; n], T_m × (1 + d_h). Column 0 is the F0 trajectory.
struct ConditioningSequence {
    Tensor packed;

    std::size_t frames() const { return packed.rows(); }
    std::size_t width() const { return packed.cols(); }
    Tensor f0_hat() const { return slice_cols(packed, 0, 1); }
    Tensor residual() const { return slice_cols(packed, 1, packed.cols()); }

    static ConditioningSequence pack(const Tensor &f0_hat, const Tensor &residual) {
        if (f0_hat.cols() != 1)
            throw ShapeError(detail::concat("ConditioningSequence::pack: F0 must be one column, got ", f0_hat.shape_str()));
        return ConditioningSequence{concat_cols(f0_hat, residual)};
    }
};

template <class Value> struct Conditioning {
    Value f0_hat;   // T_m × 1
    Value residual; // T_m × d_h
    Value packed;   // T_m × (1 + d_h)
};

template <class Backend>
Conditioning<typename Backend::Value> assemble_conditioning(Backend &be, const typename Backend::Value &h_tm,
                                                            const typename Backend::Value &h_p, const DynamicsParams &p) {
    auto g = gated_fusion(be, h_tm, h_p, p.fusion).out;
    auto f0 = be.add_row(be.matmul(g, be.param(p.f0_w)), be.param(p.f0_b));
    auto n = be.matmul(g, be.param(p.noise_w));
    auto packed = be.concat_cols(f0, n);
    return {std::move(f0), std::move(n), std::move(packed)};
}

inline ConditioningSequence assemble_conditioning(const Tensor &h_tm, const Tensor &h_p, const DynamicsParams &p) {
    require_same_shape(h_tm, h_p, "assemble_conditioning");
    Eager be;
    return ConditioningSequence{assemble_conditioning(be, h_tm, h_p, p).packed};
}

// ─── Toy decoder ─────────────────────────────────────────────────────────────

// Stand-in for the external mel decoder: one per-frame linear map.
struct DecoderParams {
    Tensor w; // (1 + d_h) × F
    Tensor b; // 1 × F

    template <class F> void for_each(F &&f) {
        f("w", w);
        f("b", b);
    }
};

inline DecoderParams init_decoder(std::size_t d_h, std::size_t mel_bins, Rng &rng) {
    return DecoderParams{init_dense(1 + d_h, mel_bins, rng), Tensor(1, mel_bins)};
}

// Returns F × T_m, the mel layout.
template <class Backend>
typename Backend::Value toy_decode(Backend &be, const typename Backend::Value &h_d, const DecoderParams &p) {
    return be.transpose(be.add_row(be.matmul(h_d, be.param(p.w)), be.param(p.b)));
}

inline Tensor toy_decode(const ConditioningSequence &h_d, const DecoderParams &p) {
    Eager be;
    return toy_decode(be, h_d.packed, p);
}

// ─── Metrics ──────────────────────────────────────────────────────────────────

struct EvalMetrics {
    double mel_l1 = 0.0;
    double f0_rmse = 0.0;
};

inline EvalMetrics eval_metrics(const Tensor &mel_hat, const Tensor &mel, const Tensor &f0_hat, const Tensor &f0_ref) {
    require_same_shape(mel_hat, mel, "eval_metrics(mel)");
    require_same_shape(f0_hat, f0_ref, "eval_metrics(f0)");
    EvalMetrics m;
    m.mel_l1 = mean_abs(sub(mel_hat, mel));
    double se = 0.0;
    for (std::size_t i = 0; i < f0_hat.size(); ++i)
        se += (f0_hat[i] - f0_ref[i]) * (f0_hat[i] - f0_ref[i]);
    m.f0_rmse = f0_hat.empty() ? 0.0 : std::sqrt(se / static_cast<double>(f0_hat.size()));
    return m;
}

} // namespace ssmcond
