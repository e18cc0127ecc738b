#pragma once

#include "ssmcond/encoders.hpp"

namespace ssmcond {

// Pitch path: gated fusion of expressive and temporal encodings, then a
// linear F0 head.
struct PitchParams {
    GatedFusionParams fusion;
    Tensor f0_w; // d_h × 1
    Tensor f0_b; // 1 × 1

    template <class F> void for_each(F &&f) {
        fusion.for_each([&](const std::string &n, Tensor &t) { f("fusion." + n, t); });
        f("f0_w", f0_w);
        f("f0_b", f0_b);
    }
};

inline PitchParams init_pitch_params(std::size_t d_h, double tau, Rng &rng) {
    return PitchParams{init_gated_fusion(d_h, tau, rng), init_dense(d_h, 1, rng), Tensor(1, 1)};
}

template <class Backend>
typename Backend::Value pitch_fuse(Backend &be, const typename Backend::Value &h_e, const typename Backend::Value &h_b,
                                   const PitchParams &p) {
    return gated_fusion(be, h_e, h_b, p.fusion).out;
}

inline Tensor pitch_fuse(const Tensor &h_e, const Tensor &h_b, const PitchParams &p) {
    require_same_shape(h_e, h_b, "pitch_fuse");
    Eager be;
    return pitch_fuse(be, h_e, h_b, p);
}

// F0 = h_P W_F + b_F, T_m × 1.
template <class Backend>
typename Backend::Value predict_f0(Backend &be, const typename Backend::Value &h_p, const Tensor &w, const Tensor &b) {
    return be.add_row(be.matmul(h_p, be.param(w)), be.param(b));
}

inline Tensor predict_f0(const Tensor &h_p, const Tensor &w, const Tensor &b) {
    Eager be;
    return predict_f0(be, h_p, w, b);
}

} // namespace ssmcond
