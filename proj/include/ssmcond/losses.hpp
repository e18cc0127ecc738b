#pragma once

#include "ssmcond/aligner.hpp"
#include "ssmcond/dynamics.hpp"

namespace ssmcond {

// ─── Training loss ───────────────────────────────────────────────────────────

struct LossWeights {
    double lambda_mel = 1.0;
    double lambda_adv = 0.0; // adversarial stack is not part of this engine
    double lambda_align = 0.1;
};

inline void check_loss_weights(const LossWeights &w) {
    if (w.lambda_mel < 0.0 || w.lambda_align < 0.0)
        throw Error("loss weights must be non-negative");
    if (w.lambda_adv != 0.0)
        throw Error("lambda_adv must be 0: no adversarial discriminators are implemented");
}

// lambda_mel * mean|M_hat - M| + lambda_align * monotonic_loss(alpha).
template <class Backend>
typename Backend::Value total_loss(Backend &be, const typename Backend::Value &mel_hat, const typename Backend::Value &mel,
                                   const typename Backend::Value &alpha, const LossWeights &w) {
    check_loss_weights(w);
    auto mel_term = be.scale(be.mean_abs(be.sub(mel_hat, mel)), w.lambda_mel);
    return be.add(mel_term, be.scale(monotonic_loss(be, alpha), w.lambda_align));
}

inline double total_loss(const Tensor &mel_hat, const Tensor &mel, const AlignmentMatrix &a, const LossWeights &w) {
    require_same_shape(mel_hat, mel, "total_loss");
    Eager be;
    return total_loss(be, mel_hat, mel, a.alpha, w)[0];
}

} // namespace ssmcond
