#pragma once

// Training-time alignment teacher. Nothing on the inference path includes this
// header; tests/test_inference_boundary.cpp checks that.
#define SSMCOND_ALIGNER_INCLUDED 1

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ssmcond/eager.hpp"
#include "ssmcond/numerics.hpp"
#include "ssmcond/rng.hpp"

namespace ssmcond {

struct AlignmentMatrix {
    Tensor alpha; // T_m × T_x, row-stochastic
};

struct AlignerLayer {
    Tensor wq, wk, wv, wo; // hidden × hidden
    Tensor ff1, ff2;       // hidden × hidden

    template <class F> void for_each(F &&f) {
        f("wq", wq);
        f("wk", wk);
        f("wv", wv);
        f("wo", wo);
        f("ff1", ff1);
        f("ff2", ff2);
    }
};

// Cross-attention stack: queries from mel-rate features, keys and values from
// the text encoding.
struct AlignerParams {
    std::size_t heads = 4;
    Tensor q_in;   // d_h × hidden
    Tensor q_bias; // 1 × hidden
    Tensor kv_in;  // d_h × hidden
    Tensor kv_bias;
    std::vector<AlignerLayer> layers;

    std::size_t hidden() const { return q_in.cols(); }

    template <class F> void for_each(F &&f) {
        f("q_in", q_in);
        f("q_bias", q_bias);
        f("kv_in", kv_in);
        f("kv_bias", kv_bias);
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].for_each([&](const std::string &n, Tensor &t) { f("layers." + std::to_string(i) + "." + n, t); });
    }
};

inline AlignerParams init_aligner(std::size_t d_h, std::size_t hidden, std::size_t heads, std::size_t n_layers, Rng &rng) {
    if (heads == 0 || hidden % heads != 0)
        throw Error(detail::concat("aligner: hidden ", hidden, " is not divisible by ", heads, " heads"));
    AlignerParams p;
    p.heads = heads;
    p.q_in = init_dense(d_h, hidden, rng);
    p.q_bias = Tensor(1, hidden);
    p.kv_in = init_dense(d_h, hidden, rng);
    p.kv_bias = Tensor(1, hidden);
    for (std::size_t i = 0; i < n_layers; ++i) {
        AlignerLayer l;
        l.wq = init_dense(hidden, hidden, rng);
        l.wk = init_dense(hidden, hidden, rng);
        l.wv = init_dense(hidden, hidden, rng);
        l.wo = init_dense(hidden, hidden, rng);
        l.ff1 = init_dense(hidden, hidden, rng);
        l.ff2 = init_dense(hidden, hidden, rng);
        p.layers.push_back(std::move(l));
    }
    return p;
}

template <class Value> struct Alignment {
    Value alpha; // T_m × T_x, head-averaged attention of the last layer
    Value h_a;   // T_m × d_h = alpha · h_ts
};

// Each layer: multi-head cross-attention with residual, then a SiLU
// feed-forward with residual. Sinusoidal positions are added on both sides.
template <class Backend>
Alignment<typename Backend::Value> align(Backend &be, const typename Backend::Value &mel_features,
                                         const typename Backend::Value &h_ts, const AlignerParams &p) {
    const std::size_t t_m = be.rows(mel_features), t_x = be.rows(h_ts);
    if (t_x == 0)
        throw ShapeError("align: empty text sequence");
    if (p.layers.empty())
        throw Error("align: aligner has no layers");
    const std::size_t d_h = be.cols(h_ts), hidden = p.hidden(), hd = hidden / p.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    auto q = be.add_row(be.matmul(be.add(mel_features, be.constant(sinusoidal_positions(t_m, d_h))), be.param(p.q_in)),
                        be.param(p.q_bias));
    auto kv = be.add_row(be.matmul(be.add(h_ts, be.constant(sinusoidal_positions(t_x, d_h))), be.param(p.kv_in)),
                         be.param(p.kv_bias));

    typename Backend::Value alpha{};
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
        const AlignerLayer &l = p.layers[li];
        auto qp = be.matmul(q, be.param(l.wq));
        auto kp = be.matmul(kv, be.param(l.wk));
        auto vp = be.matmul(kv, be.param(l.wv));
        typename Backend::Value heads_out{}, attn_sum{};
        for (std::size_t h = 0; h < p.heads; ++h) {
            auto qh = be.slice_cols(qp, h * hd, (h + 1) * hd);
            auto kh = be.slice_cols(kp, h * hd, (h + 1) * hd);
            auto vh = be.slice_cols(vp, h * hd, (h + 1) * hd);
            auto attn = be.softmax_rows(be.scale(be.matmul(qh, be.transpose(kh)), inv_sqrt));
            auto out = be.matmul(attn, vh);
            heads_out = h == 0 ? out : be.concat_cols(heads_out, out);
            attn_sum = h == 0 ? attn : be.add(attn_sum, attn);
        }
        q = be.add(q, be.matmul(heads_out, be.param(l.wo)));
        q = be.add(q, be.matmul(be.silu(be.matmul(q, be.param(l.ff1))), be.param(l.ff2)));
        if (li + 1 == p.layers.size())
            alpha = be.scale(attn_sum, 1.0 / static_cast<double>(p.heads));
    }
    auto h_a = be.matmul(alpha, h_ts);
    return {std::move(alpha), std::move(h_a)};
}

inline std::pair<AlignmentMatrix, Tensor> align(const Tensor &mel_features, const Tensor &h_ts, const AlignerParams &p) {
    if (!mel_features.all_finite() || !h_ts.all_finite())
        throw NonFiniteError("align: non-finite input");
    Eager be;
    auto r = align(be, mel_features, h_ts, p);
    return {AlignmentMatrix{std::move(r.alpha)}, std::move(r.h_a)};
}

// ─── Monotonic alignment loss ────────────────────────────────────────────────

// Mean hinge on backward steps of the attention centroid
// c_t = sum_j j * alpha[t, j]:  (1/T_m) * sum_{t>=1} relu(c_{t-1} - c_t).
template <class Backend>
typename Backend::Value monotonic_loss(Backend &be, const typename Backend::Value &alpha) {
    const std::size_t t_m = be.rows(alpha), t_x = be.cols(alpha);
    if (t_m < 2)
        return be.constant(Tensor(1, 1));
    std::vector<double> idx(t_x);
    for (std::size_t j = 0; j < t_x; ++j)
        idx[j] = static_cast<double>(j);
    auto centroid = be.matmul(alpha, be.constant(Tensor::column_vector(idx)));
    auto drops = be.relu(be.sub(be.slice_rows(centroid, 0, t_m - 1), be.slice_rows(centroid, 1, t_m)));
    return be.scale(be.sum_all(drops), 1.0 / static_cast<double>(t_m));
}

inline double monotonic_loss(const AlignmentMatrix &a) {
    Eager be;
    return monotonic_loss(be, a.alpha)[0];
}

inline std::vector<double> attention_centroids(const Tensor &alpha) {
    std::vector<double> c(alpha.rows(), 0.0);
    for (std::size_t t = 0; t < alpha.rows(); ++t)
        for (std::size_t j = 0; j < alpha.cols(); ++j)
            c[t] += static_cast<double>(j) * alpha(t, j);
    return c;
}

// ─── Robustness perturbation ─────────────────────────────────────────────────

// Multiplicative noise factors 1 + u, u ~ U[-magnitude, magnitude].
inline Tensor perturbation_factors(std::size_t rows, std::size_t cols, double magnitude, Rng &rng) {
    if (!(magnitude >= 0.0 && magnitude < 1.0))
        throw Error(detail::concat("perturb_alpha: magnitude must be in [0, 1), got ", magnitude));
    Tensor f(rows, cols);
    for (double &v : f.values())
        v = 1.0 + rng.uniform(-magnitude, magnitude);
    return f;
}

template <class Backend>
typename Backend::Value perturb_alpha(Backend &be, const typename Backend::Value &alpha, double magnitude, Rng &rng) {
    if (magnitude == 0.0)
        return alpha;
    auto factors = perturbation_factors(be.rows(alpha), be.cols(alpha), magnitude, rng);
    return be.normalize_rows(be.mul(alpha, be.constant(std::move(factors))));
}

inline AlignmentMatrix perturb_alpha(const AlignmentMatrix &a, double magnitude, Rng &rng) {
    if (!(magnitude >= 0.0 && magnitude < 1.0))
        throw Error(detail::concat("perturb_alpha: magnitude must be in [0, 1), got ", magnitude));
    Eager be;
    return AlignmentMatrix{perturb_alpha(be, a.alpha, magnitude, rng)};
}

} // namespace ssmcond
