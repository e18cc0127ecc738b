#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ssmcond/train.hpp"

namespace ssmcond {

struct ModuleGradCheck {
    std::string name;
    GradCheckResult result;
    double tolerance = 1e-4;

    bool ok() const { return result.ok(tolerance); }
};

// Shapes small enough that every finite-difference pass is cheap.
inline ModelConfig gradcheck_config() {
    ModelConfig c;
    c.vocab = 7;
    c.d_token = 4;
    c.d_h = 4;
    c.d_s = 3;
    c.d_ssm = 4;
    c.kernel = 3;
    c.text_layers = 1;
    c.expressive_layers = 1;
    c.temporal_layers = 1;
    c.mel_bins = 6;
    c.aligner_hidden = 8;
    c.aligner_heads = 2;
    c.aligner_layers = 1;
    c.seed = 72;
    return c;
}

// Replaces every weight with a uniform draw. At the init some decay rates
// leave gradients near 1e-12, under the finite-difference noise floor.
template <class Model> void randomize_for_gradcheck(Model &m, std::uint64_t seed, double scale = 1.2) {
    Rng rng(seed);
    m.for_each([&](const std::string &name, Tensor &t) {
        const bool decay = name.find("a_log") != std::string::npos;
        for (double &v : t.values())
            v = decay ? rng.uniform(-1.0, 0.5) : rng.uniform(-scale, scale);
    });
}

// Parameters through which no gradient can flow into the loss: only alpha
// leaves the last aligner layer, so its value, output and feed-forward
// weights are unused, and the key bias shifts every score of a row equally.
inline bool aligner_param_is_dead(const std::string &name, std::size_t layers) {
    const std::string last = "layers." + std::to_string(layers - 1) + ".";
    return name == "kv_bias" || name == last + "wv" || name == last + "wo" || name.rfind(last + "ff", 0) == 0;
}

namespace detail {

inline Tensor random_tensor(std::size_t r, std::size_t c, Rng &rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(r, c);
    for (double &v : t.values())
        v = rng.uniform(lo, hi);
    return t;
}

// Contracts an output against fixed random weights.
inline Var contract(Recorder &be, Var y, std::uint64_t seed) {
    Rng rng(seed);
    return be.sum_all(be.mul(y, be.constant(random_tensor(be.rows(y), be.cols(y), rng))));
}

template <class P> void collect(P &p, std::vector<Tensor *> &out) {
    p.for_each([&out](const std::string &, Tensor &t) { out.push_back(&t); });
}

} // namespace detail

// One check per module on random parameters and inputs, then the whole toy
// pipeline (end to end at 1e-3).
inline std::vector<ModuleGradCheck> module_grad_checks(std::uint64_t seed = 92) {
    const ModelConfig c = gradcheck_config();
    TrainingModel m = init_training_model(c);
    randomize_for_gradcheck(m, seed);
    ConditioningModel &cm = m.cond;
    Rng rng(seed + 1);
    const std::size_t t_x = 3, t_m = 5;
    Tensor frames = detail::random_tensor(t_m, c.mel_bins, rng);
    Tensor tokens_x = detail::random_tensor(t_x, c.d_token, rng);
    Tensor e = detail::random_tensor(1, c.d_s, rng);
    Tensor h1 = detail::random_tensor(t_m, c.d_h, rng), h2 = detail::random_tensor(t_m, c.d_h, rng);
    Tensor h_ts = detail::random_tensor(t_x, c.d_h, rng);
    Tensor packed = detail::random_tensor(t_m, 1 + c.d_h, rng);
    Tensor logits = detail::random_tensor(t_m, t_x, rng, -2.0, 2.0);
    Tensor mel_hat = detail::random_tensor(c.mel_bins, t_m, rng);
    const Tensor mel = detail::random_tensor(c.mel_bins, t_m, rng);

    std::vector<ModuleGradCheck> out;
    auto run = [&](const std::string &name, std::vector<Tensor *> params, const std::function<Var(Recorder &)> &loss,
                   double tol = 1e-4, double h = 1e-5) {
        out.push_back({name, grad_check(loss, params, h), tol});
    };
    auto with = [](std::vector<Tensor *> ps, auto &...p) {
        (detail::collect(p, ps), ...);
        return ps;
    };

    run("style", with({&frames}, cm.style), [&](Recorder &be) {
        return detail::contract(be, style_embed(be, be.param(frames), cm.style), 1);
    });
    run("text", with({&tokens_x, &e}, cm.text), [&](Recorder &be) {
        return detail::contract(be, text_encode(be, be.param(tokens_x), be.param(e), cm.text).h_ts, 2);
    });
    run("expressive", with({&frames, &e}, cm.expressive), [&](Recorder &be) {
        return detail::contract(be, expressive_encode(be, be.param(frames), be.param(e), cm.expressive), 3);
    });
    run("temporal", with({&e}, cm.temporal), [&](Recorder &be) {
        return detail::contract(be, temporal_encode(be, be.param(e), t_m, cm.temporal), 4);
    });
    {
        std::vector<Tensor *> live{&frames, &h_ts};
        m.aligner.for_each([&](const std::string &n, Tensor &t) {
            if (!aligner_param_is_dead(n, m.aligner.layers.size()))
                live.push_back(&t);
        });
        Tensor proj = detail::random_tensor(c.mel_bins, c.d_h, rng);
        run("aligner", live, [&](Recorder &be) {
            auto feats = be.matmul(be.param(frames), be.constant(proj));
            auto al = align(be, feats, be.param(h_ts), m.aligner);
            return be.add(detail::contract(be, al.alpha, 5), detail::contract(be, al.h_a, 6));
        });
    }
    run("pitch", with({&h1, &h2}, cm.pitch), [&](Recorder &be) {
        auto h_p = pitch_fuse(be, be.param(h1), be.param(h2), cm.pitch);
        return be.add(detail::contract(be, h_p, 7), detail::contract(be, predict_f0(be, h_p, cm.pitch.f0_w, cm.pitch.f0_b), 8));
    });
    run("dynamics", with({&h1, &h2}, cm.dynamics), [&](Recorder &be) {
        auto h_tm = temporal_predict(be, be.param(h1), cm.dynamics);
        return detail::contract(be, assemble_conditioning(be, h_tm, be.param(h2), cm.dynamics).packed, 9);
    });
    run("decoder", with({&packed}, m.decoder), [&](Recorder &be) {
        return detail::contract(be, toy_decode(be, be.param(packed), m.decoder), 10);
    });
    run("loss", {&mel_hat, &logits}, [&](Recorder &be) {
        return total_loss(be, be.param(mel_hat), be.constant(mel), be.softmax_rows(be.param(logits)), LossWeights{});
    });

    Sample s;
    s.tokens.ids = {1, 4, 2};
    s.mel = detail::random_tensor(c.mel_bins, t_m, rng);
    s.f0 = Tensor(t_m, 1, 200.0);
    std::vector<Tensor *> live;
    m.for_each([&](const std::string &n, Tensor &t) {
        if (n.rfind("aligner.", 0) != 0 || !aligner_param_is_dead(n.substr(8), m.aligner.layers.size()))
            live.push_back(&t);
    });
    run("end-to-end", live, [&](Recorder &be) { return train_forward(be, m, s, LossWeights{}).loss; }, 1e-3, 1e-4);
    return out;
}

} // namespace ssmcond
