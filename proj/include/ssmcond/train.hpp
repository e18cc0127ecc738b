#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "ssmcond/aligner.hpp"
#include "ssmcond/inference.hpp"
#include "ssmcond/losses.hpp"
#include "ssmcond/model.hpp"
#include "ssmcond/tape.hpp"

namespace ssmcond {

// ─── Training model ──────────────────────────────────────────────────────────

// The inference parameters plus the training-only aligner and toy decoder.
struct TrainingModel {
    ConditioningModel cond;
    AlignerParams aligner;
    DecoderParams decoder;

    template <class F> void for_each(F &&f) {
        cond.for_each(f);
        aligner.for_each([&f](const std::string &n, Tensor &t) { f("aligner." + n, t); });
        decoder.for_each([&f](const std::string &n, Tensor &t) { f("decoder." + n, t); });
    }

    std::vector<Tensor *> parameters() {
        std::vector<Tensor *> out;
        for_each([&out](const std::string &, Tensor &t) { out.push_back(&t); });
        return out;
    }
};

inline TrainingModel init_training_model(const ModelConfig &c) {
    Rng rng(c.seed);
    TrainingModel m;
    m.cond = init_conditioning_model(c, rng);
    m.aligner = init_aligner(c.d_h, c.aligner_hidden, c.aligner_heads, c.aligner_layers, rng);
    m.decoder = init_decoder(c.d_h, c.mel_bins, rng);
    return m;
}

// ─── Synthetic data ──────────────────────────────────────────────────────────

struct Sample {
    PhonemeSequence tokens;
    Tensor mel; // F × T_m, normalized
    Tensor f0;  // T_m × 1, Hz
};

// Log-mels span roughly [-11.5, 6]; this brings them near unit scale.
inline Tensor normalize_mel(const Tensor &log_mel) {
    return map(log_mel, [](double v) { return (v + 4.0) / 4.0; });
}

inline Waveform sine_tone(double hz, std::size_t samples, double amplitude = 0.5) {
    Waveform w;
    w.samples.resize(samples);
    for (std::size_t i = 0; i < samples; ++i)
        w.samples[i] = amplitude * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / kSampleRate);
    return w;
}

// n tones at 220, 330, 440, ... Hz, 0.25 s each, with random token strings of
// length 3-6 and constant F0 contours.
inline std::vector<Sample> synthetic_dataset(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Sample> data;
    for (std::size_t i = 0; i < n; ++i) {
        const double hz = 220.0 + 110.0 * static_cast<double>(i);
        Sample s;
        s.mel = normalize_mel(compute_mel(sine_tone(hz, kSampleRate / 4)).values);
        const std::size_t len = 3 + rng.below(4);
        for (std::size_t t = 0; t < len; ++t)
            s.tokens.ids.push_back(rng.below(vocab));
        s.f0 = Tensor(s.mel.cols(), 1, hz);
        data.push_back(std::move(s));
    }
    return data;
}

// ─── Forward pass ────────────────────────────────────────────────────────────

template <class Value> struct TrainForward {
    Value loss;
    Value mel_hat; // F × T_m
    Value f0;      // T_m × 1
    Value alpha;
    Value h_d;
};

// style → encoders → aligner → pitch → dynamics → toy decoder → loss.
// With perturb > 0 the attention weights are jittered before they form h_A.
template <class Backend>
TrainForward<typename Backend::Value> train_forward(Backend &be, const TrainingModel &m, const Sample &s,
                                                    const LossWeights &w, double perturb = 0.0, Rng *rng = nullptr) {
    auto mel = be.constant(s.mel);
    auto frames = be.constant(transpose(s.mel));
    auto enc = encode(be, m.cond, s.tokens, frames);
    auto al = align(be, enc.h_e, enc.text.h_ts, m.aligner);
    auto h_a = al.h_a;
    if (perturb > 0.0) {
        if (rng == nullptr)
            throw Error("train_forward: perturbation needs an rng");
        h_a = be.matmul(perturb_alpha(be, al.alpha, perturb, *rng), enc.text.h_ts);
    }
    auto dec = decode_stages(be, m.cond, enc, h_a);
    auto mel_hat = toy_decode(be, dec.cond.packed, m.decoder);
    auto loss = total_loss(be, mel_hat, mel, al.alpha, w);
    return {std::move(loss), std::move(mel_hat), std::move(dec.f0), std::move(al.alpha), std::move(dec.cond.packed)};
}

// ─── Optimizer ───────────────────────────────────────────────────────────────

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-4;
    std::size_t warmup_steps = 0; // 0: max(steps/20, 10)
    double clip_norm = 1.0;
    double ema_decay = 0.999;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double perturb = 0.0;
    std::size_t steps = 200;
    std::size_t batch = 4;
    std::uint64_t seed = 7;

    std::size_t warmup() const { return warmup_steps != 0 ? warmup_steps : std::max<std::size_t>(steps / 20, 10); }

    void validate() const {
        if (lr < 0.0 || weight_decay < 0.0 || !(clip_norm > 0.0) || !(ema_decay > 0.0 && ema_decay < 1.0))
            throw Error("train config: lr and weight_decay must be >= 0, clip_norm > 0, ema_decay in (0, 1)");
        if (batch == 0)
            throw Error("train config: batch must be positive");
        if (!(perturb >= 0.0 && perturb < 1.0))
            throw Error("train config: perturb must be in [0, 1)");
    }
};

inline void from_json(const nlohmann::json &j, TrainConfig &c) {
    auto opt = [&j](const char *key, auto &field) {
        if (j.contains(key))
            j.at(key).get_to(field);
    };
    opt("lr", c.lr);
    opt("weight_decay", c.weight_decay);
    opt("warmup_steps", c.warmup_steps);
    opt("clip_norm", c.clip_norm);
    opt("ema_decay", c.ema_decay);
    opt("beta1", c.beta1);
    opt("beta2", c.beta2);
    opt("adam_eps", c.adam_eps);
    opt("perturb", c.perturb);
    opt("steps", c.steps);
    opt("batch", c.batch);
    opt("seed", c.seed);
}

inline void to_json(nlohmann::json &j, const TrainConfig &c) {
    j = nlohmann::json{{"lr", c.lr},          {"weight_decay", c.weight_decay}, {"warmup_steps", c.warmup_steps},
                       {"clip_norm", c.clip_norm}, {"ema_decay", c.ema_decay},     {"beta1", c.beta1},
                       {"beta2", c.beta2},    {"adam_eps", c.adam_eps},         {"perturb", c.perturb},
                       {"steps", c.steps},    {"batch", c.batch},               {"seed", c.seed}};
}

// Linear warmup to the peak, then cosine decay to zero at the last step.
inline double learning_rate(const TrainConfig &c, std::size_t step) {
    const std::size_t w = c.warmup();
    if (step < w)
        return c.lr * static_cast<double>(step + 1) / static_cast<double>(w);
    const std::size_t span = c.steps > w ? c.steps - w : 1;
    const double progress = std::min(1.0, static_cast<double>(step - w) / static_cast<double>(span));
    return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double global_norm(std::span<const Tensor> grads) {
    double sq = 0.0;
    for (const Tensor &g : grads)
        for (double v : g.values())
            sq += v * v;
    return std::sqrt(sq);
}

// Scales all gradients so their joint L2 norm is at most max_norm; returns
// the norm before clipping.
inline double clip_gradients(std::span<Tensor> grads, double max_norm) {
    const double norm = global_norm(grads);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (Tensor &g : grads)
            for (double &v : g.values())
                v *= s;
    }
    return norm;
}

// Adam moments with decoupled weight decay.
class AdamW {
  public:
    AdamW(std::span<Tensor *const> params, double beta1, double beta2, double eps, double weight_decay)
        : params_(params.begin(), params.end()), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
        for (Tensor *p : params_) {
            m_.emplace_back(p->rows(), p->cols());
            v_.emplace_back(p->rows(), p->cols());
        }
    }

    void step(std::span<const Tensor> grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor &p = *params_[i];
            const Tensor &g = grads[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
                const double update = (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
                p[j] -= lr * (update + wd_ * p[j]);
            }
        }
    }

  private:
    std::vector<Tensor *> params_;
    std::vector<Tensor> m_, v_;
    double beta1_, beta2_, eps_, wd_;
    std::size_t t_ = 0;
};

// Shadow weights: ema += (1 - decay)(w - ema).
class Ema {
  public:
    Ema(std::span<Tensor *const> params, double decay) : decay_(decay) {
        for (const Tensor *p : params)
            shadow_.push_back(*p);
    }

    void update(std::span<Tensor *const> params) {
        for (std::size_t i = 0; i < params.size(); ++i)
            for (std::size_t j = 0; j < shadow_[i].size(); ++j)
                shadow_[i][j] += (1.0 - decay_) * ((*params[i])[j] - shadow_[i][j]);
    }

    const std::vector<Tensor> &shadow() const { return shadow_; }

  private:
    double decay_;
    std::vector<Tensor> shadow_;
};

// ─── Loop ────────────────────────────────────────────────────────────────────

struct LogEntry {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0; // before clipping
};

struct TrainResult {
    TrainingModel model;
    std::vector<Tensor> ema;
    std::vector<LogEntry> log;
};

// Each step averages the loss over `batch` samples taken round-robin from the
// dataset. Single-threaded and bitwise reproducible for a fixed seed.
inline TrainResult train(TrainingModel model, const std::vector<Sample> &data, const TrainConfig &cfg,
                         const LossWeights &w = {}) {
    cfg.validate();
    check_loss_weights(w);
    if (data.empty())
        throw Error("train: empty dataset");
    std::vector<Tensor *> params = model.parameters();
    AdamW opt(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    Ema ema(params, cfg.ema_decay);
    Rng rng(cfg.seed);
    TrainResult result;
    std::vector<Tensor> grads(params.size());

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Tape tape;
        Recorder rec(tape);
        Var total{};
        try {
            for (std::size_t b = 0; b < cfg.batch; ++b) {
                const Sample &s = data[(step * cfg.batch + b) % data.size()];
                Var l = train_forward(rec, model, s, w, cfg.perturb, &rng).loss;
                total = b == 0 ? l : rec.add(total, l);
            }
        } catch (const NonFiniteError &e) {
            throw NonFiniteError(detail::concat("train: step ", step, ": ", e.what()));
        }
        Var loss = rec.scale(total, 1.0 / static_cast<double>(cfg.batch));
        const double value = rec.value(loss)[0];
        if (!std::isfinite(value))
            throw NonFiniteError(detail::concat("train: non-finite loss at step ", step));
        rec.backward(loss);
        for (std::size_t i = 0; i < params.size(); ++i)
            grads[i] = rec.grad(*params[i]);
        const double norm = clip_gradients(grads, cfg.clip_norm);
        const double lr = learning_rate(cfg, step);
        opt.step(grads, lr);
        ema.update(params);
        result.log.push_back({step, value, lr, norm});
    }
    result.ema = ema.shadow();
    result.model = std::move(model);
    return result;
}

inline void write_loss_csv(const std::vector<LogEntry> &log, std::ostream &out) {
    out << "step,loss,lr,grad_norm\n";
    out.precision(17);
    for (const LogEntry &e : log)
        out << e.step << ',' << e.loss << ',' << e.lr << ',' << e.grad_norm << '\n';
}

// Raw weights under their own names, EMA weights under "ema.".
inline void save_training_checkpoint(const std::filesystem::path &dir, TrainResult &r, const TrainConfig &cfg) {
    save_checkpoint(
        dir, r.model.cond.config,
        [&r](const auto &f) {
            r.model.for_each(f);
            std::size_t i = 0;
            r.model.for_each([&](const std::string &name, Tensor &) { f("ema." + name, r.ema[i++]); });
        },
        nlohmann::json{{"train", cfg}});
}

inline TrainingModel load_training_model(const std::filesystem::path &dir, bool use_ema = false) {
    const nlohmann::json manifest = read_manifest(dir);
    TrainingModel m = init_training_model(manifest.at("config").get<ModelConfig>());
    const std::string prefix = use_ema ? "ema." : "";
    load_tensors(dir, manifest,
                 [&](const auto &f) { m.for_each([&](const std::string &n, Tensor &t) { f(prefix + n, t); }); });
    return m;
}

// ─── Toy runs ────────────────────────────────────────────────────────────────

// A JSON file with "model" and "train" objects and a "dataset" object holding
// "samples" and "seed".
struct ToyRunConfig {
    ModelConfig model;
    TrainConfig train;
    std::size_t samples = 4;
    std::uint64_t data_seed = 7;
};

inline ToyRunConfig parse_toy_run(const nlohmann::json &j) {
    ToyRunConfig c;
    if (j.contains("model"))
        c.model = j.at("model").get<ModelConfig>();
    if (j.contains("train"))
        c.train = j.at("train").get<TrainConfig>();
    if (j.contains("dataset")) {
        const auto &d = j.at("dataset");
        c.samples = d.value("samples", c.samples);
        c.data_seed = d.value("seed", c.data_seed);
    }
    c.model.validate();
    c.train.validate();
    return c;
}

inline ToyRunConfig load_toy_run(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot read " + path.string());
    return parse_toy_run(nlohmann::json::parse(in));
}

inline TrainResult run_toy(const ToyRunConfig &c) {
    return train(init_training_model(c.model), synthetic_dataset(c.samples, c.model.vocab, c.data_seed), c.train);
}

} // namespace ssmcond
