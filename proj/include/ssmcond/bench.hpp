#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "ssmcond/inference.hpp"
#include "ssmcond/model.hpp"
#include "ssmcond/streaming.hpp"
#include "ssmcond/train.hpp"

namespace ssmcond::bench {

inline double median(std::vector<double> v) {
    if (v.empty())
        throw Error("median of an empty sample");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F> double time_ms(F &&f) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

// Median wall time of `repeats` runs after `warmups` discarded runs.
template <class F> double median_ms(F &&f, std::size_t repeats, std::size_t warmups = 2) {
    for (std::size_t i = 0; i < warmups; ++i)
        f();
    std::vector<double> times;
    for (std::size_t i = 0; i < repeats; ++i)
        times.push_back(time_ms(f));
    return median(times);
}

// Random inputs of the requested size for a model.
struct Inputs {
    PhonemeSequence tokens;
    MelSpectrogram mel;
};

inline Inputs random_inputs(const ModelConfig &c, std::size_t t_x, std::size_t t_m, Rng &rng) {
    Inputs in;
    for (std::size_t t = 0; t < t_x; ++t)
        in.tokens.ids.push_back(rng.below(c.vocab));
    in.mel.values = Tensor(c.mel_bins, t_m);
    for (double &v : in.mel.values.values())
        v = rng.uniform(-2.0, 1.0);
    return in;
}

// Small dimensions under which the benchmark sizes run in seconds.
inline ModelConfig small_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.vocab = 32;
    c.d_token = 16;
    c.d_h = 16;
    c.d_s = 8;
    c.d_ssm = 16;
    c.text_layers = 2;
    c.expressive_layers = 1;
    c.temporal_layers = 1;
    c.aligner_hidden = 32;
    c.seed = seed;
    return c;
}

// ─── Breakdown ───────────────────────────────────────────────────────────────

struct Section {
    std::string name;
    double median_ms = 0.0;
    double percent = 0.0;
    std::int64_t elements = 0; // activation elements allocated, deterministic
};

struct BreakdownReport {
    std::vector<Section> sections;
    double total_ms = 0.0;
    double max_shift = 0.0; // largest relative median change when repeats double
    bool stable = true;
};

namespace detail {

// Runs every stage once and returns per-stage (ms, elements).
inline std::vector<std::pair<double, std::int64_t>> run_stages(const ConditioningModel &m, const DecoderParams &dec,
                                                                const Inputs &in) {
    Eager be;
    std::vector<std::pair<double, std::int64_t>> out;
    auto stage = [&out](auto &&f) {
        audit::Scope scope;
        const double ms = time_ms(f);
        out.emplace_back(ms, scope.allocated());
    };
    const Tensor frames = in.mel.frames_major();
    Tensor e, h_ts, h_e, h_b, h_a, h_d;
    stage([&] {
        e = style_embed(be, frames, m.style);
        h_ts = text_encode(be, embed_tokens(be, in.tokens, m.embedding), e, m.text).h_ts;
    });
    stage([&] { h_e = expressive_encode(be, frames, e, m.expressive); });
    stage([&] { h_b = temporal_encode(be, e, frames.rows(), m.temporal); });
    stage([&] { h_a = gather_rows(h_ts, uniform_alignment(h_ts.rows(), frames.rows())); });
    stage([&] {
        const Tensor h_p = pitch_fuse(be, h_e, h_b, m.pitch);
        const Tensor f0 = predict_f0(be, h_p, m.pitch.f0_w, m.pitch.f0_b);
        h_d = assemble_conditioning(be, temporal_predict(be, h_a, m.dynamics), h_p, m.dynamics).packed;
    });
    stage([&] { (void)toy_decode(be, h_d, dec); });
    return out;
}

inline std::vector<Section> measure(const ConditioningModel &m, const DecoderParams &dec, const Inputs &in, std::size_t repeats) {
    static const char *names[] = {"text", "expressive", "temporal", "alignstub", "dynamics", "toy-decoder"};
    for (int i = 0; i < 2; ++i)
        run_stages(m, dec, in);
    std::vector<std::vector<double>> times(6);
    std::vector<Section> sections(6);
    for (std::size_t r = 0; r < repeats; ++r) {
        auto runs = run_stages(m, dec, in);
        for (std::size_t s = 0; s < 6; ++s) {
            times[s].push_back(runs[s].first);
            sections[s].elements = runs[s].second;
        }
    }
    for (std::size_t s = 0; s < 6; ++s) {
        sections[s].name = names[s];
        sections[s].median_ms = median(times[s]);
    }
    return sections;
}

} // namespace detail

inline BreakdownReport breakdown(const ModelConfig &c, std::size_t t_x, std::size_t t_m, std::size_t repeats) {
    if (repeats < 3)
        throw Error("bench breakdown: repeats must be at least 3");
    const ConditioningModel m = init_conditioning_model(c);
    Rng rng(c.seed + 1);
    const DecoderParams dec = init_decoder(c.d_h, c.mel_bins, rng);
    const Inputs in = random_inputs(c, t_x, t_m, rng);

    BreakdownReport r;
    r.sections = detail::measure(m, dec, in, repeats);
    const auto doubled = detail::measure(m, dec, in, 2 * repeats);
    for (const Section &s : r.sections)
        r.total_ms += s.median_ms;
    for (std::size_t i = 0; i < r.sections.size(); ++i) {
        Section &s = r.sections[i];
        s.percent = r.total_ms > 0.0 ? 100.0 * s.median_ms / r.total_ms : 100.0 / static_cast<double>(r.sections.size());
        const double base = std::max(s.median_ms, 1e-9);
        r.max_shift = std::max(r.max_shift, std::abs(doubled[i].median_ms - s.median_ms) / base);
    }
    r.stable = r.max_shift < 0.2;
    return r;
}

inline void write_breakdown_csv(const BreakdownReport &r, std::ostream &out) {
    out << "# per-frame conditioning throughput; no decoder or vocoder, so no RTF\n";
    out << "section,median_ms,percent,elements\n";
    for (const Section &s : r.sections)
        out << s.name << ',' << s.median_ms << ',' << s.percent << ',' << s.elements << '\n';
    out << "total," << r.total_ms << ",100," << '\n';
    if (!r.stable)
        out << "# warning: medians moved by " << 100.0 * r.max_shift << "% when repeats were doubled\n";
}

// ─── Scaling ─────────────────────────────────────────────────────────────────

struct ScalingRow {
    std::size_t frames = 0;
    double median_ms = 0.0;
    std::size_t elements = 0; // h_D elements
    double ratio = 0.0;         // median per-round time ratio vs previous row; 0 for the first
    double element_ratio = 0.0;
    bool pass = true;
};

// Full conditioning stack with T_m = T and T_x = max(T/4, 1). Sizes are
// timed round-robin so that slow drift in machine speed hits every size alike.
inline std::vector<ScalingRow> scaling(const ModelConfig &c, const std::vector<std::size_t> &frames, std::size_t repeats = 5,
                                       std::size_t warmups = 2) {
    if (frames.size() < 2)
        throw Error("bench scaling: need at least two sizes");
    const ConditioningModel m = init_conditioning_model(c);
    Rng rng(c.seed + 2);
    std::vector<Inputs> inputs;
    for (std::size_t t : frames)
        inputs.push_back(random_inputs(c, std::max<std::size_t>(t / 4, 1), t, rng));
    const std::size_t n = frames.size();
    std::vector<ScalingRow> rows(n);
    std::vector<std::vector<double>> times(n), ratios(n);
    std::vector<double> round(n);
    for (std::size_t rep = 0; rep < warmups + repeats; ++rep) {
        // Alternate the order so drift within a round cancels across rounds.
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t i = rep % 2 == 0 ? j : n - 1 - j;
            round[i] = time_ms([&] { rows[i].elements = condition(m, inputs[i].tokens, inputs[i].mel).h_d.packed.size(); });
        }
        if (rep < warmups)
            continue;
        for (std::size_t i = 0; i < n; ++i) {
            times[i].push_back(round[i]);
            if (i > 0)
                ratios[i].push_back(round[i] / round[i - 1]);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        ScalingRow &row = rows[i];
        row.frames = frames[i];
        row.median_ms = median(times[i]);
        if (i > 0) {
            const ScalingRow &prev = rows[i - 1];
            const double r = static_cast<double>(row.frames) / static_cast<double>(prev.frames);
            // Median of per-round ratios: slowdowns spanning a round divide out.
            row.ratio = median(ratios[i]);
            row.element_ratio = static_cast<double>(row.elements) / static_cast<double>(prev.elements);
            row.pass = row.ratio >= 0.85 * r && row.ratio <= 1.15 * r;
        }
    }
    return rows;
}

inline void write_scaling_csv(const std::vector<ScalingRow> &rows, std::ostream &out) {
    out << "frames,median_ms,elements,ratio,element_ratio,pass\n";
    for (const ScalingRow &r : rows)
        out << r.frames << ',' << r.median_ms << ',' << r.elements << ',' << r.ratio << ',' << r.element_ratio << ','
            << (r.pass ? "PASS" : "FAIL") << '\n';
}

// ─── Memory audit ────────────────────────────────────────────────────────────

enum class MemoryMode { offline, stream };

struct MemoryRow {
    std::size_t frames = 0;
    std::int64_t peak = 0; // activation elements above the pre-run level
};

// Offline: peak of one conditioning pass over T frames (inputs are built
// before measuring). Stream: peak of a whole session fed in chunks of
// `chunk` frames with the given look-ahead. T = 0 measures nothing.
inline std::vector<MemoryRow> audit_memory(const ModelConfig &c, const std::vector<std::size_t> &frames, MemoryMode mode,
                                           std::size_t lookahead = 47, std::size_t chunk = 64) {
    const ConditioningModel m = init_conditioning_model(c);
    std::vector<MemoryRow> rows;
    for (std::size_t t : frames) {
        Rng rng(c.seed + 3);
        MemoryRow row{t, 0};
        if (t == 0) {
            audit::Scope scope;
            row.peak = scope.peak_delta();
        } else if (mode == MemoryMode::offline) {
            const Inputs in = random_inputs(c, std::max<std::size_t>(t / 4, 1), t, rng);
            audit::Scope scope;
            (void)condition(m, in.tokens, in.mel);
            row.peak = scope.peak_delta();
        } else {
            audit::Scope scope;
            StreamSession s = StreamSession::with_frames(m, lookahead);
            for (std::size_t at = 0; at < t; at += chunk) {
                Tensor x(std::min(chunk, t - at), c.d_token);
                for (double &v : x.values())
                    v = rng.uniform(-1.0, 1.0);
                (void)s.feed(x);
            }
            (void)s.close();
            row.peak = scope.peak_delta();
        }
        rows.push_back(row);
    }
    return rows;
}

// ─── Gate statistics ─────────────────────────────────────────────────────────

struct GateStats {
    double mean_fwd = 0.0;
    double mean_bwd = 0.0;
    double var = 0.0; // over all gate values, both halves
};

// Each trace is T × 2d_h with the forward half first.
inline GateStats gate_stats(std::span<const Tensor> traces) {
    if (traces.empty())
        throw Error("gate_stats: no traces");
    double sf = 0.0, sb = 0.0, sum = 0.0, sq = 0.0;
    std::size_t nf = 0, nb = 0;
    for (const Tensor &g : traces) {
        if (g.cols() % 2 != 0)
            throw ShapeError(ssmcond::detail::concat("gate_stats: trace width ", g.cols(), " is odd"));
        const std::size_t half = g.cols() / 2;
        for (std::size_t t = 0; t < g.rows(); ++t)
            for (std::size_t c = 0; c < g.cols(); ++c) {
                const double v = g(t, c);
                (c < half ? sf : sb) += v;
                ++(c < half ? nf : nb);
                sum += v;
                sq += v * v;
            }
    }
    if (nf == 0)
        throw Error("gate_stats: traces are empty");
    GateStats s;
    s.mean_fwd = sf / static_cast<double>(nf);
    s.mean_bwd = sb / static_cast<double>(nb);
    const double n = static_cast<double>(nf + nb), mean = sum / n;
    s.var = std::max(0.0, sq / n - mean * mean);
    return s;
}

// ─── Sensitivity sweep ───────────────────────────────────────────────────────

struct SweepGrid {
    std::vector<std::size_t> d_ssm{64, 96, 128, 160};
    std::vector<std::size_t> k{3, 5, 7};
    std::vector<double> tau{0.7, 1.0, 1.3};
    std::size_t train_steps = 5;
    std::size_t frames = 1024; // T_m for the timed inference
    std::size_t repeats = 5;
};

inline void from_json(const nlohmann::json &j, SweepGrid &g) {
    auto opt = [&j](const char *key, auto &field) {
        if (j.contains(key))
            j.at(key).get_to(field);
    };
    opt("d_ssm", g.d_ssm);
    opt("k", g.k);
    opt("tau", g.tau);
    opt("train_steps", g.train_steps);
    opt("frames", g.frames);
    opt("repeats", g.repeats);
}

struct SweepRow {
    std::size_t d_ssm = 0;
    std::size_t k = 0;
    double tau = 0.0;
    double runtime_ms = 0.0;
    double loss = 0.0;
};

// Every grid point: a short training run from a fresh seed on the synthetic
// set, then timed inference of the trained conditioning model. All points are
// trained first and timed round-robin afterwards so drift spreads evenly.
inline std::vector<SweepRow> sweep(const SweepGrid &g, const ModelConfig &base, const std::vector<Sample> &data,
                                   std::uint64_t seed) {
    struct Point {
        SweepRow row;
        ConditioningModel model;
        Inputs in;
        std::vector<double> ms;
    };
    std::vector<Point> points;
    Rng seeds(seed);
    for (std::size_t d_ssm : g.d_ssm)
        for (std::size_t k : g.k)
            for (double tau : g.tau) {
                ModelConfig c = base;
                c.d_ssm = d_ssm;
                c.kernel = k;
                c.tau = tau;
                c.seed = seeds.next();
                TrainConfig tc;
                tc.lr = 5e-3;
                tc.steps = g.train_steps;
                tc.batch = 1;
                tc.seed = c.seed;
                TrainResult tr = train(init_training_model(c), data, tc);
                Rng rng(c.seed);
                Inputs in = random_inputs(c, std::max<std::size_t>(g.frames / 4, 1), g.frames, rng);
                points.push_back({SweepRow{d_ssm, k, tau, 0.0, tr.log.back().loss}, std::move(tr.model.cond),
                                  std::move(in), {}});
            }
    for (std::size_t r = 0; r <= g.repeats; ++r)
        for (Point &p : points) {
            const double ms = time_ms([&] { (void)condition(p.model, p.in.tokens, p.in.mel); });
            if (r > 0)
                p.ms.push_back(ms);
        }
    std::vector<SweepRow> rows;
    for (Point &p : points) {
        p.row.runtime_ms = median(p.ms);
        rows.push_back(p.row);
    }
    return rows;
}

// At fixed (k, tau), runtime may not fall by more than `band` as d_ssm grows.
inline bool runtime_trend_ok(const std::vector<SweepRow> &rows, double band = 0.1) {
    std::map<std::pair<std::size_t, double>, std::vector<std::pair<std::size_t, double>>> groups;
    for (const SweepRow &r : rows)
        groups[{r.k, r.tau}].emplace_back(r.d_ssm, r.runtime_ms);
    for (auto &[key, v] : groups) {
        std::sort(v.begin(), v.end());
        for (std::size_t i = 1; i < v.size(); ++i)
            if (v[i].second < (1.0 - band) * v[i - 1].second)
                return false;
    }
    return true;
}

inline void write_sweep_csv(const std::vector<SweepRow> &rows, std::ostream &out) {
    out << "d_ssm,k,tau,runtime_ms,loss\n";
    out.precision(10);
    for (const SweepRow &r : rows)
        out << r.d_ssm << ',' << r.k << ',' << r.tau << ',' << r.runtime_ms << ',' << r.loss << '\n';
}

} // namespace ssmcond::bench
