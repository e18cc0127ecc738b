#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "ssmcond/encoders.hpp"
#include "ssmcond/model.hpp"
#include "ssmcond/rng.hpp"
#include "ssmcond/ssm.hpp"

namespace ssmcond {

// ceil(seconds × 24000/256)
inline std::size_t lookahead_frames(double seconds) {
    if (!(seconds >= 0.0) || !std::isfinite(seconds))
        throw Error(detail::concat("look-ahead must be a finite non-negative number of seconds, got ", seconds));
    return static_cast<std::size_t>(std::ceil(seconds * kFramesPerSecond));
}

// Causal text path: input projection, the forward Mamba stack, AdaLN(e).
// Rows are independent except through the scans and conv tails, so running
// it chunk by chunk with carried states is bitwise identical to one pass.
inline Tensor causal_text_pipeline(const ConditioningModel &m, const Tensor &x, const Tensor &e,
                                   std::span<StreamState> states = {}) {
    if (x.cols() != m.config.d_token)
        throw ShapeError(detail::concat("stream input has width ", x.cols(), ", model expects ", m.config.d_token));
    Eager be;
    Tensor h = add_row(matmul(x, m.text.in_proj), m.text.in_bias);
    h = mamba_stack(be, std::move(h), m.text.fwd, Padding::causal, states);
    return adaln(be, h, e, m.text.adaln);
}

// Reference for a whole stream: the causal pipeline over x followed by L zero
// frames, rows L .. L+T-1.
inline Tensor stream_offline(const ConditioningModel &m, const Tensor &x, std::size_t lookahead, const Tensor &e) {
    const Tensor padded = concat_rows(x, Tensor(lookahead, x.cols()));
    const Tensor y = causal_text_pipeline(m, padded, e);
    return slice_rows(y, lookahead, lookahead + x.rows());
}

// Finite look-ahead streaming. Look-ahead is an emission delay: output frame
// t is the causal pipeline's output at step t+L, released by the feed that
// supplies input frame t+L. Only the per-layer states are kept, so memory
// does not depend on stream length.
class StreamSession {
  public:
    StreamSession(const ConditioningModel &m, double lookahead_sec, std::optional<StyleEmbedding> style = std::nullopt)
        : model_(&m), lookahead_(lookahead_frames(lookahead_sec)) {
        init(style);
    }

    static StreamSession with_frames(const ConditioningModel &m, std::size_t lookahead,
                                     std::optional<StyleEmbedding> style = std::nullopt) {
        StreamSession s(m, 0.0, std::move(style));
        s.lookahead_ = lookahead;
        return s;
    }

    std::size_t lookahead() const { return lookahead_; }
    std::size_t fed() const { return fed_; }
    std::size_t emitted() const { return emitted_; }
    std::size_t pending() const { return fed_ - emitted_; }
    bool closed() const { return closed_; }
    const std::vector<StreamState> &states() const { return states_; }

    Tensor feed(const Tensor &chunk) {
        if (closed_)
            throw Error("StreamSession::feed: session is closed");
        require_finite(chunk, "StreamSession::feed");
        fed_ += chunk.rows();
        return advance(chunk);
    }

    // Flushes the remaining frames by running L zero frames through.
    Tensor close() {
        if (closed_)
            throw Error("StreamSession::close: session already closed");
        closed_ = true;
        Tensor out = advance(Tensor(lookahead_, model_->config.d_token));
        return out;
    }

  private:
    void init(const std::optional<StyleEmbedding> &style) {
        const ModelConfig &c = model_->config;
        e_ = style ? style->values : Tensor(1, c.d_s);
        require_row_vector(e_, c.d_s, "StreamSession style");
        for (const MambaLayer &l : model_->text.fwd)
            states_.push_back(StreamState::for_layer(l));
    }

    Tensor advance(const Tensor &chunk) {
        const std::size_t d_h = model_->config.d_h;
        if (chunk.rows() == 0)
            return Tensor(0, d_h);
        Tensor y = causal_text_pipeline(*model_, chunk, e_, states_);
        const std::size_t skip = std::min(y.rows(), lookahead_ - discarded_);
        discarded_ += skip;
        // After close the zero padding can only release frames that were fed.
        const std::size_t release = std::min(y.rows() - skip, fed_ - emitted_);
        emitted_ += release;
        if (skip == 0 && release == y.rows())
            return y;
        return slice_rows(y, skip, skip + release);
    }

    const ConditioningModel *model_;
    std::size_t lookahead_;
    Tensor e_;
    std::vector<StreamState> states_;
    std::size_t fed_ = 0;
    std::size_t emitted_ = 0;
    std::size_t discarded_ = 0;
    bool closed_ = false;
};

struct CausalityReport {
    bool passed = true;
    std::size_t trials = 0;
    std::size_t t0 = 0;    // first violating trial
    std::size_t frame = 0; // first output frame that changed
};

// Random chunk sizes in [1, max_chunk] covering `total` frames.
inline std::vector<std::size_t> random_chunking(std::size_t total, std::size_t max_chunk, Rng &rng) {
    std::vector<std::size_t> sizes;
    while (total > 0) {
        const std::size_t n = std::min<std::size_t>(total, 1 + rng.below(max_chunk));
        sizes.push_back(n);
        total -= n;
    }
    return sizes;
}

inline Tensor run_stream(StreamSession &s, const Tensor &x, std::span<const std::size_t> chunks) {
    Tensor out(0, s.states().empty() ? 0 : s.states().front().d_h());
    std::size_t at = 0;
    for (std::size_t n : chunks) {
        out = concat_rows(out, s.feed(slice_rows(x, at, at + n)));
        at += n;
    }
    if (at != x.rows())
        throw Error("run_stream: chunking does not cover the input");
    return concat_rows(out, s.close());
}

// Perturbs every input frame after t0+L and checks that outputs 0..t0 are
// bitwise unchanged. Each trial uses fresh random data, t0 and chunking.
inline CausalityReport causality_probe(const ConditioningModel &m, std::size_t frames, std::size_t lookahead, Rng &rng,
                                       std::size_t trials = 1) {
    if (frames <= lookahead + 2)
        throw Error(detail::concat("causality_probe: need more than L+2 = ", lookahead + 2, " frames, got ", frames));
    CausalityReport report;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Tensor x(frames, m.config.d_token);
        for (double &v : x.values())
            v = rng.uniform(-1.0, 1.0);
        const std::size_t t0 = rng.below(frames - lookahead - 1);
        Tensor x2 = x;
        for (std::size_t t = t0 + lookahead + 1; t < frames; ++t)
            for (std::size_t c = 0; c < x2.cols(); ++c)
                x2(t, c) += rng.uniform(-1.0, 1.0);
        const auto chunks = random_chunking(frames, 32, rng);
        StreamSession a = StreamSession::with_frames(m, lookahead);
        StreamSession b = StreamSession::with_frames(m, lookahead);
        const Tensor ya = run_stream(a, x, chunks);
        const Tensor yb = run_stream(b, x2, chunks);
        ++report.trials;
        for (std::size_t t = 0; t <= t0; ++t)
            for (std::size_t c = 0; c < ya.cols(); ++c)
                if (ya(t, c) != yb(t, c)) {
                    report.passed = false;
                    report.t0 = t0;
                    report.frame = t;
                    return report;
                }
    }
    return report;
}

} // namespace ssmcond
