#pragma once

// Offline conditioning path. Must not include aligner.hpp: at inference h_A
// comes from a fixed monotone expansion, never from the attention teacher.

#include <utility>
#include <vector>

#include "ssmcond/dynamics.hpp"
#include "ssmcond/encoders.hpp"
#include "ssmcond/frontend.hpp"
#include "ssmcond/model.hpp"
#include "ssmcond/pitch.hpp"

namespace ssmcond {

template <class Value> struct Encoded {
    Value e;    // 1 × d_s
    TextEncoding<Value> text;
    Value h_e;  // T_m × d_h
    Value h_b;  // T_m × d_h
};

// Style, text, expressive and temporal encoders. mel_frames is T_m × F.
template <class Backend>
Encoded<typename Backend::Value> encode(Backend &be, const ConditioningModel &m, const PhonemeSequence &tokens,
                                        const typename Backend::Value &mel_frames) {
    if (tokens.ids.empty())
        throw ShapeError("encode: empty token sequence");
    auto e = style_embed(be, mel_frames, m.style);
    auto x = embed_tokens(be, tokens, m.embedding);
    auto text = text_encode(be, x, e, m.text);
    auto h_e = expressive_encode(be, mel_frames, e, m.expressive);
    auto h_b = temporal_encode(be, e, be.rows(mel_frames), m.temporal);
    return {std::move(e), std::move(text), std::move(h_e), std::move(h_b)};
}

template <class Value> struct Decoded {
    Value h_p;  // T_m × d_h
    Value f0;   // T_m × 1, pitch head
    Value h_tm; // T_m × d_h
    Conditioning<Value> cond;
};

// Everything downstream of the aligned text encoding h_a (T_m × d_h).
template <class Backend>
Decoded<typename Backend::Value> decode_stages(Backend &be, const ConditioningModel &m, const Encoded<typename Backend::Value> &enc,
                                               const typename Backend::Value &h_a) {
    auto h_p = pitch_fuse(be, enc.h_e, enc.h_b, m.pitch);
    auto f0 = predict_f0(be, h_p, m.pitch.f0_w, m.pitch.f0_b);
    auto h_tm = temporal_predict(be, h_a, m.dynamics);
    auto cond = assemble_conditioning(be, h_tm, h_p, m.dynamics);
    return {std::move(h_p), std::move(f0), std::move(h_tm), std::move(cond)};
}

// Frame t takes token floor(t·T_x / T_m): monotone, covers every token when
// T_m ≥ T_x.
inline std::vector<std::size_t> uniform_alignment(std::size_t t_x, std::size_t t_m) {
    if (t_x == 0)
        throw ShapeError("uniform_alignment: empty text");
    std::vector<std::size_t> idx(t_m);
    for (std::size_t t = 0; t < t_m; ++t)
        idx[t] = t * t_x / t_m;
    return idx;
}

struct ConditioningResult {
    ConditioningSequence h_d;
    Tensor f0;    // T_m × 1
    Tensor gates; // T_x × 2d_h text fusion gates
};

// T_m is taken from the reference mel.
inline ConditioningResult condition(const ConditioningModel &m, const PhonemeSequence &tokens, const MelSpectrogram &refmel) {
    if (refmel.bins() != m.config.mel_bins)
        throw ShapeError(detail::concat("condition: reference mel has ", refmel.bins(), " bins, model expects ", m.config.mel_bins));
    require_finite(refmel.values, "condition(refmel)");
    Eager be;
    const Tensor frames = refmel.frames_major();
    auto enc = encode(be, m, tokens, frames);
    const auto idx = uniform_alignment(tokens.ids.size(), frames.rows());
    const Tensor h_a = gather_rows(enc.text.h_ts, idx);
    auto dec = decode_stages(be, m, enc, h_a);
    return {ConditioningSequence{std::move(dec.cond.packed)}, std::move(dec.f0), std::move(enc.text.gates)};
}

} // namespace ssmcond
