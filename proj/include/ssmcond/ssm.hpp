#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "ssmcond/eager.hpp"
#include "ssmcond/numerics.hpp"
#include "ssmcond/rng.hpp"
#include "ssmcond/scan_kernel.hpp"
#include "ssmcond/tensor_io.hpp"

namespace ssmcond {

inline constexpr double kDefaultStateBound = 1e3;

// ─── Parameters ──────────────────────────────────────────────────────────────

// One selective-SSM (Mamba) layer. Step size is per channel; B and C are
// shared across channels and depend on the input.
struct MambaLayer {
    Tensor in_proj;    // d_h × 2d_h (value | gate)
    Tensor conv;       // d_h × k, depthwise
    Tensor delta_proj; // d_h × d_h
    Tensor delta_bias; // 1 × d_h
    Tensor a_log;      // d_h × d_ssm, A = -exp(a_log)
    Tensor b_proj;     // d_h × d_ssm
    Tensor c_proj;     // d_h × d_ssm
    Tensor d_skip;     // 1 × d_h
    Tensor out_proj;   // d_h × d_h
    double state_bound = kDefaultStateBound;

    std::size_t d_h() const { return d_skip.cols(); }
    std::size_t d_ssm() const { return a_log.cols(); }
    std::size_t kernel() const { return conv.cols(); }

    template <class F> void for_each(F &&f) {
        f("in_proj", in_proj);
        f("conv", conv);
        f("delta_proj", delta_proj);
        f("delta_bias", delta_bias);
        f("a_log", a_log);
        f("b_proj", b_proj);
        f("c_proj", c_proj);
        f("d_skip", d_skip);
        f("out_proj", out_proj);
    }
};

// a_log rows are log(linspace(1, d_ssm)), so initial decay rates span time
// scales; D starts at 1.
inline MambaLayer init_mamba_layer(std::size_t d_h, std::size_t d_ssm, std::size_t k, Rng &rng) {
    MambaLayer p;
    p.in_proj = init_dense(d_h, 2 * d_h, rng);
    p.conv = init_uniform(d_h, k, 1.0 / std::sqrt(static_cast<double>(k)), rng);
    p.delta_proj = init_dense(d_h, d_h, rng);
    p.delta_bias = Tensor(1, d_h);
    p.a_log = Tensor(d_h, d_ssm);
    for (std::size_t c = 0; c < d_h; ++c)
        for (std::size_t n = 0; n < d_ssm; ++n) {
            const double a = d_ssm == 1 ? 1.0 : 1.0 + static_cast<double>(n) * (static_cast<double>(d_ssm) - 1.0) / static_cast<double>(d_ssm - 1);
            p.a_log(c, n) = std::log(a);
        }
    p.b_proj = init_dense(d_h, d_ssm, rng);
    p.c_proj = init_dense(d_h, d_ssm, rng);
    p.d_skip = Tensor(1, d_h, 1.0);
    p.out_proj = init_dense(d_h, d_h, rng);
    return p;
}

// ─── Stream state ────────────────────────────────────────────────────────────

// Everything a causal Mamba block needs to resume a scan mid-stream.
struct StreamState {
    Tensor ssm;       // d_h × d_ssm
    Tensor conv_tail; // (k-1) × d_h, last pre-conv inputs
    std::uint64_t frames_seen = 0;

    static StreamState zeros(std::size_t d_h, std::size_t d_ssm, std::size_t k) {
        return StreamState{Tensor(d_h, d_ssm), Tensor(k - 1, d_h), 0};
    }
    static StreamState for_layer(const MambaLayer &p) { return zeros(p.d_h(), p.d_ssm(), p.kernel()); }

    std::size_t d_h() const { return ssm.rows(); }
    std::size_t d_ssm() const { return ssm.cols(); }
    std::size_t kernel() const { return conv_tail.rows() + 1; }

    friend bool operator==(const StreamState &, const StreamState &) = default;
};

class StateFormatError : public Error {
  public:
    enum class Kind { bad_magic, bad_version, shape_mismatch, truncated };
    StateFormatError(Kind kind, const std::string &what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

  private:
    Kind kind_;
};

inline constexpr std::array<std::uint8_t, 4> kStateMagic{0x4D, 0x56, 0x53, 0x54};
inline constexpr std::uint32_t kStateVersion = 1;

// "MVST" | u32 version | u32 d_h | u32 d_ssm | u32 k | u64 frames_seen |
// ssm (row-major) then conv_tail, each value f64 LE.
inline std::vector<std::uint8_t> save_state(const StreamState &s) {
    std::vector<std::uint8_t> out(kStateMagic.begin(), kStateMagic.end());
    bytes::put_u32(out, kStateVersion);
    bytes::put_u32(out, static_cast<std::uint32_t>(s.d_h()));
    bytes::put_u32(out, static_cast<std::uint32_t>(s.d_ssm()));
    bytes::put_u32(out, static_cast<std::uint32_t>(s.kernel()));
    bytes::put_u64(out, s.frames_seen);
    for (double v : s.ssm.values())
        bytes::put_f64(out, v);
    for (double v : s.conv_tail.values())
        bytes::put_f64(out, v);
    return out;
}

// Restores a state and checks it against the layer it will drive.
inline StreamState restore_state(std::span<const std::uint8_t> data, std::size_t d_h, std::size_t d_ssm, std::size_t k) {
    using K = StateFormatError::Kind;
    bytes::Reader r(data);
    if (!r.get_magic(kStateMagic))
        throw StateFormatError(K::bad_magic, "restore_state: bad magic");
    std::uint32_t version = 0, h = 0, n = 0, kk = 0;
    std::uint64_t frames = 0;
    if (!r.get_u32(version))
        throw StateFormatError(K::truncated, "restore_state: truncated header");
    if (version != kStateVersion)
        throw StateFormatError(K::bad_version, detail::concat("restore_state: unsupported version ", version));
    if (!r.get_u32(h) || !r.get_u32(n) || !r.get_u32(kk) || !r.get_u64(frames))
        throw StateFormatError(K::truncated, "restore_state: truncated header");
    if (h != d_h || n != d_ssm || kk != k)
        throw StateFormatError(K::shape_mismatch, detail::concat("restore_state: state is d_h=", h, " d_ssm=", n, " k=", kk,
                                                                 ", layer expects d_h=", d_h, " d_ssm=", d_ssm, " k=", k));
    if (kk == 0)
        throw StateFormatError(K::shape_mismatch, "restore_state: kernel size 0");
    StreamState s = StreamState::zeros(h, n, kk);
    s.frames_seen = frames;
    for (double &v : s.ssm.values())
        if (!r.get_f64(v))
            throw StateFormatError(K::truncated, "restore_state: truncated payload");
    for (double &v : s.conv_tail.values())
        if (!r.get_f64(v))
            throw StateFormatError(K::truncated, "restore_state: truncated payload");
    return s;
}

inline StreamState restore_state(std::span<const std::uint8_t> data, const MambaLayer &p) {
    return restore_state(data, p.d_h(), p.d_ssm(), p.kernel());
}

// ─── Scan and block ──────────────────────────────────────────────────────────

// Selective scan over u (T×d_h): delta = softplus(u·delta_proj + delta_bias),
// B = u·b_proj, C = u·c_proj, then the diagonal recurrence of scan_kernel.
template <class Backend>
typename Backend::Value selective_scan(Backend &be, const typename Backend::Value &u, const MambaLayer &p,
                                       Tensor *ssm_state = nullptr) {
    auto delta = be.softplus(be.add_row(be.matmul(u, be.param(p.delta_proj)), be.param(p.delta_bias)));
    auto b = be.matmul(u, be.param(p.b_proj));
    auto c = be.matmul(u, be.param(p.c_proj));
    return be.scan(u, delta, be.param(p.a_log), b, c, be.param(p.d_skip), ssm_state, p.state_bound);
}

// Eager form returning the final state, which starts from `state` when given.
inline std::pair<Tensor, StreamState> selective_scan(const Tensor &u, const MambaLayer &p, const StreamState *state = nullptr) {
    StreamState s = state != nullptr ? *state : StreamState::for_layer(p);
    if (s.d_h() != p.d_h() || s.d_ssm() != p.d_ssm())
        throw ShapeError("selective_scan: state shape does not match layer");
    Eager be;
    Tensor y = selective_scan(be, u, p, &s.ssm);
    s.frames_seen += u.rows();
    return {std::move(y), std::move(s)};
}

// Mamba block: in_proj splits value and gate; value goes through depthwise
// conv, SiLU and the selective scan; the gate multiplies via SiLU; out_proj
// and a residual connection close the block.
template <class Backend>
typename Backend::Value mamba_block(Backend &be, const typename Backend::Value &x, const MambaLayer &p, Padding pad,
                                    StreamState *state = nullptr) {
    if (state != nullptr) {
        if (pad != Padding::causal)
            throw Error("mamba_block: a stream state requires causal padding");
        if (state->d_h() != p.d_h() || state->d_ssm() != p.d_ssm() || state->kernel() != p.kernel())
            throw ShapeError("mamba_block: stream state shape does not match layer");
    }
    const std::size_t d_h = p.d_h();
    auto xz = be.matmul(x, be.param(p.in_proj));
    auto v = be.slice_cols(xz, 0, d_h);
    auto gate = be.slice_cols(xz, d_h, 2 * d_h);
    v = be.silu(be.depthwise_conv1d(v, be.param(p.conv), pad, state != nullptr ? &state->conv_tail : nullptr));
    auto y = selective_scan(be, v, p, state != nullptr ? &state->ssm : nullptr);
    y = be.mul(y, be.silu(gate));
    if (state != nullptr)
        state->frames_seen += be.rows(x);
    return be.add(be.matmul(y, be.param(p.out_proj)), x);
}

inline std::pair<Tensor, StreamState> mamba_block(const Tensor &x, const MambaLayer &p, Padding pad,
                                                  const StreamState *state = nullptr) {
    Eager be;
    if (state == nullptr && pad == Padding::same)
        return {mamba_block(be, x, p, pad), StreamState::for_layer(p)};
    StreamState s = state != nullptr ? *state : StreamState::for_layer(p);
    Tensor y = mamba_block(be, x, p, pad, &s);
    return {std::move(y), std::move(s)};
}

// Stack of blocks applied in order.
template <class Backend>
typename Backend::Value mamba_stack(Backend &be, typename Backend::Value x, std::span<const MambaLayer> layers, Padding pad,
                                    std::span<StreamState> states = {}) {
    for (std::size_t i = 0; i < layers.size(); ++i)
        x = mamba_block(be, x, layers[i], pad, states.empty() ? nullptr : &states[i]);
    return x;
}

// Forward and time-reversed stacks with independent parameters; each
// direction is causal in its own scan direction.
template <class Backend>
std::pair<typename Backend::Value, typename Backend::Value>
bidirectional_scan(Backend &be, const typename Backend::Value &x, std::span<const MambaLayer> fwd,
                   std::span<const MambaLayer> bwd) {
    if (be.rows(x) == 0)
        throw ShapeError("bidirectional_scan: empty sequence");
    auto h_f = mamba_stack(be, x, fwd, Padding::causal);
    auto h_b = be.reverse_rows(mamba_stack(be, be.reverse_rows(x), bwd, Padding::causal));
    return {std::move(h_f), std::move(h_b)};
}

inline std::pair<Tensor, Tensor> bidirectional_scan(const Tensor &x, const MambaLayer &fwd, const MambaLayer &bwd) {
    Eager be;
    return bidirectional_scan(be, x, std::span<const MambaLayer>(&fwd, 1), std::span<const MambaLayer>(&bwd, 1));
}

} // namespace ssmcond
