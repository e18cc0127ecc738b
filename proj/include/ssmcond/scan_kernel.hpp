#pragma once

#include <cmath>
#include <cstddef>

#include "ssmcond/numerics.hpp"
#include "ssmcond/tensor.hpp"

namespace ssmcond {

class StateBoundError : public Error {
  public:
    StateBoundError(std::size_t step, std::size_t channel, double value, double bound)
        : Error(detail::concat("selective scan state exceeded bound ", bound, " at step ", step, ", channel ", channel,
                               " (|s| = ", std::abs(value), ")")),
          step_(step), channel_(channel) {}

    std::size_t step() const { return step_; }
    std::size_t channel() const { return channel_; }

  private:
    std::size_t step_;
    std::size_t channel_;
};

// A = -exp(A_log), so every decay exp(delta * A) lies in (0, 1).
inline Tensor scan_decay_rates(const Tensor &a_log) {
    return map(a_log, [](double v) { return -std::exp(v); });
}

// Diagonal selective recurrence, one state row per channel:
//
//   s[c,:] <- exp(delta[t,c] * A[c,:]) * s[c,:] + delta[t,c] * B[t,:] * u[t,c]
//   y[t,c]  = <C[t,:], s[c,:]> + D[c] * u[t,c]
//
// u, delta: T×d_h; a_log: d_h×d_ssm; b, c: T×d_ssm; d_skip: 1×d_h.
// `state` (d_h×d_ssm) is read as s_0 and left holding s_T. When `trace` is
// non-null it receives every state, (T+1)×(d_h*d_ssm), for the backward pass.
inline Tensor scan_kernel(const Tensor &u, const Tensor &delta, const Tensor &a_log, const Tensor &b, const Tensor &c,
                          const Tensor &d_skip, Tensor &state, double bound, Tensor *trace = nullptr) {
    const std::size_t n = u.rows(), dh = u.cols(), ds = a_log.cols();
    require_same_shape(u, delta, "scan_kernel(u, delta)");
    if (a_log.rows() != dh || b.rows() != n || c.rows() != n || b.cols() != ds || c.cols() != ds)
        throw ShapeError(detail::concat("scan_kernel: inconsistent shapes u=", u.shape_str(), " A_log=", a_log.shape_str(),
                                        " B=", b.shape_str(), " C=", c.shape_str()));
    require_row_vector(d_skip, dh, "scan_kernel(D)");
    if (state.rows() != dh || state.cols() != ds)
        throw ShapeError(detail::concat("scan_kernel: state ", state.shape_str(), " expected ", dh, "x", ds));
    require_finite(u, "selective_scan input");

    const Tensor a = scan_decay_rates(a_log);
    Tensor y(n, dh);
    if (trace != nullptr) {
        *trace = Tensor(n + 1, dh * ds);
        std::copy(state.values().begin(), state.values().end(), trace->row(0).begin());
    }
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t ch = 0; ch < dh; ++ch) {
            const double dt = delta(t, ch);
            const double ut = u(t, ch);
            double *s = state.row(ch).data();
            const double *ar = a.row(ch).data();
            const double *br = b.row(t).data();
            const double *cr = c.row(t).data();
            double acc = 0.0;
            for (std::size_t k = 0; k < ds; ++k) {
                s[k] = std::exp(dt * ar[k]) * s[k] + dt * br[k] * ut;
                if (!(std::abs(s[k]) <= bound))
                    throw StateBoundError(t, ch, s[k], bound);
                acc += cr[k] * s[k];
            }
            y(t, ch) = acc + d_skip[ch] * ut;
        }
        if (trace != nullptr)
            std::copy(state.values().begin(), state.values().end(), trace->row(t + 1).begin());
    }
    return y;
}

struct ScanGrads {
    Tensor u, delta, a_log, b, c, d_skip;
};

// Reverse-mode adjoint of scan_kernel with a zero (constant) initial state.
inline ScanGrads scan_kernel_backward(const Tensor &u, const Tensor &delta, const Tensor &a_log, const Tensor &b,
                                      const Tensor &c, const Tensor &d_skip, const Tensor &trace, const Tensor &dy) {
    const std::size_t n = u.rows(), dh = u.cols(), ds = a_log.cols();
    const Tensor a = scan_decay_rates(a_log);
    ScanGrads g{Tensor(n, dh), Tensor(n, dh), Tensor(dh, ds), Tensor(n, ds), Tensor(n, ds), Tensor(1, dh)};
    Tensor da(dh, ds);
    Tensor ds_adj(dh, ds); // adjoint of s_t, carried backward in time
    for (std::size_t tt = n; tt-- > 0;) {
        const double *s_now = trace.row(tt + 1).data();
        const double *s_prev = trace.row(tt).data();
        for (std::size_t ch = 0; ch < dh; ++ch) {
            const double gy = dy(tt, ch);
            const double dt = delta(tt, ch);
            const double ut = u(tt, ch);
            g.d_skip[ch] += gy * ut;
            double du = gy * d_skip[ch];
            double ddt = 0.0;
            for (std::size_t k = 0; k < ds; ++k) {
                const std::size_t idx = ch * ds + k;
                g.c(tt, k) += gy * s_now[idx];
                const double adj = ds_adj(ch, k) + gy * c(tt, k);
                const double decay = std::exp(dt * a(ch, k));
                const double d_decay = adj * s_prev[idx];
                ddt += d_decay * decay * a(ch, k) + adj * b(tt, k) * ut;
                da(ch, k) += d_decay * decay * dt;
                g.b(tt, k) += adj * dt * ut;
                du += adj * dt * b(tt, k);
                ds_adj(ch, k) = adj * decay;
            }
            g.u(tt, ch) = du;
            g.delta(tt, ch) = ddt;
        }
    }
    for (std::size_t i = 0; i < da.size(); ++i)
        g.a_log[i] = da[i] * a[i];
    return g;
}

} // namespace ssmcond
