#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "ssmcond/rng.hpp"
#include "ssmcond/tensor.hpp"

namespace ssmcond {

// Shared numerical constant: layer-norm epsilon and the mel log floor.
inline constexpr double kEps = 1e-5;

enum class Padding { causal, same };

// ─── Scalar functions ────────────────────────────────────────────────────────

namespace scalar {

inline double sigmoid(double x) {
    if (x >= 0.0)
        return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double silu(double x) { return x * sigmoid(x); }

inline double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

} // namespace scalar

// ─── Shape helpers ───────────────────────────────────────────────────────────

inline void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
    if (!a.same_shape(b))
        throw ShapeError(detail::concat(op, ": shape mismatch ", a.shape_str(), " vs ", b.shape_str()));
}

inline void require_row_vector(const Tensor &v, std::size_t cols, const char *op) {
    if (v.rows() != 1 || v.cols() != cols)
        throw ShapeError(detail::concat(op, ": expected 1x", cols, " vector, got ", v.shape_str()));
}

// ─── Dense kernels ───────────────────────────────────────────────────────────

// x: T×a, w: a×b → T×b. Each output row is accumulated in the same order
// regardless of T, so row slices of a long input match a short input bitwise.
inline Tensor matmul(const Tensor &x, const Tensor &w) {
    if (x.cols() != w.rows())
        throw ShapeError(detail::concat("matmul: inner dims differ (", x.shape_str(), " times ", w.shape_str(), ")"));
    const std::size_t n = x.rows(), a = x.cols(), b = w.cols();
    Tensor y(n, b);
    for (std::size_t t = 0; t < n; ++t) {
        double *yr = y.row(t).data();
        for (std::size_t i = 0; i < a; ++i) {
            const double xv = x(t, i);
            const double *wr = w.row(i).data();
            for (std::size_t j = 0; j < b; ++j)
                yr[j] += xv * wr[j];
        }
    }
    return y;
}

inline Tensor add_row(const Tensor &x, const Tensor &bias) {
    require_row_vector(bias, x.cols(), "add_row");
    Tensor y = x;
    for (std::size_t t = 0; t < y.rows(); ++t)
        for (std::size_t j = 0; j < y.cols(); ++j)
            y(t, j) += bias[j];
    return y;
}

inline Tensor mul_row(const Tensor &x, const Tensor &g) {
    require_row_vector(g, x.cols(), "mul_row");
    Tensor y = x;
    for (std::size_t t = 0; t < y.rows(); ++t)
        for (std::size_t j = 0; j < y.cols(); ++j)
            y(t, j) *= g[j];
    return y;
}

inline Tensor linear_apply(const Tensor &x, const Tensor &w) { return matmul(x, w); }
inline Tensor linear_apply(const Tensor &x, const Tensor &w, const Tensor &bias) { return add_row(matmul(x, w), bias); }

template <class F> Tensor map(const Tensor &x, F &&f) {
    Tensor y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = f(x[i]);
    return y;
}

template <class F> Tensor zip(const Tensor &a, const Tensor &b, const char *op, F &&f) {
    require_same_shape(a, b, op);
    Tensor y(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i)
        y[i] = f(a[i], b[i]);
    return y;
}

inline Tensor add(const Tensor &a, const Tensor &b) {
    return zip(a, b, "add", [](double p, double q) { return p + q; });
}
inline Tensor sub(const Tensor &a, const Tensor &b) {
    return zip(a, b, "sub", [](double p, double q) { return p - q; });
}
inline Tensor mul(const Tensor &a, const Tensor &b) {
    return zip(a, b, "mul", [](double p, double q) { return p * q; });
}
inline Tensor scale(const Tensor &a, double s) {
    return map(a, [s](double v) { return v * s; });
}

inline Tensor sigmoid(const Tensor &x) { return map(x, scalar::sigmoid); }
inline Tensor silu(const Tensor &x) { return map(x, scalar::silu); }
inline Tensor softplus(const Tensor &x) { return map(x, scalar::softplus); }
inline Tensor tanh(const Tensor &x) {
    return map(x, [](double v) { return std::tanh(v); });
}
inline Tensor relu(const Tensor &x) {
    return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

// ─── Structural kernels ──────────────────────────────────────────────────────

inline Tensor transpose(const Tensor &x) {
    Tensor y(x.cols(), x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c)
            y(c, r) = x(r, c);
    return y;
}

inline Tensor concat_cols(const Tensor &a, const Tensor &b) {
    if (a.rows() != b.rows())
        throw ShapeError(detail::concat("concat_cols: row counts differ (", a.shape_str(), ", ", b.shape_str(), ")"));
    Tensor y(a.rows(), a.cols() + b.cols());
    for (std::size_t t = 0; t < a.rows(); ++t) {
        std::copy(a.row(t).begin(), a.row(t).end(), y.row(t).begin());
        std::copy(b.row(t).begin(), b.row(t).end(), y.row(t).begin() + static_cast<std::ptrdiff_t>(a.cols()));
    }
    return y;
}

inline Tensor concat_rows(const Tensor &a, const Tensor &b) {
    if (a.cols() != b.cols() && !a.empty() && !b.empty())
        throw ShapeError(detail::concat("concat_rows: col counts differ (", a.shape_str(), ", ", b.shape_str(), ")"));
    const std::size_t cols = a.empty() ? b.cols() : a.cols();
    Tensor y(a.rows() + b.rows(), cols);
    std::copy(a.values().begin(), a.values().end(), y.values().begin());
    std::copy(b.values().begin(), b.values().end(), y.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
    return y;
}

inline Tensor slice_cols(const Tensor &x, std::size_t c0, std::size_t c1) {
    if (c0 > c1 || c1 > x.cols())
        throw ShapeError(detail::concat("slice_cols: [", c0, ",", c1, ") out of ", x.shape_str()));
    Tensor y(x.rows(), c1 - c0);
    for (std::size_t t = 0; t < x.rows(); ++t)
        for (std::size_t c = c0; c < c1; ++c)
            y(t, c - c0) = x(t, c);
    return y;
}

inline Tensor slice_rows(const Tensor &x, std::size_t r0, std::size_t r1) {
    if (r0 > r1 || r1 > x.rows())
        throw ShapeError(detail::concat("slice_rows: [", r0, ",", r1, ") out of ", x.shape_str()));
    Tensor y(r1 - r0, x.cols());
    std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(r0 * x.cols()),
              x.values().begin() + static_cast<std::ptrdiff_t>(r1 * x.cols()), y.values().begin());
    return y;
}

inline Tensor reverse_rows(const Tensor &x) {
    Tensor y(x.rows(), x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto src = x.row(x.rows() - 1 - t);
        std::copy(src.begin(), src.end(), y.row(t).begin());
    }
    return y;
}

inline Tensor broadcast_rows(const Tensor &v, std::size_t rows) {
    if (v.rows() != 1)
        throw ShapeError(detail::concat("broadcast_rows: expected a row vector, got ", v.shape_str()));
    Tensor y(rows, v.cols());
    for (std::size_t t = 0; t < rows; ++t)
        std::copy(v.row(0).begin(), v.row(0).end(), y.row(t).begin());
    return y;
}

inline Tensor mean_rows(const Tensor &x) {
    if (x.rows() == 0)
        throw ShapeError("mean_rows: no rows");
    Tensor y(1, x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t)
        for (std::size_t c = 0; c < x.cols(); ++c)
            y[c] += x(t, c);
    const double inv = 1.0 / static_cast<double>(x.rows());
    for (std::size_t c = 0; c < x.cols(); ++c)
        y[c] *= inv;
    return y;
}

inline double sum_all(const Tensor &x) {
    double s = 0.0;
    for (double v : x.values())
        s += v;
    return s;
}

inline double mean_abs(const Tensor &x) {
    if (x.empty())
        return 0.0;
    double s = 0.0;
    for (double v : x.values())
        s += std::abs(v);
    return s / static_cast<double>(x.size());
}

inline Tensor gather_rows(const Tensor &table, std::span<const std::size_t> ids) {
    Tensor y(ids.size(), table.cols());
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] >= table.rows())
            throw ShapeError(detail::concat("gather_rows: index ", ids[t], " at position ", t, " exceeds ", table.rows(), " rows"));
        std::copy(table.row(ids[t]).begin(), table.row(ids[t]).end(), y.row(t).begin());
    }
    return y;
}

inline Tensor softmax_rows(const Tensor &x) {
    Tensor y(x.rows(), x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto in = x.row(t);
        auto out = y.row(t);
        const double m = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            out[j] = std::exp(in[j] - m);
            z += out[j];
        }
        for (double &v : out)
            v /= z;
    }
    return y;
}

// Divides each row by its sum.
inline Tensor normalize_rows(const Tensor &x) {
    Tensor y = x;
    for (std::size_t t = 0; t < y.rows(); ++t) {
        double z = 0.0;
        for (double v : y.row(t))
            z += v;
        for (double &v : y.row(t))
            v /= z;
    }
    return y;
}

// ─── Convolution and normalization ───────────────────────────────────────────

inline std::size_t conv_left_pad(std::size_t k, Padding pad) { return pad == Padding::causal ? k - 1 : (k - 1) / 2; }

inline void check_conv_args(const Tensor &x, const Tensor &kernel, Padding pad) {
    if (kernel.cols() == 0)
        throw ShapeError("depthwise_conv1d: kernel size must be >= 1");
    if (kernel.rows() != x.cols())
        throw ShapeError(detail::concat("depthwise_conv1d: kernel ", kernel.shape_str(), " does not match ", x.cols(), " channels"));
    if (pad == Padding::same && kernel.cols() % 2 == 0)
        throw ShapeError(detail::concat("depthwise_conv1d: same padding needs an odd kernel, got k=", kernel.cols()));
}

// Input with its padding materialized. For causal padding the left pad comes
// from `tail` when given (the last k-1 input rows of the previous chunk).
inline Tensor conv_padded_input(const Tensor &x, std::size_t k, Padding pad, const Tensor *tail) {
    const std::size_t left = conv_left_pad(k, pad);
    const std::size_t right = pad == Padding::causal ? 0 : (k - 1) / 2;
    Tensor p(left + x.rows() + right, x.cols());
    if (tail != nullptr) {
        if (tail->rows() != left || tail->cols() != x.cols())
            throw ShapeError(detail::concat("depthwise_conv1d: conv tail ", tail->shape_str(), " expected ", left, "x", x.cols()));
        std::copy(tail->values().begin(), tail->values().end(), p.values().begin());
    }
    std::copy(x.values().begin(), x.values().end(), p.values().begin() + static_cast<std::ptrdiff_t>(left * x.cols()));
    return p;
}

// Channel-wise 1-D convolution over time. kernel is channels×k; tap j of the
// causal kernel looks at step t-(k-1)+j. When `tail` is given (causal only) it
// supplies the left context and is advanced to the last k-1 input rows.
inline Tensor depthwise_conv1d(const Tensor &x, const Tensor &kernel, Padding pad, Tensor *tail = nullptr) {
    check_conv_args(x, kernel, pad);
    if (tail != nullptr && pad != Padding::causal)
        throw ShapeError("depthwise_conv1d: a carried tail requires causal padding");
    const std::size_t k = kernel.cols(), ch = x.cols(), n = x.rows();
    const Tensor p = conv_padded_input(x, k, pad, tail);
    Tensor y(n, ch);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t c = 0; c < ch; ++c) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j)
                acc += kernel(c, j) * p(t + j, c);
            y(t, c) = acc;
        }
    if (tail != nullptr)
        *tail = slice_rows(p, p.rows() - (k - 1), p.rows());
    return y;
}

inline Tensor layer_norm(const Tensor &x, double eps = kEps) {
    if (x.cols() == 0)
        throw ShapeError("layer_norm: zero feature dimension");
    Tensor y(x.rows(), x.cols());
    const double inv_c = 1.0 / static_cast<double>(x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto in = x.row(t);
        double mean = 0.0;
        for (double v : in)
            mean += v;
        mean *= inv_c;
        double var = 0.0;
        for (double v : in)
            var += (v - mean) * (v - mean);
        var *= inv_c;
        const double r = 1.0 / std::sqrt(var + eps);
        auto out = y.row(t);
        for (std::size_t c = 0; c < in.size(); ++c)
            out[c] = (in[c] - mean) * r;
    }
    return y;
}

// ─── Parameter init ──────────────────────────────────────────────────────────

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), fan_in = rows.
inline Tensor init_dense(std::size_t fan_in, std::size_t fan_out, Rng &rng) {
    Tensor w(fan_in, fan_out);
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    for (double &v : w.values())
        v = rng.uniform(-bound, bound);
    return w;
}

inline Tensor init_uniform(std::size_t rows, std::size_t cols, double bound, Rng &rng) {
    Tensor w(rows, cols);
    for (double &v : w.values())
        v = rng.uniform(-bound, bound);
    return w;
}

// Sinusoidal position table, T×d.
inline Tensor sinusoidal_positions(std::size_t rows, std::size_t d) {
    Tensor p(rows, d);
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            p(t, i) = (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
        }
    return p;
}

} // namespace ssmcond
