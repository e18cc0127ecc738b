#pragma once

#include <span>

#include "ssmcond/numerics.hpp"
#include "ssmcond/scan_kernel.hpp"

namespace ssmcond {

// Backend that evaluates directly on tensors. Model code is written once as
// templates over a backend; Eager runs it for inference, Recorder (tape.hpp)
// records it for differentiation. Both call the same kernels, so values agree
// bitwise.
struct Eager {
    using Value = Tensor;

    const Tensor &param(const Tensor &t) const { return t; }
    Tensor constant(Tensor t) const { return t; }
    const Tensor &value(const Tensor &t) const { return t; }

    std::size_t rows(const Tensor &t) const { return t.rows(); }
    std::size_t cols(const Tensor &t) const { return t.cols(); }

    Tensor matmul(const Tensor &a, const Tensor &b) const { return ssmcond::matmul(a, b); }
    Tensor add_row(const Tensor &a, const Tensor &b) const { return ssmcond::add_row(a, b); }
    Tensor mul_row(const Tensor &a, const Tensor &g) const { return ssmcond::mul_row(a, g); }
    Tensor add(const Tensor &a, const Tensor &b) const { return ssmcond::add(a, b); }
    Tensor sub(const Tensor &a, const Tensor &b) const { return ssmcond::sub(a, b); }
    Tensor mul(const Tensor &a, const Tensor &b) const { return ssmcond::mul(a, b); }
    Tensor scale(const Tensor &a, double s) const { return ssmcond::scale(a, s); }

    Tensor sigmoid(const Tensor &a) const { return ssmcond::sigmoid(a); }
    Tensor silu(const Tensor &a) const { return ssmcond::silu(a); }
    Tensor softplus(const Tensor &a) const { return ssmcond::softplus(a); }
    Tensor tanh(const Tensor &a) const { return ssmcond::tanh(a); }
    Tensor relu(const Tensor &a) const { return ssmcond::relu(a); }

    Tensor transpose(const Tensor &a) const { return ssmcond::transpose(a); }
    Tensor concat_cols(const Tensor &a, const Tensor &b) const { return ssmcond::concat_cols(a, b); }
    Tensor slice_cols(const Tensor &a, std::size_t c0, std::size_t c1) const { return ssmcond::slice_cols(a, c0, c1); }
    Tensor slice_rows(const Tensor &a, std::size_t r0, std::size_t r1) const { return ssmcond::slice_rows(a, r0, r1); }
    Tensor reverse_rows(const Tensor &a) const { return ssmcond::reverse_rows(a); }
    Tensor broadcast_rows(const Tensor &a, std::size_t n) const { return ssmcond::broadcast_rows(a, n); }
    Tensor mean_rows(const Tensor &a) const { return ssmcond::mean_rows(a); }
    Tensor sum_all(const Tensor &a) const { return Tensor(1, 1, ssmcond::sum_all(a)); }
    Tensor mean_abs(const Tensor &a) const { return Tensor(1, 1, ssmcond::mean_abs(a)); }
    Tensor gather_rows(const Tensor &table, std::span<const std::size_t> ids) const {
        return ssmcond::gather_rows(table, ids);
    }
    Tensor softmax_rows(const Tensor &a) const { return ssmcond::softmax_rows(a); }
    Tensor normalize_rows(const Tensor &a) const { return ssmcond::normalize_rows(a); }

    Tensor depthwise_conv1d(const Tensor &x, const Tensor &kernel, Padding pad, Tensor *tail = nullptr) const {
        return ssmcond::depthwise_conv1d(x, kernel, pad, tail);
    }
    Tensor layer_norm(const Tensor &x, double eps) const { return ssmcond::layer_norm(x, eps); }

    Tensor scan(const Tensor &u, const Tensor &delta, const Tensor &a_log, const Tensor &b, const Tensor &c,
                const Tensor &d_skip, Tensor *state, double bound) const {
        if (state != nullptr)
            return scan_kernel(u, delta, a_log, b, c, d_skip, *state, bound);
        Tensor zero(a_log.rows(), a_log.cols());
        return scan_kernel(u, delta, a_log, b, c, d_skip, zero, bound);
    }
};

} // namespace ssmcond
