#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ssmcond/numerics.hpp"
#include "ssmcond/scan_kernel.hpp"

namespace ssmcond {

// Handle to a node recorded on a Tape.
struct Var {
    std::size_t id = 0;
};

// Minimal reverse-mode tape. Nodes are appended in evaluation order, so the
// index order is a topological order and backward() simply walks it in
// reverse. Not thread-safe; one tape per thread.
class Tape {
  public:
    using Backward = std::function<void(Tape &, std::size_t self)>;

    std::size_t leaf(Tensor value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), Tensor{}, Backward{}, requires_grad});
        return nodes_.size() - 1;
    }

    std::size_t push(Tensor value, std::initializer_list<std::size_t> inputs, Backward bw) {
        bool rg = false;
        for (std::size_t i : inputs)
            rg = rg || nodes_.at(i).requires_grad;
        nodes_.push_back(Node{std::move(value), Tensor{}, rg ? std::move(bw) : Backward{}, rg});
        return nodes_.size() - 1;
    }

    std::size_t size() const { return nodes_.size(); }
    const Tensor &value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    // Adjoint buffer; zero until something flows into it.
    Tensor &grad(std::size_t id) {
        Node &n = nodes_.at(id);
        if (!n.grad.same_shape(n.value) || (n.grad.empty() && !n.value.empty()))
            n.grad = Tensor(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void accumulate(std::size_t id, const Tensor &g) {
        if (!nodes_[id].requires_grad)
            return;
        Tensor &dst = grad(id);
        require_same_shape(dst, g, "Tape::accumulate");
        for (std::size_t i = 0; i < g.size(); ++i)
            dst[i] += g[i];
    }

    // Seeds d(root)/d(root) = 1; root must be 1x1.
    void backward(std::size_t root) {
        if (value(root).size() != 1)
            throw ShapeError(detail::concat("Tape::backward: root must be scalar, got ", value(root).shape_str()));
        grad(root)[0] = 1.0;
        order_.clear();
        for (std::size_t i = root + 1; i-- > 0;) {
            Node &n = nodes_[i];
            if (!n.bw || n.grad.empty())
                continue;
            order_.push_back(i);
            n.bw(*this, i);
        }
    }

    const std::vector<std::size_t> &last_backward_order() const { return order_; }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        Backward bw;
        bool requires_grad;
    };

    std::vector<Node> nodes_;
    std::vector<std::size_t> order_;
};

namespace detail {

inline Tensor col_sums(const Tensor &x) {
    Tensor s(1, x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t)
        for (std::size_t c = 0; c < x.cols(); ++c)
            s[c] += x(t, c);
    return s;
}

} // namespace detail

// Backend that records every operation on a Tape. Parameters are registered
// by address: the same Tensor passed to param() twice maps to one leaf, and
// grad(tensor) returns its accumulated adjoint after backward().
class Recorder {
  public:
    using Value = Var;

    explicit Recorder(Tape &tape) : tape_(tape) {}

    Tape &tape() { return tape_; }

    Var param(const Tensor &t) {
        auto it = params_.find(&t);
        if (it != params_.end())
            return it->second;
        Var v{tape_.leaf(t, true)};
        params_.emplace(&t, v);
        return v;
    }

    Var constant(Tensor t) { return Var{tape_.leaf(std::move(t), false)}; }

    const Tensor &value(Var v) const { return tape_.value(v.id); }
    std::size_t rows(Var v) const { return value(v).rows(); }
    std::size_t cols(Var v) const { return value(v).cols(); }

    Tensor grad(const Tensor &param_tensor) {
        auto it = params_.find(&param_tensor);
        if (it == params_.end())
            return Tensor(param_tensor.rows(), param_tensor.cols());
        return tape_.grad(it->second.id);
    }

    void backward(Var root) { tape_.backward(root.id); }

    // ── dense ──

    Var matmul(Var a, Var b) {
        return push(ssmcond::matmul(value(a), value(b)), {a.id, b.id}, [a, b](Tape &tp, std::size_t self) {
            const Tensor &dy = tp.grad(self);
            if (tp.requires_grad(a.id))
                tp.accumulate(a.id, ssmcond::matmul(dy, ssmcond::transpose(tp.value(b.id))));
            if (tp.requires_grad(b.id))
                tp.accumulate(b.id, ssmcond::matmul(ssmcond::transpose(tp.value(a.id)), dy));
        });
    }

    Var add_row(Var x, Var bias) {
        return push(ssmcond::add_row(value(x), value(bias)), {x.id, bias.id}, [x, bias](Tape &tp, std::size_t self) {
            const Tensor &dy = tp.grad(self);
            tp.accumulate(x.id, dy);
            if (tp.requires_grad(bias.id))
                tp.accumulate(bias.id, detail::col_sums(dy));
        });
    }

    Var mul_row(Var x, Var g) {
        return push(ssmcond::mul_row(value(x), value(g)), {x.id, g.id}, [x, g](Tape &tp, std::size_t self) {
            const Tensor &dy = tp.grad(self);
            if (tp.requires_grad(x.id))
                tp.accumulate(x.id, ssmcond::mul_row(dy, tp.value(g.id)));
            if (tp.requires_grad(g.id))
                tp.accumulate(g.id, detail::col_sums(ssmcond::mul(dy, tp.value(x.id))));
        });
    }

    Var add(Var a, Var b) {
        return push(ssmcond::add(value(a), value(b)), {a.id, b.id}, [a, b](Tape &tp, std::size_t self) {
            const Tensor &dy = tp.grad(self);
            tp.accumulate(a.id, dy);
            tp.accumulate(b.id, dy);
        });
    }

    Var sub(Var a, Var b) {
        return push(ssmcond::sub(value(a), value(b)), {a.id, b.id}, [a, b](Tape &tp, std::size_t self) {
            const Tensor &dy = tp.grad(self);
            tp.accumulate(a.id, dy);
            if (tp.requires_grad(b.id))
                tp.accumulate(b.id, ssmcond::scale(dy, -1.0));
        });
    }

    Var mul(Var a, Var b) {
        return push(ssmcond::mul(value(a), value(b)), {a.id, b.id}, [a, b](Tape &tp, std::size_t self) {
            const Tensor &dy = tp.grad(self);
            if (tp.requires_grad(a.id))
                tp.accumulate(a.id, ssmcond::mul(dy, tp.value(b.id)));
            if (tp.requires_grad(b.id))
                tp.accumulate(b.id, ssmcond::mul(dy, tp.value(a.id)));
        });
    }

    Var scale(Var a, double s) {
        return push(ssmcond::scale(value(a), s), {a.id},
                    [a, s](Tape &tp, std::size_t self) { tp.accumulate(a.id, ssmcond::scale(tp.grad(self), s)); });
    }

    // ── elementwise nonlinearities ──

    Var sigmoid(Var x) {
        return push(ssmcond::sigmoid(value(x)), {x.id}, [x](Tape &tp, std::size_t self) {
            const Tensor &y = tp.value(self);
            tp.accumulate(x.id, ssmcond::zip(tp.grad(self), y, "sigmoid'", [](double g, double v) { return g * v * (1.0 - v); }));
        });
    }

    Var silu(Var x) {
        return push(ssmcond::silu(value(x)), {x.id}, [x](Tape &tp, std::size_t self) {
            tp.accumulate(x.id, ssmcond::zip(tp.grad(self), tp.value(x.id), "silu'",
                                             [](double g, double v) { return g * scalar::silu_grad(v); }));
        });
    }

    Var softplus(Var x) {
        return push(ssmcond::softplus(value(x)), {x.id}, [x](Tape &tp, std::size_t self) {
            tp.accumulate(x.id, ssmcond::zip(tp.grad(self), tp.value(x.id), "softplus'",
                                             [](double g, double v) { return g * scalar::sigmoid(v); }));
        });
    }

    Var tanh(Var x) {
        return push(ssmcond::tanh(value(x)), {x.id}, [x](Tape &tp, std::size_t self) {
            tp.accumulate(x.id, ssmcond::zip(tp.grad(self), tp.value(self), "tanh'",
                                             [](double g, double v) { return g * (1.0 - v * v); }));
        });
    }

    Var relu(Var x) {
        return push(ssmcond::relu(value(x)), {x.id}, [x](Tape &tp, std::size_t self) {
            tp.accumulate(x.id, ssmcond::zip(tp.grad(self), tp.value(x.id), "relu'",
                                             [](double g, double v) { return v > 0.0 ? g : 0.0; }));
        });
    }

    // ── structural ──

    Var transpose(Var x) {
        return push(ssmcond::transpose(value(x)), {x.id},
                    [x](Tape &tp, std::size_t self) { tp.accumulate(x.id, ssmcond::transpose(tp.grad(self))); });
    }

    Var concat_cols(Var a, Var b) {
        const std::size_t ca = cols(a);
        return push(ssmcond::concat_cols(value(a), value(b)), {a.id, b.id}, [a, b, ca](Tape &tp, std::size_t self) {
            const Tensor &dy = tp.grad(self);
            if (tp.requires_grad(a.id))
                tp.accumulate(a.id, ssmcond::slice_cols(dy, 0, ca));
            if (tp.requires_grad(b.id))
                tp.accumulate(b.id, ssmcond::slice_cols(dy, ca, dy.cols()));
        });
    }

    Var slice_cols(Var x, std::size_t c0, std::size_t c1) {
        return push(ssmcond::slice_cols(value(x), c0, c1), {x.id}, [x, c0](Tape &tp, std::size_t self) {
            const Tensor &dy = tp.grad(self);
            Tensor &dx = tp.grad(x.id);
            for (std::size_t t = 0; t < dy.rows(); ++t)
                for (std::size_t c = 0; c < dy.cols(); ++c)
                    dx(t, c0 + c) += dy(t, c);
        });
    }

    Var slice_rows(Var x, std::size_t r0, std::size_t r1) {
        return push(ssmcond::slice_rows(value(x), r0, r1), {x.id}, [x, r0](Tape &tp, std::size_t self) {
            const Tensor &dy = tp.grad(self);
            Tensor &dx = tp.grad(x.id);
            for (std::size_t t = 0; t < dy.rows(); ++t)
                for (std::size_t c = 0; c < dy.cols(); ++c)
                    dx(r0 + t, c) += dy(t, c);
        });
    }

    Var reverse_rows(Var x) {
        return push(ssmcond::reverse_rows(value(x)), {x.id},
                    [x](Tape &tp, std::size_t self) { tp.accumulate(x.id, ssmcond::reverse_rows(tp.grad(self))); });
    }

    Var broadcast_rows(Var v, std::size_t n) {
        return push(ssmcond::broadcast_rows(value(v), n), {v.id},
                    [v](Tape &tp, std::size_t self) { tp.accumulate(v.id, detail::col_sums(tp.grad(self))); });
    }

    Var mean_rows(Var x) {
        const std::size_t n = rows(x);
        return push(ssmcond::mean_rows(value(x)), {x.id}, [x, n](Tape &tp, std::size_t self) {
            tp.accumulate(x.id, ssmcond::broadcast_rows(ssmcond::scale(tp.grad(self), 1.0 / static_cast<double>(n)), n));
        });
    }

    Var sum_all(Var x) {
        return push(Tensor(1, 1, ssmcond::sum_all(value(x))), {x.id}, [x](Tape &tp, std::size_t self) {
            const Tensor &xv = tp.value(x.id);
            tp.accumulate(x.id, Tensor(xv.rows(), xv.cols(), tp.grad(self)[0]));
        });
    }

    Var mean_abs(Var x) {
        return push(Tensor(1, 1, ssmcond::mean_abs(value(x))), {x.id}, [x](Tape &tp, std::size_t self) {
            const Tensor &xv = tp.value(x.id);
            const double g = tp.grad(self)[0] / static_cast<double>(std::max<std::size_t>(xv.size(), 1));
            tp.accumulate(x.id, ssmcond::map(xv, [g](double v) { return v > 0.0 ? g : (v < 0.0 ? -g : 0.0); }));
        });
    }

    Var gather_rows(Var table, std::span<const std::size_t> ids) {
        std::vector<std::size_t> idx(ids.begin(), ids.end());
        return push(ssmcond::gather_rows(value(table), ids), {table.id}, [table, idx](Tape &tp, std::size_t self) {
            const Tensor &dy = tp.grad(self);
            Tensor &dt = tp.grad(table.id);
            for (std::size_t t = 0; t < idx.size(); ++t)
                for (std::size_t c = 0; c < dy.cols(); ++c)
                    dt(idx[t], c) += dy(t, c);
        });
    }

    Var softmax_rows(Var x) {
        return push(ssmcond::softmax_rows(value(x)), {x.id}, [x](Tape &tp, std::size_t self) {
            const Tensor &y = tp.value(self);
            const Tensor &dy = tp.grad(self);
            Tensor dx(y.rows(), y.cols());
            for (std::size_t t = 0; t < y.rows(); ++t) {
                double dot = 0.0;
                for (std::size_t j = 0; j < y.cols(); ++j)
                    dot += dy(t, j) * y(t, j);
                for (std::size_t j = 0; j < y.cols(); ++j)
                    dx(t, j) = y(t, j) * (dy(t, j) - dot);
            }
            tp.accumulate(x.id, dx);
        });
    }

    Var normalize_rows(Var x) {
        return push(ssmcond::normalize_rows(value(x)), {x.id}, [x](Tape &tp, std::size_t self) {
            const Tensor &xv = tp.value(x.id);
            const Tensor &y = tp.value(self);
            const Tensor &dy = tp.grad(self);
            Tensor dx(y.rows(), y.cols());
            for (std::size_t t = 0; t < y.rows(); ++t) {
                double z = 0.0, dot = 0.0;
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    z += xv(t, j);
                    dot += dy(t, j) * y(t, j);
                }
                for (std::size_t j = 0; j < y.cols(); ++j)
                    dx(t, j) = (dy(t, j) - dot) / z;
            }
            tp.accumulate(x.id, dx);
        });
    }

    // ── fused kernels ──

    Var depthwise_conv1d(Var x, Var kernel, Padding pad, Tensor *tail = nullptr) {
        if (tail != nullptr)
            throw Error("Recorder::depthwise_conv1d: streaming tails are not differentiable");
        return push(ssmcond::depthwise_conv1d(value(x), value(kernel), pad), {x.id, kernel.id},
                    [x, kernel, pad](Tape &tp, std::size_t self) {
                        const Tensor &xv = tp.value(x.id);
                        const Tensor &kv = tp.value(kernel.id);
                        const Tensor &dy = tp.grad(self);
                        const std::size_t k = kv.cols(), left = conv_left_pad(k, pad);
                        const Tensor p = conv_padded_input(xv, k, pad, nullptr);
                        Tensor dp(p.rows(), p.cols());
                        Tensor dk(kv.rows(), kv.cols());
                        for (std::size_t t = 0; t < dy.rows(); ++t)
                            for (std::size_t c = 0; c < dy.cols(); ++c)
                                for (std::size_t j = 0; j < k; ++j) {
                                    dp(t + j, c) += kv(c, j) * dy(t, c);
                                    dk(c, j) += p(t + j, c) * dy(t, c);
                                }
                        if (tp.requires_grad(x.id))
                            tp.accumulate(x.id, ssmcond::slice_rows(dp, left, left + xv.rows()));
                        if (tp.requires_grad(kernel.id))
                            tp.accumulate(kernel.id, dk);
                    });
    }

    Var layer_norm(Var x, double eps) {
        return push(ssmcond::layer_norm(value(x), eps), {x.id}, [x, eps](Tape &tp, std::size_t self) {
            const Tensor &xv = tp.value(x.id);
            const Tensor &dy = tp.grad(self);
            const std::size_t c = xv.cols();
            const double inv_c = 1.0 / static_cast<double>(c);
            Tensor dx(xv.rows(), c);
            for (std::size_t t = 0; t < xv.rows(); ++t) {
                double mean = 0.0;
                for (std::size_t j = 0; j < c; ++j)
                    mean += xv(t, j);
                mean *= inv_c;
                double var = 0.0;
                for (std::size_t j = 0; j < c; ++j)
                    var += (xv(t, j) - mean) * (xv(t, j) - mean);
                var *= inv_c;
                const double r = 1.0 / std::sqrt(var + eps);
                double mdy = 0.0, mdyx = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double xh = (xv(t, j) - mean) * r;
                    mdy += dy(t, j);
                    mdyx += dy(t, j) * xh;
                }
                mdy *= inv_c;
                mdyx *= inv_c;
                for (std::size_t j = 0; j < c; ++j) {
                    const double xh = (xv(t, j) - mean) * r;
                    dx(t, j) = r * (dy(t, j) - mdy - xh * mdyx);
                }
            }
            tp.accumulate(x.id, dx);
        });
    }

    Var scan(Var u, Var delta, Var a_log, Var b, Var c, Var d_skip, Tensor *state, double bound) {
        if (state != nullptr)
            throw Error("Recorder::scan: streaming state is not differentiable");
        Tensor s0(value(a_log).rows(), value(a_log).cols());
        auto trace = std::make_shared<Tensor>();
        Tensor y = scan_kernel(value(u), value(delta), value(a_log), value(b), value(c), value(d_skip), s0, bound, trace.get());
        return push(std::move(y), {u.id, delta.id, a_log.id, b.id, c.id, d_skip.id},
                    [u, delta, a_log, b, c, d_skip, trace](Tape &tp, std::size_t self) {
                        ScanGrads g = scan_kernel_backward(tp.value(u.id), tp.value(delta.id), tp.value(a_log.id),
                                                           tp.value(b.id), tp.value(c.id), tp.value(d_skip.id), *trace,
                                                           tp.grad(self));
                        tp.accumulate(u.id, g.u);
                        tp.accumulate(delta.id, g.delta);
                        tp.accumulate(a_log.id, g.a_log);
                        tp.accumulate(b.id, g.b);
                        tp.accumulate(c.id, g.c);
                        tp.accumulate(d_skip.id, g.d_skip);
                    });
    }

  private:
    Var push(Tensor value, std::initializer_list<std::size_t> inputs, Tape::Backward bw) {
        return Var{tape_.push(std::move(value), inputs, std::move(bw))};
    }

    Tape &tape_;
    std::unordered_map<const Tensor *, Var> params_;
};

// ─── Gradient check ──────────────────────────────────────────────────────────

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t coordinates = 0;
    bool finite = true;
    std::size_t nonfinite_index = 0; // valid when !finite

    bool ok(double tol) const { return finite && max_rel_error <= tol; }
};

// Builds a scalar loss on a fresh Recorder from the current parameter values.
using LossBuilder = std::function<Var(Recorder &)>;

// Compares the tape gradient of `f` against central differences, coordinate
// by coordinate across `params` (flattened in order). The parameter tensors
// are perturbed in place and restored.
inline GradCheckResult grad_check(const LossBuilder &f, std::span<Tensor *const> params, double h = 1e-5) {
    if (!(h >= 1e-7 && h <= 1e-4))
        throw Error(detail::concat("grad_check: step ", h, " outside [1e-7, 1e-4]"));
    std::vector<Tensor> analytic;
    {
        Tape tape;
        Recorder rec(tape);
        for (Tensor *p : params)
            rec.param(*p);
        Var loss = f(rec);
        if (!std::isfinite(rec.value(loss)[0]))
            return GradCheckResult{0.0, 0, 0, false, 0};
        rec.backward(loss);
        for (Tensor *p : params)
            analytic.push_back(rec.grad(*p));
    }
    auto eval = [&f]() {
        Tape tape;
        Recorder rec(tape);
        return rec.value(f(rec))[0];
    };

    GradCheckResult res;
    std::size_t flat = 0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor &p = *params[pi];
        for (std::size_t i = 0; i < p.size(); ++i, ++flat) {
            const double saved = p[i];
            p[i] = saved + h;
            const double fp = eval();
            p[i] = saved - h;
            const double fm = eval();
            p[i] = saved;
            ++res.coordinates;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                res.finite = false;
                res.nonfinite_index = flat;
                return res;
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_index = flat;
            }
        }
    }
    return res;
}

// Flat-vector form: `f` receives the parameters as one 1×n leaf.
inline GradCheckResult grad_check(const std::function<Var(Recorder &, Var)> &f, std::span<const double> params,
                                  double h = 1e-5) {
    Tensor flat = Tensor::row_vector(params);
    Tensor *ptrs[] = {&flat};
    return grad_check([&](Recorder &rec) { return f(rec, rec.param(flat)); }, ptrs, h);
}

} // namespace ssmcond
