#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "ssmcond/ssm.hpp"
#include "ssmcond/tape.hpp"

using namespace ssmcond;

namespace {

// Contracts an output against fixed random weights so every output
// coordinate contributes with a distinct coefficient.
Var project(Recorder &be, Var y, std::uint64_t seed = 99) {
    Rng rng(seed);
    return be.sum_all(be.mul(y, be.constant(oracle::random(be.rows(y), be.cols(y), rng))));
}

template <class F> GradCheckResult check(std::vector<Tensor> &inputs, F &&op, double h = 1e-5) {
    std::vector<Tensor *> ptrs;
    for (Tensor &t : inputs)
        ptrs.push_back(&t);
    return grad_check(
        [&](Recorder &be) {
            std::vector<Var> vars;
            for (Tensor &t : inputs)
                vars.push_back(be.param(t));
            return project(be, op(be, vars));
        },
        ptrs, h);
}

} // namespace

TEST(GradCheck, SumOfSquares) {
    const double params[] = {1.0, 2.0, 3.0};
    auto f = [](Recorder &be, Var p) { return be.sum_all(be.mul(p, p)); };
    auto r = grad_check(f, params);
    EXPECT_LT(r.max_rel_error, 1e-8);
    EXPECT_EQ(r.coordinates, 3u);

    Tensor p = Tensor::row_vector(params);
    Tape tape;
    Recorder be(tape);
    be.backward(f(be, be.param(p)));
    EXPECT_EQ(be.grad(p), Tensor::from_rows({{2.0, 4.0, 6.0}}));
}

TEST(GradCheck, LinearFunction) {
    const double params[] = {0.5, -1.5, 2.0, 4.0};
    auto f = [](Recorder &be, Var p) {
        return be.sum_all(be.mul(p, be.constant(Tensor::from_rows({{3.0, -2.0, 0.25, 1.0}}))));
    };
    // power-of-two step keeps p ± h and the products exact
    EXPECT_LT(grad_check(f, params, std::ldexp(1.0, -17)).max_rel_error, 1e-10);
}

TEST(GradCheck, StepOutsideRangeRejected) {
    const double params[] = {1.0};
    auto f = [](Recorder &be, Var p) { return be.sum_all(p); };
    EXPECT_THROW(grad_check(f, params, 1e-3), Error);
    EXPECT_THROW(grad_check(f, params, 1e-8), Error);
}

TEST(GradCheck, NonFiniteReportsCoordinate) {
    // finite at the point, overflows once coordinate 1 is nudged upward
    const double params[] = {0.0, 179769313.486226};
    auto f = [](Recorder &be, Var p) { return be.sum_all(be.mul(p, be.constant(Tensor::from_rows({{1.0, 1e300}})))); };
    auto r = grad_check(f, params);
    EXPECT_FALSE(r.finite);
    EXPECT_EQ(r.nonfinite_index, 1u);
    EXPECT_FALSE(r.ok(1e-4));
}

TEST(Tape, BackwardVisitsReverseTopologicalOrder) {
    Tape tape;
    Recorder be(tape);
    Tensor a(2, 2, 1.0), b(2, 2, 2.0);
    Var va = be.param(a), vb = be.param(b);
    Var c = be.mul(va, vb);
    Var d = be.add(c, va);
    Var e = be.sum_all(d);
    be.backward(e);
    const auto &order = tape.last_backward_order();
    ASSERT_EQ(order.size(), 3u);
    EXPECT_EQ(order[0], e.id);
    EXPECT_EQ(order[1], d.id);
    EXPECT_EQ(order[2], c.id);
}

TEST(Tape, UnusedNodeHasZeroAdjoint) {
    Tape tape;
    Recorder be(tape);
    Tensor a(2, 3, 1.0), unused(4, 1, 5.0);
    Var va = be.param(a);
    be.param(unused);
    Var side = be.sigmoid(va); // recorded but not on the loss path
    be.backward(be.sum_all(va));
    EXPECT_EQ(be.grad(unused), Tensor(4, 1));
    EXPECT_EQ(tape.grad(side.id), Tensor(2, 3));
}

TEST(Tape, ParamRegisteredOnceAccumulates) {
    Tape tape;
    Recorder be(tape);
    Tensor a = Tensor::from_rows({{3.0}});
    Var l = be.add(be.param(a), be.mul(be.param(a), be.param(a)));
    be.backward(l);
    EXPECT_EQ(be.grad(a)[0], 7.0);
}

// ─── Per-op gradients ────────────────────────────────────────────────────────

class OpGrad : public ::testing::Test {
  protected:
    Rng rng{2024};
    Tensor rnd(std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) { return oracle::random(r, c, rng, lo, hi); }
};

TEST_F(OpGrad, Dense) {
    std::vector<Tensor> in{rnd(4, 3), rnd(3, 5), rnd(1, 5), rnd(1, 5)};
    EXPECT_LT(check(in, [](Recorder &be, auto &v) { return be.add_row(be.matmul(v[0], v[1]), v[2]); }).max_rel_error, 1e-7);
    EXPECT_LT(check(in, [](Recorder &be, auto &v) { return be.mul_row(be.matmul(v[0], v[1]), v[3]); }).max_rel_error, 1e-7);
}

TEST_F(OpGrad, Elementwise) {
    std::vector<Tensor> in{rnd(3, 4, -2, 2), rnd(3, 4, -2, 2)};
    auto ok = [&](auto op) { return check(in, op).max_rel_error; };
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.sigmoid(v[0]); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.silu(v[0]); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.softplus(v[0]); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.tanh(v[0]); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.relu(v[0]); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.mul(be.sub(v[0], v[1]), be.add(v[0], v[1])); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.scale(v[0], -2.5); }), 1e-7);
}

TEST_F(OpGrad, Structural) {
    std::vector<Tensor> in{rnd(4, 3), rnd(4, 2), rnd(1, 3), rnd(5, 3)};
    auto ok = [&](auto op) { return check(in, op).max_rel_error; };
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.transpose(v[0]); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.concat_cols(v[0], v[1]); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.slice_cols(v[0], 1, 3); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.slice_rows(v[0], 1, 3); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.reverse_rows(v[0]); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.broadcast_rows(v[2], 6); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.mean_rows(v[0]); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.mean_abs(v[0]); }), 1e-7);
    EXPECT_LT(ok([](Recorder &be, auto &v) { return be.softmax_rows(be.scale(v[0], 3.0)); }), 1e-7);
    const std::size_t ids[] = {4, 0, 4, 2};
    EXPECT_LT(ok([&](Recorder &be, auto &v) { return be.gather_rows(v[3], ids); }), 1e-7);
}

TEST_F(OpGrad, NormalizeRows) {
    std::vector<Tensor> in{rnd(3, 4, 0.5, 2.0)};
    EXPECT_LT(check(in, [](Recorder &be, auto &v) { return be.normalize_rows(v[0]); }).max_rel_error, 1e-7);
}

TEST_F(OpGrad, LayerNorm) {
    std::vector<Tensor> in{rnd(3, 6, -2, 2)};
    EXPECT_LT(check(in, [](Recorder &be, auto &v) { return be.layer_norm(v[0], kEps); }).max_rel_error, 1e-6);
}

TEST_F(OpGrad, DepthwiseConv) {
    std::vector<Tensor> in{rnd(7, 3), rnd(3, 5)};
    EXPECT_LT(check(in, [](Recorder &be, auto &v) { return be.depthwise_conv1d(v[0], v[1], Padding::causal); }).max_rel_error,
              1e-7);
    EXPECT_LT(check(in, [](Recorder &be, auto &v) { return be.depthwise_conv1d(v[0], v[1], Padding::same); }).max_rel_error,
              1e-7);
}

// Scan inputs and parameters on the largest shape the contract names.
TEST_F(OpGrad, SelectiveScanKernel) {
    const std::size_t t = 8, dh = 4, ds = 8;
    std::vector<Tensor> in{rnd(t, dh), rnd(t, dh, 0.1, 1.0), rnd(dh, ds, -1.0, 1.0), rnd(t, ds), rnd(t, ds), rnd(1, dh)};
    auto r = check(in, [](Recorder &be, auto &v) { return be.scan(v[0], v[1], v[2], v[3], v[4], v[5], nullptr, 1e3); });
    EXPECT_TRUE(r.ok(1e-4)) << r.max_rel_error << " at " << r.worst_index;
}

TEST_F(OpGrad, MambaBlockWithL1Loss) {
    // Random parameters rather than the init: the init decay spectrum leaves
    // some gradients near the finite-difference noise floor.
    MambaLayer p = init_mamba_layer(4, 8, 5, rng);
    Tensor x = rnd(8, 4), target = rnd(8, 4);
    std::vector<Tensor *> params{&x};
    p.for_each([&](const std::string &name, Tensor &t) {
        t = name == "a_log" ? rnd(t.rows(), t.cols(), -1.0, 0.5) : rnd(t.rows(), t.cols(), -0.8, 0.8);
        params.push_back(&t);
    });
    for (Padding pad : {Padding::causal, Padding::same}) {
        auto r = grad_check(
            [&](Recorder &be) {
                Var y = mamba_block(be, be.param(x), p, pad);
                return be.mean_abs(be.sub(y, be.constant(target)));
            },
            params);
        EXPECT_TRUE(r.ok(1e-4)) << r.max_rel_error << " at " << r.worst_index;
    }
}

TEST(Recorder, MatchesEagerBitwise) {
    Rng rng(5);
    MambaLayer p = init_mamba_layer(4, 6, 3, rng);
    Tensor x = oracle::random(9, 4, rng);
    Eager eager;
    Tape tape;
    Recorder rec(tape);
    EXPECT_EQ(rec.value(mamba_block(rec, rec.constant(x), p, Padding::causal)), mamba_block(eager, x, p, Padding::causal));
}
