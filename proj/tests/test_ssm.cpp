#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "oracles.hpp"
#include "ssmcond/bench.hpp"
#include "ssmcond/ssm.hpp"

using namespace ssmcond;

namespace {

class Ssm : public ::testing::Test {
  protected:
    Rng rng{31};
    MambaLayer layer(std::size_t dh = 4, std::size_t ds = 8, std::size_t k = 5) { return init_mamba_layer(dh, ds, k, rng); }
    Tensor rnd(std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) { return oracle::random(r, c, rng, lo, hi); }
};

double max_abs(const Tensor &t) {
    double m = 0.0;
    for (double v : t.values())
        m = std::max(m, std::abs(v));
    return m;
}

} // namespace

// ─── selective_scan ──────────────────────────────────────────────────────────

TEST_F(Ssm, ZeroInputZeroOutput) {
    MambaLayer p = layer();
    auto [y, s] = selective_scan(Tensor(6, 4), p);
    EXPECT_EQ(y, Tensor(6, 4));
    EXPECT_EQ(s.ssm, Tensor(4, 8));
    EXPECT_EQ(s.frames_seen, 6u);
}

TEST_F(Ssm, ZeroInputDecaysInitialState) {
    MambaLayer p = layer(2, 3);
    StreamState init = StreamState::for_layer(p);
    init.ssm = rnd(2, 3);
    auto [y, s] = selective_scan(Tensor(1, 2), p, &init);
    const double delta = std::log(2.0); // softplus(0), delta_bias is zero
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t n = 0; n < 3; ++n)
            EXPECT_NEAR(s.ssm(c, n), std::exp(-delta * std::exp(p.a_log(c, n))) * init.ssm(c, n), 1e-15);
}

TEST_F(Ssm, SingleStepClosedForm) {
    MambaLayer p = layer();
    Tensor u = rnd(1, 4);
    auto [y, s] = selective_scan(u, p);
    for (std::size_t c = 0; c < 4; ++c) {
        double z = p.delta_bias[c];
        for (std::size_t i = 0; i < 4; ++i)
            z += u[i] * p.delta_proj(i, c);
        const double delta = std::log1p(std::exp(z));
        double expect = p.d_skip[c] * u[c];
        for (std::size_t n = 0; n < 8; ++n) {
            double b = 0.0, cc = 0.0;
            for (std::size_t i = 0; i < 4; ++i) {
                b += u[i] * p.b_proj(i, n);
                cc += u[i] * p.c_proj(i, n);
            }
            expect += cc * delta * b * u[c];
        }
        EXPECT_NEAR(y[c], expect, 1e-14) << c;
    }
}

TEST_F(Ssm, MatchesPerStepOracle) {
    MambaLayer p = layer(4, 8);
    Tensor u = rnd(16, 4);
    Tensor s(4, 8);
    const Tensor ref = oracle::scan(u, p, s);
    auto [y, state] = selective_scan(u, p);
    EXPECT_LT(max_abs_diff(y, ref), 1e-12);
    EXPECT_LT(max_abs_diff(state.ssm, s), 1e-12);
}

TEST_F(Ssm, StateBoundViolationNamesStepAndChannel) {
    MambaLayer p = layer(2, 2);
    p.state_bound = 5.0;
    p.a_log = Tensor(2, 2, -20.0); // almost no decay
    p.b_proj = Tensor(2, 2, 1.0);
    Tensor u(50, 2, 1.0);
    try {
        selective_scan(u, p);
        FAIL();
    } catch (const StateBoundError &e) {
        EXPECT_GT(e.step(), 0u);
        const std::string msg = e.what();
        EXPECT_NE(msg.find("step " + std::to_string(e.step())), std::string::npos) << msg;
        EXPECT_NE(msg.find("channel " + std::to_string(e.channel())), std::string::npos) << msg;
    }
}

TEST_F(Ssm, RejectsNaNInput) {
    MambaLayer p = layer();
    Tensor u = rnd(3, 4);
    u(1, 2) = std::nan("");
    EXPECT_THROW(selective_scan(u, p), NonFiniteError);
}

// ─── mamba_block ─────────────────────────────────────────────────────────────

TEST_F(Ssm, BlockResidualIdentity) {
    MambaLayer p = layer();
    p.in_proj = Tensor(4, 8);
    p.delta_proj = Tensor(4, 4);
    p.b_proj = Tensor(4, 8);
    p.c_proj = Tensor(4, 8);
    p.out_proj = Tensor(4, 4);
    p.d_skip = Tensor(1, 4);
    Tensor x = rnd(7, 4);
    EXPECT_EQ(mamba_block(x, p, Padding::causal).first, x);
    EXPECT_EQ(mamba_block(x, p, Padding::same).first, x);
}

TEST_F(Ssm, BlockZeroInput) {
    MambaLayer p = layer();
    EXPECT_EQ(mamba_block(Tensor(5, 4), p, Padding::causal).first, Tensor(5, 4));
}

TEST_F(Ssm, BlockMatchesCompositionOracle) {
    for (std::size_t k : {1u, 3u, 5u}) {
        MambaLayer p = layer(3, 5, k);
        Tensor x = rnd(9, 3);
        EXPECT_LT(max_abs_diff(mamba_block(x, p, Padding::causal).first, oracle::mamba_block(x, p, true)), 1e-12) << k;
        EXPECT_LT(max_abs_diff(mamba_block(x, p, Padding::same).first, oracle::mamba_block(x, p, false)), 1e-12) << k;
    }
}

TEST_F(Ssm, SamePaddingWithStateRejected) {
    MambaLayer p = layer();
    StreamState s = StreamState::for_layer(p);
    EXPECT_THROW(mamba_block(rnd(3, 4), p, Padding::same, &s), Error);
}

// ─── bidirectional_scan ──────────────────────────────────────────────────────

TEST_F(Ssm, BidirectionalPalindromeSymmetry) {
    MambaLayer p = layer();
    Tensor half = rnd(4, 4);
    Tensor x = concat_rows(half, oracle::reverse(half));
    auto [h_f, h_b] = bidirectional_scan(x, p, p);
    EXPECT_LT(max_abs_diff(h_b, oracle::reverse(h_f)), 1e-12);
}

TEST_F(Ssm, BidirectionalSingleStep) {
    MambaLayer p = layer();
    auto [h_f, h_b] = bidirectional_scan(rnd(1, 4), p, p);
    EXPECT_EQ(h_f, h_b);
}

TEST_F(Ssm, BidirectionalMatchesReverseRun) {
    MambaLayer f = layer(), b = layer();
    Tensor x = rnd(11, 4);
    auto [h_f, h_b] = bidirectional_scan(x, f, b);
    EXPECT_LT(max_abs_diff(h_f, oracle::mamba_block(x, f, true)), 1e-12);
    EXPECT_LT(max_abs_diff(h_b, oracle::reverse(oracle::mamba_block(oracle::reverse(x), b, true))), 1e-12);
}

TEST_F(Ssm, BidirectionalRejectsEmpty) {
    MambaLayer p = layer();
    EXPECT_THROW(bidirectional_scan(Tensor(0, 4), p, p), ShapeError);
}

// ─── State save/restore ──────────────────────────────────────────────────────

TEST_F(Ssm, FreshStateRoundTrip) {
    MambaLayer p = layer();
    StreamState s = StreamState::for_layer(p);
    EXPECT_EQ(restore_state(save_state(s), p), s);
}

TEST_F(Ssm, StateBytesAreStable) {
    MambaLayer p = layer(2, 3, 3);
    StreamState s = StreamState::for_layer(p);
    s.ssm = rnd(2, 3);
    s.conv_tail = rnd(2, 2);
    s.frames_seen = 0x0102030405ull;
    const auto bytes = save_state(s);
    ASSERT_EQ(bytes.size(), 4u + 4 * 4 + 8 + 8 * (6 + 4));
    EXPECT_EQ(bytes[0], 0x4D);
    EXPECT_EQ(bytes[3], 0x54);
    EXPECT_EQ(bytes[20], 0x05); // frames_seen, little endian
    EXPECT_EQ(save_state(restore_state(bytes, p)), bytes);
}

TEST_F(Ssm, ScanResumesAfterRestore) {
    MambaLayer p = layer();
    Tensor x = rnd(32, 4);
    auto [whole, end] = mamba_block(x, p, Padding::causal);
    auto [first, mid] = mamba_block(slice_rows(x, 0, 16), p, Padding::causal);
    StreamState restored = restore_state(save_state(mid), p);
    auto [second, end2] = mamba_block(slice_rows(x, 16, 32), p, Padding::causal, &restored);
    EXPECT_LT(max_abs_diff(concat_rows(first, second), whole), 1e-12);
    EXPECT_EQ(end2, end);
}

TEST_F(Ssm, RestoreErrors) {
    MambaLayer p = layer(4, 8), other = layer(4, 6);
    auto bytes = save_state(StreamState::for_layer(p));
    auto kind_of = [](auto &&fn) {
        try {
            fn();
        } catch (const StateFormatError &e) {
            return e.kind();
        }
        ADD_FAILURE() << "no error";
        return StateFormatError::Kind::bad_magic;
    };
    EXPECT_EQ(kind_of([&] { restore_state(bytes, other); }), StateFormatError::Kind::shape_mismatch);
    auto bad_version = bytes;
    bad_version[4] = 9;
    EXPECT_EQ(kind_of([&] { restore_state(bad_version, p); }), StateFormatError::Kind::bad_version);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_EQ(kind_of([&] { restore_state(bad_magic, p); }), StateFormatError::Kind::bad_magic);
    auto cut = bytes;
    cut.resize(cut.size() - 3);
    EXPECT_EQ(kind_of([&] { restore_state(cut, p); }), StateFormatError::Kind::truncated);
}

// ─── Properties ──────────────────────────────────────────────────────────────

TEST_F(Ssm, ChunkedEqualsSinglePass) {
    std::vector<MambaLayer> layers{layer(), layer(), layer()};
    Tensor x = rnd(64, 4);
    Eager be;
    const Tensor whole = mamba_stack(be, x, layers, Padding::causal);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<StreamState> states;
        for (const auto &l : layers)
            states.push_back(StreamState::for_layer(l));
        Tensor out(0, 4);
        std::size_t t = 0;
        while (t < 64) {
            const std::size_t len = std::min<std::size_t>(64 - t, rng.below(9)); // zero-length chunks included
            out = concat_rows(out, mamba_stack(be, slice_rows(x, t, t + len), layers, Padding::causal, states));
            t += len;
        }
        EXPECT_LT(max_abs_diff(out, whole), 1e-12) << trial;
        EXPECT_EQ(states[0].frames_seen, 64u);
    }
}

TEST_F(Ssm, CausalPerturbationLeavesPastBitwise) {
    MambaLayer p = layer();
    Tensor x = rnd(20, 4);
    const Tensor base = mamba_block(x, p, Padding::causal).first;
    for (std::size_t t0 : {0u, 7u, 18u}) {
        Tensor y = x;
        for (std::size_t t = t0 + 1; t < 20; ++t)
            for (std::size_t c = 0; c < 4; ++c)
                y(t, c) += rng.uniform(-3.0, 3.0);
        const Tensor out = mamba_block(y, p, Padding::causal).first;
        for (std::size_t t = 0; t <= t0; ++t)
            for (std::size_t c = 0; c < 4; ++c)
                ASSERT_EQ(out(t, c), base(t, c)) << t0 << " " << t;
    }
}

TEST_F(Ssm, StateStaysBoundedOverLongRun) {
    MambaLayer p = layer(4, 8);
    const std::size_t total = 100000, chunk = 1000;
    Tensor state(4, 8), trace;
    double first = 0.0, overall = 0.0;
    for (std::size_t t = 0; t < total; t += chunk) {
        // Random signs at the input bound: every step drives the state as hard
        // as a bounded input can, so the extremes show up early.
        Tensor u = rnd(chunk, 4);
        for (double &v : u.values())
            v = v < 0.0 ? -1.0 : 1.0;
        const Tensor delta = softplus(add_row(matmul(u, p.delta_proj), p.delta_bias));
        scan_kernel(u, delta, p.a_log, matmul(u, p.b_proj), matmul(u, p.c_proj), p.d_skip, state, p.state_bound, &trace);
        const double m = max_abs(trace);
        if (t == 0)
            first = m;
        overall = std::max(overall, m);
    }
    EXPECT_GT(first, 0.0);
    EXPECT_LE(overall, 1.1 * first) << "first 1000: " << first << ", all: " << overall;
}

TEST_F(Ssm, ScanTimeIsLinear) {
    MambaLayer p = layer(16, 16);
    const Tensor small = rnd(4096, 16), large = rnd(8192, 16);
    // Interleaved so that clock or cache drift hits both lengths alike.
    std::vector<double> a, b;
    for (int i = 0; i < 11; ++i) {
        a.push_back(bench::time_ms([&] { selective_scan(small, p); }));
        b.push_back(bench::time_ms([&] { selective_scan(large, p); }));
    }
    const double ratio = bench::median(b) / bench::median(a);
    EXPECT_GE(ratio, 1.7);
    EXPECT_LE(ratio, 2.3);
}
