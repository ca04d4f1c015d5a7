// Backward-pass and optimizer tests. Analytic gradients are validated
// against central finite differences via grad_check.
#include <gtest/gtest.h>

#include <cmath>

#include "m3f/gradcheck.hpp"
#include "m3f/ops.hpp"
#include "m3f/tape.hpp"

using namespace m3f;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed, real lo = -1, real hi = 1) {
    Rng rng(seed);
    return rng.uniform_tensor(std::move(shape), lo, hi);
}

// Runs grad_check for a loss built by `build(tape, store)` -> scalar Var.
// Step/tolerance scaled to float width: fp32 forward noise makes 1e-3/1e-3
// probes meaningless, fp64 builds tighten to the 1e-6 regime.
constexpr real kStep = sizeof(real) == 8 ? real(1e-4) : real(1e-2);
constexpr real kTolTight = sizeof(real) == 8 ? real(1e-6) : real(1e-2);

GradCheckReport check(ParamStore& ps, const std::function<Var(Tape&, ParamStore&)>& build,
                      real tol, real step = kStep) {
    auto loss_value = [&]() {
        Tape t;
        Var l = build(t, ps);
        return t.val(l)[0];
    };
    auto grads = [&]() {
        Tape t;
        Var l = build(t, ps);
        t.backward(l);
    };
    return grad_check(ps, loss_value, grads, tol, step);
}

}  // namespace

TEST(Backward, SumOfParamGivesOnes) {
    ParamStore ps;
    ps.add("w", random_tensor({3, 4}, 1));
    Tape t;
    Var l = sum(t, t.param(ps, "w"));
    t.backward(l);
    for (int64_t i = 0; i < 12; ++i) EXPECT_EQ(ps.at("w").grad[i], 1);
}

TEST(Backward, UnusedParamHasZeroGradient) {
    ParamStore ps;
    ps.add("used", random_tensor({2, 2}, 2));
    ps.add("unused", random_tensor({2, 2}, 3));
    Tape t;
    Var l = sum(t, t.param(ps, "used"));
    t.param(ps, "unused");  // on the tape but not feeding the loss
    t.backward(l);
    for (int64_t i = 0; i < 4; ++i) {
        EXPECT_EQ(ps.at("used").grad[i], 1);
        EXPECT_EQ(ps.at("unused").grad[i], 0);
    }
}

TEST(Backward, GradientsAccumulateAcrossConsumers) {
    // y = sum(x*x) + sum(x) => dy/dx = 2x + 1
    ParamStore ps;
    Tensor x0 = random_tensor({5}, 4);
    ps.add("x", x0);
    Tape t;
    Var x = t.param(ps, "x");
    Var l = add(t, sum(t, mul(t, x, x)), sum(t, x));
    t.backward(l);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(ps.at("x").grad[i], 2 * x0[i] + 1, 1e-5);
}

TEST(Backward, NonScalarLossThrows) {
    Tape t;
    Var v = t.leaf(Tensor::zeros({2, 2}));
    EXPECT_THROW(t.backward(v), std::invalid_argument);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
    ParamStore ps;
    ps.add("w", Tensor({2}, {real(1), real(-1)}));
    ps.at("w").grad = Tensor({2}, {real(0.5), real(-0.25)});
    ps.mark_grads_populated();
    const real lr = real(2e-4);
    ps.adam_step(lr);
    // Bias-corrected first step: lr * g / (|g| + eps) = lr * sign(g)
    EXPECT_NEAR(ps.at("w").value[0], 1 - lr, 1e-6);
    EXPECT_NEAR(ps.at("w").value[1], -1 + lr, 1e-6);
    EXPECT_EQ(ps.step(), 1);
}

TEST(Adam, ConstantGradientMovesMonotonically) {
    ParamStore ps;
    ps.add("w", Tensor({1}, {real(0)}));
    real prev = 0;
    for (int i = 0; i < 20; ++i) {
        ps.at("w").grad[0] = real(2);  // positive gradient -> value decreases
        ps.mark_grads_populated();
        ps.adam_step(real(0.01));
        EXPECT_LT(ps.at("w").value[0], prev);
        prev = ps.at("w").value[0];
    }
}

TEST(Adam, ZeroGradientIsFixedPoint) {
    ParamStore ps;
    ps.add("w", Tensor({3}, {real(1), real(2), real(3)}));
    ps.mark_grads_populated();
    ps.adam_step(real(0.1));
    EXPECT_EQ(ps.at("w").value.data, (std::vector<real>{1, 2, 3}));
}

TEST(Adam, StepWithoutGradientsIsNoOp) {
    ParamStore ps;
    ps.add("w", Tensor({1}, {real(5)}));
    ps.adam_step(real(0.1));  // never populated: warns, does nothing
    EXPECT_EQ(ps.at("w").value[0], 5);
    EXPECT_EQ(ps.step(), 0);
}

TEST(Adam, GradientsZeroedAfterStep) {
    ParamStore ps;
    ps.add("w", Tensor({1}, {real(0)}));
    ps.at("w").grad[0] = 1;
    ps.mark_grads_populated();
    ps.adam_step(real(0.1));
    EXPECT_EQ(ps.at("w").grad[0], 0);
    EXPECT_FALSE(ps.grads_populated());
}

TEST(GradCheck, ActivationGradientsMatchFiniteDifferences) {
    for (Act kind : {Act::Relu, Act::Tanh, Act::Sigmoid}) {
        ParamStore ps;
        ps.add("x", random_tensor({6}, 7, real(0.1), real(2)));  // away from relu kink
        auto report = check(
            ps, [kind](Tape& t, ParamStore& s) { return sum(t, activation(t, t.param(s, "x"), kind)); },
            kTolTight);
        EXPECT_TRUE(report.passed()) << "activation kind " << static_cast<int>(kind);
    }
}

TEST(GradCheck, LinearLayerPasses) {
    ParamStore ps;
    ps.add("w", random_tensor({4, 3}, 8));
    ps.add("b", random_tensor({3}, 9));
    Tensor x = random_tensor({2, 4}, 10);
    std::vector<int> labels{0, 2};
    auto build = [&](Tape& t, ParamStore& s) {
        Var logits = add_rowvec(t, matmul(t, t.leaf(x), t.param(s, "w")), t.param(s, "b"));
        return cross_entropy(t, softmax_rows(t, logits), labels);
    };
    auto report = check(ps, build, kTolTight);
    EXPECT_TRUE(report.passed());
    EXPECT_LT(report.max_rel_err(), kTolTight);
}

TEST(GradCheck, ConvPoolBnPipelinePasses) {
    ParamStore ps;
    ps.add("k", random_tensor({3, 2, 3, 3}, 11, real(-0.5), real(0.5)));
    ps.add("kb", random_tensor({3}, 12));
    ps.add("gamma", random_tensor({3}, 13, real(0.5), real(1.5)));
    ps.add("beta", random_tensor({3}, 14));
    Tensor x = random_tensor({2, 2, 8, 8}, 15);
    Tensor rm = random_tensor({3}, 16, 0, real(0.2));
    Tensor rv = random_tensor({3}, 17, real(0.5), real(1.5));
    std::vector<int> labels{1, 0};
    auto build = [&](Tape& t, ParamStore& s) {
        Var v = conv2d(t, t.leaf(x), t.param(s, "k"), t.param(s, "kb"), Padding::Same);
        v = relu(t, v);
        v = batch_norm(t, v, t.param(s, "gamma"), t.param(s, "beta"), rm, rv, Mode::Eval);
        v = maxpool2d(t, v, 2, 2);
        v = global_avg_pool(t, v);
        return cross_entropy(t, softmax_rows(t, v), labels);
    };
    auto report = check(ps, build, real(5e-2), real(1e-2));
    EXPECT_TRUE(report.passed());
}

TEST(GradCheck, TrainModeBatchNormFrozenStatsPasses) {
    ParamStore ps;
    ps.add("gamma", random_tensor({2}, 18, real(0.5), real(1.5)));
    ps.add("beta", random_tensor({2}, 19));
    ps.add("x", random_tensor({3, 2, 4, 4}, 20));
    Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1);
    std::vector<int> labels{0, 1, 0};
    auto build = [&](Tape& t, ParamStore& s) {
        Var v = reshape(t, t.param(s, "x"), {3, 2, 4, 4});
        // update_stats=false keeps the forward deterministic across probes
        v = batch_norm(t, v, t.param(s, "gamma"), t.param(s, "beta"), rm, rv, Mode::Train, false);
        v = global_avg_pool(t, v);
        return cross_entropy(t, softmax_rows(t, v), labels);
    };
    auto report = check(ps, build, real(5e-2), real(1e-2));
    EXPECT_TRUE(report.passed());
}

TEST(GradCheck, CorruptedBackwardRuleIsFlagged) {
    // A custom op whose backward has the wrong sign must fail the checker.
    ParamStore ps;
    ps.add("x", random_tensor({4}, 21, real(0.5), real(2)));
    auto loss_value = [&]() {
        real s = 0;
        for (real v : ps.at("x").value.data) s += v * v;
        return s;
    };
    auto grads = [&]() {
        Tape t;
        Var x = t.param(ps, "x");
        Var o{t.next_id()};
        // value = sum(x^2) but backward applies -2x instead of 2x
        real s = 0;
        for (real v : t.val(x).data) s += v * v;
        t.push(Tensor::scalar(s), [x, o](Tape& tp) {
            const real g = tp.grad(o)[0];
            Tensor& gx = tp.grad(x);
            for (int64_t i = 0; i < gx.size(); ++i) gx[i] += -2 * tp.val(x)[i] * g;
        });
        t.backward(o);
    };
    auto report = grad_check(ps, loss_value, grads, kTolTight, kStep);
    EXPECT_FALSE(report.passed());
}

TEST(ForwardOnlyTape, SkipsBackwardClosures) {
    Tape t(false);
    Var v = sum(t, t.leaf(random_tensor({4}, 22)));
    EXPECT_FALSE(t.recording());
    EXPECT_THROW(t.backward(v), std::logic_error);
}
