#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "qgpt/core/ops.hpp"
#include "qgpt/core/tape.hpp"
#include "support.hpp"

using namespace qgpt;

TEST(Tensor, RejectsLengthMismatch) {
    EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
    EXPECT_THROW(Tensor<float>({0, 3}, {}), DimensionError);
}

TEST(Tensor, GradBufferHasDataShape) {
    auto t = Tensor<float>::zeros({3, 4}, true);
    EXPECT_FALSE(t.has_grad());
    EXPECT_EQ(t.grad_buffer().size(), 12u);
    EXPECT_THROW(Tensor<float>::zeros({2}).grad(), ContractError);
}

TEST(Backward, SumGivesOnes) {
    auto x = check::randn({3, 4}, 1);
    Tape<double> tape;
    tape.backward(ops::sum(tape.param(x)));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
    auto x = check::randn({2, 3}, 2);
    auto w = check::randn({3, 2}, 3);
    Tape<double> tape;
    auto loss = ops::sum(ops::matmul(tape.param(x), tape.param(w)));
    tape.backward(loss);
    const std::vector<double> once(x.grad().begin(), x.grad().end());
    tape.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(x.grad()[i], 2 * once[i]);
}

TEST(Backward, NonScalarLossIsContractError) {
    auto x = check::randn({2, 2}, 4);
    Tape<double> tape;
    EXPECT_THROW(tape.backward(tape.param(x)), ContractError);
}

TEST(Backward, MultipleConsumersSum) {
    // x feeds both operands of add; its gradient must be that of 2x.
    auto x = check::randn({2, 3}, 5);
    auto w = check::randn({3, 1}, 6);
    Tape<double> tape;
    auto xv = tape.param(x);
    tape.backward(ops::sum(ops::matmul(ops::add(xv, xv), tape.param(w))));
    const std::vector<double> shared(x.grad().begin(), x.grad().end());

    x.zero_grad();
    Tape<double> tape2;
    tape2.backward(ops::sum(ops::matmul(ops::scale(tape2.param(x), 2.0), tape2.param(w))));
    for (std::size_t i = 0; i < shared.size(); ++i) EXPECT_DOUBLE_EQ(shared[i], x.grad()[i]);
}

TEST(Backward, NonFiniteForwardAborts) {
    auto x = Tensor<double>({2}, {1.0, std::numeric_limits<double>::infinity()}, true);
    Tape<double> tape;
    auto v = tape.param(x);
    EXPECT_THROW(ops::gelu(v), NonFiniteError);
}

TEST(Backward, RegisteredRuleOverridesClosure) {
    auto x = check::randn({4}, 7);
    Tape<double> tape;
    tape.register_rule("gelu", [](Tape<double>& t, std::size_t self) {
        auto g = t.upstream(self);
        if (double* gx = t.accum(t.node(self).inputs[0]))
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 3 * g[i];
    });
    tape.backward(ops::sum(ops::gelu(tape.param(x))));
    for (double g : x.grad()) EXPECT_EQ(g, 3.0);
}

TEST(Backward, FrozenParamsGetNoGradient) {
    auto x = check::randn({3}, 8, 1.0, false);
    auto y = check::randn({3}, 9);
    Tape<double> tape;
    tape.backward(ops::sum(ops::add(tape.param(x), tape.param(y))));
    EXPECT_FALSE(x.has_grad());
    EXPECT_TRUE(y.has_grad());
}

TEST(Backward, NonRecordingTapeKeepsNoHistory) {
    auto x = check::randn({3}, 10);
    Tape<double> tape(false);
    auto loss = ops::sum(ops::gelu(tape.param(x)));
    EXPECT_FALSE(loss.requires_grad());
}

TEST(Backward, Deterministic) {
    auto run = [] {
        auto x = check::randn({4, 8}, 11);
        auto w = check::randn({8, 8}, 12);
        auto g = Tensor<double>::filled({8}, 1.0, true);
        auto b = Tensor<double>::zeros({8}, true);
        Tape<double> tape;
        auto h = ops::layer_norm(ops::gelu(ops::matmul(tape.param(x), tape.param(w))), tape.param(g), tape.param(b));
        tape.backward(ops::mean(ops::softmax_rows(h)));
        return std::vector<double>(w.grad().begin(), w.grad().end());
    };
    EXPECT_EQ(run(), run());
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
    auto x = check::randn({3, 5}, 13);
    auto w1 = check::randn({5, 6}, 14, 0.5);
    auto w2 = check::randn({6, 4}, 15, 0.5);
    auto g = check::randn({6}, 16);
    auto b = check::randn({6}, 17);
    const std::vector<std::int32_t> targets{0, 3, 2};
    check::Loss f = [&](Tape<double>& t) {
        auto h = ops::gelu(ops::layer_norm(ops::matmul(t.param(x), t.param(w1)), t.param(g), t.param(b)));
        return ops::cross_entropy_logits(ops::matmul(h, t.param(w2)), targets);
    };
    EXPECT_LT(check::gradcheck(f, {&x, &w1, &w2, &g, &b}), 1e-3);
}
