#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "qgpt/core/ops.hpp"
#include "support.hpp"

using namespace qgpt;
using check::gradcheck;
using check::Loss;
using check::randn;

namespace {

std::vector<double> run(const std::function<Var<double>(Tape<double>&)>& f) {
    Tape<double> tape(false);
    return f(tape).value().vec();
}

double phi_oracle(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST(Matmul, IdentityLeavesMatrix) {
    auto out = run([](Tape<double>& t) {
        return ops::matmul(t.constant(Tensor<double>({2, 2}, {1, 0, 0, 1})), t.constant(Tensor<double>({2, 2}, {1, 2, 3, 4})));
    });
    EXPECT_EQ(out, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
    auto out = run([](Tape<double>& t) {
        return ops::matmul(t.constant(Tensor<double>({1, 2}, {1, 2})), t.constant(Tensor<double>({2, 1}, {3, 4})));
    });
    EXPECT_EQ(out, std::vector<double>{11});
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tape<double> t;
    try {
        ops::matmul(t.constant(Tensor<double>::zeros({2, 3})), t.constant(Tensor<double>::zeros({2, 2})));
        FAIL();
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
    }
}

TEST(Matmul, SumGradientIsBroadcastColumnSums) {
    auto a = randn({3, 4}, 1);
    auto b = randn({4, 5}, 2);
    Tape<double> t;
    t.backward(ops::sum(ops::matmul(t.param(a), t.param(b))));
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < 5; ++j) s += b.at(c, j);
            EXPECT_NEAR(a.grad()[r * 4 + c], s, 1e-12);
        }
    }
    EXPECT_LT(gradcheck([&](Tape<double>& t) { return ops::sum(ops::matmul(t.param(a), t.param(b))); }, {&a, &b}), 1e-3);
}

TEST(Matmul, TransposedVariantGradients) {
    auto a = randn({3, 4}, 3);
    auto b = randn({6, 4}, 4);
    auto w = randn({3, 6}, 5, 1.0, false);
    Loss f = [&](Tape<double>& t) {
        return ops::sum(ops::add(ops::matmul_nt(t.param(a), t.param(b)), t.param(w)));
    };
    EXPECT_LT(gradcheck(f, {&a, &b}), 1e-3);
    Loss g = [&](Tape<double>& t) { return ops::mean(ops::gelu(ops::matmul_nt(t.param(a), t.param(b)))); };
    EXPECT_LT(gradcheck(g, {&a, &b}), 1e-3);
}

TEST(Gelu, Examples) {
    auto out = run([](Tape<double>& t) { return ops::gelu(t.constant(Tensor<double>({3}, {0.0, 10.0, 1.0}))); });
    EXPECT_EQ(out[0], 0.0);
    EXPECT_NEAR(out[1], 10.0, 1e-6);
    EXPECT_NEAR(out[2], 1.0 * phi_oracle(1.0), 1e-12);
    EXPECT_NEAR(out[2], 0.8413, 1e-3);
}

TEST(Gelu, Gradient) {
    auto x = randn({4, 5}, 6, 2.0);
    EXPECT_LT(gradcheck([&](Tape<double>& t) { return ops::mean(ops::scale(ops::gelu(t.param(x)), 3.0)); }, {&x}), 1e-3);
}

TEST(LayerNorm, ConstantRowIsZero) {
    auto out = run([](Tape<double>& t) {
        return ops::layer_norm(t.constant(Tensor<double>::filled({1, 4}, 3.0)), t.constant(Tensor<double>::filled({4}, 1.0)),
                               t.constant(Tensor<double>::zeros({4})));
    });
    for (double v : out) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, StandardizedRowUnchanged) {
    auto out = run([](Tape<double>& t) {
        return ops::layer_norm(t.constant(Tensor<double>({1, 2}, {1, -1})), t.constant(Tensor<double>::filled({2}, 1.0)),
                               t.constant(Tensor<double>::zeros({2})), 1e-12);
    });
    EXPECT_NEAR(out[0], 1.0, 1e-9);
    EXPECT_NEAR(out[1], -1.0, 1e-9);
}

TEST(LayerNorm, Gradient) {
    auto x = randn({3, 6}, 7);
    auto g = randn({6}, 8);
    auto b = randn({6}, 9);
    auto w = randn({3, 6}, 10, 1.0, false);
    Loss f = [&](Tape<double>& t) {
        auto y = ops::layer_norm(t.param(x), t.param(g), t.param(b));
        return ops::sum(ops::gelu(ops::add(y, t.param(w))));
    };
    EXPECT_LT(gradcheck(f, {&x, &g, &b}), 1e-3);
}

TEST(Softmax, Examples) {
    auto u = run([](Tape<double>& t) { return ops::softmax_rows(t.constant(Tensor<double>::filled({1, 4}, 0.7))); });
    for (double v : u) EXPECT_DOUBLE_EQ(v, 0.25);
    auto big = run([](Tape<double>& t) { return ops::softmax_rows(t.constant(Tensor<double>({1, 2}, {1000, 1000}))); });
    EXPECT_DOUBLE_EQ(big[0], 0.5);
    EXPECT_DOUBLE_EQ(big[1], 0.5);
    auto l3 = run([](Tape<double>& t) { return ops::softmax_rows(t.constant(Tensor<double>({1, 2}, {0, std::log(3.0)}))); });
    EXPECT_NEAR(l3[0], 0.25, 1e-12);
    EXPECT_NEAR(l3[1], 0.75, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
    auto x = randn({16, 9}, 11, 5.0);
    auto y = run([&](Tape<double>& t) { return ops::softmax_rows(t.param(x)); });
    for (std::size_t r = 0; r < 16; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 9; ++c) s += y[r * 9 + c];
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Softmax, Gradient) {
    auto x = randn({3, 5}, 12);
    auto w = randn({3, 5}, 13, 1.0, false);
    Loss f = [&](Tape<double>& t) { return ops::sum(ops::gelu(ops::add(ops::softmax_rows(t.param(x)), t.param(w)))); };
    EXPECT_LT(gradcheck(f, {&x}), 1e-3);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
    const std::vector<std::int32_t> tg{3, 0};
    auto v = run([&](Tape<double>& t) { return ops::cross_entropy_logits(t.constant(Tensor<double>::zeros({2, 8})), tg); });
    EXPECT_NEAR(v[0], std::log(8.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
    const std::vector<std::int32_t> tg{2};
    Tensor<double> logits({1, 4}, {0, 0, 1e3, 0});
    auto v = run([&](Tape<double>& t) { return ops::cross_entropy_logits(t.constant(logits), tg); });
    EXPECT_NEAR(v[0], 0.0, 1e-12);
    EXPECT_GE(v[0], 0.0);
}

TEST(CrossEntropy, OutOfRangeTargetIsIndexError) {
    const std::vector<std::int32_t> tg{4};
    Tape<double> t;
    EXPECT_THROW(ops::cross_entropy_logits(t.constant(Tensor<double>::zeros({1, 4})), tg), IndexError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOnehotOverN) {
    auto x = randn({4, 6}, 14);
    const std::vector<std::int32_t> tg{1, 5, 0, 3};
    Tape<double> t;
    t.backward(ops::cross_entropy_logits(t.param(x), tg));
    for (std::size_t r = 0; r < 4; ++r) {
        double z = 0;
        for (std::size_t c = 0; c < 6; ++c) z += std::exp(x.at(r, c));
        for (std::size_t c = 0; c < 6; ++c) {
            const double expect = (std::exp(x.at(r, c)) / z - (static_cast<int>(c) == tg[r] ? 1.0 : 0.0)) / 4.0;
            EXPECT_NEAR(x.grad()[r * 6 + c], expect, 1e-6);
        }
    }
    EXPECT_LT(gradcheck([&](Tape<double>& t) { return ops::cross_entropy_logits(t.param(x), tg); }, {&x}), 1e-3);
}

TEST(SoftCrossEntropy, UniformCaseIsLogV) {
    auto v = run([](Tape<double>& t) {
        return ops::soft_cross_entropy(t.constant(Tensor<double>::zeros({3, 8})), t.constant(Tensor<double>::zeros({3, 8})));
    });
    EXPECT_NEAR(v[0], std::log(8.0), 1e-12);
}

TEST(SoftCrossEntropy, Gradients) {
    auto s = randn({3, 7}, 15);
    auto te = randn({3, 7}, 16);
    Loss f = [&](Tape<double>& t) { return ops::soft_cross_entropy(t.param(s), t.param(te)); };
    EXPECT_LT(gradcheck(f, {&s, &te}), 1e-3);
}

TEST(Embedding, GatherAndScatter) {
    auto table = randn({5, 3}, 17);
    const std::vector<std::int32_t> ids{4, 0, 4, 2};
    auto w = randn({4, 3}, 18, 1.0, false);
    Loss f = [&](Tape<double>& t) {
        return ops::sum(ops::gelu(ops::add(ops::embedding(t.param(table), ids), t.param(w))));
    };
    EXPECT_LT(gradcheck(f, {&table}), 1e-3);
    const std::vector<std::int32_t> bad{5};
    Tape<double> t;
    EXPECT_THROW(ops::embedding(t.param(table), bad), IndexError);
}

TEST(Positions, Gradient) {
    auto x = randn({6, 4}, 19);
    auto pos = randn({5, 4}, 20);
    Loss f = [&](Tape<double>& t) { return ops::sum(ops::gelu(ops::add_positions(t.param(x), t.param(pos), 3))); };
    EXPECT_LT(gradcheck(f, {&x, &pos}), 1e-3);
}

TEST(Attention, CausalPathGradient) {
    const ops::HeadLayout L{2, 4, 2, 6};
    auto q = randn({8, 6}, 21);
    auto k = randn({8, 6}, 22);
    auto v = randn({8, 6}, 23);
    auto w = randn({8, 6}, 24, 1.0, false);
    Loss f = [&](Tape<double>& t) {
        auto p = ops::causal_softmax(ops::attention_scores(t.param(q), t.param(k), L));
        return ops::sum(ops::gelu(ops::add(ops::attention_context(p, t.param(v), L), t.param(w))));
    };
    EXPECT_LT(gradcheck(f, {&q, &k, &v}), 1e-3);
}

TEST(Attention, CausalRowsSumToOneOverPrefix) {
    const ops::HeadLayout L{1, 5, 1, 4};
    auto q = randn({5, 4}, 25);
    auto k = randn({5, 4}, 26);
    auto p = run([&](Tape<double>& t) { return ops::causal_softmax(ops::attention_scores(t.param(q), t.param(k), L)); });
    for (std::size_t i = 0; i < 5; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 5; ++j) {
            if (j > i) EXPECT_EQ(p[i * 5 + j], 0.0);
            s += p[i * 5 + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(RowOps, ConcatAndSegmentMean) {
    auto a = randn({2, 3}, 27);
    auto b = randn({4, 3}, 28);
    Loss f = [&](Tape<double>& t) {
        return ops::sum(ops::gelu(ops::segment_mean(ops::concat_rows(t.param(a), t.param(b)), 3)));
    };
    EXPECT_LT(gradcheck(f, {&a, &b}), 1e-3);
    auto m = run([&](Tape<double>& t) { return ops::segment_mean(t.param(b), 2); });
    EXPECT_NEAR(m[0], 0.5 * (b.at(0, 0) + b.at(1, 0)), 1e-15);
}

TEST(WeightedSum, Gradient) {
    auto a = randn({2, 3}, 29);
    auto b = randn({2, 3}, 30);
    Loss f = [&](Tape<double>& t) {
        std::vector<Var<double>> xs{ops::sum(ops::gelu(t.param(a))), ops::mean(t.param(b))};
        std::vector<double> w{0.3, -1.2};
        return ops::gelu(ops::weighted_sum<double>(xs, w));
    };
    EXPECT_LT(gradcheck(f, {&a, &b}), 1e-3);
}

TEST(AddBias, Gradient) {
    auto x = randn({4, 3}, 31);
    auto b = randn({3}, 32);
    Loss f = [&](Tape<double>& t) { return ops::sum(ops::gelu(ops::add_bias(t.param(x), t.param(b)))); };
    EXPECT_LT(gradcheck(f, {&x, &b}), 1e-3);
}
