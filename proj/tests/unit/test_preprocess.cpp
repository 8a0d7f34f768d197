#include <gtest/gtest.h>

#include "test_util.hpp"
#include "visteer/grad_check.hpp"
#include "visteer/image_ops.hpp"
#include "visteer/preprocess.hpp"

using namespace visteer;
using visteer::test::random_tensor;

TEST(Preprocess, GreyToZero) {
    Graph g;
    const PreprocessSpec spec{12, 12, {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}};
    Var y = preprocess(g.constant(Tensor({20, 20, 3}, 0.5)), spec);
    EXPECT_EQ(y.shape(), (Shape{12, 12, 3}));
    for (double v : y.value().values()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Preprocess, IdentityWhenSpecSized) {
    Graph g;
    const Tensor x = random_tensor({10, 8, 3}, 1, 0.0, 1.0);
    Var y = preprocess(g.constant(x), PreprocessSpec{10, 8, {0, 0, 0}, {1, 1, 1}});
    EXPECT_LT(max_abs_diff(y.value(), x), 1e-12);
}

TEST(Preprocess, GradientIsResizeAdjointOfInverseStd) {
    const PreprocessSpec spec{6, 10, {0.1, 0.2, 0.3}, {0.5, 0.25, 2.0}};
    ScalarFn fn = [&](Graph&, Var x) { return sum(preprocess(x, spec)); };
    const Tensor x = random_tensor({8, 8, 3}, 2, 0.0, 1.0);
    EXPECT_LT(grad_check(fn, x, 1e-5).max_rel_error, 1e-6);

    Tensor inv({6, 10, 3});
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 10; ++j)
            for (std::size_t c = 0; c < 3; ++c) inv.at(i, j, c) = 1.0 / spec.std[c];
    EXPECT_LT(max_abs_diff(eval_gradient(fn, x), resize_bilinear_adjoint(inv, 8, 8)), 1e-12);
}

TEST(Preprocess, AffineWithZeroMean) {
    const PreprocessSpec spec{7, 5, {0, 0, 0}, {0.3, 0.6, 0.9}};
    const Tensor x = random_tensor({9, 9, 3}, 3, 0.0, 1.0), y = random_tensor({9, 9, 3}, 4, 0.0, 1.0);
    const double a = 0.35;
    auto run = [&](const Tensor& t) {
        Graph g;
        return preprocess(g.constant(t), spec).value();
    };
    EXPECT_LT(max_abs_diff(run(a * x + (1 - a) * y), a * run(x) + (1 - a) * run(y)), 1e-9);
}

TEST(Preprocess, GradientPathThroughSamples) {
    const PreprocessSpec spec{16, 16, {0.481, 0.458, 0.408}, {0.269, 0.261, 0.276}};
    const Tensor w = random_tensor({16, 16, 3}, 5);
    ScalarFn fn = [&](Graph& g, Var x) { return sum_squares(mul(preprocess(x, spec), g.constant(w))); };
    EXPECT_LT(grad_check(fn, random_tensor({24, 24, 3}, 6, 0.0, 1.0), 1e-5, 20, 7).max_rel_error, 1e-4);
}

TEST(Preprocess, InvalidSpec) {
    EXPECT_THROW((PreprocessSpec{0, 4, {0, 0, 0}, {1, 1, 1}}.validate()), std::invalid_argument);
    EXPECT_THROW((PreprocessSpec{4, 4, {0, 0, 0}, {1, 0, 1}}.validate()), std::invalid_argument);
    EXPECT_THROW((PreprocessSpec{4, 4, {0, 0, 0}, {1, -1, 1}}.validate()), std::invalid_argument);
    Graph g;
    EXPECT_THROW(preprocess(g.constant(Tensor({4, 4, 3})), PreprocessSpec{4, 4, {0, 0, 0}, {1, 1, 0}}),
                 std::invalid_argument);
}
