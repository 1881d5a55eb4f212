#include "vfda/ops.hpp"

#include <gtest/gtest.h>

#include "vfda/rng.hpp"

using namespace vfda;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.next_uniform(lo, hi);
    return t;
}

double max_rel_err(const Tensor& got, const Tensor& want, double denom_floor = 1e-8) {
    EXPECT_EQ(got.shape, want.shape);
    double worst = 0.0;
    for (size_t i = 0; i < got.data.size(); ++i) {
        const double denom = std::max(std::abs(want.data[i]), denom_floor);
        worst = std::max(worst, std::abs(got.data[i] - want.data[i]) / denom);
    }
    return worst;
}

}  // namespace

TEST(Conv3d, ScalarKernelScales) {
    Tensor input({1, 1, 1, 1, 3}, {1, 2, 3});
    Tensor kernel({1, 1, 1, 1, 1}, {2});
    Tensor bias({1}, {0});
    auto [out, cache] = conv3d_forward(input, kernel, bias, 1, 0);
    EXPECT_EQ(out.shape, (std::vector<int64_t>{1, 1, 1, 1, 3}));
    EXPECT_EQ(out.data, (std::vector<double>{2, 4, 6}));
}

TEST(Conv3d, IdentityKernel) {
    Rng rng(7);
    Tensor input = random_tensor({2, 1, 2, 3, 4}, rng);
    Tensor kernel({1, 1, 1, 1, 1}, {1});
    Tensor bias({1}, {0});
    auto [out, cache] = conv3d_forward(input, kernel, bias, 1, 0);
    EXPECT_EQ(out.data, input.data);
}

TEST(Conv3d, HandConvolutionWithZeroPadding) {
    // All-ones 3x3x3 kernel over a 1x1x3 row; out-of-bounds taps contribute 0.
    Tensor input({1, 1, 1, 1, 3}, {1, 2, 3});
    Tensor kernel({1, 1, 3, 3, 3}, std::vector<double>(27, 1.0));
    Tensor bias({1}, {0});
    auto [out, cache] = conv3d_forward(input, kernel, bias, 1, 1);
    ASSERT_EQ(out.shape, (std::vector<int64_t>{1, 1, 1, 1, 3}));
    EXPECT_DOUBLE_EQ(out.data[0], 3.0);
    EXPECT_DOUBLE_EQ(out.data[1], 6.0);
    EXPECT_DOUBLE_EQ(out.data[2], 5.0);
}

TEST(Conv3d, OutputShapeContract) {
    for (int64_t stride : {1, 2}) {
        for (int64_t pad : {0, 1}) {
            for (int64_t dim : {4, 5, 7}) {
                Rng rng(11);
                Tensor input = random_tensor({1, 2, dim, dim, dim}, rng);
                Tensor kernel = random_tensor({3, 2, 3, 3, 3}, rng);
                Tensor bias = random_tensor({3}, rng);
                const int64_t expect = (dim + 2 * pad - 3) / stride + 1;
                if (expect < 1) continue;
                auto [out, cache] = conv3d_forward(input, kernel, bias, stride, pad);
                EXPECT_EQ(out.dim(2), expect) << "stride=" << stride << " pad=" << pad << " dim=" << dim;
            }
        }
    }
}

TEST(Conv3d, RejectsChannelMismatch) {
    Tensor input({1, 2, 2, 2, 2});
    Tensor kernel({1, 3, 1, 1, 1});
    Tensor bias({1});
    try {
        conv3d_forward(input, kernel, bias, 1, 0);
        FAIL() << "expected shape mismatch";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[1x2x2x2x2]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[1x3x1x1x1]"), std::string::npos) << msg;
    }
}

TEST(Conv3d, LinearInInput) {
    Rng rng(3);
    Tensor x = random_tensor({1, 2, 3, 3, 3}, rng);
    Tensor y = random_tensor({1, 2, 3, 3, 3}, rng);
    Tensor kernel = random_tensor({2, 2, 3, 3, 3}, rng);
    Tensor bias({2}, {0, 0});
    const double a = 0.37, b = -1.25;

    Tensor combo(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) combo.data[i] = a * x.data[i] + b * y.data[i];

    auto [fx, c1] = conv3d_forward(x, kernel, bias, 1, 1);
    auto [fy, c2] = conv3d_forward(y, kernel, bias, 1, 1);
    auto [fc, c3] = conv3d_forward(combo, kernel, bias, 1, 1);
    for (size_t i = 0; i < fc.data.size(); ++i) {
        EXPECT_NEAR(fc.data[i], a * fx.data[i] + b * fy.data[i], 1e-12);
    }
}

TEST(Conv3dBackward, ZeroGradGivesZeroGradients) {
    Rng rng(5);
    Tensor input = random_tensor({1, 2, 3, 3, 3}, rng);
    Tensor kernel = random_tensor({2, 2, 3, 3, 3}, rng);
    Tensor bias = random_tensor({2}, rng);
    auto [out, cache] = conv3d_forward(input, kernel, bias, 1, 1);
    Tensor grad_out(out.shape);
    auto [gi, gk, gb] = conv3d_backward(grad_out, cache);
    for (double v : gi.data) EXPECT_EQ(v, 0.0);
    for (double v : gk.data) EXPECT_EQ(v, 0.0);
    for (double v : gb.data) EXPECT_EQ(v, 0.0);
}

TEST(Conv3dBackward, ScalarKernelSumLoss) {
    // k=1 kernel w, loss = sum(output): d loss / d w = sum(input).
    Tensor input({1, 1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor kernel({1, 1, 1, 1, 1}, {0.5});
    Tensor bias({1}, {0.25});
    auto [out, cache] = conv3d_forward(input, kernel, bias, 1, 0);
    Tensor grad_out(out.shape);
    std::fill(grad_out.data.begin(), grad_out.data.end(), 1.0);
    auto [gi, gk, gb] = conv3d_backward(grad_out, cache);
    EXPECT_DOUBLE_EQ(gk.data[0], 10.0);
    EXPECT_DOUBLE_EQ(gb.data[0], 4.0);
    for (double v : gi.data) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Conv3dBackward, MatchesFiniteDifferences) {
    for (int64_t stride : {1, 2}) {
        Rng rng(17 + stride);
        Tensor input = random_tensor({2, 2, 4, 4, 4}, rng);
        Tensor kernel = random_tensor({3, 2, 3, 3, 3}, rng, -0.5, 0.5);
        Tensor bias = random_tensor({3}, rng);
        auto [out, cache] = conv3d_forward(input, kernel, bias, stride, 1);
        Tensor weights = random_tensor(out.shape, rng);

        Tensor grad_out = weights;
        auto [gi, gk, gb] = conv3d_backward(grad_out, cache);

        auto loss_of_input = [&](const Tensor& x) {
            auto [o, c] = conv3d_forward(x, kernel, bias, stride, 1);
            double acc = 0.0;
            for (size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * weights.data[i];
            return acc;
        };
        auto loss_of_kernel = [&](const Tensor& k) {
            auto [o, c] = conv3d_forward(input, k, bias, stride, 1);
            double acc = 0.0;
            for (size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * weights.data[i];
            return acc;
        };
        auto loss_of_bias = [&](const Tensor& bv) {
            auto [o, c] = conv3d_forward(input, kernel, bv, stride, 1);
            double acc = 0.0;
            for (size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * weights.data[i];
            return acc;
        };
        EXPECT_LT(max_rel_err(gi, finite_difference_gradient(loss_of_input, input, 1e-5)), 1e-6) << "stride " << stride;
        EXPECT_LT(max_rel_err(gk, finite_difference_gradient(loss_of_kernel, kernel, 1e-5)), 1e-6);
        EXPECT_LT(max_rel_err(gb, finite_difference_gradient(loss_of_bias, bias, 1e-5)), 1e-6);
    }
}

TEST(Conv3dBackward, RejectsMismatchedGradShape) {
    Tensor input({1, 1, 2, 2, 2});
    Tensor kernel({1, 1, 1, 1, 1}, {1});
    Tensor bias({1}, {0});
    auto [out, cache] = conv3d_forward(input, kernel, bias, 1, 0);
    Tensor bad({1, 1, 2, 2, 3});
    EXPECT_THROW(conv3d_backward(bad, cache), std::invalid_argument);
}

TEST(Relu, ClampsNegatives) {
    Tensor x({1, 1, 1, 1, 3}, {-1, 0, 2});
    auto [out, cache] = relu(x);
    EXPECT_EQ(out.data, (std::vector<double>{0, 0, 2}));
}

TEST(Relu, BackwardZeroAtOrigin) {
    Tensor x({1, 1, 1, 1, 3}, {-1, 0, 2});
    auto [out, cache] = relu(x);
    Tensor g({1, 1, 1, 1, 3}, {1, 1, 1});
    Tensor gi = relu_backward(g, cache);
    EXPECT_EQ(gi.data, (std::vector<double>{0, 0, 1}));
}

TEST(Relu, IdentityOnPositive) {
    Rng rng(23);
    Tensor x = random_tensor({1, 2, 2, 2, 2}, rng, 0.1, 2.0);
    auto [out, cache] = relu(x);
    EXPECT_EQ(out.data, x.data);
    Tensor g = random_tensor(x.shape, rng);
    EXPECT_EQ(relu_backward(g, cache).data, g.data);
}

TEST(Upsample, FactorOneIsIdentity) {
    Rng rng(29);
    Tensor x = random_tensor({1, 2, 2, 3, 2}, rng);
    auto [out, cache] = upsample_nearest(x, 1);
    EXPECT_EQ(out.shape, x.shape);
    EXPECT_EQ(out.data, x.data);
}

TEST(Upsample, ReplicatesEightTimes) {
    Tensor x({1, 1, 1, 1, 2}, {3.5, -2.0});
    auto [out, cache] = upsample_nearest(x, 2);
    EXPECT_EQ(out.shape, (std::vector<int64_t>{1, 1, 2, 2, 4}));
    int count_a = 0, count_b = 0;
    for (double v : out.data) {
        if (v == 3.5) ++count_a;
        if (v == -2.0) ++count_b;
    }
    EXPECT_EQ(count_a, 8);
    EXPECT_EQ(count_b, 8);
}

TEST(Upsample, BackwardSumsGroups) {
    Tensor x({1, 1, 1, 1, 2});
    auto [out, cache] = upsample_nearest(x, 2);
    Tensor g(out.shape);
    std::fill(g.data.begin(), g.data.end(), 1.0);
    Tensor gi = upsample_nearest_backward(g, cache);
    EXPECT_EQ(gi.data, (std::vector<double>{8.0, 8.0}));
}

TEST(Upsample, BackwardMatchesFiniteDifferences) {
    Rng rng(31);
    Tensor x = random_tensor({1, 2, 2, 2, 2}, rng);
    Tensor w = random_tensor({1, 2, 4, 4, 4}, rng);
    auto [out, cache] = upsample_nearest(x, 2);
    Tensor gi = upsample_nearest_backward(w, cache);
    auto loss = [&](const Tensor& t) {
        auto [o, c] = upsample_nearest(t, 2);
        double acc = 0.0;
        for (size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * w.data[i];
        return acc;
    };
    EXPECT_LT(max_rel_err(gi, finite_difference_gradient(loss, x, 1e-5)), 1e-6);
}

TEST(Concat, EmptySecondOperandIsIdentity) {
    Rng rng(37);
    Tensor a = random_tensor({1, 2, 2, 2, 2}, rng);
    Tensor empty({1, 0, 2, 2, 2});
    auto [out, cache] = concat_channels(a, empty);
    EXPECT_EQ(out.shape, a.shape);
    EXPECT_EQ(out.data, a.data);
}

TEST(Concat, OrderingContract) {
    Tensor a({1, 1, 1, 1, 2}, {1, 2});
    Tensor b({1, 1, 1, 1, 2}, {3, 4});
    auto [out, cache] = concat_channels(a, b);
    EXPECT_EQ(out.shape, (std::vector<int64_t>{1, 2, 1, 1, 2}));
    EXPECT_EQ(out.data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Concat, BackwardSplitsBitExactly) {
    Rng rng(41);
    Tensor a = random_tensor({2, 1, 2, 2, 2}, rng);
    Tensor b = random_tensor({2, 1, 2, 2, 2}, rng);
    auto [out, cache] = concat_channels(a, b);
    Tensor g = random_tensor(out.shape, rng);
    auto [ga, gb] = concat_channels_backward(g, cache);
    // Round trip: concatenating the split gradients reproduces g.
    auto [g2, c2] = concat_channels(ga, gb);
    EXPECT_EQ(g2.data, g.data);
}

TEST(Concat, RejectsDimMismatch) {
    Tensor a({1, 1, 2, 2, 2});
    Tensor b({1, 1, 2, 2, 3});
    EXPECT_THROW(concat_channels(a, b), std::invalid_argument);
}

TEST(FiniteDifference, SumGivesOnes) {
    Rng rng(43);
    Tensor x = random_tensor({1, 1, 2, 2, 2}, rng);
    auto f = [](const Tensor& t) {
        double acc = 0.0;
        for (double v : t.data) acc += v;
        return acc;
    };
    Tensor g = finite_difference_gradient(f, x, 1e-5);
    for (double v : g.data) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, QuadraticAtThree) {
    Tensor x({1}, {3.0});
    auto f = [](const Tensor& t) { return t.data[0] * t.data[0]; };
    Tensor g = finite_difference_gradient(f, x, 1e-5);
    EXPECT_NEAR(g.data[0], 6.0, 1e-8);
}

TEST(FiniteDifference, ConstantGivesZeros) {
    Tensor x({3}, {1, 2, 3});
    auto f = [](const Tensor&) { return 4.2; };
    Tensor g = finite_difference_gradient(f, x, 1e-5);
    for (double v : g.data) EXPECT_EQ(v, 0.0);
}

TEST(SgdStep, ZeroLrLeavesParamsUnchanged) {
    std::vector<Tensor> params{Tensor({2}, {1, 2})};
    std::vector<Tensor> grads{Tensor({2}, {5, -5})};
    sgd_step(params, grads, 0.0);
    EXPECT_EQ(params[0].data, (std::vector<double>{1, 2}));
}

TEST(SgdStep, BasicUpdate) {
    std::vector<Tensor> params{Tensor({1}, {1.0})};
    std::vector<Tensor> grads{Tensor({1}, {2.0})};
    sgd_step(params, grads, 0.5);
    EXPECT_DOUBLE_EQ(params[0].data[0], 0.0);
}

TEST(SgdStep, ZeroGradsLeaveParamsUnchanged) {
    std::vector<Tensor> params{Tensor({3}, {1, 2, 3})};
    std::vector<Tensor> grads{Tensor({3})};
    sgd_step(params, grads, 0.1);
    EXPECT_EQ(params[0].data, (std::vector<double>{1, 2, 3}));
}

TEST(SgdStep, RejectsShapeMismatch) {
    std::vector<Tensor> params{Tensor({2})};
    std::vector<Tensor> grads{Tensor({3})};
    EXPECT_THROW(sgd_step(params, grads, 0.1), std::invalid_argument);
}
