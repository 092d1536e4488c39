#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "sardet/gradcheck.hpp"
#include "sardet/ops.hpp"
#include "sardet/tensor.hpp"
#include "test_util.hpp"

using namespace sardet;
using testutil::max_abs_diff;
using testutil::randn;

namespace {

// independent 6-nested-loop reference convolution (cross-correlation)
Tensor conv_reference(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                      int pad, int dil) {
    const Shape4& xs = x.shape();
    const Shape4& ws = w.shape();
    const int OH = (xs[2] + 2 * pad - dil * (ws[2] - 1) - 1) / stride + 1;
    const int OW = (xs[3] + 2 * pad - dil * (ws[3] - 1) - 1) / stride + 1;
    Tensor y = Tensor::zeros({xs[0], ws[0], OH, OW});
    for (int n = 0; n < xs[0]; ++n)
        for (int oc = 0; oc < ws[0]; ++oc)
            for (int oi = 0; oi < OH; ++oi)
                for (int oj = 0; oj < OW; ++oj) {
                    double acc = b.defined() ? b.data()[oc] : 0.0;
                    for (int ic = 0; ic < xs[1]; ++ic)
                        for (int ki = 0; ki < ws[2]; ++ki)
                            for (int kj = 0; kj < ws[3]; ++kj) {
                                const int ii = oi * stride - pad + ki * dil;
                                const int jj = oj * stride - pad + kj * dil;
                                if (ii >= 0 && ii < xs[2] && jj >= 0 && jj < xs[3])
                                    acc += x.at(n, ic, ii, jj) * w.at(oc, ic, ki, kj);
                            }
                    y.at(n, oc, oi, oj) = acc;
                }
    return y;
}

double inner(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * b.data()[i];
    return acc;
}

}  // namespace

TEST(Conv2d, BoxFilterCounting) {
    Tensor x = Tensor::filled({1, 1, 4, 4}, 1.0);
    Tensor w = Tensor::filled({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, w, Tensor(), {.stride = 1, .pad = 1});
    EXPECT_DOUBLE_EQ(y.at(0, 0, 1, 1), 9.0);
    EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 0), 4.0);
}

TEST(Conv2d, DilatedShape) {
    Rng rng(1);
    Tensor x = randn({1, 1, 5, 5}, rng);
    Tensor w = randn({1, 1, 3, 3}, rng);
    Tensor y = conv2d(x, w, Tensor(), {.stride = 1, .pad = 2, .dilation = 2});
    EXPECT_EQ(y.shape(), (Shape4{1, 1, 5, 5}));
}

TEST(Conv2d, MatchesLoopOracle) {
    Rng rng(7);
    Tensor x = randn({2, 3, 8, 8}, rng);
    Tensor w = randn({4, 3, 3, 3}, rng);
    Tensor b = randn({1, 4, 1, 1}, rng);
    for (auto [stride, pad, dil] : {std::array{1, 1, 1}, {2, 1, 1}, {1, 2, 2}, {2, 0, 1}}) {
        ConvSpec spec{stride, pad, dil};
        Tensor got = conv2d(x, w, b, spec);
        Tensor want = conv_reference(x, w, b, stride, pad, dil);
        EXPECT_EQ(got.shape(), want.shape());
        EXPECT_LT(max_abs_diff(got, want), 1e-12);
    }
}

TEST(Conv2d, RejectsBadShapes) {
    Tensor x = Tensor::zeros({1, 3, 4, 4});
    Tensor w = Tensor::zeros({2, 4, 3, 3});
    EXPECT_THROW(conv2d(x, w, Tensor()), std::invalid_argument);
    Tensor w2 = Tensor::zeros({2, 3, 7, 7});
    EXPECT_THROW(conv2d(x, w2, Tensor()), std::invalid_argument);  // zero-size output
}

TEST(Deconv2d, DoublesSpatialSize) {
    Rng rng(2);
    Tensor x = randn({1, 1, 4, 4}, rng);
    Tensor w = randn({1, 1, 3, 3}, rng);
    Tensor y = deconv2d(x, w, Tensor(), {.stride = 2, .pad = 1, .output_padding = 1});
    EXPECT_EQ(y.shape(), (Shape4{1, 1, 8, 8}));
}

TEST(Deconv2d, AdjointOfConv) {
    Rng rng(3);
    for (int stride : {1, 2}) {
        Tensor x = randn({2, 3, 8, 8}, rng);
        Tensor w = randn({4, 3, 3, 3}, rng);
        Tensor y_fw = conv2d(x, w, Tensor(), {.stride = stride, .pad = 1});
        Tensor y = randn(y_fw.shape(), rng);
        Tensor x_bw = deconv2d(y, w, Tensor(), {.stride = stride, .pad = 1});
        // deconv output may be one short of x when stride 2; compare on y's side only
        ASSERT_EQ(x_bw.shape()[2], x.shape()[2] - (stride == 2 ? 1 : 0));
        // embed x_bw into x's grid for the inner product
        double lhs = inner(y_fw, y);
        double rhs = 0.0;
        for (int n = 0; n < x_bw.shape()[0]; ++n)
            for (int c = 0; c < x_bw.shape()[1]; ++c)
                for (int i = 0; i < x_bw.shape()[2]; ++i)
                    for (int j = 0; j < x_bw.shape()[3]; ++j)
                        rhs += x_bw.at(n, c, i, j) * x.at(n, c, i, j);
        // rows/cols of x outside deconv2d's reach receive zero adjoint weight
        EXPECT_LT(std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)), 1e-10);
    }
}

TEST(Deconv2d, ZeroInputGivesBias) {
    Tensor x = Tensor::zeros({1, 2, 3, 3});
    Tensor w = Tensor::zeros({2, 3, 3, 3});
    for (double& v : w.data()) v = 0.5;
    Tensor b = Tensor::from_data({1, 3, 1, 1}, {1.0, -2.0, 3.0});
    Tensor y = deconv2d(x, w, b, {.stride = 2, .pad = 1, .output_padding = 1});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < y.shape()[2]; ++i)
            for (int j = 0; j < y.shape()[3]; ++j)
                EXPECT_DOUBLE_EQ(y.at(0, c, i, j), b.data()[c]);
}

TEST(Rot90, QuarterTurnExample) {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = rot90(x, 1);
    EXPECT_EQ(y.data(), (std::vector<double>{2, 4, 1, 3}));
}

TEST(Rot90, IdentityAndInvolution) {
    Rng rng(4);
    Tensor x = randn({2, 3, 5, 5}, rng);
    EXPECT_EQ(rot90(x, 0).data(), x.data());
    EXPECT_EQ(rot90(rot90(x, 2), 2).data(), x.data());  // bitwise
    for (int k = 0; k < 4; ++k)
        EXPECT_EQ(rot90(rot90(x, k), 4 - k).data(), x.data());
}

TEST(Rot90, RejectsNonSquare) {
    Tensor x = Tensor::zeros({1, 1, 3, 4});
    EXPECT_THROW(rot90(x, 1), std::invalid_argument);
}

TEST(Batchnorm, TrainNormalizes) {
    Rng rng(5);
    Tensor x = randn({4, 3, 6, 6}, rng, 2.5);
    Tensor gamma = Tensor::filled({1, 3, 1, 1}, 1.0);
    Tensor beta = Tensor::zeros({1, 3, 1, 1});
    BnBuffers running(3);
    Tensor y = batchnorm(x, gamma, beta, running, /*train=*/true);
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        const int64_t m = 4 * 36;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) mean += y.at(n, c, i, j);
        mean /= double(m);
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) var += std::pow(y.at(n, c, i, j) - mean, 2);
        var /= double(m);
        EXPECT_NEAR(mean, 0.0, 1e-6);
        EXPECT_NEAR(var, 1.0, 1e-6);
    }
}

TEST(Batchnorm, ZeroGammaGivesBeta) {
    Rng rng(6);
    Tensor x = randn({2, 2, 4, 4}, rng);
    Tensor gamma = Tensor::zeros({1, 2, 1, 1});
    Tensor beta = Tensor::from_data({1, 2, 1, 1}, {0.25, -1.5});
    BnBuffers running(2);
    Tensor y = batchnorm(x, gamma, beta, running, true);
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.at(0, c, i, 0), beta.data()[c]);
}

TEST(Batchnorm, EvalUsesRunningStats) {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {3.0, 7.0});
    Tensor gamma = Tensor::filled({1, 1, 1, 1}, 2.0);
    Tensor beta = Tensor::filled({1, 1, 1, 1}, 0.5);
    BnBuffers running(1);
    running.mean[0] = 1.0;
    running.var[0] = 4.0;
    Tensor y = batchnorm(x, gamma, beta, running, /*train=*/false);
    const double eps = 1e-5;
    EXPECT_NEAR(y.at(0, 0, 0, 0), (3.0 - 1.0) / std::sqrt(4.0 + eps) * 2.0 + 0.5, 1e-12);
    EXPECT_NEAR(y.at(0, 0, 0, 1), (7.0 - 1.0) / std::sqrt(4.0 + eps) * 2.0 + 0.5, 1e-12);
}

TEST(Batchnorm, RejectsChannelMismatch) {
    Tensor x = Tensor::zeros({1, 3, 2, 2});
    Tensor gamma = Tensor::zeros({1, 2, 1, 1});
    Tensor beta = Tensor::zeros({1, 3, 1, 1});
    BnBuffers running(3);
    EXPECT_THROW(batchnorm(x, gamma, beta, running, true), std::invalid_argument);
}

TEST(Elementwise, SiluAtZero) {
    Tensor x = Tensor::zeros({1, 1, 1, 1});
    EXPECT_DOUBLE_EQ(silu(x).item(), 0.0);
}

TEST(Elementwise, SoftmaxUniform) {
    Tensor x = Tensor::zeros({1, 3, 1, 1});
    Tensor y = softmax(x, 1);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(y.at(0, c, 0, 0), 1.0 / 3.0, 1e-15);
}

TEST(Elementwise, SoftmaxRowsSumToOne) {
    Rng rng(8);
    for (int axis = 0; axis < 4; ++axis) {
        Tensor x = randn({2, 3, 4, 5}, rng, 3.0);
        Tensor y = softmax(x, axis);
        const Shape4& s = x.shape();
        // check sums along the axis; all entries strictly positive
        for (double v : y.data()) EXPECT_GT(v, 0.0);
        int64_t inner = 1, outer = 1;
        for (int i = axis + 1; i < 4; ++i) inner *= s[i];
        for (int i = 0; i < axis; ++i) outer *= s[i];
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                double acc = 0.0;
                for (int l = 0; l < s[axis]; ++l) acc += y.data()[(o * s[axis] + l) * inner + in];
                EXPECT_NEAR(acc, 1.0, 1e-12);
            }
    }
}

TEST(Elementwise, ConcatShape) {
    Tensor a = Tensor::zeros({1, 2, 3, 3});
    Tensor b = Tensor::zeros({1, 3, 3, 3});
    Tensor y = concat({a, b}, 1);
    EXPECT_EQ(y.shape(), (Shape4{1, 5, 3, 3}));
    EXPECT_THROW(concat({a, Tensor::zeros({1, 2, 4, 3})}, 1), std::invalid_argument);
    EXPECT_THROW(concat({a, b}, 7), std::invalid_argument);
}

TEST(Upsample, Nearest2x) {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = upsample_nearest2x(x);
    EXPECT_EQ(y.shape(), (Shape4{1, 1, 4, 4}));
    EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 0), 1.0);
    EXPECT_DOUBLE_EQ(y.at(0, 0, 1, 1), 1.0);
    EXPECT_DOUBLE_EQ(y.at(0, 0, 3, 3), 4.0);
}

TEST(Backward, SumGivesOnes) {
    Rng rng(9);
    Tensor x = randn({1, 2, 3, 3}, rng, 1.0, /*requires_grad=*/true);
    backward(sum(x));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, AccumulatesAcrossCalls) {
    Tensor x = Tensor::filled({1, 1, 2, 2}, 1.0, true);
    backward(sum(x));
    backward(sum(x));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Backward, RejectsNonScalar) {
    Tensor x = Tensor::filled({1, 1, 2, 2}, 1.0, true);
    Tensor y = silu(x);
    EXPECT_THROW(backward(y), std::invalid_argument);
}

TEST(Backward, DetachedReceivesNoGradient) {
    Tensor x = Tensor::filled({1, 1, 2, 2}, 2.0, true);
    Tensor d = x.detach();
    Tensor y = sum(mul(d, d));
    EXPECT_FALSE(y.requires_grad());
    backward(sum(mul(x, d)));  // d used as a constant
    EXPECT_FALSE(d.has_grad());
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Gradcheck, QuadraticExact) {
    Rng rng(10);
    Tensor x = randn({1, 2, 3, 3}, rng);
    double err = gradcheck([](const Tensor& t) { return scale(sum(mul(t, t)), 0.5); }, x);
    EXPECT_LT(err, 1e-8);
}

TEST(Gradcheck, SiluConv) {
    Rng rng(11);
    Tensor x = randn({1, 2, 5, 5}, rng);
    Tensor w = randn({3, 2, 3, 3}, rng, 0.5);
    double err = gradcheck(
        [&](const Tensor& t) { return sum(silu(conv2d(t, w, Tensor(), {.stride = 1, .pad = 1}))); },
        x);
    EXPECT_LT(err, 1e-6);
}

TEST(Gradcheck, SoftmaxSumIsConstant) {
    Rng rng(12);
    Tensor x = randn({1, 1, 2, 4}, rng);
    double err = gradcheck([](const Tensor& t) { return sum(softmax(t, 3)); }, x);
    EXPECT_LT(err, 1e-6);
}

TEST(Gradcheck, ConvWeightsViaFiniteDifference) {
    Rng rng(13);
    Tensor x = randn({1, 2, 5, 5}, rng);
    Tensor w = randn({2, 2, 3, 3}, rng, 0.5);
    double err = gradcheck(
        [&](const Tensor& t) { return sum(conv2d(x, t, Tensor(), {.stride = 1, .pad = 1})); }, w);
    EXPECT_LT(err, 1e-6);
}

TEST(Gradcheck, DeconvAndUpsample) {
    Rng rng(14);
    Tensor x = randn({1, 2, 4, 4}, rng);
    Tensor w = randn({2, 3, 3, 3}, rng, 0.5);
    Tensor b = randn({1, 3, 1, 1}, rng, 0.1);
    double err = gradcheck(
        [&](const Tensor& t) {
            return sum(silu(deconv2d(t, w, b, {.stride = 2, .pad = 1, .output_padding = 1})));
        },
        x);
    EXPECT_LT(err, 1e-6);
    err = gradcheck([&](const Tensor& t) { return sum(mul(upsample_nearest2x(t), upsample_nearest2x(t))); }, x);
    EXPECT_LT(err, 1e-6);
}

TEST(Gradcheck, BatchnormTrainAndEval) {
    Rng rng(15);
    Tensor x = randn({2, 3, 4, 4}, rng);
    Tensor gamma = Tensor::filled({1, 3, 1, 1}, 1.2);
    Tensor beta = Tensor::filled({1, 3, 1, 1}, -0.3);
    BnBuffers running(3);
    running.mean = {0.1, -0.2, 0.4};
    running.var = {1.5, 0.7, 2.0};
    for (bool train : {true, false}) {
        double err = gradcheck(
            [&](const Tensor& t) {
                BnBuffers local = running;
                Tensor y = batchnorm(t, gamma, beta, local, train);
                return sum(mul(y, y));
            },
            x);
        EXPECT_LT(err, 1e-6) << "train=" << train;
    }
    // parameter gradients
    double err = gradcheck(
        [&](const Tensor& g) {
            BnBuffers local = running;
            Tensor y = batchnorm(x, g, beta, local, true);
            return sum(mul(y, y));
        },
        gamma);
    EXPECT_LT(err, 1e-6);
}

TEST(Gradcheck, ConcatRot90Exp) {
    Rng rng(16);
    Tensor x = randn({1, 2, 3, 3}, rng, 0.3);
    double err = gradcheck(
        [](const Tensor& t) {
            Tensor r = rot90(t, 1);
            Tensor c = concat({t, r}, 1);
            return sum(mul(exp_op(c), sigmoid(c)));
        },
        x);
    EXPECT_LT(err, 1e-6);
}

TEST(Gradcheck, RejectsNonScalarFn) {
    Tensor x = Tensor::filled({1, 1, 2, 2}, 1.0);
    EXPECT_THROW(gradcheck([](const Tensor& t) { return silu(t); }, x), std::invalid_argument);
}

// Eq.-style commutation: conv2d(rot90(x,k), f) == rot90(conv2d(x, rot90(f,4-k)), k)
// for stride-1, pad (k-1)/2, square inputs.
TEST(Commutation, RotationConv) {
    Rng rng(17);
    for (int trial = 0; trial < 25; ++trial) {
        Tensor x = randn({1, 2, 7, 7}, rng);
        Tensor f = randn({3, 2, 3, 3}, rng);
        for (int k = 0; k < 4; ++k) {
            Tensor lhs = conv2d(rot90(x, k), f, Tensor(), {.stride = 1, .pad = 1});
            Tensor rhs = rot90(conv2d(x, rot90(f, 4 - k), Tensor(), {.stride = 1, .pad = 1}), k);
            EXPECT_LT(max_abs_diff(lhs, rhs), 1e-10);
        }
    }
}

TEST(Serialization, RoundTrip) {
    Rng rng(18);
    Tensor x = randn({2, 3, 4, 5}, rng);
    std::stringstream ss;
    write_tensor(ss, x);
    Tensor y = read_tensor(ss);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(y.data(), x.data());  // bitwise
}

TEST(Serialization, RejectsBadMagic) {
    std::stringstream ss;
    ss << "NOTATEN1garbage";
    EXPECT_THROW(read_tensor(ss), std::runtime_error);
}

TEST(Tensor, InvariantChecks) {
    EXPECT_THROW(Tensor::zeros({0, 1, 1, 1}), std::invalid_argument);
    EXPECT_THROW(Tensor::from_data({1, 1, 2, 2}, {1.0}), std::invalid_argument);
    Tensor x = Tensor::filled({1, 1, 2, 2}, 1.0);
    EXPECT_THROW(x.item(), std::invalid_argument);
}
