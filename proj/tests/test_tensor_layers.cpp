#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"

using namespace crackseg;
using testutil::away_from_zero;
using testutil::max_fd_error;
using testutil::random_tensor;

namespace {

constexpr double kGradTol = 1e-5;

// Naive convolution straight from the definition, used as an oracle.
Tensor<double> conv_oracle(const Tensor<double>& x, const ConvParams<double>& p) {
    const auto shape = conv2d_output_shape(x, p);
    Tensor<double> out(shape);
    for (std::size_t n = 0; n < out.batch(); ++n)
        for (std::size_t oh = 0; oh < out.height(); ++oh)
            for (std::size_t ow = 0; ow < out.width(); ++ow)
                for (std::size_t k = 0; k < p.out_channels(); ++k) {
                    double s = p.biases[k];
                    for (std::size_t i = 0; i < p.kernel_rows(); ++i)
                        for (std::size_t j = 0; j < p.kernel_cols(); ++j)
                            for (std::size_t c = 0; c < x.channels(); ++c) {
                                const long ih = static_cast<long>(oh * p.stride.rows + i) - static_cast<long>(p.padding.rows);
                                const long iw = static_cast<long>(ow * p.stride.cols + j) - static_cast<long>(p.padding.cols);
                                if (ih < 0 || iw < 0 || ih >= static_cast<long>(x.height()) ||
                                    iw >= static_cast<long>(x.width()))
                                    continue;
                                s += x.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), c) *
                                     p.kernels.at(i, j, c, k);
                            }
                    out.at(n, oh, ow, k) = s;
                }
    return out;
}

ConvParams<double> random_conv(std::size_t kr, std::size_t kc, std::size_t cin, std::size_t cout, Stride s, Padding p,
                               std::mt19937_64& g) {
    return {random_tensor({kr, kc, cin, cout}, g), random_tensor({cout}, g), s, p};
}

}  // namespace

TEST(Tensor, ShapeAndAccess) {
    Tensor<float> t({2, 3, 4, 5});
    EXPECT_EQ(t.size(), 120u);
    EXPECT_EQ(t.batch(), 2u);
    EXPECT_EQ(t.height(), 3u);
    EXPECT_EQ(t.width(), 4u);
    EXPECT_EQ(t.channels(), 5u);
    t.at(1, 2, 3, 4) = 7.0f;
    EXPECT_EQ(t[119], 7.0f);
    Tensor<float> img({3, 4, 5});
    EXPECT_EQ(img.batch(), 1u);
    EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), RejectedInput);
}

TEST(Conv2d, BoxSumsWithPadding) {
    Tensor<double> x({3, 3, 1}, 1.0);
    auto p = ConvParams<double>::zeros(3, 3, 1, 1, {1, 1}, {1, 1});
    p.kernels.fill(1.0);
    const auto y = conv2d_forward(x, p);
    ASSERT_EQ(y.shape(), (Shape{3, 3, 1}));
    EXPECT_DOUBLE_EQ(y.at(1, 1, 0), 9.0);
    EXPECT_DOUBLE_EQ(y.at(0, 1, 0), 6.0);
    EXPECT_DOUBLE_EQ(y.at(1, 0, 0), 6.0);
    EXPECT_DOUBLE_EQ(y.at(0, 0, 0), 4.0);
    EXPECT_DOUBLE_EQ(y.at(2, 2, 0), 4.0);
}

TEST(Conv2d, IdentityKernel) {
    std::mt19937_64 g(1);
    const auto x = random_tensor({5, 4, 1}, g);
    auto p = ConvParams<double>::zeros(1, 1, 1, 1);
    p.kernels[0] = 1.0;
    EXPECT_EQ(conv2d_forward(x, p), x);
}

TEST(Conv2d, DotProductExample) {
    Tensor<double> x({2, 2, 1}, {1, 2, 3, 4});
    auto p = ConvParams<double>::zeros(2, 2, 1, 1);
    p.kernels = Tensor<double>({2, 2, 1, 1}, {1, 0, 0, 1});
    p.biases[0] = 0.5;
    const auto y = conv2d_forward(x, p);
    ASSERT_EQ(y.size(), 1u);
    EXPECT_DOUBLE_EQ(y[0], 5.5);
}

TEST(Conv2d, MatchesNaiveOracle) {
    std::mt19937_64 g(2);
    for (auto [s, pad] : {std::pair{Stride{1, 1}, Padding{1, 1}}, std::pair{Stride{2, 2}, Padding{0, 0}},
                          std::pair{Stride{1, 2}, Padding{2, 0}}}) {
        const auto x = random_tensor({2, 7, 9, 3}, g);
        const auto p = random_conv(3, 3, 3, 4, s, pad, g);
        const auto a = conv2d_forward(x, p);
        const auto b = conv_oracle(x, p);
        ASSERT_EQ(a.shape(), b.shape());
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    }
}

TEST(Conv2d, Errors) {
    auto p = ConvParams<double>::zeros(3, 3, 2, 1);
    EXPECT_THROW(conv2d_forward(Tensor<double>({4, 4, 3}), p), RejectedInput);
    Tensor<double> bad({4, 4, 2});
    bad[3] = std::nan("");
    EXPECT_THROW(conv2d_forward(bad, p), RejectedInput);
    bad[3] = INFINITY;
    EXPECT_THROW(conv2d_forward(bad, p), RejectedInput);
    Tensor<double> x({4, 4, 2});
    EXPECT_THROW(conv2d_backward(x, p, Tensor<double>({4, 4, 1})), RejectedInput);
    auto strided = ConvParams<double>::zeros(3, 3, 2, 1, {2, 2}, {0, 0});
    EXPECT_THROW(conv2d_forward(x, strided), RejectedInput);
}

TEST(Conv2d, ZeroGradOutGivesZeroGrads) {
    std::mt19937_64 g(3);
    const auto x = random_tensor({5, 5, 2}, g);
    const auto p = random_conv(3, 3, 2, 3, {1, 1}, {1, 1}, g);
    const auto gr = conv2d_backward(x, p, Tensor<double>(conv2d_output_shape(x, p)));
    for (const auto* t : {&gr.x, &gr.kernels, &gr.biases})
        for (double v : t->values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, FiniteDifferences) {
    std::mt19937_64 g(4);
    for (auto [s, pad] : {std::pair{Stride{1, 1}, Padding{1, 1}}, std::pair{Stride{2, 1}, Padding{0, 1}}}) {
        auto x = random_tensor({2, 5, 6, 2}, g);
        auto p = random_conv(3, 3, 2, 3, s, pad, g);
        const auto r = random_tensor(conv2d_output_shape(x, p), g);
        auto loss = [&] { return dot(conv2d_forward(x, p), r); };
        const auto gr = conv2d_backward(x, p, r);
        EXPECT_LT(max_fd_error(x, loss, gr.x), kGradTol);
        EXPECT_LT(max_fd_error(p.kernels, loss, gr.kernels), kGradTol);
        EXPECT_LT(max_fd_error(p.biases, loss, gr.biases), kGradTol);
    }
}

TEST(Conv2d, AdjointIdentity) {
    // <conv(x), y> = <x, conv^T(y)> for a bias-free convolution.
    std::mt19937_64 g(5);
    const auto x = random_tensor({1, 7, 7, 3}, g);
    auto p = random_conv(3, 3, 3, 4, {2, 2}, {1, 1}, g);
    p.biases.fill(0.0);
    const auto y = random_tensor(conv2d_output_shape(x, p), g);
    const double lhs = dot(conv2d_forward(x, p), y);
    const double rhs = dot(x, conv2d_backward(x, p, y).x);
    EXPECT_NEAR(lhs, rhs, 1e-12 * std::max(1.0, std::abs(lhs)));
}

TEST(Relu, Examples) {
    Tensor<double> x({1, 1, 3}, {-1, 0, 2});
    EXPECT_EQ(relu(x), Tensor<double>({1, 1, 3}, {0, 0, 2}));
    std::mt19937_64 g(6);
    const auto pos = random_tensor({3, 3, 2}, g, 0.0, 1.0);
    EXPECT_EQ(relu(pos), pos);
}

TEST(Relu, FiniteDifferences) {
    std::mt19937_64 g(7);
    auto x = away_from_zero({4, 4, 3}, g);
    const auto r = random_tensor(x.shape(), g);
    auto loss = [&] { return dot(relu(x), r); };
    EXPECT_LT(max_fd_error(x, loss, relu_backward(x, r)), kGradTol);
}

TEST(MaxPool, Examples) {
    Tensor<double> x({2, 2, 1}, {1, 2, 3, 4});
    const auto r = maxpool2x2(x);
    ASSERT_EQ(r.output.size(), 1u);
    EXPECT_EQ(r.output[0], 4.0);
    EXPECT_EQ(r.argmax[0], x.offset(0, 1, 1, 0));

    Tensor<double> c({4, 4, 1}, 2.0);
    const auto rc = maxpool2x2(c);
    for (double v : rc.output.values()) EXPECT_EQ(v, 2.0);
    const auto back = maxpool_backward(rc.argmax, rc.input_shape, Tensor<double>(rc.output.shape(), 1.0));
    for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 4; ++w) EXPECT_EQ(back.at(h, w, 0), (h % 2 == 0 && w % 2 == 0) ? 1.0 : 0.0);

    EXPECT_THROW(maxpool2x2(Tensor<double>({3, 4, 1})), RejectedInput);
    EXPECT_THROW(maxpool2x2(Tensor<double>({4, 5, 1})), RejectedInput);
}

TEST(MaxPool, FiniteDifferences) {
    std::mt19937_64 g(8);
    auto x = random_tensor({2, 6, 4, 3}, g);
    const auto r0 = maxpool2x2(x);
    const auto r = random_tensor(r0.output.shape(), g);
    auto loss = [&] { return dot(maxpool2x2(x).output, r); };
    EXPECT_LT(max_fd_error(x, loss, maxpool_backward(r0.argmax, r0.input_shape, r)), kGradTol);
}

TEST(TransposedConv, SingleScatter) {
    Tensor<double> x({1, 1, 1}, {3});
    auto p = ConvParams<double>::zeros(2, 2, 1, 1, {2, 2}, {0, 0});
    p.kernels = Tensor<double>({2, 2, 1, 1}, {1, 2, 3, 4});
    const auto y = transposed_conv2x2_forward(x, p);
    EXPECT_EQ(y, Tensor<double>({2, 2, 1}, {3, 6, 9, 12}));
}

TEST(TransposedConv, ZeroInputBroadcastsBias) {
    auto p = ConvParams<double>::zeros(2, 2, 2, 3, {2, 2}, {0, 0});
    p.biases = Tensor<double>({3}, {0.5, -1, 2});
    const auto y = transposed_conv2x2_forward(Tensor<double>({3, 2, 2}), p);
    ASSERT_EQ(y.shape(), (Shape{6, 4, 3}));
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], p.biases[i % 3]);
}

TEST(TransposedConv, FiniteDifferencesAndErrors) {
    std::mt19937_64 g(9);
    auto x = random_tensor({2, 3, 2, 3}, g);
    ConvParams<double> p{random_tensor({2, 2, 3, 2}, g), random_tensor({2}, g), {2, 2}, {0, 0}};
    const auto r = random_tensor({2, 6, 4, 2}, g);
    auto loss = [&] { return dot(transposed_conv2x2_forward(x, p), r); };
    const auto gr = transposed_conv2x2_backward(x, p, r);
    EXPECT_LT(max_fd_error(x, loss, gr.x), kGradTol);
    EXPECT_LT(max_fd_error(p.kernels, loss, gr.kernels), kGradTol);
    EXPECT_LT(max_fd_error(p.biases, loss, gr.biases), kGradTol);
    EXPECT_THROW(transposed_conv2x2_forward(random_tensor({2, 2, 2}, g), p), RejectedInput);
    EXPECT_THROW(transposed_conv2x2_backward(x, p, Tensor<double>({2, 6, 5, 2})), RejectedInput);
}

TEST(Concat, ShapesAndSplit) {
    std::mt19937_64 g(10);
    const auto a = random_tensor({4, 4, 2}, g);
    const auto b = random_tensor({4, 4, 3}, g);
    const auto c = concat_depth(a, b);
    EXPECT_EQ(c.shape(), (Shape{4, 4, 5}));
    EXPECT_EQ(c.at(2, 3, 1), a.at(2, 3, 1));
    EXPECT_EQ(c.at(2, 3, 4), b.at(2, 3, 2));
    const auto [ga, gb] = split_depth(c, 2);
    EXPECT_EQ(ga, a);
    EXPECT_EQ(gb, b);
    EXPECT_THROW(concat_depth(a, random_tensor({4, 2, 3}, g)), RejectedInput);
}

TEST(Dropout, InferAndZeroRateAreIdentity) {
    std::mt19937_64 g(11);
    const auto x = random_tensor({4, 4, 3}, g);
    Rng rng(1);
    EXPECT_EQ(dropout(x, 0.5, Mode::infer, rng).output, x);
    EXPECT_EQ(dropout(x, 0.0, Mode::train, rng).output, x);
    EXPECT_EQ(dropout(x, 0.0, Mode::infer, rng).output, x);
    EXPECT_THROW(dropout(x, 1.0, Mode::train, rng), RejectedInput);
    EXPECT_THROW(dropout(x, -0.1, Mode::train, rng), RejectedInput);
}

TEST(Dropout, ExpectationPreservedOverManyElements) {
    const std::size_t n = 1'000'000;
    Tensor<double> x({1000, 1000, 1}, 1.0);
    Rng rng(12);
    const auto r = dropout(x, 0.5, Mode::train, rng);
    double sum = 0.0;
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sum += r.output[i];
        dropped += r.output[i] == 0.0;
        ASSERT_TRUE(r.output[i] == 0.0 || r.output[i] == 2.0);
    }
    // Binomial sd of the mean is 1e-3; allow 5 sd.
    EXPECT_NEAR(sum / n, 1.0, 5e-3);
    EXPECT_NEAR(static_cast<double>(dropped) / n, 0.5, 2.5e-3);
}

TEST(Dropout, FiniteDifferencesWithFixedMask) {
    std::mt19937_64 g(13);
    auto x = random_tensor({3, 3, 4}, g);
    Rng rng(14);
    const auto mask = dropout(x, 0.3, Mode::train, rng).mask;
    const auto r = random_tensor(x.shape(), g);
    auto loss = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * mask[i] * r[i];
        return s;
    };
    EXPECT_LT(max_fd_error(x, loss, dropout_backward(mask, r)), kGradTol);
}

TEST(Softmax, Examples) {
    const auto p = softmax_channels(Tensor<double>({1, 1, 3}, {0, 0, 0}));
    for (double v : p.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    const auto q = softmax_channels(Tensor<double>({1, 1, 2}, {0, std::numbers::ln2}));
    EXPECT_NEAR(q[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(q[1], 2.0 / 3.0, 1e-15);
    const auto big = softmax_channels(Tensor<double>({1, 1, 2}, {1000, 0}));
    EXPECT_TRUE(big.all_finite());
    EXPECT_NEAR(big[0], 1.0, 1e-15);
}

TEST(Softmax, FiniteDifferences) {
    std::mt19937_64 g(15);
    auto z = random_tensor({2, 3, 3, 4}, g, -3.0, 3.0);
    const auto r = random_tensor(z.shape(), g);
    auto loss = [&] { return dot(softmax_channels(z), r); };
    EXPECT_LT(max_fd_error(z, loss, softmax_backward(softmax_channels(z), r)), kGradTol);
}
