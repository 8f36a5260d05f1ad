#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "nerd/fft.hpp"
#include "nerd/gradcheck.hpp"
#include "nerd/ops.hpp"
#include "test_util.hpp"

using namespace nerd;
using nerd::testing::check_op;
using nerd::testing::random_tensor;

namespace {

// Direct O(N^2) 2-D DFT, kept independent of the radix-2 kernel.
std::vector<std::complex<double>> direct_dft(const std::vector<double>& x, std::size_t H, std::size_t W) {
  std::vector<std::complex<double>> out(H * W);
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      std::complex<double> acc = 0;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          double ang = -2.0 * std::numbers::pi * (double(u * y) / H + double(v * xx) / W);
          acc += x[y * W + xx] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      out[u * W + v] = acc;
    }
  return out;
}

}  // namespace

TEST(Conv2d, IdentityKernelReturnsInput) {
  auto x = random_tensor({1, 1, 3, 3}, 1);
  Tensor<double> k({1, 1, 1, 1}, 1.0);
  auto y = ops::conv2d(x, k);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, ZeroKernelGivesZeroSameSize) {
  auto x = random_tensor({2, 3, 5, 6}, 2);
  Tensor<double> k({4, 3, 3, 3}, 0.0);
  auto y = ops::conv2d(x, k, {}, 1, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 5, 6}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, BoxKernelMatchesWindowMeans) {
  std::vector<double> ramp(16);
  for (std::size_t i = 0; i < 16; ++i) ramp[i] = double(i);
  Tensor<double> x({1, 1, 4, 4}, ramp);
  Tensor<double> k({1, 1, 3, 3}, 1.0 / 9.0);
  auto y = ops::conv2d(x, k);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) s += ramp[(i + a) * 4 + j + b];
      EXPECT_NEAR(y.at({0, 0, i, j}), s / 9.0, 1e-12);
    }
}

TEST(Conv2d, OutputShapeFormulaAndOddKernelPreservesSize) {
  auto x = random_tensor({1, 2, 7, 9}, 3);
  auto y = ops::conv2d(x, random_tensor({3, 2, 3, 3}, 4), {}, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 5}));
  for (std::size_t k : {1u, 3u, 5u}) {
    auto z = ops::conv2d(x, random_tensor({1, 2, k, k}, 5), {}, 1, (k - 1) / 2);
    EXPECT_EQ(z.dim(2), 7u);
    EXPECT_EQ(z.dim(3), 9u);
  }
}

TEST(Conv2d, RejectsBadArguments) {
  auto x = random_tensor({1, 2, 5, 5}, 3);
  EXPECT_THROW(ops::conv2d(x, random_tensor({1, 3, 3, 3}, 1)), ShapeError);
  EXPECT_THROW(ops::conv2d(x, random_tensor({1, 2, 3, 3}, 1), {}, 0, 1), ShapeError);
}

TEST(BilinearResize, ConstantImageStaysConstant) {
  Tensor<double> x({1, 2, 5, 7}, 0.37);
  for (auto [h, w] : {std::pair{3, 2}, std::pair{10, 14}, std::pair{1, 1}, std::pair{9, 4}}) {
    auto y = ops::bilinear_resize(x, h, w);
    for (double v : y.data()) EXPECT_NEAR(v, 0.37, 1e-15);
  }
}

TEST(BilinearResize, TwoByTwoToOneIsMean) {
  Tensor<double> x({1, 1, 2, 2}, {0.1, 0.7, 0.3, 0.9});
  auto y = ops::bilinear_resize(x, 1, 1);
  EXPECT_NEAR(y.item(), (0.1 + 0.7 + 0.3 + 0.9) / 4, 1e-15);
}

TEST(BilinearResize, SameSizeIsIdentityAndHalvingShape) {
  auto x = random_tensor({1, 3, 8, 12}, 6);
  auto y = ops::bilinear_resize(x, 8, 12);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-12);
  EXPECT_EQ(ops::bilinear_resize(x, 4, 6).shape(), (Shape{1, 3, 4, 6}));
  EXPECT_THROW(ops::bilinear_resize(x, 0, 3), ShapeError);
}

TEST(Fft2, ConstantImageHasOnlyDc) {
  const double c = 0.625;
  std::vector<double> plane(6 * 8, c);
  auto spec = fft::forward<double>(plane, 6, 8);
  EXPECT_NEAR(spec[0].real(), c * 48, 1e-12);
  for (std::size_t i = 1; i < spec.size(); ++i) EXPECT_NEAR(std::abs(spec[i]), 0.0, 1e-12);
}

TEST(Fft2, ImpulseIsFlat) {
  std::vector<double> plane(8 * 8, 0.0);
  plane[0] = 1.0;
  for (auto z : fft::forward<double>(plane, 8, 8)) {
    EXPECT_NEAR(z.real(), 1.0, 1e-14);
    EXPECT_NEAR(z.imag(), 0.0, 1e-14);
  }
}

TEST(Fft2, MatchesDirectDftAndParseval) {
  for (auto [H, W] : {std::pair<std::size_t, std::size_t>{4, 4}, {6, 5}, {8, 16}}) {
    auto v = nerd::testing::random_values(H * W, H * 31 + W);
    auto spec = fft::forward<double>(v, H, W);
    auto ref = direct_dft(v, H, W);
    double e_spec = 0, e_img = 0;
    for (std::size_t i = 0; i < H * W; ++i) {
      EXPECT_NEAR(std::abs(spec[i] - ref[i]), 0.0, 1e-10);
      e_spec += std::norm(ref[i]);
      e_img += v[i] * v[i];
    }
    EXPECT_NEAR(e_spec, double(H * W) * e_img, 1e-9 * e_spec);
  }
}

TEST(Fft2, RoundTripReconstructs) {
  for (auto [H, W] : {std::pair<std::size_t, std::size_t>{16, 16}, {12, 7}}) {
    auto v = nerd::testing::random_values(H * W, 17);
    auto back = fft::inverse(fft::forward<double>(v, H, W), H, W);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      num += std::norm(back[i] - v[i]);
      den += v[i] * v[i];
    }
    EXPECT_LT(std::sqrt(num / den), 1e-9);
  }
}

TEST(GradCheck, QuadraticMatchesAnalytic) {
  Tensor<double> theta({2}, {1.0, 2.0}, true);
  auto report = grad_check<double>([&] { return ops::sum(ops::mul(theta, theta)); }, {{"theta", theta}});
  theta.zero_grad();
  ops::sum(ops::mul(theta, theta)).backward();
  EXPECT_DOUBLE_EQ(theta.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(theta.grad()[1], 4.0);
  EXPECT_TRUE(report.pass);
  EXPECT_LT(report.max_error(), 1e-8);
}

TEST(GradCheck, LinearIsExactForAnyEps) {
  Tensor<double> theta({3}, {0.5, -1.0, 3.0}, true);
  for (double eps : {1e-6, 1e-2, 0.5}) {
    GradCheckOptions opt;
    opt.eps = eps;
    auto r = grad_check<double>([&] { return ops::sum(theta); }, {{"theta", theta}}, opt);
    EXPECT_LT(r.max_error(), 1e-8) << eps;
  }
}

TEST(GradCheck, DetectsWrongGradient) {
  Tensor<double> theta({2}, {1.0, 2.0}, true);
  // value of x^2 with a deliberately wrong adjoint
  auto bad = [&] {
    double s = 0;
    for (double v : theta.data()) s += v * v;
    return Tensor<double>::make({1}, {s}, {theta}, [](Node<double>& n) {
      auto* g = grad_sink(n, 0);
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 3.0 * n.inputs[0]->value[i];
    });
  };
  EXPECT_FALSE(grad_check<double>(bad, {{"theta", theta}}).pass);
}

TEST(GradCheck, NonFiniteLossThrows) {
  Tensor<double> theta({1}, {-1.0}, true);
  auto f = [&] {
    double v = std::log(theta.data()[0]);
    return Tensor<double>::make({1}, {v}, {theta}, [](Node<double>&) {});
  };
  EXPECT_THROW(grad_check<double>(f, {{"theta", theta}}), NumericError);
}

// Every differentiable op: reverse mode vs central differences.
TEST(OpGradients, Elementwise) {
  auto a = random_tensor({2, 3, 4}, 11, true);
  auto b = random_tensor({2, 3, 4}, 12, true);
  EXPECT_TRUE(check_op([&] { return ops::add(a, b); }, {{"a", a}, {"b", b}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::sub(a, b); }, {{"a", a}, {"b", b}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::mul(a, b); }, {{"a", a}, {"b", b}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::scale(a, 1.7); }, {{"a", a}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::sigmoid(a); }, {{"a", a}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::gelu(a); }, {{"a", a}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::relu(a); }, {{"a", a}}).pass);
  auto s = random_tensor({3}, 13, true);
  EXPECT_TRUE(check_op([&] { return ops::mul_axis(a, s, 1); }, {{"a", a}, {"s", s}}).pass);
}

TEST(OpGradients, Structural) {
  auto a = random_tensor({2, 3, 4, 4}, 21, true);
  auto b = random_tensor({2, 5, 4, 4}, 22, true);
  EXPECT_TRUE(check_op([&] { return ops::concat<double>({a, b}, 1); }, {{"a", a}, {"b", b}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::slice(b, 1, 1, 3); }, {{"b", b}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::reshape(a, {6, 16}); }, {{"a", a}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::pixel_unshuffle(a, 2); }, {{"a", a}}).pass);
  auto c = random_tensor({1, 8, 3, 2}, 23, true);
  EXPECT_TRUE(check_op([&] { return ops::pixel_shuffle(c, 2); }, {{"c", c}}).pass);
  auto d = random_tensor({1, 2, 5, 6}, 24, true);
  EXPECT_TRUE(check_op([&] { return ops::pad_reflect(d, 1, 2, 3, 1); }, {{"d", d}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::crop(d, 1, 2, 3, 3); }, {{"d", d}}).pass);
}

TEST(OpGradients, PixelShuffleInvertsUnshuffle) {
  auto a = random_tensor({2, 3, 4, 6}, 25);
  auto back = ops::pixel_shuffle(ops::pixel_unshuffle(a, 2), 2);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(back.data()[i], a.data()[i]);
}

TEST(OpGradients, ConvolutionsAndResize) {
  auto x = random_tensor({2, 3, 6, 5}, 31, true);
  auto w = random_tensor({4, 3, 3, 3}, 32, true);
  auto b = random_tensor({4}, 33, true);
  EXPECT_TRUE(check_op([&] { return ops::conv2d(x, w, b, 1, 1); }, {{"x", x}, {"w", w}, {"b", b}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::conv2d(x, w, b, 2, 1); }, {{"x", x}, {"w", w}, {"b", b}}).pass);
  auto w1 = random_tensor({2, 3, 1, 1}, 34, true);
  EXPECT_TRUE(check_op([&] { return ops::conv2d(x, w1); }, {{"x", x}, {"w1", w1}}).pass);
  auto dw = random_tensor({3, 1, 3, 3}, 35, true);
  auto db = random_tensor({3}, 36, true);
  EXPECT_TRUE(check_op([&] { return ops::depthwise_conv2d(x, dw, db, 1); }, {{"x", x}, {"dw", dw}, {"db", db}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::bilinear_resize(x, 3, 9); }, {{"x", x}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::bilinear_resize(x, 11, 2); }, {{"x", x}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::laplacian(x); }, {{"x", x}}).pass);
}

TEST(OpGradients, MatrixAndNormalisation) {
  auto a = random_tensor({2, 3, 4, 5}, 41, true);
  auto b = random_tensor({2, 3, 5, 2}, 42, true);
  auto bt = random_tensor({2, 3, 6, 5}, 43, true);
  EXPECT_TRUE(check_op([&] { return ops::bmm(a, b); }, {{"a", a}, {"b", b}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::bmm(a, bt, true); }, {{"a", a}, {"bt", bt}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::softmax_last(a); }, {{"a", a}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::l2_normalize_last(a); }, {{"a", a}}).pass);
  auto x = random_tensor({7, 5}, 44, true);
  auto w = random_tensor({3, 5}, 45, true);
  auto bias = random_tensor({3}, 46, true);
  EXPECT_TRUE(check_op([&] { return ops::linear(x, w, bias); }, {{"x", x}, {"w", w}, {"b", bias}}).pass);
  auto f = random_tensor({2, 4, 3, 3}, 47, true);
  auto g = random_tensor({4}, 48, true);
  auto h = random_tensor({4}, 49, true);
  EXPECT_TRUE(check_op([&] { return ops::layer_norm_channels(f, g, h); }, {{"f", f}, {"g", g}, {"h", h}}).pass);
}

TEST(OpGradients, LossesAndSpectrum) {
  auto a = random_tensor({1, 2, 4, 8}, 51, true);
  auto b = random_tensor({1, 2, 4, 8}, 52, true);
  EXPECT_TRUE(check_op([&] { return ops::charbonnier_mean(a, b, 1e-3); }, {{"a", a}, {"b", b}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::l1_mean(a, b); }, {{"a", a}, {"b", b}}).pass);
  EXPECT_TRUE(check_op([&] { return ops::abs_sum(a); }, {{"a", a}}).pass);
  EXPECT_TRUE(check_op([&] { return fft::fft2(a); }, {{"a", a}}).pass);
  auto c = random_tensor({1, 1, 6, 5}, 53, true);
  EXPECT_TRUE(check_op([&] { return fft::fft2(c); }, {{"c", c}}).pass);
}

TEST(Softmax, RowsSumToOne) {
  auto y = ops::softmax_last(random_tensor({3, 7}, 61, false, -20, 20));
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += y.data()[r * 7 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autograd, SharedInputAccumulates) {
  auto a = random_tensor({4}, 71, true);
  auto y = ops::sum(ops::add(ops::mul(a, a), a));
  y.backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.grad()[i], 2 * a.data()[i] + 1, 1e-14);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  auto a = random_tensor({4}, 72, true);
  NoGradGuard guard;
  auto y = ops::sum(ops::mul(a, a));
  EXPECT_FALSE(y.requires_grad());
}
