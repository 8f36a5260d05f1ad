#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "nerd/fusion.hpp"
#include "test_util.hpp"

using namespace nerd;
using nerd::testing::check_op;
using nerd::testing::random_tensor;

namespace {

// Same-padded 3×3 convolution by direct summation.
std::vector<double> conv3x3_loop(const Tensor<double>& x, const Conv2d<double>& c) {
  const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3), O = c.weight.dim(0);
  std::vector<double> y(O * H * W);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double acc = c.bias.data()[o];
        for (std::size_t ci = 0; ci < C; ++ci)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              long ii = long(i) + di, jj = long(j) + dj;
              if (ii < 0 || jj < 0 || ii >= long(H) || jj >= long(W)) continue;
              acc += c.weight.data()[((o * C + ci) * 3 + di + 1) * 3 + dj + 1] * x.data()[(ci * H + ii) * W + jj];
            }
        y[(o * H + i) * W + j] = acc;
      }
  return y;
}

BfpuParams<double> random_params(std::size_t C, std::uint64_t seed) {
  ParamStore<double> store(seed);
  auto p = BfpuParams<double>::declare(store, "f", C);
  store.randomize(seed + 1, 0.4);
  return p;
}

}  // namespace

TEST(Bfpu, ZeroConvsGiveOnePointFive) {
  ParamStore<double> store(1);
  auto p = BfpuParams<double>::declare(store, "f", 3);
  for (auto* t : {&p.conv_a.weight, &p.conv_b.weight})
    for (auto& v : t->data_mut()) v = 0.0;
  auto fa = random_tensor({2, 3, 4, 5}, 1), fb = random_tensor({2, 3, 4, 5}, 2);
  auto out = bfpu(fa, fb, p);
  ASSERT_EQ(out.shape(), (Shape{2, 6, 4, 5}));
  const std::size_t half = 3 * 20;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < half; ++i) {
      EXPECT_NEAR(out.data()[n * 2 * half + i], 1.5 * fa.data()[n * half + i], 1e-6);
      EXPECT_NEAR(out.data()[n * 2 * half + half + i], 1.5 * fb.data()[n * half + i], 1e-6);
    }
}

TEST(Bfpu, ZeroInputsGiveZero) {
  auto p = random_params(4, 3);
  Tensor<double> z({1, 4, 3, 3}, 0.0);
  auto y = bfpu(z, z, p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Bfpu, MatchesElementwiseOracle) {
  auto p = random_params(3, 5);
  auto fa = random_tensor({1, 3, 4, 4}, 6), fb = random_tensor({1, 3, 4, 4}, 7);
  auto out = bfpu(fa, fb, p);
  auto ca = conv3x3_loop(fa, p.conv_a), cb = conv3x3_loop(fb, p.conv_b);
  for (std::size_t i = 0; i < ca.size(); ++i) {
    const double mid = 1.0 / (1.0 + std::exp(-ca[i] * cb[i]));
    EXPECT_NEAR(out.data()[i], fa.data()[i] * (1 + mid), 1e-12);
    EXPECT_NEAR(out.data()[ca.size() + i], fb.data()[i] * (1 + mid), 1e-12);
  }
}

TEST(Bfpu, ShapeMismatchThrows) {
  auto p = random_params(3, 8);
  EXPECT_THROW(bfpu(random_tensor({1, 3, 4, 4}, 1), random_tensor({1, 3, 4, 5}, 2), p), ShapeError);
}

TEST(Bfpu, BothHalvesDependOnBothInputs) {
  auto p = random_params(2, 9);
  for (std::size_t half = 0; half < 2; ++half) {
    auto fa = random_tensor({1, 2, 3, 3}, 10, true), fb = random_tensor({1, 2, 3, 3}, 11, true);
    ops::sum(ops::slice(bfpu(fa, fb, p), 1, half * 2, 2)).backward();
    double ga = 0, gb = 0;
    for (double g : fa.grad()) ga += std::abs(g);
    for (double g : fb.grad()) gb += std::abs(g);
    EXPECT_GT(ga, 0.0);
    EXPECT_GT(gb, 0.0);
  }
}

TEST(Bfpu, SwapSymmetryOnlyWithSharedConvs) {
  auto p = random_params(3, 12);
  auto fa = random_tensor({1, 3, 4, 4}, 13), fb = random_tensor({1, 3, 4, 4}, 14);
  const std::size_t half = 3 * 16;
  auto ab = bfpu(fa, fb, p), ba = bfpu(fb, fa, p);
  double diff = 0;
  for (std::size_t i = 0; i < half; ++i) diff = std::max(diff, std::abs(ab.data()[i] - ba.data()[half + i]));
  EXPECT_GT(diff, 1e-6);

  p.conv_b = p.conv_a;
  ab = bfpu(fa, fb, p);
  ba = bfpu(fb, fa, p);
  for (std::size_t i = 0; i < half; ++i) {
    EXPECT_EQ(ab.data()[i], ba.data()[half + i]);
    EXPECT_EQ(ab.data()[half + i], ba.data()[i]);
  }
}

TEST(Bfpu, Gradients) {
  auto p = random_params(2, 15);
  auto fa = random_tensor({1, 2, 3, 4}, 16, true), fb = random_tensor({1, 2, 3, 4}, 17, true);
  auto r = check_op([&] { return bfpu(fa, fb, p); },
                    {{"fa", fa}, {"fb", fb}, {"conv_a", p.conv_a.weight}, {"conv_b", p.conv_b.weight},
                     {"conv_a.bias", p.conv_a.bias}});
  EXPECT_TRUE(r.pass) << r.max_error();
}

TEST(Inject, IdentityZerosIsBitExactNoOp) {
  ParamStore<float> store(18);
  auto p = BfpuParams<float>::declare(store, "f", 8);
  auto b = random_tensor<float>({1, 8, 4, 4}, 19);
  for (auto fout : {random_tensor<float>({1, 16, 8, 8}, 20), Tensor<float>({1, 16, 8, 8}, 0.0f)}) {
    auto y = inject(b, fout, p);
    ASSERT_EQ(y.shape(), b.shape());
    EXPECT_EQ(std::memcmp(y.data().data(), b.data().data(), b.numel() * sizeof(float)), 0);
  }
}

TEST(Inject, PaperShapes) {
  ParamStore<float> store(21);
  auto p = BfpuParams<float>::declare(store, "f", 192);
  auto y = inject(Tensor<float>({1, 192, 8, 8}, 0.1f), Tensor<float>({1, 384, 16, 16}, 0.2f), p);
  EXPECT_EQ(y.shape(), (Shape{1, 192, 8, 8}));
}

TEST(Inject, ChannelMismatchThrows) {
  ParamStore<float> store(22);
  auto p = BfpuParams<float>::declare(store, "f", 8);
  EXPECT_THROW(inject(Tensor<float>({1, 8, 4, 4}), Tensor<float>({1, 12, 8, 8}), p), ShapeError);
}

TEST(Inject, Gradients) {
  auto p = random_params(2, 23);
  auto b = random_tensor({1, 2, 3, 3}, 24, true), f = random_tensor({1, 4, 6, 6}, 25, true);
  auto r = check_op([&] { return inject(b, f, p); }, {{"b", b}, {"f", f}, {"inject", p.inject.weight}});
  EXPECT_TRUE(r.pass) << r.max_error();
}

TEST(ConcatFeedback, StacksInputs) {
  auto fa = random_tensor({1, 2, 3, 3}, 26), fb = random_tensor({1, 2, 3, 3}, 27);
  auto y = concat_feedback(fa, fb);
  for (std::size_t i = 0; i < 18; ++i) {
    EXPECT_EQ(y.data()[i], fa.data()[i]);
    EXPECT_EQ(y.data()[18 + i], fb.data()[i]);
  }
}
