#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "nerd/losses.hpp"
#include "nerd/model_check.hpp"
#include "test_util.hpp"

using namespace nerd;
using nerd::testing::check_op;
using nerd::testing::random_tensor;

namespace {

double direct_spectral_l1(const std::vector<double>& d, std::size_t H, std::size_t W) {
  double s = 0;
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      std::complex<double> acc = 0;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          double ang = -2.0 * std::numbers::pi * (double(u * y) / H + double(v * x) / W);
          acc += d[y * W + x] * std::polar(1.0, ang);
        }
      s += (std::abs(acc.real()) + std::abs(acc.imag())) / double(H * W);
    }
  return s;
}

}  // namespace

TEST(Charbonnier, EqualInputsGiveEps) {
  auto a = random_tensor({1, 3, 5, 5}, 1);
  EXPECT_NEAR(charbonnier(a, a).item(), 1e-3, 1e-15);
}

TEST(Charbonnier, UniformDifference) {
  Tensor<double> a({1, 1, 4, 4}, 0.5), b({1, 1, 4, 4}, 0.2);
  EXPECT_NEAR(charbonnier(a, b).item(), std::sqrt(0.09 + 1e-6), 1e-12);
  EXPECT_NEAR(charbonnier(a, b).item(), 0.3000017, 1e-7);
}

TEST(Charbonnier, MonotoneInDifference) {
  Tensor<double> g({1, 1, 3, 3}, 0.0), p1({1, 1, 3, 3}, 0.1), p2({1, 1, 3, 3}, 0.2);
  EXPECT_LT(charbonnier(p1, g).item(), charbonnier(p2, g).item());
  EXPECT_THROW(charbonnier(g, Tensor<double>({1, 1, 3, 4})), ShapeError);
}

TEST(FrequencyLoss, EqualInputsGiveZero) {
  auto a = random_tensor({1, 3, 8, 8}, 2);
  EXPECT_EQ(frequency_loss(a, a).item(), 0.0);
}

TEST(FrequencyLoss, ConstantOffsetHitsOnlyDc) {
  auto g = random_tensor({1, 1, 4, 4}, 3);
  auto p = ops::add_scalar(g, 0.25);
  EXPECT_NEAR(frequency_loss(p, g).item(), 0.25 / 16, 1e-12);
}

TEST(FrequencyLoss, MatchesDirectDft) {
  auto p = random_tensor({1, 1, 4, 4}, 4), g = random_tensor({1, 1, 4, 4}, 5);
  std::vector<double> d(16);
  for (int i = 0; i < 16; ++i) d[i] = p.data()[i] - g.data()[i];
  EXPECT_NEAR(frequency_loss(p, g).item(), direct_spectral_l1(d, 4, 4) / 16, 1e-9);

  // Non power-of-two extents and several channels.
  auto p3 = random_tensor({2, 3, 5, 6}, 6), g3 = random_tensor({2, 3, 5, 6}, 7);
  double acc = 0;
  for (std::size_t plane = 0; plane < 6; ++plane) {
    std::vector<double> dd(30);
    for (int i = 0; i < 30; ++i) dd[i] = p3.data()[plane * 30 + i] - g3.data()[plane * 30 + i];
    acc += direct_spectral_l1(dd, 5, 6);
  }
  EXPECT_NEAR(frequency_loss(p3, g3).item(), acc / 180, 1e-9);
}

TEST(FrequencyLoss, PositiveHomogeneity) {
  auto x = random_tensor({1, 2, 4, 4}, 8), y = random_tensor({1, 2, 4, 4}, 9);
  const double a = 2.5;
  EXPECT_NEAR(frequency_loss(ops::scale(x, a), ops::scale(y, a)).item(), a * frequency_loss(x, y).item(), 1e-12);
}

TEST(EdgeLoss, EqualAndConstantInputs) {
  auto a = random_tensor({1, 3, 6, 6}, 10);
  EXPECT_NEAR(edge_loss(a, a).item(), 1e-3, 1e-15);
  Tensor<double> c1({1, 3, 6, 6}, 0.2), c2({1, 3, 6, 6}, 0.7);
  EXPECT_NEAR(edge_loss(c1, c2).item(), 1e-3, 1e-15);
}

TEST(EdgeLoss, CentredImpulse) {
  const std::size_t S = 7;
  const double h = 0.5, e = 1e-3;
  Tensor<double> flat({1, 1, S, S}, 0.3);
  auto v = flat.values();
  v[3 * S + 3] += h;
  Tensor<double> bumped(flat.shape(), v);
  // The kernel response is -4h at the centre and +h at its four neighbours.
  const double expect = (std::sqrt(16 * h * h + e * e) + 4 * std::sqrt(h * h + e * e) + (S * S - 5) * e) / (S * S);
  EXPECT_NEAR(edge_loss(bumped, flat).item(), expect, 1e-12);
}

TEST(InrLoss, Cases) {
  auto t1 = random_tensor({1, 3, 4, 4}, 11), t2 = random_tensor({1, 3, 8, 8}, 12);
  EXPECT_EQ(inr_loss<double>({t1, t2}, {t1, t2}).item(), 0.0);
  EXPECT_NEAR(inr_loss<double>({ops::add_scalar(t1, 0.1), t2}, {t1, t2}).item(), 0.1, 1e-12);
  auto a = random_tensor({1, 3, 4, 4}, 13);
  EXPECT_EQ(inr_loss<double>({a}, {t1}).item(), inr_loss<double>({t1}, {a}).item());
  EXPECT_THROW(inr_loss<double>({a}, {}), ShapeError);
}

TEST(TotalLoss, UnitComponentsGiveWeightedSum) {
  auto one = Tensor<double>::scalar(1.0);
  EXPECT_NEAR(weighted_total(one, one, one, one, LossWeights{}).item(), 1.16, 1e-15);
}

TEST(TotalLoss, PerfectOutputsHitEpsFloors) {
  auto gt = build_pyramid(random_tensor({1, 3, 16, 16}, 14, false, 0, 1));
  ForwardOutputs<double> out;
  out.derained = gt.levels;
  out.inr_recons = {gt.levels[1], gt.levels[2]};
  out.inr_target_level = {1, 2};
  auto b = total_loss(out, gt, {}, true);
  EXPECT_NEAR(b.total.item(), 0.00315, 1e-12);
  EXPECT_NEAR(b.charb.item(), 0.003, 1e-12);
  EXPECT_EQ(b.freq.item(), 0.0);
  EXPECT_EQ(b.inr.item(), 0.0);
}

TEST(TotalLoss, IdentityHoldsExactlyInSinglePrecision) {
  NerdRain<float> model(ModelConfig::tiny(), 3);
  model.params().randomize(4, 0.05);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto x = random_tensor<float>({1, 3, 16, 16}, 20 + seed, false, 0, 1);
    auto gt = random_tensor<float>({1, 3, 16, 16}, 30 + seed, false, 0, 1);
    auto b = total_loss(model.forward(x), gt, {}, true);
    auto v = b.values();
    for (double c : {v.charb, v.freq, v.edge, v.inr}) EXPECT_GE(c, 0.0);
    const float expect =
        weighted_total_value(b.charb.item(), b.freq.item(), b.edge.item(), b.inr.item(), LossWeights{});
    EXPECT_EQ(b.total.item(), expect);
  }
}

TEST(TotalLoss, MissingReconstructionsRejected) {
  auto gt = build_pyramid(random_tensor({1, 3, 16, 16}, 15));
  ForwardOutputs<double> out;
  out.derained = gt.levels;
  EXPECT_THROW(total_loss(out, gt, {}, true), ShapeError);
  EXPECT_EQ(total_loss(out, gt).inr.item(), 0.0);
}

TEST(TotalLoss, BatchPermutationInvariant) {
  auto a = random_tensor({1, 3, 8, 8}, 16), b = random_tensor({1, 3, 8, 8}, 17);
  auto ga = random_tensor({1, 3, 8, 8}, 18), gb = random_tensor({1, 3, 8, 8}, 19);
  auto fwd = [](const Tensor<double>& p) {
    ForwardOutputs<double> o;
    o.derained = build_pyramid(p).levels;
    return o;
  };
  auto ab = total_loss(fwd(ops::concat<double>({a, b}, 0)), ops::concat<double>({ga, gb}, 0));
  auto ba = total_loss(fwd(ops::concat<double>({b, a}, 0)), ops::concat<double>({gb, ga}, 0));
  EXPECT_NEAR(ab.total.item(), ba.total.item(), 1e-14);
}

TEST(LossGradients, EachTerm) {
  auto p = random_tensor({1, 2, 5, 6}, 20, true), g = random_tensor({1, 2, 5, 6}, 21);
  for (auto f : {+[](const Tensor<double>& a, const Tensor<double>& b) { return charbonnier(a, b); },
                 +[](const Tensor<double>& a, const Tensor<double>& b) { return frequency_loss(a, b); },
                 +[](const Tensor<double>& a, const Tensor<double>& b) { return edge_loss(a, b); }}) {
    auto r = check_op([&] { return f(p, g); }, {{"p", p}});
    EXPECT_TRUE(r.pass) << r.max_error();
  }
}

TEST(LossGradients, TinyModelTotal) {
  ModelGradCheckOptions o;
  o.max_coords = 1;
  auto r = model_gradcheck(ModelConfig::tiny(), o);
  for (const auto& g : r.groups) EXPECT_LE(g.max_rel_error, 1e-3) << g.name;
  EXPECT_TRUE(r.pass) << r.max_error();
}
