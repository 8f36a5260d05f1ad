#pragma once

// Hybrid training objective: Charbonnier, spectral L1 and Laplacian-edge terms
// summed over the three output scales, plus an L1 term on the INR images.

#include <stdexcept>

#include "nerd/fft.hpp"
#include "nerd/model.hpp"
#include "nerd/ops.hpp"

namespace nerd {

inline constexpr double kCharbonnierEps = 1e-3;

struct LossWeights {
  double freq = 0.01;
  double edge = 0.05;
  double inr = 0.1;
};

template <typename T>
struct LossBreakdown {
  Tensor<T> charb, freq, edge, inr, total;  // scalars; total carries the graph

  struct Values {
    double charb, freq, edge, inr, total;
  };
  Values values() const { return {charb.item(), freq.item(), edge.item(), inr.item(), total.item()}; }
};

template <typename T>
Tensor<T> charbonnier(const Tensor<T>& pred, const Tensor<T>& gt, double eps = kCharbonnierEps) {
  return ops::charbonnier_mean(pred, gt, static_cast<T>(eps));
}

/// Mean over bins and channels of |Re| + |Im| of the 1/(HW)-normalised
/// spectrum of pred - gt.
template <typename T>
Tensor<T> frequency_loss(const Tensor<T>& pred, const Tensor<T>& gt) {
  require_same_shape(pred, gt, "frequency_loss");
  const std::size_t r = pred.rank();
  const double hw = static_cast<double>(pred.dim(r - 2) * pred.dim(r - 1));
  const double scale = 1.0 / (hw * static_cast<double>(pred.numel()));
  return ops::scale(ops::abs_sum(fft::fft2(ops::sub(pred, gt))), static_cast<T>(scale));
}

/// Charbonnier distance between 5-point Laplacians (reflect borders).
template <typename T>
Tensor<T> edge_loss(const Tensor<T>& pred, const Tensor<T>& gt, double eps = kCharbonnierEps) {
  require_same_shape(pred, gt, "edge_loss");
  return charbonnier(ops::laplacian(pred), ops::laplacian(gt), eps);
}

/// Sum over reconstructions of the mean absolute error.
template <typename T>
Tensor<T> inr_loss(const std::vector<Tensor<T>>& recons, const std::vector<Tensor<T>>& targets) {
  if (recons.size() != targets.size()) throw ShapeError("inr_loss: reconstruction/target count mismatch");
  Tensor<T> acc = Tensor<T>::scalar(T(0));
  for (std::size_t i = 0; i < recons.size(); ++i) acc = ops::add(acc, ops::l1_mean(recons[i], targets[i]));
  return acc;
}

/// char + w.freq*freq + w.edge*edge + w.inr*inr, evaluated left to right.
template <typename T>
Tensor<T> weighted_total(const Tensor<T>& c, const Tensor<T>& f, const Tensor<T>& e, const Tensor<T>& i,
                         const LossWeights& w) {
  auto t = ops::add(c, ops::scale(f, static_cast<T>(w.freq)));
  t = ops::add(t, ops::scale(e, static_cast<T>(w.edge)));
  return ops::add(t, ops::scale(i, static_cast<T>(w.inr)));
}

/// Plain-scalar counterpart of weighted_total in the same precision.
template <typename T>
T weighted_total_value(T c, T f, T e, T i, const LossWeights& w) {
  T t = c + static_cast<T>(w.freq) * f;
  t = t + static_cast<T>(w.edge) * e;
  return t + static_cast<T>(w.inr) * i;
}

template <typename T>
LossBreakdown<T> total_loss(const ForwardOutputs<T>& out, const Pyramid<T>& gt, const LossWeights& w = {},
                            bool expect_inr = false) {
  LossBreakdown<T> b;
  b.charb = b.freq = b.edge = Tensor<T>::scalar(T(0));
  for (std::size_t s = 0; s < 3; ++s) {
    require_same_shape(out.derained[s], gt.levels[s], "total_loss");
    b.charb = ops::add(b.charb, charbonnier(out.derained[s], gt.levels[s]));
    b.freq = ops::add(b.freq, frequency_loss(out.derained[s], gt.levels[s]));
    b.edge = ops::add(b.edge, edge_loss(out.derained[s], gt.levels[s]));
  }
  if (expect_inr && out.inr_recons.size() != 2)
    throw ShapeError("total_loss: expected two INR reconstructions, got " + std::to_string(out.inr_recons.size()));
  std::vector<Tensor<T>> targets;
  for (std::size_t k = 0; k < out.inr_recons.size(); ++k) targets.push_back(gt.levels.at(out.inr_target_level.at(k)));
  b.inr = inr_loss(out.inr_recons, targets);
  b.total = weighted_total(b.charb, b.freq, b.edge, b.inr, w);
  return b;
}

template <typename T>
LossBreakdown<T> total_loss(const ForwardOutputs<T>& out, const Tensor<T>& gt, const LossWeights& w = {},
                            bool expect_inr = false) {
  return total_loss(out, build_pyramid(gt), w, expect_inr);
}

}  // namespace nerd
