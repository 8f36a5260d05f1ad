#pragma once

// Bidirectional feedback between two bottlenecks of one scale, and delivery
// of the fused result into a coarser scale's bottleneck.

#include <string>

#include "nerd/layers.hpp"

namespace nerd {

enum class FeedbackMode { bfpu, concat, none };

inline const char* to_string(FeedbackMode m) {
  switch (m) {
    case FeedbackMode::bfpu: return "bfpu";
    case FeedbackMode::concat: return "concat";
    case FeedbackMode::none: return "none";
  }
  return "?";
}

template <typename T>
struct BfpuParams {
  Conv2d<T> conv_a, conv_b;  // 3×3, C -> C
  Conv2d<T> inject;          // 1×1, 3C -> C

  /// `channels` is the bottleneck channel count. In concat mode the gating
  /// convs are not declared.
  static BfpuParams declare(ParamStore<T>& store, const std::string& name, std::size_t channels,
                            FeedbackMode mode = FeedbackMode::bfpu) {
    BfpuParams p;
    if (mode == FeedbackMode::bfpu) {
      p.conv_a = Conv2d<T>::declare(store, name + ".conv_a", channels, channels, 3);
      p.conv_b = Conv2d<T>::declare(store, name + ".conv_b", channels, channels, 3);
    }
    p.inject = Conv2d<T>::declare(store, name + ".inject", 3 * channels, channels, 1, Init::identity_zeros);
    return p;
  }
};

/// F_mid = sigmoid(conv_a(F_a) * conv_b(F_b));
/// F_out = [F_a + F_mid * F_a, F_b + F_mid * F_b] along channels.
template <typename T>
Tensor<T> bfpu(const Tensor<T>& fa, const Tensor<T>& fb, const BfpuParams<T>& p) {
  require_same_shape(fa, fb, "bfpu");
  auto mid = ops::sigmoid(ops::mul(p.conv_a(fa), p.conv_b(fb)));
  return ops::concat<T>({ops::add(fa, ops::mul(mid, fa)), ops::add(fb, ops::mul(mid, fb))}, 1);
}

/// Plain channel concatenation used in place of the gated unit.
template <typename T>
Tensor<T> concat_feedback(const Tensor<T>& fa, const Tensor<T>& fb) {
  require_same_shape(fa, fb, "concat_feedback");
  return ops::concat<T>({fa, fb}, 1);
}

/// Resizes F_out to the bottleneck's extent, concatenates, and fuses with the
/// 1×1 injection conv.
template <typename T>
Tensor<T> inject(const Tensor<T>& bottleneck, const Tensor<T>& fout, const BfpuParams<T>& p) {
  if (bottleneck.rank() != 4 || fout.rank() != 4 || bottleneck.dim(0) != fout.dim(0))
    throw ShapeError("inject: expected matching [N, C, H, W] tensors");
  const std::size_t C = bottleneck.dim(1);
  if (C + fout.dim(1) != p.inject.weight.dim(1) || fout.dim(1) != 2 * C)
    throw ShapeError("inject: channels " + std::to_string(C) + " + " + std::to_string(fout.dim(1)) +
                     " do not match the fusion conv " + to_string(p.inject.weight.shape()));
  auto resized = ops::bilinear_resize(fout, bottleneck.dim(2), bottleneck.dim(3));
  return p.inject(ops::concat<T>({bottleneck, resized}, 1));
}

}  // namespace nerd
