#pragma once

// Thin parameter-owning wrappers around the ops.

#include <string>

#include "nerd/ops.hpp"
#include "nerd/params.hpp"

namespace nerd {

template <typename T>
struct Conv2d {
  Tensor<T> weight, bias;
  std::size_t stride = 1, pad = 0;

  static Conv2d declare(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                        std::size_t k, Init init = Init::trunc_normal, bool with_bias = true) {
    Conv2d c;
    c.weight = store.declare(name + ".weight", {out, in, k, k}, init, in * k * k);
    if (with_bias)
      c.bias = store.declare(name + ".bias", {out}, init == Init::fan_in_uniform ? init : Init::zeros, in * k * k);
    c.pad = (k - 1) / 2;
    return c;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
};

template <typename T>
struct DepthwiseConv2d {
  Tensor<T> weight, bias;

  static DepthwiseConv2d declare(ParamStore<T>& store, const std::string& name, std::size_t channels) {
    return {store.declare(name + ".weight", {channels, 1, 3, 3}, Init::trunc_normal, 9),
            store.declare(name + ".bias", {channels}, Init::zeros)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::depthwise_conv2d(x, weight, bias, 1); }
};

template <typename T>
struct Linear {
  Tensor<T> weight, bias;

  static Linear declare(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out) {
    return {store.declare(name + ".weight", {out, in}, Init::fan_in_uniform, in),
            store.declare(name + ".bias", {out}, Init::fan_in_uniform, in)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> weight, bias;

  static LayerNorm declare(ParamStore<T>& store, const std::string& name, std::size_t channels) {
    return {store.declare(name + ".weight", {channels}, Init::ones),
            store.declare(name + ".bias", {channels}, Init::zeros)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm_channels(x, weight, bias); }
};

}  // namespace nerd
