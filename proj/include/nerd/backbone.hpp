#pragma once

// Shallow shared encoder and the three-level transformer UNet built from
// channel-attention blocks with gated feed-forward sublayers.

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "nerd/layers.hpp"

namespace nerd {

/// One 3×3 convolution from image (3 or 6 channels) to feature channels.
template <typename T>
struct SharedEncoder {
  Conv2d<T> conv;
  std::size_t in_channels = 3;

  static SharedEncoder declare(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out) {
    return {Conv2d<T>::declare(store, name, in, out, 3), in};
  }

  Tensor<T> operator()(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != in_channels)
      throw ShapeError("shared encoder expects " + std::to_string(in_channels) + " channels, got " +
                       to_string(image.shape()));
    return conv(image);
  }
};

/// Multi-head attention across channels: per head a Ch×Ch map over
/// L2-normalised channel descriptors, scaled by a learned temperature.
template <typename T>
struct ChannelAttention {
  Conv2d<T> qkv;
  DepthwiseConv2d<T> qkv_dw;
  Tensor<T> temperature;
  Conv2d<T> project;
  std::size_t heads = 1;

  static ChannelAttention declare(ParamStore<T>& store, const std::string& name, std::size_t channels,
                                  std::size_t heads) {
    if (heads == 0 || channels % heads)
      throw ShapeError("attention: " + std::to_string(channels) + " channels not divisible by " +
                       std::to_string(heads) + " heads");
    ChannelAttention a;
    a.qkv = Conv2d<T>::declare(store, name + ".qkv", channels, 3 * channels, 1);
    a.qkv_dw = DepthwiseConv2d<T>::declare(store, name + ".qkv_dw", 3 * channels);
    a.temperature = store.declare(name + ".temperature", {heads}, Init::ones);
    a.project = Conv2d<T>::declare(store, name + ".project", channels, channels, 1);
    a.heads = heads;
    return a;
  }

  struct Parts {
    Tensor<T> attn;  // [N, heads, Ch, Ch], rows sum to one
    Tensor<T> v;     // [N*heads, Ch, H*W]
  };

  Parts parts(const Tensor<T>& x) const {
    const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3), Ch = C / heads;
    if (C % heads) throw ShapeError("attention: channel count not divisible by heads");
    auto qkv_ = qkv_dw(qkv(x));
    auto heads_of = [&](std::size_t i) {
      return ops::reshape(ops::slice(qkv_, 1, i * C, C), {N * heads, Ch, P});
    };
    auto q = ops::l2_normalize_last(heads_of(0));
    auto k = ops::l2_normalize_last(heads_of(1));
    auto logits = ops::reshape(ops::bmm(q, k, true), {N, heads, Ch, Ch});
    return {ops::softmax_last(ops::mul_axis(logits, temperature, 1)), heads_of(2)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::size_t N = x.dim(0), C = x.dim(1), Ch = C / heads;
    auto p = parts(x);
    auto out = ops::bmm(ops::reshape(p.attn, {N * heads, Ch, Ch}), p.v);
    return project(ops::reshape(out, x.shape()));
  }
};

/// Pointwise expansion, depthwise 3×3, GELU gate times value path, projection.
template <typename T>
struct GatedFfn {
  Conv2d<T> project_in;
  DepthwiseConv2d<T> dw;
  Conv2d<T> project_out;
  std::size_t hidden = 0;

  static constexpr double expansion = 2.66;

  static GatedFfn declare(ParamStore<T>& store, const std::string& name, std::size_t channels) {
    GatedFfn f;
    f.hidden = static_cast<std::size_t>(static_cast<double>(channels) * expansion);
    f.project_in = Conv2d<T>::declare(store, name + ".project_in", channels, 2 * f.hidden, 1);
    f.dw = DepthwiseConv2d<T>::declare(store, name + ".dw", 2 * f.hidden);
    f.project_out = Conv2d<T>::declare(store, name + ".project_out", f.hidden, channels, 1);
    return f;
  }

  /// (gate pre-activation, value path), each [N, hidden, H, W].
  std::pair<Tensor<T>, Tensor<T>> paths(const Tensor<T>& x) const {
    auto h = dw(project_in(x));
    return {ops::slice(h, 1, 0, hidden), ops::slice(h, 1, hidden, hidden)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto [g, v] = paths(x);
    return project_out(ops::mul(ops::gelu(g), v));
  }
};

template <typename T>
struct TransformerBlock {
  LayerNorm<T> norm1;
  ChannelAttention<T> attn;
  LayerNorm<T> norm2;
  GatedFfn<T> ffn;

  static TransformerBlock declare(ParamStore<T>& store, const std::string& name, std::size_t channels,
                                  std::size_t heads) {
    TransformerBlock b;
    b.norm1 = LayerNorm<T>::declare(store, name + ".norm1", channels);
    b.attn = ChannelAttention<T>::declare(store, name + ".attn", channels, heads);
    b.norm2 = LayerNorm<T>::declare(store, name + ".norm2", channels);
    b.ffn = GatedFfn<T>::declare(store, name + ".ffn", channels);
    return b;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = ops::add(x, attn(norm1(x)));
    return ops::add(y, ffn(norm2(y)));
  }
};

struct UNetConfig {
  std::array<std::size_t, 3> blocks{2, 3, 3};
  std::array<std::size_t, 3> heads{1, 2, 4};
  std::array<std::size_t, 3> channels{48, 96, 192};

  void validate() const {
    for (std::size_t l = 0; l < 3; ++l) {
      if (channels[l] == 0 || heads[l] == 0 || channels[l] % heads[l])
        throw std::invalid_argument("unet: level " + std::to_string(l + 1) + " channels not divisible by heads");
      if (l > 0 && channels[l] != 2 * channels[l - 1])
        throw std::invalid_argument("unet: channels must double per level");
    }
    if (channels[0] % 2) throw std::invalid_argument("unet: base channel count must be even");
  }

  bool operator==(const UNetConfig&) const = default;
};

template <typename T>
struct UNetOutput {
  Tensor<T> features;    // same shape as the input
  Tensor<T> bottleneck;  // the bottleneck the decoder actually consumed
};

template <typename T>
using BottleneckHook = std::function<Tensor<T>(const Tensor<T>&)>;

/// Three-level encoder–decoder. The bottleneck sits at 1/4 resolution with
/// the level-3 channel count; an optional hook may replace it before decoding.
template <typename T>
struct UNet {
  UNetConfig cfg;
  std::vector<TransformerBlock<T>> enc1, enc2, latent, dec2, dec1;
  Conv2d<T> down1, down2, up3, up2, reduce2, reduce1;

  static UNet declare(ParamStore<T>& store, const std::string& name, const UNetConfig& cfg) {
    cfg.validate();
    UNet u;
    u.cfg = cfg;
    const auto& C = cfg.channels;
    auto stack = [&](const std::string& tag, std::size_t level) {
      std::vector<TransformerBlock<T>> v;
      for (std::size_t i = 0; i < cfg.blocks[level]; ++i)
        v.push_back(TransformerBlock<T>::declare(store, name + "." + tag + "." + std::to_string(i), C[level],
                                                 cfg.heads[level]));
      return v;
    };
    u.enc1 = stack("enc1", 0);
    u.down1 = Conv2d<T>::declare(store, name + ".down1", C[0], C[0] / 2, 3);
    u.enc2 = stack("enc2", 1);
    u.down2 = Conv2d<T>::declare(store, name + ".down2", C[1], C[1] / 2, 3);
    u.latent = stack("latent", 2);
    u.up3 = Conv2d<T>::declare(store, name + ".up3", C[2], 4 * C[1], 3);
    u.reduce2 = Conv2d<T>::declare(store, name + ".reduce2", 2 * C[1], C[1], 1);
    u.dec2 = stack("dec2", 1);
    u.up2 = Conv2d<T>::declare(store, name + ".up2", C[1], 4 * C[0], 3);
    u.reduce1 = Conv2d<T>::declare(store, name + ".reduce1", 2 * C[0], C[0], 1);
    u.dec1 = stack("dec1", 0);
    return u;
  }

  UNetOutput<T> forward(const Tensor<T>& x, const BottleneckHook<T>& hook = {}) const {
    if (x.rank() != 4 || x.dim(1) != cfg.channels[0])
      throw ShapeError("unet expects " + std::to_string(cfg.channels[0]) + " channels, got " +
                       to_string(x.shape()));
    const std::size_t H = x.dim(2), W = x.dim(3);
    const std::size_t ph = (4 - H % 4) % 4, pw = (4 - W % 4) % 4;
    auto xp = (ph || pw) ? ops::pad_reflect(x, 0, ph, 0, pw) : x;

    auto run = [](const std::vector<TransformerBlock<T>>& blocks, Tensor<T> t) {
      for (const auto& b : blocks) t = b(t);
      return t;
    };
    auto e1 = run(enc1, xp);
    auto e2 = run(enc2, ops::pixel_unshuffle(down1(e1), 2));
    auto b = run(latent, ops::pixel_unshuffle(down2(e2), 2));
    if (hook) {
      b = hook(b);
      if (b.rank() != 4 || b.dim(1) != cfg.channels[2])
        throw ShapeError("unet: injected bottleneck has wrong shape " + to_string(b.shape()));
    }
    auto d2 = ops::pixel_shuffle(up3(b), 2);
    d2 = run(dec2, reduce2(ops::concat<T>({d2, e2}, 1)));
    auto d1 = ops::pixel_shuffle(up2(d2), 2);
    d1 = run(dec1, reduce1(ops::concat<T>({d1, e1}, 1)));
    auto out = ops::add(xp, d1);
    if (ph || pw) out = ops::crop(out, 0, 0, H, W);
    return {out, b};
  }
};

}  // namespace nerd
