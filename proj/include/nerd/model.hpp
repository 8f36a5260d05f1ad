#pragma once

// Three-scale deraining network. Each scale has a shared shallow encoder and a
// chain of UNets (one, two and three from coarse to fine). INR decoders carry
// coarse-scale features up to the next finer scale's input; gated feedback
// units carry fused fine-scale bottlenecks down to the next coarser scale.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "nerd/backbone.hpp"
#include "nerd/fusion.hpp"
#include "nerd/inr.hpp"

namespace nerd {

struct ModelConfig {
  std::string variant = "full";
  UNetConfig unet;
  std::array<std::size_t, 3> unets_per_scale{1, 2, 3};
  std::size_t inr_L = 4;
  std::size_t inr_hidden = 256;
  bool use_inr = true;
  bool inr_within_branch = false;
  bool inr_fixed_scale = false;
  bool use_position_encoding = true;
  bool use_interpolation = true;
  bool shared_encoder = true;
  FeedbackMode feedback = FeedbackMode::bfpu;

  static ModelConfig full() { return {}; }

  static ModelConfig small() {
    ModelConfig c;
    c.variant = "small";
    c.unet.channels = {32, 64, 128};
    return c;
  }

  /// Reduced configuration used by gradient checks and desk-scale training.
  static ModelConfig tiny() {
    ModelConfig c;
    c.variant = "tiny";
    c.unet.channels = {8, 16, 32};
    c.unet.blocks = {1, 1, 1};
    return c;
  }

  /// Ablation variants by letter: a (no INR), b (INR within its own branch,
  /// separate encoder), d (fixed-scale INR), e (no positional encoding),
  /// f (no interpolation), g (separate encoder); "concat" and "none" switch
  /// the feedback unit. "c" is the unablated model.
  static ModelConfig ablation(const std::string& tag, ModelConfig base = tiny()) {
    if (tag == "a") base.use_inr = false;
    else if (tag == "b") base.inr_within_branch = true, base.shared_encoder = false;
    else if (tag == "c") {}
    else if (tag == "d") base.inr_fixed_scale = true;
    else if (tag == "e") base.use_position_encoding = false;
    else if (tag == "f") base.use_interpolation = false;
    else if (tag == "g") base.shared_encoder = false;
    else if (tag == "concat") base.feedback = FeedbackMode::concat;
    else if (tag == "none") base.feedback = FeedbackMode::none;
    else throw std::invalid_argument("unknown ablation variant: " + tag);
    return base;
  }

  void validate() const {
    unet.validate();
    for (auto u : unets_per_scale)
      if (u > 8) throw std::invalid_argument("unets_per_scale entries must be at most 8");
    if (use_inr) {
      if (inr_L == 0) throw std::invalid_argument("inr.L must be >= 1");
      if (inr_hidden == 0) throw std::invalid_argument("inr.hidden must be >= 1");
      if (inr_within_branch && inr_fixed_scale)
        throw std::invalid_argument("inr_within_branch and inr_fixed_scale are mutually exclusive");
    }
  }

  /// Input channels of the shared encoder at scale s (1-based).
  std::size_t encoder_inputs(std::size_t s) const {
    return (s > 1 && use_inr && !inr_within_branch) ? 6 : 3;
  }

  /// Whether scale s (2 or 3) fuses two bottlenecks and delivers to s-1.
  bool has_feedback(std::size_t s) const {
    return feedback != FeedbackMode::none && s >= 2 && unets_per_scale[s - 1] >= 2 && unets_per_scale[s - 2] >= 1;
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct Pyramid {
  std::array<Tensor<T>, 3> levels;  // S1 (1/4), S2 (1/2), S3 (full, padded)
  std::size_t height = 0, width = 0;  // extent before padding
};

/// Reflect-pads bottom/right to a multiple of 4, then resamples to 1/2 and 1/4.
template <typename T>
Pyramid<T> build_pyramid(const Tensor<T>& image) {
  if (image.rank() != 4) throw ShapeError("build_pyramid: expected [N, C, H, W]");
  const std::size_t H = image.dim(2), W = image.dim(3);
  if (H < 8 || W < 8) throw ShapeError("build_pyramid: image must be at least 8x8, got " + to_string(image.shape()));
  const std::size_t ph = (4 - H % 4) % 4, pw = (4 - W % 4) % 4;
  Pyramid<T> p;
  p.height = H;
  p.width = W;
  auto full = (ph || pw) ? ops::pad_reflect(image, 0, ph, 0, pw) : image;
  const std::size_t Hp = H + ph, Wp = W + pw;
  p.levels = {ops::bilinear_resize(full, Hp / 4, Wp / 4), ops::bilinear_resize(full, Hp / 2, Wp / 2), full};
  return p;
}

template <typename T>
struct ForwardOutputs {
  std::array<Tensor<T>, 3> derained;        // per pyramid level, padded extents
  std::vector<Tensor<T>> inr_recons;        // [I_1, I_2], empty without INR
  std::vector<std::size_t> inr_target_level;  // pyramid level each I_s is supervised against
  std::size_t height = 0, width = 0;

  /// Full-resolution output cropped to the input extent.
  Tensor<T> restored() const { return ops::crop(derained[2], 0, 0, height, width); }
};

template <typename T>
class NerdRain {
 public:
  NerdRain(const ModelConfig& cfg, std::uint64_t seed, bool dry = false) : cfg_(cfg), store_(seed, dry) {
    cfg_.validate();
    const std::size_t C = cfg_.unet.channels[0], Cb = cfg_.unet.channels[2];
    for (std::size_t s = 1; s <= 3; ++s)
      enc_[s - 1] = SharedEncoder<T>::declare(store_, "enc.s" + std::to_string(s), cfg_.encoder_inputs(s), C);
    if (cfg_.use_inr) {
      if (!cfg_.shared_encoder)
        for (std::size_t s = 1; s <= 2; ++s)
          sep_[s - 1] =
              SharedEncoder<T>::declare(store_, "enc_sep.s" + std::to_string(s), cfg_.encoder_inputs(s), C);
      const std::size_t width = C + inr::encoding_width(inr_options());
      coarse_ = inr::InrDecoder<T>::declare(store_, "inr.coarse", width, cfg_.inr_hidden);
      fine_ = inr::InrDecoder<T>::declare(store_, "inr.fine", width, cfg_.inr_hidden);
    }
    for (std::size_t s = 1; s <= 3; ++s) {
      for (std::size_t k = 1; k <= cfg_.unets_per_scale[s - 1]; ++k)
        unets_[s - 1].push_back(
            UNet<T>::declare(store_, "s" + std::to_string(s) + ".unet" + std::to_string(k), cfg_.unet));
      if (cfg_.has_feedback(s))
        fusion_[s - 1] = BfpuParams<T>::declare(store_, "fusion.s" + std::to_string(s), Cb, cfg_.feedback);
    }
    for (std::size_t s = 1; s <= 3; ++s)
      head_[s - 1] = Conv2d<T>::declare(store_, "head.s" + std::to_string(s), C, 3, 3, Init::zeros);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  inr::InrOptions inr_options() const {
    return {cfg_.inr_L, cfg_.use_position_encoding, cfg_.use_interpolation};
  }

  ForwardOutputs<T> forward(const Tensor<T>& image) const { return forward(build_pyramid(image)); }

  ForwardOutputs<T> forward(const Pyramid<T>& pyr) const {
    if (pyr.levels[2].dim(1) != 3) throw ShapeError("model expects a 3-channel image");
    const auto& S = pyr.levels;
    ForwardOutputs<T> out;
    out.height = pyr.height;
    out.width = pyr.width;

    // Coarse-to-fine: encoders, INR reconstructions and guidance.
    std::array<Tensor<T>, 3> E;
    std::array<Tensor<T>, 3> enc_in{S[0], S[1], S[2]};
    const auto opt = inr_options();
    auto grid_features = [&](std::size_t level) {
      return cfg_.shared_encoder ? E[level] : sep_[level](enc_in[level]);
    };
    E[0] = enc_[0](enc_in[0]);
    if (cfg_.use_inr && cfg_.inr_within_branch) {
      E[1] = enc_[1](enc_in[1]);
      E[2] = enc_[2](enc_in[2]);
      for (std::size_t level = 0; level < 2; ++level) {
        const auto& dec = level == 0 ? coarse_ : fine_;
        out.inr_recons.push_back(inr::inr_reconstruct(grid_features(level), S[level].dim(2), S[level].dim(3), dec, opt));
        out.inr_target_level.push_back(level);
      }
    } else if (cfg_.use_inr) {
      for (std::size_t level = 0; level < 2; ++level) {
        const auto& dec = level == 0 ? coarse_ : fine_;
        const std::size_t target = cfg_.inr_fixed_scale ? 2 : level + 1;
        auto rec = inr::inr_reconstruct(grid_features(level), S[target].dim(2), S[target].dim(3), dec, opt);
        out.inr_recons.push_back(rec);
        out.inr_target_level.push_back(target);
        const auto& next = S[level + 1];
        auto guide = target == level + 1 ? rec : ops::bilinear_resize(rec, next.dim(2), next.dim(3));
        enc_in[level + 1] = ops::concat<T>({next, guide}, 1);
        E[level + 1] = enc_[level + 1](enc_in[level + 1]);
      }
    } else {
      E[1] = enc_[1](enc_in[1]);
      E[2] = enc_[2](enc_in[2]);
    }

    // Fine-to-coarse: UNet chains, feedback fusion and delivery.
    Tensor<T> carried;  // fused bottlenecks from the finer scale
    for (std::size_t s = 3; s >= 1; --s) {
      const auto& chain = unets_[s - 1];
      Tensor<T> f = E[s - 1];
      std::vector<Tensor<T>> bottlenecks;
      for (std::size_t k = 0; k < chain.size(); ++k) {
        BottleneckHook<T> hook;
        if (k + 1 == chain.size() && carried.defined()) {
          const auto& fp = fusion_[s];  // params of the finer scale that produced `carried`
          hook = [&carried, &fp](const Tensor<T>& b) { return inject(b, carried, fp); };
        }
        auto r = chain[k].forward(f, hook);
        f = r.features;
        bottlenecks.push_back(r.bottleneck);
      }
      out.derained[s - 1] = ops::add(head_[s - 1](f), S[s - 1]);
      carried = Tensor<T>();
      if (cfg_.has_feedback(s))
        carried = cfg_.feedback == FeedbackMode::bfpu ? bfpu(bottlenecks[0], bottlenecks[1], fusion_[s - 1])
                                                      : concat_feedback(bottlenecks[0], bottlenecks[1]);
      if (s == 1) break;
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  std::array<SharedEncoder<T>, 3> enc_;
  std::array<SharedEncoder<T>, 2> sep_;
  inr::InrDecoder<T> coarse_, fine_;
  std::array<std::vector<UNet<T>>, 3> unets_;
  std::array<BfpuParams<T>, 3> fusion_;
  std::array<Conv2d<T>, 3> head_;
};

/// Exact number of trainable scalars for a configuration.
inline std::size_t count_parameters(const ModelConfig& cfg) {
  return NerdRain<float>(cfg, 0, true).params().count_scalars();
}

}  // namespace nerd
