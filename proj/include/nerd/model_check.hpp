#pragma once

// Finite-difference check of the full training objective with respect to
// every parameter tensor of a model.

#include "nerd/gradcheck.hpp"
#include "nerd/losses.hpp"

namespace nerd {

struct ModelGradCheckOptions {
  double tol = 1e-3;
  double eps = 1e-5;
  std::size_t max_coords = 2;  // per parameter tensor
  std::size_t size = 16;       // input extent
  double param_std = 0.1;      // parameters are redrawn so no branch starts at zero
  std::uint64_t seed = 1;
};

inline GradReport model_gradcheck(const ModelConfig& cfg, const ModelGradCheckOptions& o = {}) {
  NerdRain<double> model(cfg, o.seed);
  model.params().randomize(o.seed, o.param_std);
  Rng rng(mix64(o.seed ^ 0x9a7cULL));
  const Shape shape{1, 3, o.size, o.size};
  std::vector<double> rainy(numel_of(shape)), clean(numel_of(shape));
  for (std::size_t i = 0; i < rainy.size(); ++i) {
    clean[i] = rng.uniform();
    rainy[i] = std::min(1.0, clean[i] + 0.5 * rng.uniform());
  }
  const Tensor<double> x(shape, rainy), gt_image(shape, clean);
  const auto gt = build_pyramid(gt_image);

  std::vector<NamedTensor<double>> params;
  const auto& store = model.params();
  for (std::size_t i = 0; i < store.size(); ++i) params.emplace_back(store.specs()[i].name, store.tensors()[i]);

  GradCheckOptions g;
  g.eps = o.eps;
  g.tol = o.tol;
  g.max_coords = o.max_coords;
  g.seed = o.seed;
  return grad_check<double>([&] { return total_loss(model.forward(x), gt).total; }, params, g);
}

}  // namespace nerd
