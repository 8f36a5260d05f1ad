#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nerd/tensor.hpp"

namespace nerd {

struct GradGroupError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradReport {
  std::vector<GradGroupError> groups;
  double tolerance = 0.0;
  bool pass = true;

  double max_error() const {
    double m = 0.0;
    for (const auto& g : groups) m = std::max(m, g.max_rel_error);
    return m;
  }
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Coordinates probed per parameter tensor; 0 probes every coordinate.
  std::size_t max_coords = 0;
  /// Lower bound on a group's gradient scale, so groups whose true gradient
  /// is numerically zero are compared in absolute terms.
  double scale_floor = 1e-6;
  std::uint64_t seed = 0;
};

template <typename T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// (f(θ+ε) − f(θ−ε)) / 2ε. The error for one parameter tensor is
/// max_i |analytic_i − numeric_i| over the probed coordinates, divided by the
/// largest gradient magnitude in that tensor (bounded below by scale_floor).
template <typename T>
GradReport grad_check(const std::function<Tensor<T>()>& loss_fn, std::vector<NamedTensor<T>> params,
                      const GradCheckOptions& opt = {}) {
  if (!(opt.eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (auto& [name, p] : params) p.zero_grad();
  Tensor<T> loss = loss_fn();
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericError("grad_check: non-finite loss");
  loss.backward();

  auto eval = [&]() {
    NoGradGuard guard;
    double v = static_cast<double>(loss_fn().item());
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss under perturbation");
    return v;
  };

  GradReport report;
  report.tolerance = opt.tol;
  std::mt19937_64 rng(opt.seed);
  for (auto& [name, p] : params) {
    const std::size_t n = p.numel();
    std::vector<T> analytic = p.has_grad() ? std::vector<T>(p.grad().begin(), p.grad().end())
                                           : std::vector<T>(n, T(0));
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords && opt.max_coords < n) {
      for (std::size_t i = 0; i < opt.max_coords; ++i)
        std::swap(coords[i], coords[i + rng() % (n - i)]);
      coords.resize(opt.max_coords);
    }
    double worst = 0.0, scale = opt.scale_floor;
    for (T a : analytic) scale = std::max(scale, std::abs(static_cast<double>(a)));
    for (std::size_t i : coords) {
      auto data = p.data_mut();
      const T saved = data[i];
      data[i] = saved + static_cast<T>(opt.eps);
      double fp = eval();
      data[i] = saved - static_cast<T>(opt.eps);
      double fm = eval();
      data[i] = saved;
      double numeric = (fp - fm) / (2.0 * opt.eps);
      double a = static_cast<double>(analytic[i]);
      worst = std::max(worst, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
    GradGroupError g{name, worst / scale, coords.size()};
    report.pass = report.pass && g.max_rel_error <= opt.tol;
    report.groups.push_back(std::move(g));
  }
  return report;
}

}  // namespace nerd
