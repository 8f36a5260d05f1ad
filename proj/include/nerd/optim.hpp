#pragma once

// Adam, global-norm clipping and the cosine learning-rate schedule.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "nerd/tensor.hpp"

namespace nerd {

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::size_t step, std::size_t total, double lr0, double lr_min) {
  if (step > total) throw std::out_of_range("cosine_lr: step beyond schedule");
  if (total == 0) return lr0;
  if (step == total) return lr_min;
  if (step == 0) return lr0;
  const double c = std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total));
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + c);
}

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  /// Applies one bias-corrected update. Returns false, leaving parameters and
  /// moments untouched, when any gradient is non-finite.
  bool step(double lr) {
    for (const auto& p : params_)
      if (p.has_grad() && !all_finite(p.grad())) return false;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto& m = m_[i];
      auto& v = v_[i];
      auto w = p.data_mut();
      const bool has = p.has_grad();
      auto g = p.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = has ? static_cast<double>(g[j]) : 0.0;
        const double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double upd = lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - upd);
      }
    }
    return true;
  }

  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<Tensor<T>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (p.has_grad())
      for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : params)
      if (p.has_grad())
        for (T& g : p.grad_mut()) g *= s;
  }
  return norm;
}

}  // namespace nerd
