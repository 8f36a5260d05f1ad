#pragma once

// Named parameter registry. Every trainable tensor is declared once under a
// canonical dotted name; declaration order is the canonical order used by
// checkpoints and the optimizer.

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nerd/tensor.hpp"

namespace nerd {

/// splitmix64 step; used to derive independent streams from (seed, name).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

/// Small deterministic generator whose output does not depend on the
/// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  double normal() {
    double u1 = uniform(), u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::uint64_t state_;
};

enum class Init {
  zeros,
  ones,
  trunc_normal,    // N(0, 0.02^2) truncated at two standard deviations
  fan_in_uniform,  // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  identity_zeros,  // [Cout, Cin, 1, 1] with w[o][o] = 1 and zeros elsewhere
};

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan_in = 1;
};

template <typename T>
class ParamStore {
 public:
  /// A dry store records specs without allocating values.
  explicit ParamStore(std::uint64_t seed, bool dry = false) : seed_(seed), dry_(dry) {}

  Tensor<T> declare(const std::string& name, Shape shape, Init init, std::size_t fan_in = 1) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    index_[name] = specs_.size();
    specs_.push_back({name, shape, init, fan_in});
    if (dry_) {
      tensors_.emplace_back();
      return {};
    }
    Tensor<T> t(shape, initial_values(specs_.back()), true);
    tensors_.push_back(t);
    return t;
  }

  std::size_t size() const { return specs_.size(); }
  const std::vector<ParamSpec>& specs() const { return specs_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return tensors_[it->second];
  }

  std::size_t count_scalars() const {
    std::size_t n = 0;
    for (const auto& s : specs_) n += numel_of(s.shape);
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_)
      if (t.defined()) t.zero_grad();
  }

  /// Overwrites every parameter with N(0, stddev^2) noise (for gradient
  /// checks, where zero or identity initialisations hide whole branches).
  void randomize(std::uint64_t seed, double stddev) {
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      Rng rng(mix64(seed ^ fnv1a(specs_[i].name)));
      for (auto& v : tensors_[i].data_mut()) v = static_cast<T>(stddev * rng.normal());
    }
  }

 private:
  std::vector<T> initial_values(const ParamSpec& s) const {
    std::vector<T> v(numel_of(s.shape), T(0));
    Rng rng(mix64(seed_ ^ fnv1a(s.name)));
    switch (s.init) {
      case Init::zeros:
        break;
      case Init::ones:
        std::fill(v.begin(), v.end(), T(1));
        break;
      case Init::trunc_normal:
        for (auto& x : v) {
          double z;
          do z = rng.normal();
          while (std::abs(z) > 2.0);
          x = static_cast<T>(0.02 * z);
        }
        break;
      case Init::fan_in_uniform: {
        double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
        for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case Init::identity_zeros: {
        const std::size_t out = s.shape.at(0), in = s.shape.at(1);
        for (std::size_t o = 0; o < out && o < in; ++o) v[o * in + o] = T(1);
        break;
      }
    }
    return v;
  }

  std::uint64_t seed_;
  bool dry_;
  std::vector<ParamSpec> specs_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace nerd
