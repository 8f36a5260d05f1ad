#pragma once

// 2-D discrete Fourier transform over the trailing two axes.
//
// Convention: the forward transform is unnormalised,
//   X[u,v] = sum_{y,x} x[y,x] exp(-2*pi*i*(u*y/H + v*x/W)),
// and the inverse carries the 1/(H*W) factor, so inverse(forward(x)) == x.
// Power-of-two lengths use an iterative radix-2 kernel; other lengths fall
// back to the direct O(n^2) sum.

#include <complex>
#include <numbers>
#include <vector>

#include "nerd/tensor.hpp"

namespace nerd::fft {

template <typename T>
using Complex = std::complex<T>;

namespace detail {

inline bool is_pow2(std::size_t n) { return n && !(n & (n - 1)); }

// In-place 1-D transform of `n` samples spaced by `stride`. sign=-1 forward.
template <typename T>
void transform_1d(Complex<T>* data, std::size_t n, std::size_t stride, int sign,
                  std::vector<Complex<T>>& scratch) {
  scratch.resize(n);
  for (std::size_t i = 0; i < n; ++i) scratch[i] = data[i * stride];
  const double two_pi = 2.0 * std::numbers::pi;
  if (is_pow2(n)) {
    for (std::size_t i = 1, j = 0; i < n; ++i) {
      std::size_t bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      if (i < j) std::swap(scratch[i], scratch[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
      for (std::size_t i = 0; i < n; i += len)
        for (std::size_t k = 0; k < len / 2; ++k) {
          double ang = sign * two_pi * static_cast<double>(k) / static_cast<double>(len);
          Complex<T> w(static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang)));
          Complex<T> u = scratch[i + k], v = scratch[i + k + len / 2] * w;
          scratch[i + k] = u + v;
          scratch[i + k + len / 2] = u - v;
        }
    }
  } else {
    std::vector<Complex<T>> out(n);
    for (std::size_t k = 0; k < n; ++k) {
      Complex<T> acc(0, 0);
      for (std::size_t t = 0; t < n; ++t) {
        double ang = sign * two_pi * static_cast<double>((k * t) % n) / static_cast<double>(n);
        acc += scratch[t] * Complex<T>(static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang)));
      }
      out[k] = acc;
    }
    scratch = std::move(out);
  }
  for (std::size_t i = 0; i < n; ++i) data[i * stride] = scratch[i];
}

template <typename T>
void transform_2d(std::vector<Complex<T>>& plane, std::size_t H, std::size_t W, int sign) {
  std::vector<Complex<T>> scratch;
  for (std::size_t r = 0; r < H; ++r) transform_1d(plane.data() + r * W, W, 1, sign, scratch);
  for (std::size_t c = 0; c < W; ++c) transform_1d(plane.data() + c, H, W, sign, scratch);
}

}  // namespace detail

/// Forward transform of one real H×W plane.
template <typename T>
std::vector<Complex<T>> forward(std::span<const T> plane, std::size_t H, std::size_t W) {
  std::vector<Complex<T>> out(plane.begin(), plane.end());
  detail::transform_2d(out, H, W, -1);
  return out;
}

/// Inverse transform (includes the 1/(H*W) factor).
template <typename T>
std::vector<Complex<T>> inverse(std::vector<Complex<T>> spectrum, std::size_t H, std::size_t W) {
  detail::transform_2d(spectrum, H, W, +1);
  const T s = T(1) / static_cast<T>(H * W);
  for (auto& z : spectrum) z *= s;
  return spectrum;
}

/// Differentiable forward transform of every H×W plane of x [..., H, W].
/// Returns [..., H, W, 2] holding (real, imaginary).
template <typename T>
Tensor<T> fft2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("fft2: need at least two axes");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (H * W);
  std::vector<T> v(x.numel() * 2);
  for (std::size_t p = 0; p < planes; ++p) {
    auto spec = forward<T>(x.data().subspan(p * H * W, H * W), H, W);
    for (std::size_t i = 0; i < H * W; ++i) {
      v[(p * H * W + i) * 2] = spec[i].real();
      v[(p * H * W + i) * 2 + 1] = spec[i].imag();
    }
  }
  Shape s = x.shape();
  s.push_back(2);
  // Adjoint of a real-input DFT: dx = Re(unnormalised inverse DFT of g).
  return Tensor<T>::make(s, std::move(v), {x}, [=](Node<T>& n) {
    auto* g = grad_sink(n, 0);
    if (!g) return;
    for (std::size_t p = 0; p < planes; ++p) {
      std::vector<Complex<T>> gs(H * W);
      for (std::size_t i = 0; i < H * W; ++i)
        gs[i] = Complex<T>(n.grad[(p * H * W + i) * 2], n.grad[(p * H * W + i) * 2 + 1]);
      detail::transform_2d(gs, H, W, +1);
      for (std::size_t i = 0; i < H * W; ++i) (*g)[p * H * W + i] += gs[i].real();
    }
  });
}

}  // namespace nerd::fft
