#pragma once

// Differentiable operators over NCHW tensors. Each op computes its value
// eagerly and, when recording, attaches the adjoint as a closure.

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "nerd/tensor.hpp"

namespace nerd::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                     to_string(s));
}

template <typename T>
void accumulate(std::vector<T>* sink, const std::vector<T>& g) {
  if (!sink) return;
  for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::make(a.shape(), std::move(v), {a, b}, [](Node<T>& n) {
    detail::accumulate(grad_sink(n, 0), n.grad);
    detail::accumulate(grad_sink(n, 1), n.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  return Tensor<T>::make(a.shape(), std::move(v), {a, b}, [](Node<T>& n) {
    detail::accumulate(grad_sink(n, 0), n.grad);
    if (auto* gb = grad_sink(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*gb)[i] -= n.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::make(a.shape(), std::move(v), {a, b}, [](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    if (auto* ga = grad_sink(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i] * bv[i];
    if (auto* gb = grad_sink(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*gb)[i] += n.grad[i] * av[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = s * a.data()[i];
  return Tensor<T>::make(a.shape(), std::move(v), {a}, [s](Node<T>& n) {
    if (auto* g = grad_sink(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += s * n.grad[i];
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + s;
  return Tensor<T>::make(a.shape(), std::move(v), {a},
                         [](Node<T>& n) { detail::accumulate(grad_sink(n, 0), n.grad); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = T(1) / (T(1) + std::exp(-a.data()[i]));
  return Tensor<T>::make(a.shape(), std::move(v), {a}, [](Node<T>& n) {
    if (auto* g = grad_sink(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        (*g)[i] += n.grad[i] * n.value[i] * (T(1) - n.value[i]);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  return Tensor<T>::make(a.shape(), std::move(v), {a}, [](Node<T>& n) {
    const auto& x = n.inputs[0]->value;
    if (auto* g = grad_sink(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        if (x[i] > T(0)) (*g)[i] += n.grad[i];
  });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    T x = a.data()[i];
    v[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  return Tensor<T>::make(a.shape(), std::move(v), {a}, [inv_sqrt2](Node<T>& n) {
    const auto& x = n.inputs[0]->value;
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    if (auto* g = grad_sink(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
        T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
        (*g)[i] += n.grad[i] * (cdf + x[i] * pdf);
      }
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double s = 0;
  for (T x : a.data()) s += static_cast<double>(x);
  return Tensor<T>::make({1}, {static_cast<T>(s)}, {a}, [](Node<T>& n) {
    if (auto* g = grad_sink(n, 0))
      for (auto& x : *g) x += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------- structural

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  return Tensor<T>::make(std::move(shape), a.values(), {a},
                         [](Node<T>& n) { detail::accumulate(grad_sink(n, 0), n.grad); });
}

namespace detail {
// Splits a shape around `axis` into (outer, axis extent, inner).
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  if (axis >= s.size()) throw ShapeError("axis out of range for " + to_string(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < out_shape.size(); ++d)
      if (d != axis && p.dim(d) != out_shape[d])
        throw ShapeError("concat: shape mismatch " + to_string(p.shape()) + " vs " +
                         to_string(out_shape));
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  std::size_t outer, inner;
  detail::split_axis(out_shape, axis, outer, inner);
  std::vector<T> v(numel_of(out_shape));
  std::vector<std::size_t> extents;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t len = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().begin() + o * len, len, v.begin() + o * total * inner + off);
    off += len;
    extents.push_back(p.dim(axis));
  }
  return Tensor<T>::make(out_shape, std::move(v), parts, [extents, outer, inner, total](Node<T>& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      std::size_t len = extents[k] * inner;
      if (auto* g = grad_sink(n, k))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < len; ++i) (*g)[o * len + i] += n.grad[o * total * inner + off + i];
      off += len;
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  std::size_t outer, inner;
  detail::split_axis(a.shape(), axis, outer, inner);
  const std::size_t extent = a.dim(axis);
  if (start + len > extent) throw ShapeError("slice: range exceeds axis extent");
  Shape s = a.shape();
  s[axis] = len;
  std::vector<T> v(numel_of(s));
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.data().begin() + (o * extent + start) * inner, len * inner,
                v.begin() + o * len * inner);
  return Tensor<T>::make(s, std::move(v), {a}, [=](Node<T>& n) {
    if (auto* g = grad_sink(n, 0))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len * inner; ++i)
          (*g)[(o * extent + start) * inner + i] += n.grad[o * len * inner + i];
  });
}

/// Multiplies x by s broadcast along `axis` (s.numel() == x.dim(axis)).
template <typename T>
Tensor<T> mul_axis(const Tensor<T>& x, const Tensor<T>& s, std::size_t axis) {
  std::size_t outer, inner;
  detail::split_axis(x.shape(), axis, outer, inner);
  const std::size_t extent = x.dim(axis);
  if (s.numel() != extent) throw ShapeError("mul_axis: scale length mismatch");
  std::vector<T> v(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < extent; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        std::size_t k = (o * extent + c) * inner + i;
        v[k] = x.data()[k] * s.data()[c];
      }
  return Tensor<T>::make(x.shape(), std::move(v), {x, s}, [=](Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    const auto& sv = n.inputs[1]->value;
    auto* gx = grad_sink(n, 0);
    auto* gs = grad_sink(n, 1);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t c = 0; c < extent; ++c)
        for (std::size_t i = 0; i < inner; ++i) {
          std::size_t k = (o * extent + c) * inner + i;
          if (gx) (*gx)[k] += n.grad[k] * sv[c];
          if (gs) (*gs)[c] += n.grad[k] * xv[k];
        }
  });
}

// ---------------------------------------------------------------- matrix ops

/// Batched matrix product over the trailing two axes; leading axes must agree.
/// With trans_b, b holds [..., N, K] and is used transposed.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  if (a.rank() < 2 || a.rank() != b.rank()) throw ShapeError("bmm: rank mismatch");
  const std::size_t r = a.rank();
  for (std::size_t d = 0; d + 2 < r; ++d)
    if (a.dim(d) != b.dim(d)) throw ShapeError("bmm: batch mismatch");
  const std::size_t M = a.dim(r - 2), K = a.dim(r - 1);
  const std::size_t N = trans_b ? b.dim(r - 2) : b.dim(r - 1);
  if ((trans_b ? b.dim(r - 1) : b.dim(r - 2)) != K)
    throw ShapeError("bmm: inner dimension mismatch " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  const std::size_t batch = a.numel() / (M * K);
  Shape s = a.shape();
  s[r - 1] = N;
  std::vector<T> v(batch * M * N);
  using detail::MapC;
  using detail::MapM;
  for (std::size_t i = 0; i < batch; ++i) {
    MapC<T> A(a.data().data() + i * M * K, M, K);
    MapM<T> C(v.data() + i * M * N, M, N);
    if (trans_b) {
      MapC<T> B(b.data().data() + i * N * K, N, K);
      C.noalias() = A * B.transpose();
    } else {
      MapC<T> B(b.data().data() + i * K * N, K, N);
      C.noalias() = A * B;
    }
  }
  return Tensor<T>::make(s, std::move(v), {a, b}, [=](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    auto* ga = grad_sink(n, 0);
    auto* gb = grad_sink(n, 1);
    for (std::size_t i = 0; i < batch; ++i) {
      MapC<T> G(n.grad.data() + i * M * N, M, N);
      MapC<T> A(av.data() + i * M * K, M, K);
      if (trans_b) {
        MapC<T> B(bv.data() + i * N * K, N, K);
        if (ga) MapM<T>(ga->data() + i * M * K, M, K).noalias() += G * B;
        if (gb) MapM<T>(gb->data() + i * N * K, N, K).noalias() += G.transpose() * A;
      } else {
        MapC<T> B(bv.data() + i * K * N, K, N);
        if (ga) MapM<T>(ga->data() + i * M * K, M, K).noalias() += G * B.transpose();
        if (gb) MapM<T>(gb->data() + i * K * N, K, N).noalias() += A.transpose() * G;
      }
    }
  });
}

/// Fully connected layer on row vectors: y = x W^T + b, x [R, in], W [out, in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(x.shape(), 2, "linear");
  detail::require_rank(w.shape(), 2, "linear weight");
  const std::size_t R = x.dim(0), In = x.dim(1), Out = w.dim(0);
  if (w.dim(1) != In)
    throw ShapeError("linear: input width " + std::to_string(In) + " vs weight " +
                     to_string(w.shape()));
  if (b.defined() && b.numel() != Out) throw ShapeError("linear: bias length mismatch");
  std::vector<T> v(R * Out);
  using detail::MapC;
  using detail::MapM;
  MapM<T> Y(v.data(), R, Out);
  Y.noalias() = MapC<T>(x.data().data(), R, In) * MapC<T>(w.data().data(), Out, In).transpose();
  if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data().data(), Out);
  return Tensor<T>::make({R, Out}, std::move(v), {x, w, b}, [=](Node<T>& n) {
    MapC<T> G(n.grad.data(), R, Out);
    if (auto* gx = grad_sink(n, 0))
      MapM<T>(gx->data(), R, In).noalias() += G * MapC<T>(n.inputs[1]->value.data(), Out, In);
    if (auto* gw = grad_sink(n, 1))
      MapM<T>(gw->data(), Out, In).noalias() += G.transpose() * MapC<T>(n.inputs[0]->value.data(), R, In);
    // Plain loops: Eigen's vectorised reductions round differently
    // depending on buffer alignment, which breaks run-to-run reproducibility.
    if (auto* gb = grad_sink(n, 2))
      for (std::size_t o = 0; o < Out; ++o) {
        double acc = 0;
        for (std::size_t r = 0; r < R; ++r) acc += n.grad[r * Out + o];
        (*gb)[o] += static_cast<T>(acc);
      }
  });
}

// ---------------------------------------------------------------- convolution

namespace detail {

// Unfolds one image [C, H, W] into columns [C*k*k, Ho*Wo].
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* col) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oi = 0; oi < Ho; ++oi) {
          long ii = static_cast<long>(oi * stride + ki) - static_cast<long>(pad);
          for (std::size_t oj = 0; oj < Wo; ++oj) {
            long jj = static_cast<long>(oj * stride + kj) - static_cast<long>(pad);
            row[oi * Wo + oj] = (ii >= 0 && ii < static_cast<long>(H) && jj >= 0 && jj < static_cast<long>(W))
                                    ? x[(c * H + ii) * W + jj]
                                    : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* x) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oi = 0; oi < Ho; ++oi) {
          long ii = static_cast<long>(oi * stride + ki) - static_cast<long>(pad);
          if (ii < 0 || ii >= static_cast<long>(H)) continue;
          for (std::size_t oj = 0; oj < Wo; ++oj) {
            long jj = static_cast<long>(oj * stride + kj) - static_cast<long>(pad);
            if (jj >= 0 && jj < static_cast<long>(W)) x[(c * H + ii) * W + jj] += row[oi * Wo + oj];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation. x [N, Cin, H, W], w [Cout, Cin, k, k], optional b [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {},
                 std::size_t stride = 1, std::size_t pad = 0) {
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(w.shape(), 4, "conv2d kernel");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin || w.dim(3) != k)
    throw ShapeError("conv2d: kernel " + to_string(w.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  if (b.defined() && b.numel() != Cout) throw ShapeError("conv2d: bias length mismatch");
  if (H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t P = Ho * Wo, K = Cin * k * k;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  std::vector<T> v(N * Cout * P);
  std::vector<T> col(direct ? 0 : K * P);
  using detail::MapC;
  using detail::MapM;
  MapC<T> Wm(w.data().data(), Cout, K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.data().data() + n * Cin * H * W;
    if (!direct) detail::im2col(xn, Cin, H, W, k, stride, pad, Ho, Wo, col.data());
    MapM<T> Y(v.data() + n * Cout * P, Cout, P);
    Y.noalias() = Wm * MapC<T>(direct ? xn : col.data(), K, P);
    if (b.defined())
      for (std::size_t o = 0; o < Cout; ++o) Y.row(o).array() += b.data()[o];
  }
  return Tensor<T>::make({N, Cout, Ho, Wo}, std::move(v), {x, w, b}, [=](Node<T>& nd) {
    const auto& xv = nd.inputs[0]->value;
    MapC<T> Wm(nd.inputs[1]->value.data(), Cout, K);
    auto* gx = grad_sink(nd, 0);
    auto* gw = grad_sink(nd, 1);
    auto* gb = grad_sink(nd, 2);
    std::vector<T> col(direct ? 0 : K * P);
    for (std::size_t n = 0; n < N; ++n) {
      MapC<T> G(nd.grad.data() + n * Cout * P, Cout, P);
      const T* xn = xv.data() + n * Cin * H * W;
      if (gw) {
        if (!direct) detail::im2col(xn, Cin, H, W, k, stride, pad, Ho, Wo, col.data());
        MapM<T>(gw->data(), Cout, K).noalias() += G * MapC<T>(direct ? xn : col.data(), K, P).transpose();
      }
      if (gx) {
        if (direct) {
          MapM<T>(gx->data() + n * Cin * H * W, K, P).noalias() += Wm.transpose() * G;
        } else {
          MapM<T>(col.data(), K, P).noalias() = Wm.transpose() * G;
          detail::col2im(col.data(), Cin, H, W, k, stride, pad, Ho, Wo, gx->data() + n * Cin * H * W);
        }
      }
      if (gb)
        for (std::size_t o = 0; o < Cout; ++o) {
          double acc = 0;
          for (std::size_t q = 0; q < P; ++q) acc += G(o, q);
          (*gb)[o] += static_cast<T>(acc);
        }
    }
  });
}

/// Per-channel k×k convolution with zero padding. w [C, 1, k, k], optional b [C].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           std::size_t pad) {
  detail::require_rank(x.shape(), 4, "depthwise_conv2d input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (w.rank() != 4 || w.dim(0) != C || w.dim(1) != 1 || w.dim(2) != w.dim(3))
    throw ShapeError("depthwise_conv2d: kernel " + to_string(w.shape()) + " vs input " +
                     to_string(x.shape()));
  const std::size_t k = w.dim(2);
  if (H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("depthwise_conv2d: kernel too large");
  const std::size_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  std::vector<T> v(N * C * Ho * Wo);
  const long lp = static_cast<long>(pad);
  auto in_range = [H, W](long i, long j) {
    return i >= 0 && j >= 0 && i < static_cast<long>(H) && j < static_cast<long>(W);
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* xc = x.data().data() + (n * C + c) * H * W;
      const T* wc = w.data().data() + c * k * k;
      T* yc = v.data() + (n * C + c) * Ho * Wo;
      const T bias = b.defined() ? b.data()[c] : T(0);
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          T acc = bias;
          for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
              long ii = static_cast<long>(i + ki) - lp, jj = static_cast<long>(j + kj) - lp;
              if (in_range(ii, jj)) acc += wc[ki * k + kj] * xc[ii * W + jj];
            }
          yc[i * Wo + j] = acc;
        }
    }
  return Tensor<T>::make({N, C, Ho, Wo}, std::move(v), {x, w, b}, [=](Node<T>& nd) {
    const auto& xv = nd.inputs[0]->value;
    const auto& wv = nd.inputs[1]->value;
    auto* gx = grad_sink(nd, 0);
    auto* gw = grad_sink(nd, 1);
    auto* gb = grad_sink(nd, 2);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T* xc = xv.data() + (n * C + c) * H * W;
        const T* wc = wv.data() + c * k * k;
        const T* gc = nd.grad.data() + (n * C + c) * Ho * Wo;
        for (std::size_t i = 0; i < Ho; ++i)
          for (std::size_t j = 0; j < Wo; ++j) {
            const T g = gc[i * Wo + j];
            if (gb) (*gb)[c] += g;
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                long ii = static_cast<long>(i + ki) - lp, jj = static_cast<long>(j + kj) - lp;
                if (!in_range(ii, jj)) continue;
                if (gw) (*gw)[c * k * k + ki * k + kj] += g * xc[ii * W + jj];
                if (gx) (*gx)[(n * C + c) * H * W + ii * W + jj] += g * wc[ki * k + kj];
              }
          }
      }
  });
}

/// [N, C, H, W] -> [N, C*r*r, H/r, W/r].
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  detail::require_rank(x.shape(), 4, "pixel_unshuffle");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % r || W % r) throw ShapeError("pixel_unshuffle: extent not divisible by factor");
  const std::size_t Ho = H / r, Wo = W / r, Co = C * r * r;
  std::vector<std::size_t> map(x.numel());  // output index -> input index
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t h = 0; h < Ho; ++h)
            for (std::size_t w = 0; w < Wo; ++w) {
              std::size_t oc = c * r * r + i * r + j;
              map[((n * Co + oc) * Ho + h) * Wo + w] = ((n * C + c) * H + h * r + i) * W + w * r + j;
            }
  std::vector<T> v(x.numel());
  for (std::size_t o = 0; o < v.size(); ++o) v[o] = x.data()[map[o]];
  return Tensor<T>::make({N, Co, Ho, Wo}, std::move(v), {x}, [map = std::move(map)](Node<T>& n) {
    if (auto* g = grad_sink(n, 0))
      for (std::size_t o = 0; o < map.size(); ++o) (*g)[map[o]] += n.grad[o];
  });
}

/// [N, C*r*r, H, W] -> [N, C, H*r, W*r].
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  detail::require_rank(x.shape(), 4, "pixel_shuffle");
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (Ci % (r * r)) throw ShapeError("pixel_shuffle: channels not divisible by factor^2");
  const std::size_t C = Ci / (r * r), Ho = H * r, Wo = W * r;
  std::vector<std::size_t> map(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
              std::size_t ic = c * r * r + i * r + j;
              map[((n * C + c) * Ho + h * r + i) * Wo + w * r + j] = ((n * Ci + ic) * H + h) * W + w;
            }
  std::vector<T> v(x.numel());
  for (std::size_t o = 0; o < v.size(); ++o) v[o] = x.data()[map[o]];
  return Tensor<T>::make({N, C, Ho, Wo}, std::move(v), {x}, [map = std::move(map)](Node<T>& n) {
    if (auto* g = grad_sink(n, 0))
      for (std::size_t o = 0; o < map.size(); ++o) (*g)[map[o]] += n.grad[o];
  });
}

// ---------------------------------------------------------------- resampling

namespace detail {
struct Tap {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel (align-corners-false) source taps; negative positions clamp to 0.
inline std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = std::max((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0);
    auto i0 = std::min(static_cast<std::size_t>(src), in - 1);
    std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

/// Bilinear resampling of the trailing two axes, align-corners-false.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x.shape(), 4, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: zero-size target");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == 0 || W == 0) throw ShapeError("bilinear_resize: empty input");
  if (H == out_h && W == out_w)
    return Tensor<T>::make(x.shape(), x.values(), {x},
                           [](Node<T>& n) { detail::accumulate(grad_sink(n, 0), n.grad); });
  auto ty = detail::bilinear_taps(H, out_h);
  auto tx = detail::bilinear_taps(W, out_w);
  std::vector<T> v(N * C * out_h * out_w);
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* src = x.data().data() + p * H * W;
    T* dst = v.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(ty[i].frac);
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(tx[j].frac);
        T top = (T(1) - fx) * src[ty[i].i0 * W + tx[j].i0] + fx * src[ty[i].i0 * W + tx[j].i1];
        T bot = (T(1) - fx) * src[ty[i].i1 * W + tx[j].i0] + fx * src[ty[i].i1 * W + tx[j].i1];
        dst[i * out_w + j] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  return Tensor<T>::make({N, C, out_h, out_w}, std::move(v), {x}, [=](Node<T>& n) {
    auto* g = grad_sink(n, 0);
    if (!g) return;
    for (std::size_t p = 0; p < N * C; ++p) {
      T* gs = g->data() + p * H * W;
      const T* gd = n.grad.data() + p * out_h * out_w;
      for (std::size_t i = 0; i < out_h; ++i) {
        const T fy = static_cast<T>(ty[i].frac);
        for (std::size_t j = 0; j < out_w; ++j) {
          const T fx = static_cast<T>(tx[j].frac);
          const T gv = gd[i * out_w + j];
          gs[ty[i].i0 * W + tx[j].i0] += gv * (T(1) - fy) * (T(1) - fx);
          gs[ty[i].i0 * W + tx[j].i1] += gv * (T(1) - fy) * fx;
          gs[ty[i].i1 * W + tx[j].i0] += gv * fy * (T(1) - fx);
          gs[ty[i].i1 * W + tx[j].i1] += gv * fy * fx;
        }
      }
    }
  });
}

namespace detail {
// Reflect index without repeating the edge sample (…2 1 | 0 1 2 … n-1 | n-2 …).
inline std::size_t reflect(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n) - 2;
  i = ((i % period) + period) % period;
  return static_cast<std::size_t>(i < static_cast<long>(n) ? i : period - i);
}
}  // namespace detail

template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::size_t top, std::size_t bottom, std::size_t left,
                      std::size_t right) {
  detail::require_rank(x.shape(), 4, "pad_reflect");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  // Padding wider than the extent keeps reflecting back and forth.
  const std::size_t Ho = H + top + bottom, Wo = W + left + right;
  std::vector<std::size_t> map(N * C * Ho * Wo);
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t i = 0; i < Ho; ++i) {
      std::size_t si = detail::reflect(static_cast<long>(i) - static_cast<long>(top), H);
      for (std::size_t j = 0; j < Wo; ++j) {
        std::size_t sj = detail::reflect(static_cast<long>(j) - static_cast<long>(left), W);
        map[(p * Ho + i) * Wo + j] = (p * H + si) * W + sj;
      }
    }
  std::vector<T> v(map.size());
  for (std::size_t o = 0; o < v.size(); ++o) v[o] = x.data()[map[o]];
  return Tensor<T>::make({N, C, Ho, Wo}, std::move(v), {x}, [map = std::move(map)](Node<T>& n) {
    if (auto* g = grad_sink(n, 0))
      for (std::size_t o = 0; o < map.size(); ++o) (*g)[map[o]] += n.grad[o];
  });
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  detail::require_rank(x.shape(), 4, "crop");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (top + h > H || left + w > W) throw ShapeError("crop: window exceeds input");
  if (top == 0 && left == 0 && h == H && w == W) return x;
  std::vector<T> v(N * C * h * w);
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(x.data().begin() + (p * H + top + i) * W + left, w, v.begin() + (p * h + i) * w);
  return Tensor<T>::make({N, C, h, w}, std::move(v), {x}, [=](Node<T>& n) {
    if (auto* g = grad_sink(n, 0))
      for (std::size_t p = 0; p < N * C; ++p)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            (*g)[(p * H + top + i) * W + left + j] += n.grad[(p * h + i) * w + j];
  });
}

// ---------------------------------------------------------------- normalisation

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const std::size_t D = x.shape().back(), R = x.numel() / D;
  std::vector<T> v(x.numel());
  for (std::size_t r = 0; r < R; ++r) {
    const T* xr = x.data().data() + r * D;
    T* yr = v.data() + r * D;
    T mx = *std::max_element(xr, xr + D);
    T s = T(0);
    for (std::size_t d = 0; d < D; ++d) s += (yr[d] = std::exp(xr[d] - mx));
    for (std::size_t d = 0; d < D; ++d) yr[d] /= s;
  }
  return Tensor<T>::make(x.shape(), std::move(v), {x}, [=](Node<T>& n) {
    auto* g = grad_sink(n, 0);
    if (!g) return;
    for (std::size_t r = 0; r < R; ++r) {
      const T* y = n.value.data() + r * D;
      const T* gy = n.grad.data() + r * D;
      T dot = T(0);
      for (std::size_t d = 0; d < D; ++d) dot += gy[d] * y[d];
      for (std::size_t d = 0; d < D; ++d) (*g)[r * D + d] += y[d] * (gy[d] - dot);
    }
  });
}

/// Divides each row of the last axis by max(||row||, eps).
template <typename T>
Tensor<T> l2_normalize_last(const Tensor<T>& x, T eps = T(1e-12)) {
  const std::size_t D = x.shape().back(), R = x.numel() / D;
  std::vector<T> v(x.numel()), norms(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* xr = x.data().data() + r * D;
    T s = T(0);
    for (std::size_t d = 0; d < D; ++d) s += xr[d] * xr[d];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t d = 0; d < D; ++d) v[r * D + d] = xr[d] / norms[r];
  }
  return Tensor<T>::make(x.shape(), std::move(v), {x}, [=](Node<T>& n) {
    auto* g = grad_sink(n, 0);
    if (!g) return;
    for (std::size_t r = 0; r < R; ++r) {
      const T* y = n.value.data() + r * D;
      const T* gy = n.grad.data() + r * D;
      if (norms[r] > eps) {
        T dot = T(0);
        for (std::size_t d = 0; d < D; ++d) dot += gy[d] * y[d];
        for (std::size_t d = 0; d < D; ++d) (*g)[r * D + d] += (gy[d] - y[d] * dot) / norms[r];
      } else {
        for (std::size_t d = 0; d < D; ++d) (*g)[r * D + d] += gy[d] / eps;
      }
    }
  });
}

/// Layer normalisation across channels at every pixel of [N, C, H, W].
template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                              T eps = T(1e-5)) {
  detail::require_rank(x.shape(), 4, "layer_norm_channels");
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (w.numel() != C || b.numel() != C) throw ShapeError("layer_norm_channels: affine length mismatch");
  std::vector<T> v(x.numel()), xhat(x.numel()), inv_std(N * P);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const T* xp = x.data().data() + n * C * P + p;
      T mu = T(0);
      for (std::size_t c = 0; c < C; ++c) mu += xp[c * P];
      mu /= static_cast<T>(C);
      T var = T(0);
      for (std::size_t c = 0; c < C; ++c) var += (xp[c * P] - mu) * (xp[c * P] - mu);
      var /= static_cast<T>(C);
      T is = T(1) / std::sqrt(var + eps);
      inv_std[n * P + p] = is;
      for (std::size_t c = 0; c < C; ++c) {
        std::size_t k = n * C * P + c * P + p;
        xhat[k] = (xp[c * P] - mu) * is;
        v[k] = xhat[k] * w.data()[c] + b.data()[c];
      }
    }
  return Tensor<T>::make(x.shape(), std::move(v), {x, w, b},
                         [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& nd) {
    const auto& wv = nd.inputs[1]->value;
    auto* gx = grad_sink(nd, 0);
    auto* gw = grad_sink(nd, 1);
    auto* gb = grad_sink(nd, 2);
    std::vector<T> dxh(C);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        T m1 = T(0), m2 = T(0);
        for (std::size_t c = 0; c < C; ++c) {
          std::size_t k = n * C * P + c * P + p;
          T g = nd.grad[k];
          if (gw) (*gw)[c] += g * xhat[k];
          if (gb) (*gb)[c] += g;
          dxh[c] = g * wv[c];
          m1 += dxh[c];
          m2 += dxh[c] * xhat[k];
        }
        if (!gx) continue;
        m1 /= static_cast<T>(C);
        m2 /= static_cast<T>(C);
        for (std::size_t c = 0; c < C; ++c) {
          std::size_t k = n * C * P + c * P + p;
          (*gx)[k] += inv_std[n * P + p] * (dxh[c] - m1 - xhat[k] * m2);
        }
      }
  });
}

// ---------------------------------------------------------------- fused losses

/// mean(sqrt((a-b)^2 + eps^2))
template <typename T>
Tensor<T> charbonnier_mean(const Tensor<T>& a, const Tensor<T>& b, T eps) {
  require_same_shape(a, b, "charbonnier");
  const std::size_t M = a.numel();
  double s = 0;
  for (std::size_t i = 0; i < M; ++i) {
    T d = a.data()[i] - b.data()[i];
    s += static_cast<double>(std::sqrt(d * d + eps * eps));
  }
  return Tensor<T>::make({1}, {static_cast<T>(s / static_cast<double>(M))}, {a, b}, [=](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    auto* ga = grad_sink(n, 0);
    auto* gb = grad_sink(n, 1);
    const T g0 = n.grad[0] / static_cast<T>(M);
    for (std::size_t i = 0; i < M; ++i) {
      T d = av[i] - bv[i];
      T gd = g0 * d / std::sqrt(d * d + eps * eps);
      if (ga) (*ga)[i] += gd;
      if (gb) (*gb)[i] -= gd;
    }
  });
}

/// mean(|a - b|); the subgradient at 0 is 0.
template <typename T>
Tensor<T> l1_mean(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "l1_mean");
  const std::size_t M = a.numel();
  double s = 0;
  for (std::size_t i = 0; i < M; ++i) s += static_cast<double>(std::abs(a.data()[i] - b.data()[i]));
  return Tensor<T>::make({1}, {static_cast<T>(s / static_cast<double>(M))}, {a, b}, [=](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    auto* ga = grad_sink(n, 0);
    auto* gb = grad_sink(n, 1);
    const T g0 = n.grad[0] / static_cast<T>(M);
    for (std::size_t i = 0; i < M; ++i) {
      T d = av[i] - bv[i];
      T sg = d > T(0) ? g0 : (d < T(0) ? -g0 : T(0));
      if (ga) (*ga)[i] += sg;
      if (gb) (*gb)[i] -= sg;
    }
  });
}

/// sum(|x|)
template <typename T>
Tensor<T> abs_sum(const Tensor<T>& x) {
  double s = 0;
  for (T v : x.data()) s += static_cast<double>(std::abs(v));
  return Tensor<T>::make({1}, {static_cast<T>(s)}, {x}, [](Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    if (auto* g = grad_sink(n, 0))
      for (std::size_t i = 0; i < xv.size(); ++i)
        (*g)[i] += xv[i] > T(0) ? n.grad[0] : (xv[i] < T(0) ? -n.grad[0] : T(0));
  });
}

/// Per-channel 5-point Laplacian [[0,1,0],[1,-4,1],[0,1,0]] with reflect borders.
template <typename T>
Tensor<T> laplacian(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "laplacian");
  const std::size_t H = x.dim(2), W = x.dim(3), P = x.dim(0) * x.dim(1);
  if (H < 2 || W < 2) throw ShapeError("laplacian: needs at least 2x2");
  auto rf = [](long i, std::size_t n) { return detail::reflect(i, n); };
  std::vector<T> v(x.numel());
  for (std::size_t p = 0; p < P; ++p) {
    const T* s = x.data().data() + p * H * W;
    T* d = v.data() + p * H * W;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        long li = static_cast<long>(i), lj = static_cast<long>(j);
        d[i * W + j] = s[rf(li - 1, H) * W + j] + s[rf(li + 1, H) * W + j] + s[i * W + rf(lj - 1, W)] +
                       s[i * W + rf(lj + 1, W)] - T(4) * s[i * W + j];
      }
  }
  return Tensor<T>::make(x.shape(), std::move(v), {x}, [=](Node<T>& n) {
    auto* g = grad_sink(n, 0);
    if (!g) return;
    for (std::size_t p = 0; p < P; ++p) {
      T* gs = g->data() + p * H * W;
      const T* gd = n.grad.data() + p * H * W;
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          long li = static_cast<long>(i), lj = static_cast<long>(j);
          const T gv = gd[i * W + j];
          gs[rf(li - 1, H) * W + j] += gv;
          gs[rf(li + 1, H) * W + j] += gv;
          gs[i * W + rf(lj - 1, W)] += gv;
          gs[i * W + rf(lj + 1, W)] += gv;
          gs[i * W + j] -= T(4) * gv;
        }
    }
  });
}

}  // namespace nerd::ops
