#pragma once

// Coordinate-based implicit representation of an image.
//
// A feature map is read as a grid of latent codes sitting at pixel centres.
// Each output pixel is a query coordinate x; the decoder MLP is evaluated on
// (z_j, gamma(x)) for the four latents surrounding x and the results are
// blended with area (bilinear) weights that sum to one.

#include <cmath>
#include <string>
#include <vector>

#include "nerd/layers.hpp"

namespace nerd::inr {

enum class GridScale { coarse, fine };

inline const char* to_string(GridScale g) { return g == GridScale::coarse ? "coarse" : "fine"; }

/// Normalised coordinate of pixel centre i on an axis of n pixels.
inline double axis_coord(std::size_t i, std::size_t n) {
  return -1.0 + (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n);
}

/// Pixel-centre coordinates in [-1, 1], two values (row, column) per pixel.
struct CoordGrid {
  std::size_t h = 0, w = 0;
  std::vector<double> coords;

  std::size_t size() const { return h * w; }
  double row(std::size_t q) const { return coords[2 * q]; }
  double col(std::size_t q) const { return coords[2 * q + 1]; }
};

inline CoordGrid make_coord_grid(std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw ShapeError("make_coord_grid: zero extent");
  CoordGrid g{h, w, std::vector<double>(h * w * 2)};
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      g.coords[2 * (i * w + j)] = axis_coord(i, h);
      g.coords[2 * (i * w + j) + 1] = axis_coord(j, w);
    }
  return g;
}

struct EncodedCoords {
  std::size_t h = 0, w = 0, width = 0;
  std::vector<double> values;  // h*w rows of `width`
};

/// gamma(x) = [sin(x), cos(x), ..., sin(2^{L-1} x), cos(2^{L-1} x)] applied to
/// the row coordinate and then the column coordinate: 2*2L values per pixel.
inline EncodedCoords positional_encode(const CoordGrid& g, std::size_t L) {
  if (L == 0) throw std::invalid_argument("positional_encode: L must be >= 1");
  EncodedCoords e{g.h, g.w, 4 * L, std::vector<double>(g.size() * 4 * L)};
  for (std::size_t q = 0; q < g.size(); ++q) {
    double* out = e.values.data() + q * e.width;
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const double x = g.coords[2 * q + axis];
      for (std::size_t k = 0; k < L; ++k) {
        const double f = std::ldexp(x, static_cast<int>(k));
        out[axis * 2 * L + 2 * k] = std::sin(f);
        out[axis * 2 * L + 2 * k + 1] = std::cos(f);
      }
    }
  }
  return e;
}

/// Unencoded coordinates (row, column), used when the encoding is ablated.
inline EncodedCoords raw_coords(const CoordGrid& g) { return {g.h, g.w, 2, g.coords}; }

/// Corner selection and blend weights for every query against an Hg×Wg grid.
struct EnsembleWeights {
  std::size_t queries = 0;
  std::size_t k = 4;  // corners per query (1 without interpolation)
  std::vector<std::size_t> index;  // flat latent index per (query, corner)
  std::vector<double> weight;
};

/// Corners are ordered (top-left, top-right, bottom-left, bottom-right); each
/// corner's weight is the area of the rectangle spanned by the query and the
/// diagonally opposite corner, in units of the cell area. Queries beyond the
/// outermost latent centres are clamped onto the border cell. Without
/// interpolation only the nearest latent is kept, with weight 1.
inline EnsembleWeights local_ensemble_weights(std::size_t grid_h, std::size_t grid_w, const CoordGrid& query,
                                              bool interpolate = true) {
  if (grid_h < 2 || grid_w < 2) throw ShapeError("local_ensemble: feature grid must be at least 2x2");
  EnsembleWeights s;
  s.queries = query.size();
  s.k = interpolate ? 4 : 1;
  s.index.resize(s.queries * s.k);
  s.weight.resize(s.queries * s.k);
  auto locate = [](double c, std::size_t n, std::size_t& i0, double& frac) {
    // Inverse of axis_coord, clamped to the span of latent centres.
    double u = ((c + 1.0) * static_cast<double>(n) - 1.0) / 2.0;
    u = std::clamp(u, 0.0, static_cast<double>(n - 1));
    i0 = std::min(static_cast<std::size_t>(u), n - 2);
    frac = u - static_cast<double>(i0);
  };
  for (std::size_t q = 0; q < s.queries; ++q) {
    std::size_t r0, c0;
    double fr, fc;
    locate(query.row(q), grid_h, r0, fr);
    locate(query.col(q), grid_w, c0, fc);
    const std::size_t idx[4] = {r0 * grid_w + c0, r0 * grid_w + c0 + 1, (r0 + 1) * grid_w + c0,
                                (r0 + 1) * grid_w + c0 + 1};
    const double w[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
    if (interpolate) {
      for (std::size_t j = 0; j < 4; ++j) {
        s.index[q * 4 + j] = idx[j];
        s.weight[q * 4 + j] = w[j];
      }
    } else {
      std::size_t best = 0;
      for (std::size_t j = 1; j < 4; ++j)
        if (w[j] > w[best]) best = j;
      s.index[q] = idx[best];
      s.weight[q] = 1.0;
    }
  }
  return s;
}

/// Gathers latent codes into rows: out[(n*Q + q)*K + k, c] = grid[n, c, index[q*K + k]].
template <typename T>
Tensor<T> gather_latents(const Tensor<T>& grid, const EnsembleWeights& s) {
  if (grid.rank() != 4) throw ShapeError("gather_latents: grid must be [N, C, H, W]");
  const std::size_t N = grid.dim(0), C = grid.dim(1), P = grid.dim(2) * grid.dim(3);
  const std::size_t R = s.queries * s.k;
  std::vector<T> v(N * R * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) v[(n * R + r) * C + c] = grid.data()[(n * C + c) * P + s.index[r]];
  return Tensor<T>::make({N * R, C}, std::move(v), {grid}, [N, C, P, R, index = s.index](Node<T>& nd) {
    auto* g = grad_sink(nd, 0);
    if (!g) return;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) (*g)[(n * C + c) * P + index[r]] += nd.grad[(n * R + r) * C + c];
  });
}

/// Blends per-corner predictions y [N*Q*K, D] into an image [N, D, h, w].
template <typename T>
Tensor<T> blend_corners(const Tensor<T>& y, const EnsembleWeights& s, std::size_t h, std::size_t w) {
  const std::size_t Q = s.queries, K = s.k, D = y.dim(1);
  if (Q != h * w || y.dim(0) % (Q * K)) throw ShapeError("blend_corners: query count mismatch");
  const std::size_t N = y.dim(0) / (Q * K);
  std::vector<T> v(N * D * Q, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t q = 0; q < Q; ++q)
      for (std::size_t k = 0; k < K; ++k) {
        const T wk = static_cast<T>(s.weight[q * K + k]);
        const T* row = y.data().data() + ((n * Q + q) * K + k) * D;
        for (std::size_t d = 0; d < D; ++d) v[(n * D + d) * Q + q] += wk * row[d];
      }
  return Tensor<T>::make({N, D, h, w}, std::move(v), {y}, [N, Q, K, D, weight = s.weight](Node<T>& nd) {
    auto* g = grad_sink(nd, 0);
    if (!g) return;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t q = 0; q < Q; ++q)
        for (std::size_t k = 0; k < K; ++k) {
          const T wk = static_cast<T>(weight[q * K + k]);
          T* row = g->data() + ((n * Q + q) * K + k) * D;
          for (std::size_t d = 0; d < D; ++d) row[d] += wk * nd.grad[(n * D + d) * Q + q];
        }
  });
}

/// Latents around each query plus their blend weights.
template <typename T>
struct EnsembleSample {
  Tensor<T> latents;  // [N*Q*K, C]
  EnsembleWeights weights;
  std::size_t batch = 1;
};

template <typename T>
EnsembleSample<T> local_ensemble_sample(const Tensor<T>& grid, const CoordGrid& query, bool interpolate = true) {
  if (grid.rank() != 4) throw ShapeError("local_ensemble_sample: grid must be [N, C, H, W]");
  auto w = local_ensemble_weights(grid.dim(2), grid.dim(3), query, interpolate);
  auto latents = gather_latents(grid, w);
  return {std::move(latents), std::move(w), grid.dim(0)};
}

/// Three fully connected layers with ReLU between them; output is RGB.
template <typename T>
struct InrDecoder {
  Linear<T> fc0, fc1, fc2;
  std::size_t in_width = 0;

  static InrDecoder declare(ParamStore<T>& store, const std::string& name, std::size_t in_width,
                            std::size_t hidden = 256) {
    InrDecoder d;
    d.fc0 = Linear<T>::declare(store, name + ".fc0", in_width, hidden);
    d.fc1 = Linear<T>::declare(store, name + ".fc1", hidden, hidden);
    d.fc2 = Linear<T>::declare(store, name + ".fc2", hidden, 3);
    d.in_width = in_width;
    return d;
  }

  Tensor<T> operator()(const Tensor<T>& rows) const {
    if (rows.dim(1) != in_width)
      throw ShapeError("inr decoder: input width " + std::to_string(rows.dim(1)) + ", expected " +
                       std::to_string(in_width));
    return fc2(ops::relu(fc1(ops::relu(fc0(rows)))));
  }
};

/// s(x) = sum_j w_j f(z_j, gamma(x)) for every query, as an [N, 3, h, w] image.
template <typename T>
Tensor<T> inr_decode(const EnsembleSample<T>& sample, const EncodedCoords& enc, const InrDecoder<T>& dec) {
  const auto& w = sample.weights;
  if (enc.h * enc.w != w.queries) throw ShapeError("inr_decode: encoding/query count mismatch");
  const std::size_t R = sample.batch * w.queries * w.k;
  if (sample.latents.dim(0) != R) throw ShapeError("inr_decode: latent row count mismatch");
  if (sample.latents.dim(1) + enc.width != dec.in_width)
    throw ShapeError("inr_decode: latent+encoding width " +
                     std::to_string(sample.latents.dim(1) + enc.width) + " does not match decoder input " +
                     std::to_string(dec.in_width));
  std::vector<T> pe(R * enc.width);
  for (std::size_t r = 0; r < R; ++r) {
    const std::size_t q = (r / w.k) % w.queries;
    for (std::size_t d = 0; d < enc.width; ++d) pe[r * enc.width + d] = static_cast<T>(enc.values[q * enc.width + d]);
  }
  Tensor<T> rows = ops::concat<T>({sample.latents, Tensor<T>({R, enc.width}, std::move(pe))}, 1);
  return blend_corners(dec(rows), w, enc.h, enc.w);
}

struct InrOptions {
  std::size_t L = 4;
  bool position_encoding = true;
  bool interpolation = true;
};

inline std::size_t encoding_width(const InrOptions& o) { return o.position_encoding ? 4 * o.L : 2; }

/// Reads `features` as a latent grid and renders it at target_h × target_w.
template <typename T>
Tensor<T> inr_reconstruct(const Tensor<T>& features, std::size_t target_h, std::size_t target_w,
                          const InrDecoder<T>& dec, const InrOptions& opt = {}) {
  auto query = make_coord_grid(target_h, target_w);
  auto enc = opt.position_encoding ? positional_encode(query, opt.L) : raw_coords(query);
  return inr_decode(local_ensemble_sample(features, query, opt.interpolation), enc, dec);
}

}  // namespace nerd::inr
