#pragma once

// PSNR and SSIM on the Y channel, the spectral high-frequency fraction and
// the tab-separated evaluation report.

#include <cmath>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "nerd/data.hpp"
#include "nerd/fft.hpp"

namespace nerd {

inline constexpr double kPsnrCap = 100.0;

namespace detail {

template <typename T>
void require_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  require_image(a.shape(), what);
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

}  // namespace detail

/// PSNR of two planes (peak 1), capped for identical inputs.
template <typename T>
double psnr_plane(std::span<const T> a, std::span<const T> b) {
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& gt) {
  detail::require_pair(pred, gt, "psnr");
  auto yp = rgb_to_y(pred), yg = rgb_to_y(gt);
  return psnr_plane<T>(yp.data(), yg.data());
}

/// Normalised 11-tap Gaussian, sigma 1.5.
inline std::array<double, 11> ssim_window() {
  std::array<double, 11> g{};
  double s = 0;
  for (int i = 0; i < 11; ++i) s += g[i] = std::exp(-double((i - 5) * (i - 5)) / (2 * 1.5 * 1.5));
  for (auto& v : g) v /= s;
  return g;
}

/// Mean SSIM over all fully contained 11×11 windows of one H×W plane pair.
template <typename T>
double ssim_plane(std::span<const T> a, std::span<const T> b, std::size_t H, std::size_t W) {
  if (H < 11 || W < 11) throw ShapeError("ssim: image smaller than the 11x11 window");
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const auto g = ssim_window();
  const std::size_t oh = H - 10, ow = W - 10;
  // Separable filtering of a, b, a², b², ab: rows first, then columns.
  std::vector<double> rows(5 * H * ow, 0.0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double s[5] = {0, 0, 0, 0, 0};
      for (std::size_t k = 0; k < 11; ++k) {
        const double x = a[i * W + j + k], y = b[i * W + j + k];
        s[0] += g[k] * x;
        s[1] += g[k] * y;
        s[2] += g[k] * x * x;
        s[3] += g[k] * y * y;
        s[4] += g[k] * x * y;
      }
      for (int q = 0; q < 5; ++q) rows[(q * H + i) * ow + j] = s[q];
    }
  double acc = 0;
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double s[5] = {0, 0, 0, 0, 0};
      for (std::size_t k = 0; k < 11; ++k)
        for (int q = 0; q < 5; ++q) s[q] += g[k] * rows[(q * H + i + k) * ow + j];
      const double mx = s[0], my = s[1];
      const double vx = s[2] - mx * mx, vy = s[3] - my * my, cxy = s[4] - mx * my;
      acc += ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
    }
  return acc / static_cast<double>(oh * ow);
}

/// SSIM on Y, averaged over the batch.
template <typename T>
double ssim(const Tensor<T>& pred, const Tensor<T>& gt) {
  detail::require_pair(pred, gt, "ssim");
  auto yp = rgb_to_y(pred), yg = rgb_to_y(gt);
  const std::size_t N = pred.dim(0), H = pred.dim(2), W = pred.dim(3);
  double acc = 0;
  for (std::size_t n = 0; n < N; ++n)
    acc += ssim_plane<T>(yp.data().subspan(n * H * W, H * W), yg.data().subspan(n * H * W, H * W), H, W);
  return acc / static_cast<double>(N);
}

/// Share of non-DC spectral energy at radial frequency above 0.25 cycles per
/// pixel (half the Nyquist limit), for one H×W plane.
template <typename T>
double high_frequency_fraction(std::span<const T> plane, std::size_t H, std::size_t W) {
  std::vector<double> x(plane.begin(), plane.end());
  auto F = fft::forward<double>(x, H, W);
  double hi = 0, total = 0;
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      if (u == 0 && v == 0) continue;
      const double fu = (u <= H / 2 ? double(u) : double(u) - double(H)) / double(H);
      const double fv = (v <= W / 2 ? double(v) : double(v) - double(W)) / double(W);
      const double e = std::norm(F[u * W + v]);
      total += e;
      if (std::sqrt(fu * fu + fv * fv) > 0.25) hi += e;
    }
  return total > 0 ? hi / total : 0.0;
}

/// high_frequency_fraction of the Y channel of the first image.
template <typename T>
double high_frequency_fraction(const Tensor<T>& img) {
  auto y = rgb_to_y(img);
  const std::size_t H = img.dim(2), W = img.dim(3);
  return high_frequency_fraction<T>(y.data().subspan(0, H * W), H, W);
}

struct MetricRow {
  std::string name;
  double psnr = 0, ssim = 0;
};

/// One `name<TAB>psnr<TAB>ssim` line per image, then a `mean` row.
inline void write_report(std::ostream& os, const std::vector<MetricRow>& rows) {
  double sp = 0, ss = 0;
  auto line = [&](const std::string& n, double p, double s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\n", p, s);
    os << n << buf;
  };
  for (const auto& r : rows) {
    line(r.name, r.psnr, r.ssim);
    sp += r.psnr;
    ss += r.ssim;
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  line("mean", sp / n, ss / n);
}

}  // namespace nerd
