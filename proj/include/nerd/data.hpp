#pragma once

// PNG I/O, luma conversion, synthetic rain, patch sampling and the paired
// dataset layout root/{rainy,clean}/NAME.png.
//
// Images are Tensor<float> of shape [1, 3, H, W] with values in [0, 1].

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "nerd/ops.hpp"
#include "nerd/params.hpp"
#include "nerd/tensor.hpp"

namespace nerd {

using Image = Tensor<float>;

namespace fs = std::filesystem;

inline void require_image(const Shape& s, const char* what) {
  if (s.size() != 4 || s[1] != 3) throw ShapeError(std::string(what) + ": expected [N, 3, H, W], got " + to_string(s));
}

inline Image load_image(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot read PNG " + path + ": " + img.message);
  if (!(img.format & PNG_FORMAT_FLAG_COLOR) || (img.format & PNG_FORMAT_FLAG_ALPHA) ||
      (img.format & PNG_FORMAT_FLAG_LINEAR)) {
    png_image_free(&img);
    throw IoError("not an 8-bit RGB PNG: " + path);
  }
  img.format = PNG_FORMAT_RGB;
  const std::size_t H = img.height, W = img.width;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr))
    throw IoError("cannot decode PNG " + path + ": " + img.message);
  std::vector<float> v(3 * H * W);
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < 3; ++c) v[c * H * W + i] = static_cast<float>(buf[3 * i + c]) / 255.0f;
  return Image({1, 3, H, W}, std::move(v));
}

/// 8-bit quantisation used by save_image.
inline std::uint8_t to_byte(double v) {
  if (!(v > 0)) return 0;
  if (v >= 1) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

/// Writes the first image of the batch; the file appears atomically.
template <typename T>
void save_image(const Tensor<T>& img, const std::string& path) {
  require_image(img.shape(), "save_image");
  const std::size_t H = img.dim(2), W = img.dim(3);
  std::vector<png_byte> buf(3 * H * W);
  auto d = img.data();
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < 3; ++c) buf[3 * i + c] = to_byte(static_cast<double>(d[c * H * W + i]));
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(W);
  out.height = static_cast<png_uint_32>(H);
  out.format = PNG_FORMAT_RGB;
  const std::string tmp = path + ".tmp";
  if (!png_image_write_to_file(&out, tmp.c_str(), 0, buf.data(), 0, nullptr)) {
    std::remove(tmp.c_str());
    throw IoError("cannot write PNG " + path + ": " + out.message);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw IoError("cannot write " + path + ": " + ec.message());
  }
}

/// Rounds every value to the nearest multiple of 1/255 (what a save/load
/// round trip produces).
inline Image quantize(const Image& img) {
  auto v = img.values();
  for (auto& x : v) x = static_cast<float>(to_byte(x)) / 255.0f;
  return Image(img.shape(), std::move(v));
}

/// Studio-swing BT.601 luma: (65.481 R + 128.553 G + 24.966 B + 16) / 255.
/// Returns [N, 1, H, W] without recording a graph.
template <typename T>
Tensor<T> rgb_to_y(const Tensor<T>& img) {
  require_image(img.shape(), "rgb_to_y");
  const std::size_t N = img.dim(0), P = img.dim(2) * img.dim(3);
  std::vector<T> y(N * P);
  auto d = img.data();
  for (std::size_t n = 0; n < N; ++n) {
    const T* r = d.data() + n * 3 * P;
    for (std::size_t i = 0; i < P; ++i) {
      const double v = 65.481 * r[i] + 128.553 * r[P + i] + 24.966 * r[2 * P + i] + 16.0;
      y[n * P + i] = static_cast<T>(v / 255.0);
    }
  }
  return Tensor<T>({N, 1, img.dim(2), img.dim(3)}, std::move(y));
}

/// Smooth colour field: a gradient plus a few low-frequency sinusoids and
/// soft blobs, quantised to the 8-bit lattice.
inline Image procedural_texture(std::size_t H, std::size_t W, std::uint64_t seed) {
  Rng rng(mix64(seed ^ 0x7e47u));
  std::vector<float> v(3 * H * W);
  struct Wave {
    double fy, fx, phase, amp[3];
  };
  struct Blob {
    double cy, cx, r, amp[3];
  };
  double base[3], gy[3], gx[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.2, 0.6);
    gy[c] = rng.uniform(-0.2, 0.2);
    gx[c] = rng.uniform(-0.2, 0.2);
  }
  std::vector<Wave> waves(3);
  for (auto& w : waves) {
    w.fy = rng.uniform(-3, 3);
    w.fx = rng.uniform(-3, 3);
    w.phase = rng.uniform(0, 2 * std::numbers::pi);
    for (auto& a : w.amp) a = rng.uniform(-0.08, 0.08);
  }
  std::vector<Blob> blobs(4);
  for (auto& b : blobs) {
    b.cy = rng.uniform();
    b.cx = rng.uniform();
    b.r = rng.uniform(0.08, 0.25);
    for (auto& a : b.amp) a = rng.uniform(-0.25, 0.25);
  }
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double y = (i + 0.5) / H, x = (j + 0.5) / W;
      for (int c = 0; c < 3; ++c) {
        double p = base[c] + gy[c] * (y - 0.5) + gx[c] * (x - 0.5);
        for (const auto& w : waves) p += w.amp[c] * std::sin(2 * std::numbers::pi * (w.fy * y + w.fx * x) + w.phase);
        for (const auto& b : blobs) {
          const double d2 = (y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx);
          p += b.amp[c] * std::exp(-d2 / (2 * b.r * b.r));
        }
        v[(c * H + i) * W + j] = static_cast<float>(std::clamp(p, 0.0, 1.0));
      }
    }
  return quantize(Image({1, 3, H, W}, std::move(v)));
}

struct RainParams {
  std::size_t streak_count = 40;
  double angle = 0;      // degrees from vertical, positive leans right
  double length = 12;    // pixels
  double width = 1;      // pixels
  double intensity = 0.4;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(intensity >= 0 && intensity <= 1)) throw std::invalid_argument("RainParams: intensity must lie in [0, 1]");
    if (!(length >= 1)) throw std::invalid_argument("RainParams: length must be >= 1");
    if (!(width > 0)) throw std::invalid_argument("RainParams: width must be positive");
  }
};

/// Non-negative streak layer [H*W] with values in [0, 1] before scaling.
inline std::vector<double> rain_layer(std::size_t H, std::size_t W, const RainParams& p) {
  p.validate();
  Rng rng(mix64(p.seed ^ 0x5a1du));
  std::vector<double> layer(H * W, 0.0);
  const double sigma = 0.5 * p.width;
  const long reach = static_cast<long>(std::ceil(2 * sigma + 1));
  for (std::size_t s = 0; s < p.streak_count; ++s) {
    const double a = (p.angle + rng.uniform(-8, 8)) * std::numbers::pi / 180.0;
    const double len = p.length * rng.uniform(0.6, 1.4);
    const double bright = rng.uniform(0.6, 1.0);
    const double cy = rng.uniform(-0.1, 1.1) * H, cx = rng.uniform(-0.1, 1.1) * W;
    const double dy = std::cos(a), dx = std::sin(a);
    // Distance to the segment, Gaussian across it.
    const long y0 = static_cast<long>(std::floor(cy - 0.5 * len * std::abs(dy))) - reach;
    const long y1 = static_cast<long>(std::ceil(cy + 0.5 * len * std::abs(dy))) + reach;
    const long x0 = static_cast<long>(std::floor(cx - 0.5 * len * std::abs(dx))) - reach;
    const long x1 = static_cast<long>(std::ceil(cx + 0.5 * len * std::abs(dx))) + reach;
    for (long i = std::max(0L, y0); i <= std::min<long>(H - 1, y1); ++i)
      for (long j = std::max(0L, x0); j <= std::min<long>(W - 1, x1); ++j) {
        const double ry = i + 0.5 - cy, rx = j + 0.5 - cx;
        const double t = std::clamp(ry * dy + rx * dx, -0.5 * len, 0.5 * len);
        const double ey = ry - t * dy, ex = rx - t * dx;
        const double w = bright * std::exp(-(ey * ey + ex * ex) / (2 * sigma * sigma));
        auto& cell = layer[i * W + j];
        cell = std::max(cell, w);
      }
  }
  // Motion blur along the mean streak direction (5 taps, bilinear samples).
  const double a = p.angle * std::numbers::pi / 180.0;
  const double dy = std::cos(a), dx = std::sin(a);
  std::vector<double> out(H * W, 0.0);
  auto at = [&](double y, double x) {
    const double fy = std::floor(y), fx = std::floor(x);
    double acc = 0;
    for (int u = 0; u < 2; ++u)
      for (int v = 0; v < 2; ++v) {
        const long yy = static_cast<long>(fy) + u, xx = static_cast<long>(fx) + v;
        if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
        acc += (u ? y - fy : 1 - (y - fy)) * (v ? x - fx : 1 - (x - fx)) * layer[yy * W + xx];
      }
    return acc;
  };
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double acc = 0;
      for (int k = -2; k <= 2; ++k) acc += at(i + k * dy, j + k * dx);
      out[i * W + j] = acc / 5.0;
    }
  return out;
}

/// clean + intensity * streaks, clipped to [0, 1].
inline Image synth_rain(const Image& clean, const RainParams& p) {
  require_image(clean.shape(), "synth_rain");
  const std::size_t N = clean.dim(0), H = clean.dim(2), W = clean.dim(3);
  auto layer = rain_layer(H, W, p);
  auto v = clean.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < H * W; ++i) {
        auto& x = v[(n * 3 + c) * H * W + i];
        x = static_cast<float>(std::clamp(static_cast<double>(x) + p.intensity * layer[i], 0.0, 1.0));
      }
  return Image(clean.shape(), std::move(v));
}

struct ImagePair {
  Image rainy, clean;
};

struct PatchPair {
  ImagePair pair;
  std::size_t top = 0, left = 0;
  bool flipped = false;
};

/// Same size×size window from both images, position drawn from seed.
inline PatchPair random_patch(const ImagePair& p, std::size_t size, std::uint64_t seed) {
  require_image(p.rainy.shape(), "random_patch");
  if (p.rainy.shape() != p.clean.shape()) throw ShapeError("random_patch: rainy/clean shape mismatch");
  const std::size_t H = p.rainy.dim(2), W = p.rainy.dim(3);
  if (H < size || W < size)
    throw ShapeError("random_patch: image " + to_string(p.rainy.shape()) + " smaller than patch " + std::to_string(size));
  Rng rng(mix64(seed ^ 0xc409u));
  PatchPair out;
  out.top = rng.below(H - size + 1);
  out.left = rng.below(W - size + 1);
  out.pair = {ops::crop(p.rainy, out.top, out.left, size, size), ops::crop(p.clean, out.top, out.left, size, size)};
  return out;
}

inline Image hflip(const Image& img) {
  const std::size_t W = img.dim(img.rank() - 1), rows = img.numel() / W;
  auto v = img.values();
  for (std::size_t r = 0; r < rows; ++r) std::reverse(v.begin() + r * W, v.begin() + (r + 1) * W);
  return Image(img.shape(), std::move(v));
}

/// Horizontal flip of both images with probability 1/2.
inline ImagePair augment(const ImagePair& p, std::uint64_t seed, bool* flipped = nullptr) {
  Rng rng(mix64(seed ^ 0xf119u));
  const bool f = rng.uniform() < 0.5;
  if (flipped) *flipped = f;
  if (!f) return p;
  return {hflip(p.rainy), hflip(p.clean)};
}

struct DatasetEntry {
  std::string name;
  fs::path rainy, clean;
};

struct DatasetIndex {
  fs::path root;
  std::vector<DatasetEntry> entries;  // sorted by name
};

/// Lists name-matched pairs under root/rainy and root/clean.
inline DatasetIndex scan_dataset(const fs::path& root) {
  DatasetIndex idx{root, {}};
  const auto rd = root / "rainy", cd = root / "clean";
  if (!fs::is_directory(rd) || !fs::is_directory(cd))
    throw IoError("dataset " + root.string() + " must contain rainy/ and clean/ directories");
  std::vector<std::string> rainy, clean;
  for (const auto& e : fs::directory_iterator(rd))
    if (e.path().extension() == ".png") rainy.push_back(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(cd))
    if (e.path().extension() == ".png") clean.push_back(e.path().filename().string());
  std::sort(rainy.begin(), rainy.end());
  std::sort(clean.begin(), clean.end());
  if (rainy != clean) throw IoError("dataset " + root.string() + ": rainy/ and clean/ file names differ");
  for (const auto& n : rainy) idx.entries.push_back({fs::path(n).stem().string(), rd / n, cd / n});
  return idx;
}

struct NamedPair {
  std::string name;
  ImagePair pair;
};

/// Loads every pair and checks that both images have the same size.
inline std::vector<NamedPair> load_dataset(const DatasetIndex& idx) {
  std::vector<NamedPair> out;
  for (const auto& e : idx.entries) {
    ImagePair p{load_image(e.rainy.string()), load_image(e.clean.string())};
    if (p.rainy.shape() != p.clean.shape())
      throw IoError("pair " + e.name + ": rainy " + to_string(p.rainy.shape()) + " vs clean " +
                    to_string(p.clean.shape()));
    out.push_back({e.name, std::move(p)});
  }
  return out;
}

struct CorpusOptions {
  std::size_t count = 20;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  double intensity = 0.4;
  std::size_t streaks = 0;  // 0: scaled with image area
};

/// Rain parameters for corpus image i.
inline RainParams corpus_rain(const CorpusOptions& o, std::size_t i) {
  Rng rng(mix64(o.seed * 0x10001u + i + 1));
  RainParams p;
  p.streak_count = o.streaks ? o.streaks : std::max<std::size_t>(1, o.size * o.size / 100);
  p.angle = rng.uniform(-20, 20);
  p.length = rng.uniform(0.12, 0.25) * static_cast<double>(o.size);
  p.width = rng.uniform(0.8, 1.6);
  p.intensity = o.intensity;
  p.seed = rng.next();
  return p;
}

/// Pair i of the corpus, already on the 8-bit lattice.
inline ImagePair corpus_pair(const CorpusOptions& o, std::size_t i) {
  auto clean = procedural_texture(o.size, o.size, mix64(o.seed) ^ (i + 1));
  return {quantize(synth_rain(clean, corpus_rain(o, i))), clean};
}

inline std::string corpus_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return buf;
}

/// Writes root/rainy/NNNNN.png and root/clean/NNNNN.png.
inline void write_corpus(const fs::path& root, const CorpusOptions& o) {
  std::error_code ec;
  fs::create_directories(root / "rainy", ec);
  fs::create_directories(root / "clean", ec);
  if (!fs::is_directory(root / "rainy") || !fs::is_directory(root / "clean"))
    throw IoError("cannot create dataset directories under " + root.string());
  for (std::size_t i = 0; i < o.count; ++i) {
    auto p = corpus_pair(o, i);
    const auto name = corpus_name(i) + ".png";
    save_image(p.rainy, (root / "rainy" / name).string());
    save_image(p.clean, (root / "clean" / name).string());
  }
}

}  // namespace nerd
