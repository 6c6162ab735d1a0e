#pragma once

// Full-reference image quality metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "dehazeflow/error.hpp"
#include "dehazeflow/tensor.hpp"

namespace dehazeflow {

inline constexpr double kPsnrCapDb = 100.0;

/// 10*log10(peak^2 / MSE), capped at 100 dB when MSE < 1e-10.
template <class T>
double psnr(const Tensor<T>& x, const Tensor<T>& y, double peak = 1.0) {
  if (x.shape() != y.shape()) {
    throw ShapeError("psnr: shape " + x.shape().str() + " vs " + y.shape().str());
  }
  if (x.numel() == 0) throw ShapeError("psnr: empty images");
  double se = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(x.numel());
  if (mse < 1e-10) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / mse));
}

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

namespace detail {

// Valid-mode separable filter of one plane.
inline std::vector<double> filter_valid(const std::vector<double>& in, std::size_t h,
                                        std::size_t w, const std::vector<double>& taps) {
  const std::size_t k = taps.size();
  const std::size_t oh = h - k + 1, ow = w - k + 1;
  std::vector<double> rows(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < k; ++i) acc += taps[i] * in[y * w + x + i];
      rows[y * ow + x] = acc;
    }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < k; ++i) acc += taps[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM over all valid window positions of one (batch, channel) plane.
template <class T>
double ssim_plane(const Tensor<T>& x, const Tensor<T>& y, std::size_t n, std::size_t c,
                  const SsimParams& p = {}) {
  const std::size_t h = x.shape().h, w = x.shape().w;
  const auto taps = gaussian_window(p.window, p.sigma);
  const std::size_t plane = h * w;
  std::vector<double> a(plane), b(plane), aa(plane), bb(plane), ab(plane);
  const T* xp = x.plane(n, c);
  const T* yp = y.plane(n, c);
  for (std::size_t i = 0; i < plane; ++i) {
    a[i] = xp[i];
    b[i] = yp[i];
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = detail::filter_valid(a, h, w, taps);
  const auto mu_b = detail::filter_valid(b, h, w, taps);
  const auto e_aa = detail::filter_valid(aa, h, w, taps);
  const auto e_bb = detail::filter_valid(bb, h, w, taps);
  const auto e_ab = detail::filter_valid(ab, h, w, taps);
  const double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
  const double c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma;
    const double vb = e_bb[i] - mb * mb;
    const double cov = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03),
/// computed per channel and averaged over channels and batch.
template <class T>
double ssim(const Tensor<T>& x, const Tensor<T>& y, const SsimParams& p = {}) {
  if (x.shape() != y.shape()) {
    throw ShapeError("ssim: shape " + x.shape().str() + " vs " + y.shape().str());
  }
  const Shape4 s = x.shape();
  if (s.h < p.window || s.w < p.window) {
    throw ShapeError("ssim: image " + s.str() + " smaller than the " + std::to_string(p.window) +
                     "x" + std::to_string(p.window) + " window");
  }
  double total = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) total += ssim_plane(x, y, n, c, p);
  return total / static_cast<double>(s.n * s.c);
}

struct ImageScore {
  std::string name;
  double psnr = 0;
  double ssim = 0;
};

/// Per-image scores plus their means.
struct MetricReport {
  std::vector<ImageScore> images;

  void add(std::string name, double p, double s) { images.push_back({std::move(name), p, s}); }

  double mean_psnr() const {
    double t = 0;
    for (const auto& i : images) t += i.psnr;
    return images.empty() ? 0.0 : t / static_cast<double>(images.size());
  }
  double mean_ssim() const {
    double t = 0;
    for (const auto& i : images) t += i.ssim;
    return images.empty() ? 0.0 : t / static_cast<double>(images.size());
  }

  void write_table(std::ostream& os) const;
  void write_key_values(std::ostream& os, const std::string& prefix = "") const;
};

inline void MetricReport::write_table(std::ostream& os) const {
  char line[256];
  std::snprintf(line, sizeof line, "%-32s %10s %8s\n", "image", "PSNR(dB)", "SSIM");
  os << line;
  for (const auto& i : images) {
    std::snprintf(line, sizeof line, "%-32s %10.4f %8.5f\n", i.name.c_str(), i.psnr, i.ssim);
    os << line;
  }
  std::snprintf(line, sizeof line, "%-32s %10.4f %8.5f\n", "mean", mean_psnr(), mean_ssim());
  os << line;
}

inline void MetricReport::write_key_values(std::ostream& os, const std::string& prefix) const {
  char line[128];
  std::snprintf(line, sizeof line, "%scount=%zu\n", prefix.c_str(), images.size());
  os << line;
  std::snprintf(line, sizeof line, "%smean_psnr=%.6f\n", prefix.c_str(), mean_psnr());
  os << line;
  std::snprintf(line, sizeof line, "%smean_ssim=%.6f\n", prefix.c_str(), mean_ssim());
  os << line;
}

}  // namespace dehazeflow
