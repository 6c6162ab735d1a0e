#pragma once

// Learnable 3D colour lookup table with trilinear interpolation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <string>

#include "dehazeflow/autodiff.hpp"
#include "dehazeflow/error.hpp"
#include "dehazeflow/ops.hpp"
#include "dehazeflow/tensor.hpp"

namespace dehazeflow {

/// How an input colour maps onto lattice coordinates.
///  - kVertex: coordinate = c * (M-1) / C_max, so vertex i sits at colour
///    i * C_max / (M-1) and C_max lands exactly on the last vertex.
///  - kBin: coordinate = c * M / C_max (bin width C_max / M), clamped to
///    [0, M-1]; the top 1/M of the range collapses onto the last vertex.
enum class LatticeSpacing : std::uint8_t { kVertex = 0, kBin = 1 };

inline const char* to_string(LatticeSpacing s) { return s == LatticeSpacing::kBin ? "bin" : "vertex"; }

inline LatticeSpacing lattice_spacing_from_string(const std::string& s) {
  if (s == "vertex") return LatticeSpacing::kVertex;
  if (s == "bin") return LatticeSpacing::kBin;
  throw FormatError("unknown lattice spacing '" + s + "'");
}

/// M x M x M lattice of output RGB triples. The grid tensor is laid out as
/// [3, M, M, M]: output channel, then red, green, blue index (blue fastest).
template <class T>
struct Lut3D {
  std::size_t size = 0;
  T c_max = T(1);
  LatticeSpacing spacing = LatticeSpacing::kVertex;
  Tensor<T> grid;

  T& entry(std::size_t channel, std::size_t i, std::size_t j, std::size_t k) {
    return grid.at(channel, i, j, k);
  }
  const T& entry(std::size_t channel, std::size_t i, std::size_t j, std::size_t k) const {
    return grid.at(channel, i, j, k);
  }

  /// Multiplier from a colour value to a continuous lattice coordinate.
  T coord_scale() const {
    const T m = static_cast<T>(size);
    return spacing == LatticeSpacing::kBin ? m / c_max : (m - T(1)) / c_max;
  }

  std::size_t entries() const { return size * size * size; }
};

namespace detail {

inline void require_lut_size(std::size_t m) {
  if (m < 2) throw DomainError("Lut3D: need at least 2 bins per channel, got " + std::to_string(m));
}

template <class T>
Lut3D<T> empty_lut(std::size_t m, T c_max) {
  require_lut_size(m);
  if (!(c_max > T(0))) throw DomainError("Lut3D: C_max must be positive");
  Lut3D<T> lut;
  lut.size = m;
  lut.c_max = c_max;
  lut.grid = Tensor<T>(Shape4{3, m, m, m});
  return lut;
}

// Cell index and fractional offset along one axis; `inside` is false when
// the coordinate was clamped to the last vertex (zero input gradient).
template <class T>
struct AxisSample {
  std::size_t i0;
  T frac;
  bool inside;
};

template <class T>
AxisSample<T> axis_sample(T value, T scale, std::size_t m) {
  const T top = static_cast<T>(m - 1);
  T coord = value * scale;
  bool inside = true;
  if (coord >= top) {
    inside = coord == top;
    coord = top;
  }
  std::size_t i0 = static_cast<std::size_t>(coord);
  if (i0 > m - 2) i0 = m - 2;
  return {i0, coord - static_cast<T>(i0), inside};
}

template <class T>
void check_lut_input(T v, T c_max) {
  if (!(v >= T(0) && v <= c_max)) {
    throw DomainError("Haze-LUT input " + std::to_string(static_cast<double>(v)) +
                      " outside [0, " + std::to_string(static_cast<double>(c_max)) + "]");
  }
}

}  // namespace detail

/// Identity lattice: H(i,j,k) = (i, j, k) * C_max / (M-1).
template <class T>
Lut3D<T> identity_lut(std::size_t m, T c_max = T(1)) {
  Lut3D<T> lut = detail::empty_lut(m, c_max);
  const T step = c_max / static_cast<T>(m - 1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < m; ++k) {
        lut.entry(0, i, j, k) = static_cast<T>(i) * step;
        lut.entry(1, i, j, k) = static_cast<T>(j) * step;
        lut.entry(2, i, j, k) = static_cast<T>(k) * step;
      }
  return lut;
}

/// Contrast stretch around mid-grey followed by saturation scaling about
/// Rec.601 luma, both on normalised values and clamped to [0, 1].
template <class T>
std::array<T, 3> contrast_saturation(std::array<T, 3> rgb, T contrast, T saturation) {
  for (auto& c : rgb) c = std::clamp((c - T(0.5)) * contrast + T(0.5), T(0), T(1));
  const T luma = T(0.299) * rgb[0] + T(0.587) * rgb[1] + T(0.114) * rgb[2];
  for (auto& c : rgb) c = std::clamp(luma + saturation * (c - luma), T(0), T(1));
  return rgb;
}

/// Fixed enhancement LUT used for the "fixed" Haze-LUT ablation.
template <class T>
Lut3D<T> fixed_contrast_saturation_lut(std::size_t m, T c_max = T(1), T contrast = T(1.2),
                                       T saturation = T(1.2)) {
  if (!(contrast > T(0)) || !(saturation > T(0))) {
    throw DomainError("fixed_contrast_saturation_lut: contrast and saturation must be positive");
  }
  Lut3D<T> lut = identity_lut(m, c_max);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < m; ++k) {
        std::array<T, 3> rgb{lut.entry(0, i, j, k) / c_max, lut.entry(1, i, j, k) / c_max,
                             lut.entry(2, i, j, k) / c_max};
        rgb = contrast_saturation(rgb, contrast, saturation);
        for (std::size_t ch = 0; ch < 3; ++ch) lut.entry(ch, i, j, k) = rgb[ch] * c_max;
      }
  return lut;
}

/// Continuous lattice coordinates of one colour (clamped to [0, M-1]).
template <class T>
std::array<T, 3> lattice_coords(const std::array<T, 3>& rgb, const Lut3D<T>& lut) {
  const T scale = lut.coord_scale();
  std::array<T, 3> out{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    detail::check_lut_input(rgb[ch], lut.c_max);
    out[ch] = std::min(rgb[ch] * scale, static_cast<T>(lut.size - 1));
  }
  return out;
}

/// Interpolate a single colour.
template <class T>
std::array<T, 3> lut_lookup(const std::array<T, 3>& rgb, const Lut3D<T>& lut) {
  const T scale = lut.coord_scale();
  for (T v : rgb) detail::check_lut_input(v, lut.c_max);
  const auto r = detail::axis_sample(rgb[0], scale, lut.size);
  const auto g = detail::axis_sample(rgb[1], scale, lut.size);
  const auto b = detail::axis_sample(rgb[2], scale, lut.size);
  std::array<T, 3> out{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    T acc = 0;
    for (int c = 0; c < 8; ++c) {
      const int di = (c >> 2) & 1, dj = (c >> 1) & 1, dk = c & 1;
      const T w = (di ? r.frac : T(1) - r.frac) * (dj ? g.frac : T(1) - g.frac) *
                  (dk ? b.frac : T(1) - b.frac);
      acc += w * lut.entry(ch, r.i0 + di, g.i0 + dj, b.i0 + dk);
    }
    out[ch] = acc;
  }
  return out;
}

/// Apply the LUT to a 3-channel image tensor (no gradient tracking).
template <class T>
Tensor<T> trilinear_apply(const Tensor<T>& x, const Lut3D<T>& lut) {
  const Shape4 xs = x.shape();
  if (xs.c != 3) throw ShapeError("trilinear_apply: expected 3 channels, got " + xs.str());
  Tensor<T> out(xs);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t p = 0; p < xs.plane(); ++p) {
      const std::array<T, 3> rgb{x.plane(n, 0)[p], x.plane(n, 1)[p], x.plane(n, 2)[p]};
      const auto o = lut_lookup(rgb, lut);
      for (std::size_t ch = 0; ch < 3; ++ch) out.plane(n, ch)[p] = o[ch];
    }
  }
  return out;
}

/// Differentiable LUT application. `grid` must be a [3, M, M, M] variable
/// (usually a reference to lut.grid); `lut` supplies M, C_max and spacing.
/// Gradients reach both the image (through the trilinear weights) and the
/// grid (scattered onto the 8 cell corners with the interpolation weights).
template <class T>
Var<T> trilinear_apply(const Var<T>& x, const Var<T>& grid, const Lut3D<T>& lut) {
  const Shape4 xs = x.shape();
  const std::size_t m = lut.size;
  if (xs.c != 3) throw ShapeError("trilinear_apply: expected 3 channels, got " + xs.str());
  if (grid.shape() != Shape4{3, m, m, m}) {
    throw ShapeError("trilinear_apply: grid shape " + grid.shape().str() + " for M=" +
                     std::to_string(m));
  }
  const T scale = lut.coord_scale();
  const T c_max = lut.c_max;
  const auto& xv = x.value();
  const auto& gv = grid.value();
  const std::size_t plane = xs.plane();
  const std::size_t stride_i = m * m, stride_j = m;
  const std::size_t chan = m * m * m;
  Tensor<T> out(xs);
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* rp = xv.plane(n, 0);
    const T* gp = xv.plane(n, 1);
    const T* bp = xv.plane(n, 2);
    for (std::size_t p = 0; p < plane; ++p) {
      detail::check_lut_input(rp[p], c_max);
      detail::check_lut_input(gp[p], c_max);
      detail::check_lut_input(bp[p], c_max);
      const auto r = detail::axis_sample(rp[p], scale, m);
      const auto g = detail::axis_sample(gp[p], scale, m);
      const auto b = detail::axis_sample(bp[p], scale, m);
      const std::size_t base = r.i0 * stride_i + g.i0 * stride_j + b.i0;
      const T wr[2] = {T(1) - r.frac, r.frac};
      const T wg[2] = {T(1) - g.frac, g.frac};
      const T wb[2] = {T(1) - b.frac, b.frac};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const T* gc = gv.ptr() + ch * chan + base;
        T acc = 0;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj)
            for (int dk = 0; dk < 2; ++dk)
              acc += wr[di] * wg[dj] * wb[dk] * gc[di * stride_i + dj * stride_j + dk];
        out.plane(n, ch)[p] = acc;
      }
    }
  }

  return detail::owner(x).record(
      std::move(out), {x, grid},
      [x, grid, scale, m](Graph<T>& gr, const Tensor<T>& go) {
        const auto& xv = x.value();
        const auto& gv = grid.value();
        const Shape4 xs = xv.shape();
        const std::size_t plane = xs.plane();
        const std::size_t stride_i = m * m, stride_j = m;
        const std::size_t chan = m * m * m;
        const bool need_x = gr.requires_grad(x);
        const bool need_grid = gr.requires_grad(grid);
        for (std::size_t n = 0; n < xs.n; ++n) {
          const T* rp = xv.plane(n, 0);
          const T* gp = xv.plane(n, 1);
          const T* bp = xv.plane(n, 2);
          for (std::size_t p = 0; p < plane; ++p) {
            const auto r = detail::axis_sample(rp[p], scale, m);
            const auto g = detail::axis_sample(gp[p], scale, m);
            const auto b = detail::axis_sample(bp[p], scale, m);
            const std::size_t base = r.i0 * stride_i + g.i0 * stride_j + b.i0;
            const T wr[2] = {T(1) - r.frac, r.frac};
            const T wg[2] = {T(1) - g.frac, g.frac};
            const T wb[2] = {T(1) - b.frac, b.frac};
            T dr = 0, dg = 0, db = 0;
            for (std::size_t ch = 0; ch < 3; ++ch) {
              const T up = go.plane(n, ch)[p];
              if (up == T(0)) continue;
              const std::size_t cbase = ch * chan + base;
              for (int di = 0; di < 2; ++di)
                for (int dj = 0; dj < 2; ++dj)
                  for (int dk = 0; dk < 2; ++dk) {
                    const std::size_t idx = cbase + di * stride_i + dj * stride_j + dk;
                    if (need_grid) gr.grad_buffer(grid)[idx] += up * wr[di] * wg[dj] * wb[dk];
                    if (need_x) {
                      const T h = gv[idx] * up;
                      dr += h * (di ? T(1) : T(-1)) * wg[dj] * wb[dk];
                      dg += h * wr[di] * (dj ? T(1) : T(-1)) * wb[dk];
                      db += h * wr[di] * wg[dj] * (dk ? T(1) : T(-1));
                    }
                  }
            }
            if (need_x) {
              auto& dx = gr.grad_buffer(x);
              if (r.inside) dx.plane(n, 0)[p] += dr * scale;
              if (g.inside) dx.plane(n, 1)[p] += dg * scale;
              if (b.inside) dx.plane(n, 2)[p] += db * scale;
            }
          }
        }
      },
      "trilinear_apply");
}

/// FNV-1a over the raw grid bytes; used to assert a frozen LUT stayed frozen.
template <class T>
std::uint64_t grid_checksum(const Lut3D<T>& lut) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(lut.grid.ptr());
  for (std::size_t i = 0; i < lut.grid.numel() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

/// Plain-text .cube-style export: a LUT_3D_SIZE header, then one "r g b"
/// triple per line with the blue index varying fastest.
template <class T>
void export_cube(const Lut3D<T>& lut, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "# Haze-LUT export, blue index fastest\n";
  os << "LUT_3D_SIZE " << lut.size << "\n";
  os << "DOMAIN_MIN 0 0 0\n";
  os << "DOMAIN_MAX " << lut.c_max << ' ' << lut.c_max << ' ' << lut.c_max << "\n";
  os << std::setprecision(9);
  for (std::size_t i = 0; i < lut.size; ++i)
    for (std::size_t j = 0; j < lut.size; ++j)
      for (std::size_t k = 0; k < lut.size; ++k)
        os << lut.entry(0, i, j, k) << ' ' << lut.entry(1, i, j, k) << ' ' << lut.entry(2, i, j, k)
           << '\n';
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace dehazeflow
