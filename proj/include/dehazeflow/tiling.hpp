#pragma once

// Overlapping-tile processing for images too large to push through the flow
// in one piece. Each tile is integrated independently and the results are
// blended with raised-cosine weights across the overlap band.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <numbers>
#include <thread>
#include <vector>

#include "dehazeflow/error.hpp"
#include "dehazeflow/flow.hpp"
#include "dehazeflow/tensor.hpp"

namespace dehazeflow {

struct TilePlan {
  std::size_t tile = 512;
  std::size_t overlap = 32;

  void validate() const {
    if (tile == 0) throw DomainError("TilePlan: tile size must be positive");
    if (overlap >= tile) throw DomainError("TilePlan: overlap must be smaller than the tile");
  }
};

/// A window [y0, y0+h) x [x0, x0+w) of the full image.
struct TileRect {
  std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
  bool operator==(const TileRect&) const = default;
};

namespace detail {

// Start offsets along one axis; the last window is snapped to the far edge.
inline std::vector<std::size_t> tile_starts(std::size_t extent, const TilePlan& plan) {
  if (extent <= plan.tile) return {0};
  const std::size_t stride = plan.tile - plan.overlap;
  std::vector<std::size_t> starts;
  for (std::size_t s = 0;; s += stride) {
    if (s + plan.tile >= extent) {
      starts.push_back(extent - plan.tile);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

// Un-normalised 1D weights of one window: sin^2 ramps over the overlap on
// every side that borders another window, 1 elsewhere.
template <class T>
std::vector<T> axis_weights(std::size_t len, std::size_t overlap, bool ramp_in, bool ramp_out) {
  std::vector<T> w(len, T(1));
  const std::size_t band = std::min(overlap, len);
  for (std::size_t i = 0; i < band; ++i) {
    const double s = std::sin(std::numbers::pi * (static_cast<double>(i) + 0.5) / (2.0 * band));
    const T r = static_cast<T>(s * s);
    if (ramp_in) w[i] = std::min(w[i], r);
    if (ramp_out) w[len - 1 - i] = std::min(w[len - 1 - i], r);
  }
  return w;
}

}  // namespace detail

/// Windows covering an h x w image in row-major order.
inline std::vector<TileRect> plan_tiles(std::size_t h, std::size_t w, const TilePlan& plan) {
  plan.validate();
  const auto ys = detail::tile_starts(h, plan);
  const auto xs = detail::tile_starts(w, plan);
  std::vector<TileRect> tiles;
  for (std::size_t y : ys)
    for (std::size_t x : xs)
      tiles.push_back({y, x, std::min(plan.tile, h), std::min(plan.tile, w)});
  return tiles;
}

/// Un-normalised blend weight of tile `t` ([h x w], row-major).
template <class T>
std::vector<T> tile_weights(const TileRect& t, std::size_t img_h, std::size_t img_w,
                            const TilePlan& plan) {
  const auto wy = detail::axis_weights<T>(t.h, plan.overlap, t.y0 > 0, t.y0 + t.h < img_h);
  const auto wx = detail::axis_weights<T>(t.w, plan.overlap, t.x0 > 0, t.x0 + t.w < img_w);
  std::vector<T> out(t.h * t.w);
  for (std::size_t y = 0; y < t.h; ++y)
    for (std::size_t x = 0; x < t.w; ++x) out[y * t.w + x] = wy[y] * wx[x];
  return out;
}

/// Per-pixel sum of the normalised blend weights of every tile; 1 everywhere
/// for a valid plan.
template <class T = double>
std::vector<T> blend_weight_sum(std::size_t h, std::size_t w, const TilePlan& plan) {
  const auto tiles = plan_tiles(h, w, plan);
  std::vector<T> total(h * w, T(0));
  for (const auto& t : tiles) {
    const auto wt = tile_weights<T>(t, h, w, plan);
    for (std::size_t y = 0; y < t.h; ++y)
      for (std::size_t x = 0; x < t.w; ++x) total[(t.y0 + y) * w + t.x0 + x] += wt[y * t.w + x];
  }
  std::vector<T> norm(h * w, T(0));
  for (const auto& t : tiles) {
    const auto wt = tile_weights<T>(t, h, w, plan);
    for (std::size_t y = 0; y < t.h; ++y)
      for (std::size_t x = 0; x < t.w; ++x) {
        const std::size_t i = (t.y0 + y) * w + t.x0 + x;
        norm[i] += wt[y * t.w + x] / total[i];
      }
  }
  return norm;
}

template <class T>
Tensor<T> extract_tile(const Tensor<T>& x, const TileRect& t) {
  const Shape4 s = x.shape();
  Tensor<T> out(Shape4{s.n, s.c, t.h, t.w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < t.h; ++y)
        std::copy_n(x.plane(n, c) + (t.y0 + y) * s.w + t.x0, t.w, out.plane(n, c) + y * t.w);
  return out;
}

/// Apply `process(tile) -> {frame_1, ..., frame_k}` to every tile, `threads`
/// tiles at a time, and blend each frame index into a full image on the
/// calling thread in tile order. Every call must return the same k.
template <class T, class Process>
std::vector<Tensor<T>> process_tiled_frames(const Tensor<T>& x, const TilePlan& plan, Process&& process,
                                            std::size_t threads = 1) {
  const Shape4 s = x.shape();
  const auto tiles = plan_tiles(s.h, s.w, plan);
  if (tiles.size() == 1) return process(x);

  std::vector<Tensor<T>> acc;
  std::vector<T> wsum(s.plane(), T(0));
  const std::size_t workers = std::max<std::size_t>(1, threads);
  for (std::size_t first = 0; first < tiles.size(); first += workers) {
    const std::size_t count = std::min(workers, tiles.size() - first);
    std::vector<std::vector<Tensor<T>>> results(count);
    std::vector<std::exception_ptr> errors(count);
    auto run = [&](std::size_t k) {
      try {
        results[k] = process(extract_tile(x, tiles[first + k]));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    };
    if (count == 1) {
      run(0);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t k = 0; k < count; ++k) pool.emplace_back(run, k);
    }
    for (std::size_t k = 0; k < count; ++k) {
      if (errors[k]) std::rethrow_exception(errors[k]);
      const TileRect& t = tiles[first + k];
      const auto wt = tile_weights<T>(t, s.h, s.w, plan);
      if (acc.empty()) acc.assign(results[k].size(), Tensor<T>(s));
      if (results[k].size() != acc.size()) throw ShapeError("process_tiled: tiles returned different frame counts");
      for (std::size_t f = 0; f < acc.size(); ++f) {
        const Tensor<T>& r = results[k][f];
        if (r.shape() != Shape4{s.n, s.c, t.h, t.w}) throw ShapeError("process_tiled: tile output shape");
        for (std::size_t n = 0; n < s.n; ++n)
          for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t y = 0; y < t.h; ++y) {
              T* dst = acc[f].plane(n, c) + (t.y0 + y) * s.w + t.x0;
              const T* src = r.plane(n, c) + y * t.w;
              const T* ww = wt.data() + y * t.w;
              for (std::size_t i = 0; i < t.w; ++i) dst[i] += ww[i] * src[i];
            }
      }
      for (std::size_t y = 0; y < t.h; ++y)
        for (std::size_t i = 0; i < t.w; ++i) wsum[(t.y0 + y) * s.w + t.x0 + i] += wt[y * t.w + i];
    }
    results.clear();
  }
  for (auto& frame : acc)
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        T* p = frame.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) p[i] /= wsum[i];
      }
  return acc;
}

/// Single-frame form of process_tiled_frames.
template <class T, class Process>
Tensor<T> process_tiled(const Tensor<T>& x, const TilePlan& plan, Process&& process,
                        std::size_t threads = 1) {
  auto one = [&](const Tensor<T>& tile) {
    std::vector<Tensor<T>> v;
    v.push_back(process(tile));
    return v;
  };
  return std::move(process_tiled_frames(x, plan, one, threads).front());
}

/// Dehaze an image of any size tile by tile. An image that fits in one tile
/// goes straight through integrate().
template <class T>
Tensor<T> dehaze_tiled(const Tensor<T>& x, const DehazeModel<T>& m, const FlowConfig& cfg,
                       const TilePlan& plan = {}, std::size_t threads = 1) {
  return process_tiled(x, plan, [&](const Tensor<T>& tile) { return integrate(tile, m, cfg); },
                       threads);
}

/// Like dehaze_tiled but also returns the blended intermediate states:
/// element i is X_(i+1) for i < n-1 and the last element is the clamped
/// output, identical to dehaze_tiled().
template <class T>
std::vector<Tensor<T>> dehaze_tiled_trajectory(const Tensor<T>& x, const DehazeModel<T>& m,
                                               const FlowConfig& cfg, const TilePlan& plan = {},
                                               std::size_t threads = 1) {
  return process_tiled_frames(
      x, plan,
      [&](const Tensor<T>& tile) {
        std::vector<Tensor<T>> traj;
        Tensor<T> out = integrate(tile, m, cfg, &traj);
        traj.back() = std::move(out);
        return traj;
      },
      threads);
}

}  // namespace dehazeflow
