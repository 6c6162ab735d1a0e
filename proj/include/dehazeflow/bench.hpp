#pragma once

// Wall-clock and memory report for the inference path.

#include <sys/resource.h>

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "dehazeflow/flow.hpp"
#include "dehazeflow/purifier.hpp"
#include "dehazeflow/tensor.hpp"
#include "dehazeflow/tiling.hpp"

namespace dehazeflow {

/// Multiply-accumulates of one k x k convolution producing an h x w map.
constexpr std::uint64_t conv_macs(std::uint64_t cin, std::uint64_t cout, std::uint64_t k, std::uint64_t h,
                                  std::uint64_t w) {
  return cin * cout * k * k * h * w;
}

/// Peak resident set size of this process so far, in bytes.
inline std::uint64_t peak_rss_bytes() {
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
  return static_cast<std::uint64_t>(ru.ru_maxrss) * 1024u;  // Linux reports KiB
}

struct BenchConfig {
  std::size_t height = 256;
  std::size_t width = 256;
  FlowConfig flow;
  PurifierConfig purifier;
  std::size_t lut_size = 33;
  TilePlan plan;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

struct BenchReport {
  std::size_t height = 0, width = 0;
  SolverKind solver = SolverKind::kRk4;
  std::size_t steps = 0;
  std::size_t tiles = 0;
  std::size_t threads = 1;
  /// Seconds per solver step of an untiled run on one tile-sized crop.
  std::vector<double> step_seconds;
  std::size_t field_evaluations = 0;
  std::uint64_t macs_per_evaluation = 0;
  std::uint64_t total_macs = 0;
  double tiled_seconds = 0;
  double single_thread_seconds = 0;
  std::uint64_t peak_rss = 0;

  void write(std::ostream& os) const {
    char line[160];
    std::snprintf(line, sizeof line, "image %zux%zu  solver %s  steps %zu  tiles %zu\n", width, height,
                  to_string(solver), steps, tiles);
    os << line;
    for (std::size_t i = 0; i < step_seconds.size(); ++i) {
      std::snprintf(line, sizeof line, "step %zu  %.6f s\n", i + 1, step_seconds[i]);
      os << line;
    }
    std::snprintf(line, sizeof line,
                  "field_evaluations=%zu\nmacs_per_evaluation=%llu\ntotal_macs=%llu\n"
                  "tiled_seconds=%.6f\nthreads=%zu\nsingle_thread_seconds=%.6f\npeak_rss_bytes=%llu\n",
                  field_evaluations, static_cast<unsigned long long>(macs_per_evaluation),
                  static_cast<unsigned long long>(total_macs), tiled_seconds, threads, single_thread_seconds,
                  static_cast<unsigned long long>(peak_rss));
    os << line;
  }
};

/// Time `cfg.flow.steps` solver steps one by one on a crop of at most one
/// tile, then the whole image tiled with `cfg.threads` workers and again on
/// a single thread. The image is a seeded random field.
template <class T = float>
BenchReport run_bench(const BenchConfig& cfg) {
  using clock = std::chrono::steady_clock;
  cfg.flow.validate();
  const DehazeModel<T> model =
      DehazeModel<T>::create(cfg.purifier, cfg.lut_size, cfg.flow, LutMode::kLearnable, cfg.seed);
  Tensor<T> img(Shape4{1, 3, cfg.height, cfg.width});
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : img.data()) v = static_cast<T>(u(rng));

  BenchReport r;
  r.height = cfg.height;
  r.width = cfg.width;
  r.solver = cfg.flow.solver;
  r.steps = cfg.flow.steps;
  r.threads = cfg.threads;
  const auto tiles = plan_tiles(cfg.height, cfg.width, cfg.plan);
  r.tiles = tiles.size();

  // per-step timing on the first tile
  Tensor<T> x = extract_tile(img, tiles.front());
  std::size_t evaluations = 0;
  auto field = [&](T, const Tensor<T>& s) {
    ++evaluations;
    return evaluate_field(s, model, cfg.flow.lambda);
  };
  const T dt = static_cast<T>(cfg.flow.dt());
  for (std::size_t i = 0; i < cfg.flow.steps; ++i) {
    const auto t0 = clock::now();
    x = solver_step(cfg.flow.solver, x, field, static_cast<T>(cfg.flow.time_at(i)), dt);
    r.step_seconds.push_back(std::chrono::duration<double>(clock::now() - t0).count());
  }
  r.field_evaluations = evaluations;
  r.macs_per_evaluation = purifier_macs(cfg.purifier, tiles.front().h, tiles.front().w);
  r.total_macs = r.macs_per_evaluation * r.field_evaluations * r.tiles;

  auto t0 = clock::now();
  (void)dehaze_tiled(img, model, cfg.flow, cfg.plan, cfg.threads);
  r.tiled_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  if (cfg.threads > 1) {
    t0 = clock::now();
    (void)dehaze_tiled(img, model, cfg.flow, cfg.plan, 1);
    r.single_thread_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  } else {
    r.single_thread_seconds = r.tiled_seconds;
  }
  r.peak_rss = peak_rss_bytes();
  return r;
}

}  // namespace dehazeflow
