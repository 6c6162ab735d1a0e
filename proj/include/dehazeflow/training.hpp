#pragma once

// End-to-end training of the purifier and the Haze-LUT through the unrolled
// solver: L1 loss, AdamW, plateau scheduling and synthetic haze data.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dehazeflow/autodiff.hpp"
#include "dehazeflow/error.hpp"
#include "dehazeflow/flow.hpp"
#include "dehazeflow/ops.hpp"
#include "dehazeflow/tensor.hpp"

namespace dehazeflow {

// ---------------------------------------------------------------------------
// Optimiser

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers mirroring the parameter list, plus the step count.
template <class T>
struct OptState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;

  bool operator==(const OptState&) const = default;
};

/// One decoupled-weight-decay Adam update with bias correction:
///   p <- p - lr*wd*p;  p <- p - lr * m_hat / (sqrt(v_hat) + eps)
template <class T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads,
                OptState<T>& state, const AdamWConfig& cfg) {
  if (params.size() != grads.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    for (const Tensor<T>* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adamw_step: optimizer state size mismatch");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k];
    const Tensor<T>& g = grads[k];
    if (g.shape() != p.shape() || state.m[k].shape() != p.shape()) {
      throw ShapeError("adamw_step: gradient/state shape mismatch for parameter " +
                       std::to_string(k));
    }
    Tensor<T>& m = state.m[k];
    Tensor<T>& v = state.v[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      double pi = static_cast<double>(p[i]) * decay;
      pi -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      p[i] = static_cast<T>(pi);
    }
  }
}

/// Global L2 norm of a gradient list, accumulated in double.
template <class T>
double global_norm(std::span<const Tensor<T>> grads) {
  double sq = 0;
  for (const auto& g : grads)
    for (T v : g.data()) sq += static_cast<double>(v) * v;
  return std::sqrt(sq);
}

/// Scale every gradient by max_norm / norm when the global norm exceeds
/// max_norm. Returns the norm before clipping.
template <class T>
double clip_global_norm(std::span<Tensor<T>> grads, double max_norm) {
  const double norm = global_norm<T>(grads);
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& g : grads) g = g * s;
  }
  return norm;
}

/// Halves (by `factor`) the learning rate once the monitored loss has gone
/// `patience` consecutive epochs without a strict new minimum.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, std::size_t patience = 100, double factor = 0.5)
      : lr_(lr), patience_(patience), factor_(factor) {
    if (!(lr > 0)) throw DomainError("PlateauScheduler: lr must be positive");
    if (!(factor > 0 && factor < 1)) throw DomainError("PlateauScheduler: factor must be in (0,1)");
  }

  /// Record one epoch's validation loss; returns the learning rate to use next.
  double step(double loss) {
    if (loss < best_) {
      best_ = loss;
      bad_epochs_ = 0;
    } else if (++bad_epochs_ >= patience_) {
      lr_ *= factor_;
      bad_epochs_ = 0;
    }
    return lr_;
  }

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  std::size_t bad_epochs() const noexcept { return bad_epochs_; }

 private:
  double lr_;
  std::size_t patience_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic data

/// I = J*t + A*(1-t) with a per-pixel transmission map t: [N, 1, H, W].
template <class T>
Tensor<T> synth_haze(const Tensor<T>& clean, T atmospheric_light, const Tensor<T>& transmission) {
  const Shape4 s = clean.shape();
  const Shape4 ts = transmission.shape();
  if (ts.n != s.n || ts.c != 1 || ts.h != s.h || ts.w != s.w) {
    throw ShapeError("synth_haze: transmission " + ts.str() + " does not match " + s.str());
  }
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* tp = transmission.plane(n, 0);
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* jp = clean.plane(n, c);
      T* op = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        op[i] = jp[i] * tp[i] + atmospheric_light * (T(1) - tp[i]);
      }
    }
  }
  return out;
}

/// Constant-transmission overload.
template <class T>
Tensor<T> synth_haze(const Tensor<T>& clean, T atmospheric_light, T transmission) {
  const Shape4 s = clean.shape();
  return synth_haze(clean, atmospheric_light, Tensor<T>(Shape4{s.n, 1, s.h, s.w}, transmission));
}

template <class T>
struct ImagePair {
  Tensor<T> hazy;
  Tensor<T> clean;
};

namespace detail {

// Smooth random field in [lo, hi] built from a few low-frequency sinusoids.
template <class T>
void smooth_field(T* out, std::size_t h, std::size_t w, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr int kWaves = 3;
  double fx[kWaves], fy[kWaves], ph[kWaves], amp[kWaves];
  for (int k = 0; k < kWaves; ++k) {
    fx[k] = (u(rng) * 2.0 - 1.0) * 1.5;
    fy[k] = (u(rng) * 2.0 - 1.0) * 1.5;
    ph[k] = u(rng) * 2.0 * std::numbers::pi;
    amp[k] = 0.5 + u(rng);
  }
  std::vector<double> v(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (int k = 0; k < kWaves; ++k) {
        s += amp[k] * std::sin(2.0 * std::numbers::pi *
                                   (fx[k] * static_cast<double>(x) / static_cast<double>(w) +
                                    fy[k] * static_cast<double>(y) / static_cast<double>(h)) +
                               ph[k]);
      }
      v[y * w + x] = s;
    }
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  const double range = *mx - *mn;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double z = range > 1e-12 ? (v[i] - *mn) / range : 0.5;
    out[i] = static_cast<T>(lo + (hi - lo) * z);
  }
}

}  // namespace detail

/// Procedural clean image [1, 3, H, W] in [0.05, 0.95]; `kind` cycles through
/// colour gradients (0), checkerboards (1) and random smooth fields (2).
template <class T>
Tensor<T> procedural_clean_image(std::size_t h, std::size_t w, int kind, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<T> img(Shape4{1, 3, h, w});
  switch (kind % 3) {
    case 0:
      for (std::size_t c = 0; c < 3; ++c) {
        const double a = 0.1 + 0.8 * u(rng);
        const double bx = (u(rng) - 0.5) * 0.8;
        const double by = (u(rng) - 0.5) * 0.8;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double v = a + bx * (static_cast<double>(x) / w - 0.5) +
                             by * (static_cast<double>(y) / h - 0.5);
            img.at(0, c, y, x) = static_cast<T>(std::clamp(v, 0.05, 0.95));
          }
      }
      break;
    case 1: {
      const std::size_t cell = 2 + static_cast<std::size_t>(u(rng) * 7.0);
      double ca[3], cb[3];
      for (int c = 0; c < 3; ++c) {
        ca[c] = 0.05 + 0.9 * u(rng);
        cb[c] = 0.05 + 0.9 * u(rng);
      }
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const bool odd = ((y / cell) + (x / cell)) % 2 == 1;
          for (std::size_t c = 0; c < 3; ++c) img.at(0, c, y, x) = static_cast<T>(odd ? ca[c] : cb[c]);
        }
      break;
    }
    default:
      for (std::size_t c = 0; c < 3; ++c) {
        const double lo = 0.05 + 0.4 * u(rng);
        const double hi = lo + 0.1 + (0.95 - lo - 0.1) * u(rng);
        detail::smooth_field(img.plane(0, c), h, w, lo, hi, rng);
      }
      break;
  }
  return img;
}

struct HazeSpec {
  double light_min = 0.7;
  double light_max = 1.0;
  double transmission_min = 0.3;
  double transmission_max = 0.8;
  /// Probability that an image gets a smooth spatially varying transmission map.
  double smooth_transmission_prob = 0.5;
};

/// `count` hazy/clean pairs of size h x w, fully determined by `seed`.
template <class T>
std::vector<ImagePair<T>> make_synthetic_pairs(std::size_t count, std::size_t h, std::size_t w,
                                               std::uint64_t seed, const HazeSpec& spec = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ImagePair<T>> pairs;
  pairs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Tensor<T> clean = procedural_clean_image<T>(h, w, static_cast<int>(i % 3), rng);
    const T light = static_cast<T>(spec.light_min + (spec.light_max - spec.light_min) * u(rng));
    Tensor<T> t(Shape4{1, 1, h, w});
    if (u(rng) < spec.smooth_transmission_prob) {
      detail::smooth_field(t.ptr(), h, w, spec.transmission_min, spec.transmission_max, rng);
    } else {
      t.fill(static_cast<T>(spec.transmission_min +
                            (spec.transmission_max - spec.transmission_min) * u(rng)));
    }
    Tensor<T> hazy = synth_haze(clean, light, t);
    pairs.push_back({std::move(hazy), std::move(clean)});
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  AdamWConfig optimizer;
  std::size_t batch_size = 8;
  std::size_t epochs = 100;
  std::size_t patience = 100;
  double lr_factor = 0.5;
  std::uint64_t seed = 0;
  bool train_purifier = true;
  bool train_lut = true;
  /// Worker threads for per-sample gradients; results do not depend on it.
  std::size_t threads = 1;
  /// Rescale the batch gradient to this global L2 norm when it is larger;
  /// 0 disables clipping.
  double clip_norm = 1.0;
  /// Epochs at the start during which only the global terms (b, the head
  /// bias and the LUT grid) receive gradient; the feature weights see weight
  /// decay alone.
  std::size_t warmup_epochs = 0;

  void validate() const {
    if (!(clip_norm >= 0)) throw DomainError("TrainConfig: clip norm must be >= 0");
    if (!(optimizer.lr >= 0)) throw DomainError("TrainConfig: lr must be >= 0");
    if (!(lr_factor > 0 && lr_factor < 1)) throw DomainError("TrainConfig: factor must be in (0,1)");
    if (batch_size == 0) throw DomainError("TrainConfig: batch size must be positive");
  }
};

/// Pointers to the parameters that receive updates, in a fixed order: the
/// purifier tensors (if trained) followed by the LUT grid (if learnable).
template <class T>
std::vector<Tensor<T>*> trainable_parameters(DehazeModel<T>& m, const TrainConfig& cfg) {
  std::vector<Tensor<T>*> out;
  if (cfg.train_purifier) {
    for (auto& p : m.net.params()) out.push_back(&p.value);
  }
  if (cfg.train_lut && m.lut_trainable()) out.push_back(&m.lut.grid);
  return out;
}

template <class T>
struct LossAndGrads {
  double loss = 0;
  std::vector<Tensor<T>> grads;
};

/// Training loss of one pair: L1 between the unclamped terminal state of the
/// flow and the clean image, with gradients for every trainable parameter
/// (same order as trainable_parameters()).
template <class T>
LossAndGrads<T> loss_and_gradients(const DehazeModel<T>& m, const ImagePair<T>& pair,
                                   const TrainConfig& cfg) {
  Graph<T> g;
  const ModelBinding<T> b = bind_model(g, m, cfg.train_purifier, cfg.train_lut);
  const Var<T> x0 = g.reference(pair.hazy, false);
  const Var<T> target = g.reference(pair.clean, false);
  const Var<T> xn = integrate_graph(x0, m, b, m.flow);
  const Var<T> loss = l1_loss(xn, target);
  LossAndGrads<T> out;
  out.loss = loss.value()[0];
  if (loss.requires_grad()) g.backward(loss);
  if (cfg.train_purifier) {
    for (const auto& v : b.net.vars) out.grads.push_back(g.grad(v));
  }
  if (cfg.train_lut && m.lut_trainable()) out.grads.push_back(g.grad(b.grid));
  return out;
}

/// Mean training loss over `pairs` without recording gradients.
template <class T>
double training_l1(const DehazeModel<T>& m, std::span<const ImagePair<T>> pairs) {
  if (pairs.empty()) return 0.0;
  double total = 0;
  for (const auto& p : pairs) {
    Graph<T> g(false);
    const ModelBinding<T> b = bind_model(g, m, false, false);
    const Var<T> xn = integrate_graph(g.reference(p.hazy, false), m, b, m.flow);
    total += l1_loss(xn, g.reference(p.clean, false)).value()[0];
  }
  return total / static_cast<double>(pairs.size());
}

/// Mean L1 between the clamped inference output and the clean image.
template <class T>
double evaluation_l1(const DehazeModel<T>& m, std::span<const ImagePair<T>> pairs) {
  if (pairs.empty()) return 0.0;
  double total = 0;
  for (const auto& p : pairs) {
    const Tensor<T> out = integrate(p.hazy, m);
    double acc = 0;
    for (std::size_t i = 0; i < out.numel(); ++i) {
      acc += std::abs(static_cast<double>(out[i]) - p.clean[i]);
    }
    total += acc / static_cast<double>(out.numel());
  }
  return total / static_cast<double>(pairs.size());
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_l1 = 0;
  double val_l1 = 0;
  double lr = 0;
};

inline void write_loss_history(std::ostream& os, const std::vector<EpochRecord>& rows) {
  char line[128];
  os << "# epoch train_l1 val_l1 lr\n";
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%zu %.8f %.8f %.6g\n", r.epoch, r.train_l1, r.val_l1, r.lr);
    os << line;
  }
}

template <class T>
struct TrainResult {
  DehazeModel<T> final_model;
  DehazeModel<T> best_model;
  OptState<T> opt_state;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_l1 = std::numeric_limits<double>::infinity();
  /// Training loss of the untouched model over the whole training set.
  double initial_train_l1 = 0;
};

/// Called after each epoch; return false to stop early.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Train `model` on `train` with validation on `val` (falls back to `train`
/// when empty). Deterministic for a given seed, independent of `threads`.
template <class T>
TrainResult<T> train_loop(DehazeModel<T> model, std::span<const ImagePair<T>> train,
                          std::span<const ImagePair<T>> val, const TrainConfig& cfg,
                          const EpochCallback& on_epoch = {}) {
  cfg.validate();
  model.flow.validate();
  if (train.empty()) throw DomainError("train_loop: empty training set");
  for (const auto& p : train) {
    if (p.hazy.shape() != p.clean.shape()) throw ShapeError("train_loop: unpaired shapes");
  }
  if (val.empty()) val = train;

  TrainResult<T> res{model, model, {}, {}, 0, std::numeric_limits<double>::infinity(), 0};
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  AdamWConfig opt = cfg.optimizer;
  std::optional<PlateauScheduler> sched;
  if (opt.lr > 0) sched.emplace(opt.lr, cfg.patience, cfg.lr_factor);
  std::uint64_t global_step = 0;
  const std::vector<Tensor<T>*> params = trainable_parameters(model, cfg);
  res.initial_train_l1 = training_l1<T>(model, train);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      std::vector<LossAndGrads<T>> per(count);
      auto work = [&](std::size_t first, std::size_t stride) {
        for (std::size_t i = first; i < count; i += stride) {
          per[i] = loss_and_gradients(model, train[order[start + i]], cfg);
        }
      };
      ++global_step;
      try {
        const std::size_t nthreads = std::max<std::size_t>(1, std::min(cfg.threads, count));
        if (nthreads == 1) {
          work(0, 1);
        } else {
          std::vector<std::thread> pool;
          std::vector<std::exception_ptr> errors(nthreads);
          for (std::size_t t = 0; t < nthreads; ++t) {
            pool.emplace_back([&, t] {
              try {
                work(t, nthreads);
              } catch (...) {
                errors[t] = std::current_exception();
              }
            });
          }
          for (auto& th : pool) th.join();
          for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
          }
        }
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string("train (") + e.what() + ")", global_step);
      }
      // fixed-order reduction keeps the result independent of thread count
      double batch_loss = 0;
      std::vector<Tensor<T>> grads = std::move(per[0].grads);
      batch_loss += per[0].loss;
      for (std::size_t i = 1; i < count; ++i) {
        batch_loss += per[i].loss;
        for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += per[i].grads[k];
      }
      const T inv = static_cast<T>(1.0 / static_cast<double>(count));
      for (auto& gk : grads) gk = gk * inv;
      if (epoch <= cfg.warmup_epochs && cfg.train_purifier) {
        const auto& np = model.net.params();
        for (std::size_t k = 0; k < np.size(); ++k) {
          if (np[k].name != "b" && np[k].name != "head.bias") grads[k].fill(T(0));
        }
      }
      if (cfg.clip_norm > 0) clip_global_norm<T>(grads, cfg.clip_norm);
      batch_loss /= static_cast<double>(count);
      if (!std::isfinite(batch_loss)) throw DivergenceError("train: loss", global_step);
      epoch_loss += batch_loss * static_cast<double>(count);
      if (!params.empty()) adamw_step<T>(params, grads, res.opt_state, opt);
    }
    epoch_loss /= static_cast<double>(train.size());

    const double val_l1 = evaluation_l1<T>(model, val);
    if (!std::isfinite(val_l1)) throw DivergenceError("train: validation loss", global_step);
    EpochRecord rec{epoch, epoch_loss, val_l1, opt.lr};
    res.history.push_back(rec);
    if (val_l1 < res.best_val_l1) {
      res.best_val_l1 = val_l1;
      res.best_epoch = epoch;
      res.best_model = model;
    }
    if (sched) opt.lr = sched->step(val_l1);
    if (on_epoch && !on_epoch(rec)) break;
  }
  res.final_model = std::move(model);
  return res;
}

}  // namespace dehazeflow
