#pragma once

// Haze-aware vector field and the fixed-step ODE solvers that carry an image
// from the hazy state at t0 to the clear state at t1.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dehazeflow/autodiff.hpp"
#include "dehazeflow/error.hpp"
#include "dehazeflow/haze_lut.hpp"
#include "dehazeflow/ops.hpp"
#include "dehazeflow/purifier.hpp"
#include "dehazeflow/tensor.hpp"

namespace dehazeflow {

enum class SolverKind : std::uint8_t { kEuler, kMidpoint, kRk4 };

inline const char* to_string(SolverKind s) {
  switch (s) {
    case SolverKind::kEuler: return "euler";
    case SolverKind::kMidpoint: return "midpoint";
    case SolverKind::kRk4: return "rk4";
  }
  return "?";
}

inline SolverKind solver_from_string(const std::string& s) {
  if (s == "euler") return SolverKind::kEuler;
  if (s == "midpoint") return SolverKind::kMidpoint;
  if (s == "rk4") return SolverKind::kRk4;
  throw DomainError("unknown solver '" + s + "' (expected euler, midpoint or rk4)");
}

/// Vector-field evaluations one step of `s` costs.
constexpr std::size_t field_evaluations_per_step(SolverKind s) {
  return s == SolverKind::kEuler ? 1 : (s == SolverKind::kMidpoint ? 2 : 4);
}

struct FlowConfig {
  SolverKind solver = SolverKind::kRk4;
  std::size_t steps = 4;
  double t0 = 0.0;
  double t1 = 1.0;
  /// Weight of the Haze-LUT branch in the vector field.
  double lambda = 0.5;

  double dt() const { return (t1 - t0) / static_cast<double>(steps); }
  double time_at(std::size_t i) const { return t0 + static_cast<double>(i) * dt(); }

  void validate() const {
    if (steps < 1) throw DomainError("FlowConfig: steps must be >= 1");
    if (!(t1 > t0)) throw DomainError("FlowConfig: need t1 > t0");
    if (!(lambda >= 0.0)) throw DomainError("FlowConfig: lambda must be >= 0");
  }

  bool operator==(const FlowConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Solver steps. State is anything with State + State and State * Real
// (double, Tensor<T>, Var<T>); Field is callable as f(t, x) -> State.

template <class State, class Field, class Real>
State euler_step(const State& x, Field&& f, Real t, Real dt) {
  return x + f(t, x) * dt;
}

template <class State, class Field, class Real>
State midpoint_step(const State& x, Field&& f, Real t, Real dt) {
  const Real half = dt / Real(2);
  const State k1 = f(t, x);
  const State k2 = f(t + half, x + k1 * half);
  return x + k2 * dt;
}

template <class State, class Field, class Real>
State rk4_step(const State& x, Field&& f, Real t, Real dt) {
  const Real half = dt / Real(2);
  const State k1 = f(t, x);
  const State k2 = f(t + half, x + k1 * half);
  const State k3 = f(t + half, x + k2 * half);
  const State k4 = f(t + dt, x + k3 * dt);
  return x + (k1 + k2 * Real(2) + k3 * Real(2) + k4) * (dt / Real(6));
}

template <class State, class Field, class Real>
State solver_step(SolverKind kind, const State& x, Field&& f, Real t, Real dt) {
  switch (kind) {
    case SolverKind::kEuler: return euler_step(x, f, t, dt);
    case SolverKind::kMidpoint: return midpoint_step(x, f, t, dt);
    case SolverKind::kRk4: return rk4_step(x, f, t, dt);
  }
  throw DomainError("solver_step: bad solver kind");
}

namespace detail {

inline bool state_finite(double x) { return std::isfinite(x); }
inline bool state_finite(float x) { return std::isfinite(x); }
template <class T>
bool state_finite(const Tensor<T>& x) {
  return x.all_finite();
}
template <class T>
bool state_finite(const Var<T>& x) {
  return x.value().all_finite();
}

}  // namespace detail

/// n solver steps from t0 to t1 without any clamping. When `trajectory` is
/// given, X_1 .. X_n are appended to it. Throws DivergenceError naming the
/// 1-based step whose result, or any stage inside it, was non-finite.
template <class Real, class State, class Field>
State integrate_unclamped(State x, Field&& f, const FlowConfig& cfg,
                          std::vector<State>* trajectory = nullptr) {
  cfg.validate();
  const Real dt = static_cast<Real>(cfg.dt());
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    const Real t = static_cast<Real>(cfg.time_at(i));
    auto guarded = [&](Real ts, const State& s) {
      if (!detail::state_finite(s)) throw DivergenceError("integrate", i + 1);
      State k = f(ts, s);
      if (!detail::state_finite(k)) throw DivergenceError("integrate", i + 1);
      return k;
    };
    x = solver_step(cfg.solver, x, guarded, t, dt);
    if (!detail::state_finite(x)) throw DivergenceError("integrate", i + 1);
    if (trajectory) trajectory->push_back(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Haze-aware vector field

enum class LutMode : std::uint8_t { kLearnable, kFixed, kRemoved };

inline const char* to_string(LutMode m) {
  switch (m) {
    case LutMode::kLearnable: return "learnable";
    case LutMode::kFixed: return "fixed";
    case LutMode::kRemoved: return "removed";
  }
  return "?";
}

inline LutMode lut_mode_from_string(const std::string& s) {
  if (s == "learnable") return LutMode::kLearnable;
  if (s == "fixed") return LutMode::kFixed;
  if (s == "removed") return LutMode::kRemoved;
  throw DomainError("unknown LUT mode '" + s + "' (expected learnable, fixed or removed)");
}

/// Everything needed to evaluate and integrate the vector field.
template <class T>
struct DehazeModel {
  PurifierNet<T> net;
  Lut3D<T> lut;
  LutMode lut_mode = LutMode::kLearnable;
  FlowConfig flow;

  static DehazeModel create(PurifierConfig pcfg, std::size_t lut_size, FlowConfig flow,
                            LutMode mode, std::uint64_t seed) {
    return DehazeModel{PurifierNet<T>::init(pcfg, seed),
                       mode == LutMode::kFixed ? fixed_contrast_saturation_lut<T>(lut_size)
                                               : identity_lut<T>(lut_size),
                       mode, flow};
  }

  bool lut_trainable() const { return lut_mode == LutMode::kLearnable; }
  bool uses_lut() const { return lut_mode != LutMode::kRemoved; }
};

template <class T>
struct ModelBinding {
  PurifierBinding<T> net;
  Var<T> grid;
};

/// Leaves for all model parameters. `train_net` / `train_lut` select which
/// groups collect gradients; a fixed or removed LUT never does.
template <class T>
ModelBinding<T> bind_model(Graph<T>& g, const DehazeModel<T>& m, bool train_net, bool train_lut) {
  ModelBinding<T> b{bind_purifier(g, m.net, train_net), {}};
  if (m.uses_lut()) b.grid = g.reference(m.lut.grid, train_lut && m.lut_trainable());
  return b;
}

/// f(x) = O_m + lambda * O_lut with O_m = purify(x) and O_lut the LUT applied
/// to clamp(x, 0, C_max). The field does not depend on t.
template <class T>
Var<T> vector_field(const Var<T>& x, const DehazeModel<T>& m, const ModelBinding<T>& b,
                    double lambda) {
  Var<T> o_m = purify(x, b.net);
  if (!m.uses_lut()) return o_m;
  Var<T> o_lut = trilinear_apply(clamp(x, T(0), m.lut.c_max), b.grid, m.lut);
  return add(o_m, scale(o_lut, static_cast<T>(lambda)));
}

/// Training-path flow: integrates inside `g` so gradients reach x0 and the
/// bound parameters. Returns the unclamped terminal state.
template <class T>
Var<T> integrate_graph(const Var<T>& x0, const DehazeModel<T>& m, const ModelBinding<T>& b,
                       const FlowConfig& cfg, std::vector<Var<T>>* trajectory = nullptr) {
  auto field = [&](T, const Var<T>& x) { return vector_field(x, m, b, cfg.lambda); };
  return integrate_unclamped<T>(x0, field, cfg, trajectory);
}

/// One field evaluation outside any training graph.
template <class T>
Tensor<T> evaluate_field(const Tensor<T>& x, const DehazeModel<T>& m, double lambda) {
  Graph<T> g(false);
  const ModelBinding<T> b = bind_model(g, m, false, false);
  return vector_field(g.reference(x, false), m, b, lambda).value();
}

/// Integrate an arbitrary field from x0 and clamp the final image to [0, 1].
template <class T, class Field>
Tensor<T> integrate_field(const Tensor<T>& x0, Field&& f, const FlowConfig& cfg,
                          std::vector<Tensor<T>>* trajectory = nullptr) {
  return clamp(integrate_unclamped<T>(x0, f, cfg, trajectory), T(0), T(1));
}

/// Inference: integrate the model's flow from x0 and clamp the final image
/// to [0, 1]. Intermediate states stay unclamped; when `trajectory` is given
/// it receives X_1 .. X_n as they were integrated.
template <class T>
Tensor<T> integrate(const Tensor<T>& x0, const DehazeModel<T>& m, const FlowConfig& cfg,
                    std::vector<Tensor<T>>* trajectory = nullptr) {
  auto field = [&](T, const Tensor<T>& x) { return evaluate_field(x, m, cfg.lambda); };
  return integrate_field(x0, field, cfg, trajectory);
}

template <class T>
Tensor<T> integrate(const Tensor<T>& x0, const DehazeModel<T>& m,
                    std::vector<Tensor<T>>* trajectory = nullptr) {
  return integrate(x0, m, m.flow, trajectory);
}

}  // namespace dehazeflow
