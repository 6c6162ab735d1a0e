#pragma once

// Component ablations: Haze-LUT variant, LUT weight and solver family, each
// trained from the same seed on the same data and scored on held-out pairs.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dehazeflow/error.hpp"
#include "dehazeflow/flow.hpp"
#include "dehazeflow/haze_lut.hpp"
#include "dehazeflow/metrics.hpp"
#include "dehazeflow/purifier.hpp"
#include "dehazeflow/training.hpp"

namespace dehazeflow {

enum class AblationSuite : std::uint8_t { kLut, kLambda, kSolver, kAll };

inline const char* to_string(AblationSuite s) {
  switch (s) {
    case AblationSuite::kLut: return "lut";
    case AblationSuite::kLambda: return "lambda";
    case AblationSuite::kSolver: return "solver";
    case AblationSuite::kAll: return "all";
  }
  return "?";
}

inline AblationSuite ablation_suite_from_string(const std::string& s) {
  if (s == "lut") return AblationSuite::kLut;
  if (s == "lambda") return AblationSuite::kLambda;
  if (s == "solver") return AblationSuite::kSolver;
  if (s == "all") return AblationSuite::kAll;
  throw DomainError("unknown ablation suite '" + s + "' (expected lut, lambda, solver or all)");
}

struct AblationConfig {
  PurifierConfig purifier{16};
  std::size_t lut_size = 2;
  /// Base flow; each row overrides one of solver / lambda / LUT mode.
  FlowConfig flow{SolverKind::kRk4, 2, 0.0, 1.0, 0.5};
  TrainConfig train;
  std::uint64_t model_seed = 7;
  std::vector<double> lambdas{0.0, 0.1, 0.5, 1.0};
};

struct AblationRow {
  std::string suite;
  std::string setting;
  LutMode lut_mode = LutMode::kLearnable;
  SolverKind solver = SolverKind::kRk4;
  double lambda = 0.5;
  double psnr = 0;
  double ssim = 0;
  double val_l1 = 0;
  std::uint64_t checksum_before = 0;
  std::uint64_t checksum_after = 0;
  std::vector<EpochRecord> history;
};

struct AblationReport {
  double input_psnr = 0;
  double input_ssim = 0;
  std::vector<AblationRow> rows;

  const AblationRow& row(const std::string& suite, const std::string& setting) const {
    for (const auto& r : rows)
      if (r.suite == suite && r.setting == setting) return r;
    throw DomainError("ablation report has no row " + suite + "/" + setting);
  }

  void write_table(std::ostream& os) const {
    char line[160];
    std::snprintf(line, sizeof line, "%-8s %-10s %10s %8s %10s\n", "suite", "setting", "PSNR(dB)", "SSIM",
                  "val_L1");
    os << line;
    std::snprintf(line, sizeof line, "%-8s %-10s %10.4f %8.5f %10s\n", "input", "hazy", input_psnr,
                  input_ssim, "-");
    os << line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-8s %-10s %10.4f %8.5f %10.6f\n", r.suite.c_str(),
                    r.setting.c_str(), r.psnr, r.ssim, r.val_l1);
      os << line;
    }
  }

  void write_key_values(std::ostream& os) const {
    char line[200];
    std::snprintf(line, sizeof line, "input.psnr=%.9g\ninput.ssim=%.9g\n", input_psnr, input_ssim);
    os << line;
    for (const auto& r : rows) {
      const std::string k = r.suite + "." + r.setting;
      std::snprintf(line, sizeof line, "%s.psnr=%.9g\n%s.ssim=%.9g\n%s.val_l1=%.9g\n", k.c_str(), r.psnr,
                    k.c_str(), r.ssim, k.c_str(), r.val_l1);
      os << line;
      if (r.lut_mode == LutMode::kFixed) {
        std::snprintf(line, sizeof line, "%s.grid_checksum_before=%016llx\n%s.grid_checksum_after=%016llx\n",
                      k.c_str(), static_cast<unsigned long long>(r.checksum_before), k.c_str(),
                      static_cast<unsigned long long>(r.checksum_after));
        os << line;
      }
    }
    for (const auto& r : rows) {
      if (r.suite != "solver") continue;
      for (const auto& e : rows) {
        if (r.setting == "rk4" && e.suite == "solver" && e.setting == "euler") {
          std::snprintf(line, sizeof line, "solver.rk4_le_euler_val_l1=%s\n",
                        r.val_l1 <= e.val_l1 ? "yes" : "no");
          os << line;
        }
      }
    }
  }
};

/// Called once per finished row.
using AblationProgress = std::function<void(const AblationRow&)>;

/// Train and score every row of `suite`. Rows that share a configuration
/// (e.g. lut/learnable and solver/rk4) are trained once.
template <class T>
AblationReport run_ablation(AblationSuite suite, const AblationConfig& cfg,
                            std::span<const ImagePair<T>> train, std::span<const ImagePair<T>> val,
                            const AblationProgress& progress = {}) {
  if (val.empty()) throw DomainError("run_ablation: empty validation set");
  AblationReport rep;
  for (const auto& p : val) {
    rep.input_psnr += psnr(p.hazy, p.clean);
    rep.input_ssim += ssim(p.hazy, p.clean);
  }
  rep.input_psnr /= static_cast<double>(val.size());
  rep.input_ssim /= static_cast<double>(val.size());

  std::map<std::string, AblationRow> done;
  auto run = [&](const std::string& suite_name, const std::string& setting, LutMode mode, SolverKind solver,
                 double lambda) {
    const std::string key = std::string(to_string(mode)) + "/" + to_string(solver) + "/" + std::to_string(lambda);
    auto it = done.find(key);
    if (it == done.end()) {
      FlowConfig flow = cfg.flow;
      flow.solver = solver;
      flow.lambda = lambda;
      DehazeModel<T> model = DehazeModel<T>::create(cfg.purifier, cfg.lut_size, flow, mode, cfg.model_seed);
      AblationRow row;
      row.lut_mode = mode;
      row.solver = solver;
      row.lambda = lambda;
      row.checksum_before = grid_checksum(model.lut);
      TrainResult<T> res = train_loop<T>(std::move(model), train, val, cfg.train);
      const DehazeModel<T>& m = res.final_model;
      row.checksum_after = grid_checksum(m.lut);
      for (const auto& p : val) {
        const Tensor<T> out = integrate(p.hazy, m);
        row.psnr += psnr(out, p.clean);
        row.ssim += ssim(out, p.clean);
      }
      row.psnr /= static_cast<double>(val.size());
      row.ssim /= static_cast<double>(val.size());
      row.val_l1 = evaluation_l1<T>(m, val);
      row.history = std::move(res.history);
      it = done.emplace(key, std::move(row)).first;
    }
    AblationRow row = it->second;
    row.suite = suite_name;
    row.setting = setting;
    if (progress) progress(row);
    rep.rows.push_back(std::move(row));
  };

  const bool all = suite == AblationSuite::kAll;
  const SolverKind base_solver = cfg.flow.solver;
  const double base_lambda = cfg.flow.lambda;
  if (all || suite == AblationSuite::kLut) {
    for (LutMode mode : {LutMode::kRemoved, LutMode::kFixed, LutMode::kLearnable}) {
      run("lut", to_string(mode), mode, base_solver, base_lambda);
    }
  }
  if (all || suite == AblationSuite::kLambda) {
    for (double lambda : cfg.lambdas) {
      char name[32];
      std::snprintf(name, sizeof name, "%g", lambda);
      run("lambda", name, LutMode::kLearnable, base_solver, lambda);
    }
  }
  if (all || suite == AblationSuite::kSolver) {
    for (SolverKind s : {SolverKind::kEuler, SolverKind::kMidpoint, SolverKind::kRk4}) {
      run("solver", to_string(s), LutMode::kLearnable, s, base_lambda);
    }
  }
  return rep;
}

}  // namespace dehazeflow
