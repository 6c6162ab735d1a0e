// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance [--rss-budget-mib N]     (default 1024)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>

#include "dehazeflow/ablation.hpp"
#include "dehazeflow/bench.hpp"
#include "dehazeflow/checkpoint.hpp"
#include "dehazeflow/flow.hpp"
#include "dehazeflow/haze_lut.hpp"
#include "dehazeflow/metrics.hpp"
#include "dehazeflow/purifier.hpp"
#include "dehazeflow/tiling.hpp"
#include "dehazeflow/training.hpp"
#include "oracles.hpp"

using namespace dehazeflow;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [not met]");
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::size_t worker_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------

double decay(double, double x) { return -x; }

double solve_decay(SolverKind s, std::size_t n) {
  return integrate_unclamped<double>(1.0, decay, FlowConfig{s, n, 0.0, 1.0, 0.0});
}

Outcome solver_correctness() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const double exact = std::exp(-1.0);
  const double err = std::abs(solve_decay(SolverKind::kRk4, 10) - exact);
  o.require(err < 1e-8, "RK4 n=10 |X_n - e^-1| = " + fmt("%.3e", err) + " vs 1e-8");
  auto order = [&](SolverKind s, std::size_t n) {
    return std::log2(std::abs(solve_decay(s, n) - exact) / std::abs(solve_decay(s, 2 * n) - exact));
  };
  const double p_euler = order(SolverKind::kEuler, 16);
  const double p_mid = order(SolverKind::kMidpoint, 16);
  const double p_rk4 = order(SolverKind::kRk4, 8);
  o.require(std::abs(p_euler - 1) <= 0.3, "Euler order " + fmt("%.3f", p_euler));
  o.require(std::abs(p_mid - 2) <= 0.3, "Midpoint order " + fmt("%.3f", p_mid));
  o.require(std::abs(p_rk4 - 4) <= 0.3, "RK4 order " + fmt("%.3f", p_rk4));
  const double secs = seconds_since(t0);
  o.require(secs < 1.0, "runtime " + fmt("%.4f", secs) + " s");
  return o;
}

Outcome zero_field_identity() {
  Outcome o;
  std::mt19937_64 rng(2);
  const auto x0 = oracle::uniform<float>({1, 3, 9, 7}, -0.5, 1.5, rng);
  auto zero = [](float, const Tensor<float>& x) { return Tensor<float>(x.shape(), 0.0f); };
  bool exact = true;
  for (SolverKind s : {SolverKind::kEuler, SolverKind::kMidpoint, SolverKind::kRk4})
    for (std::size_t n : {1, 4, 16})
      exact = exact && integrate_unclamped<float>(x0, zero, FlowConfig{s, n}) == x0;
  o.require(exact, "3 solvers x n in {1,4,16} bit-exact");
  return o;
}

Outcome lut_identity() {
  Outcome o;
  const auto lut = identity_lut<double>(33);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::array<double, 3> c{u(rng), u(rng), u(rng)};
    const auto r = lut_lookup(c, lut);
    for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(r[k] - c[k]));
  }
  o.require(worst < 1e-6, "M=33 identity max error " + fmt("%.2e", worst));
  auto bin = lut;
  bin.spacing = LatticeSpacing::kBin;
  const double coord = lattice_coords(std::array<double, 3>{0.5, 0.5, 0.5}, bin)[0];
  o.require(coord == 16.5, "r=0.5 lattice coordinate " + fmt("%.4f", coord));
  return o;
}

Outcome purifier_closed_forms() {
  Outcome o;
  std::mt19937_64 rng(4);
  const auto xt = oracle::uniform<float>({1, 3, 17, 23}, 0, 1, rng);
  {
    Graph<float> g(false);
    const auto x = g.constant(xt);
    const auto k = g.constant(Tensor<float>(xt.shape(), 1.0f));
    const auto b = g.constant(Tensor<float>({1, 1, 1, 1}, 1.0f));
    o.require(purify_with(k, x, b).value() == xt, "K=1, b=1 returns x exactly");
  }
  {
    const auto net = PurifierNet<float>::zeros({8});
    Graph<float> g(false);
    const auto out = purify(g.constant(xt), bind_purifier(g, net, false)).value();
    double worst = 0;
    for (std::size_t i = 0; i < xt.numel(); ++i) {
      const double x = xt[i];
      worst = std::max(worst, std::abs(out[i] - (x * x - x + 1)));
    }
    o.require(worst < 1e-6, "zero network vs x^2-x+1 max error " + fmt("%.2e", worst));
  }
  return o;
}

Outcome gradient_fidelity() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  auto m = DehazeModel<float>::create({4}, 5, FlowConfig{SolverKind::kRk4, 2}, LutMode::kLearnable, 5);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> head(-0.15, 0.15), jitter(-0.025, 0.025);
  for (auto& v : m.net.param("head.weight").data()) v = static_cast<float>(head(rng));
  for (auto& v : m.net.param("head.bias").data()) v = static_cast<float>(head(rng));
  for (auto& v : m.lut.grid.data()) v += static_cast<float>(jitter(rng));
  const auto md = oracle::cast_model<double>(m);
  const auto hazy_d = oracle::uniform<double>({1, 3, 4, 4}, 0.1, 0.9, rng);
  const auto clean_d = oracle::uniform<double>({1, 3, 4, 4}, 0.0, 1.0, rng);
  const auto hazy_f = hazy_d.cast<float>();
  const auto clean_f = clean_d.cast<float>();
  const double floor = 1e-7;

  std::mt19937_64 r32(6), r64(6);
  const auto g32 = oracle::check_gradients<float>(oracle::model_parameters(m),
                                                  oracle::ModelLoss<float>{&m, &md, &hazy_f, &clean_f}, 1e-5, r32,
                                                  floor);
  const auto g64 = oracle::check_gradients<double>(oracle::model_parameters(md),
                                                   oracle::ModelLoss<double>{&md, &md, &hazy_d, &clean_d}, 1e-5,
                                                   r64, floor);
  const std::size_t groups = g64.groups.size();
  o.require(g32.rel_error < 1e-3, "float32 max rel error " + fmt("%.2e", g32.rel_error));
  o.require(g64.rel_error < 1e-6, "float64 max rel error " + fmt("%.2e", g64.rel_error));
  o.require(!g64.groups.back().structural_zero, "LUT grid checked");
  o.require(!g64.groups[m.net.index_of("b")].structural_zero, "b checked");
  o.require(!g64.groups[m.net.index_of("head.weight")].structural_zero, "head checked");
  o.detail += "; " + std::to_string(groups - g64.structural_zeros) + " of " + std::to_string(groups) +
              " groups compared, the rest have zero gradient in both methods at 4x4";
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, "runtime " + fmt("%.1f", secs) + " s");
  return o;
}

Outcome toy_training() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto train = make_synthetic_pairs<float>(16, 32, 32, 11);
  const auto val = make_synthetic_pairs<float>(8, 32, 32, 12);
  auto model = DehazeModel<float>::create({16}, 2, FlowConfig{SolverKind::kRk4, 2, 0.0, 1.0, 0.5},
                                          LutMode::kLearnable, 7);
  TrainConfig c;
  c.epochs = 60;
  c.batch_size = 2;
  c.optimizer.lr = 1e-2;
  c.warmup_epochs = 15;
  c.clip_norm = 1.0;
  c.seed = 7;
  c.threads = worker_threads();
  const auto res = train_loop<float>(std::move(model), train, val, c);
  double in_p = 0, in_s = 0, out_p = 0, out_s = 0;
  for (const auto& p : val) {
    const auto y = integrate(p.hazy, res.final_model);
    in_p += psnr(p.hazy, p.clean);
    in_s += ssim(p.hazy, p.clean);
    out_p += psnr(y, p.clean);
    out_s += ssim(y, p.clean);
  }
  const double n = static_cast<double>(val.size());
  in_p /= n, in_s /= n, out_p /= n, out_s /= n;
  o.require(res.history.size() <= 500, std::to_string(res.history.size()) + " epochs");
  o.require(out_p - in_p >= 3.0,
            "PSNR " + fmt("%.3f", out_p) + " vs hazy " + fmt("%.3f", in_p) + " dB (+" + fmt("%.2f", out_p - in_p) + ")");
  o.require(out_s > in_s, "SSIM " + fmt("%.4f", out_s) + " vs hazy " + fmt("%.4f", in_s));
  o.detail += "; " + fmt("%.1f", seconds_since(t0)) + " s";
  return o;
}

std::string capture(const std::string& cmd, int& status) {
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) throw IoError("cannot run " + cmd);
  std::string out;
  char buf[4096];
  for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, p)) > 0;) out.append(buf, n);
  status = pclose(p);
  return out;
}

Outcome ablation_wiring() {
  Outcome o;
  int status = 0;
  const std::string out = capture(std::string(DEHAZEFLOW_CLI) +
                                      " ablate --suite all --net-width 4 --synthetic 8 --val-count 4 --size 16"
                                      " --epochs 10 --warmup 3 2>/dev/null",
                                  status);
  o.require(status == 0, "ablate exit status " + std::to_string(status));
  std::map<std::string, std::string> kv;
  std::istringstream is(out);
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto has = [&](const std::string& k) { return kv.count(k) > 0; };
  bool suites = true;
  for (const char* k : {"lut.removed", "lut.fixed", "lut.learnable", "lambda.0", "lambda.0.5", "solver.euler",
                        "solver.midpoint", "solver.rk4"})
    suites = suites && has(std::string(k) + ".psnr") && has(std::string(k) + ".ssim") && has(std::string(k) + ".val_l1");
  o.require(suites, "lut, lambda and solver suites reported");
  bool same = true;
  for (const char* m : {".psnr", ".ssim", ".val_l1"})
    same = same && has(std::string("lambda.0") + m) && kv["lambda.0" + std::string(m)] == kv["lut.removed" + std::string(m)];
  o.require(same, "lambda=0 equals LUT removed on PSNR, SSIM and val L1");
  o.require(has("lut.fixed.grid_checksum_before") &&
                kv["lut.fixed.grid_checksum_before"] == kv["lut.fixed.grid_checksum_after"],
            "fixed LUT checksum unchanged");
  o.detail += "; reported: RK4 val L1 " + kv["solver.rk4.val_l1"] + " vs Euler " + kv["solver.euler.val_l1"];
  return o;
}

Outcome metrics_oracle() {
  Outcome o;
  std::mt19937_64 rng(8);
  const auto x = oracle::uniform<double>({1, 3, 32, 32}, 0, 0.9, rng);
  auto y = x;
  for (auto& v : y.data()) v += 0.1;
  const double p = psnr(x, y);
  o.require(std::abs(p - 20.0) <= 1e-6, "0.1 offset PSNR " + fmt("%.9f", p));
  const double self = ssim(x, x);
  o.require(std::abs(self - 1.0) < 1e-12, "self SSIM " + fmt("%.12f", self));
  double worst = 0;
  std::uniform_int_distribution<std::size_t> side(11, 40);
  std::uniform_real_distribution<double> amp(0.0, 0.5);
  for (int i = 0; i < 100; ++i) {
    const Shape4 s{1, 3, side(rng), side(rng)};
    const auto a = oracle::uniform<double>(s, 0, 1, rng);
    auto b = a;
    const double a_max = amp(rng);
    std::uniform_real_distribution<double> noise(-a_max, a_max);
    for (auto& v : b.data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
    worst = std::max(worst, std::abs(ssim(a, b) - oracle::ssim_direct(a, b)));
  }
  o.require(worst < 1e-6, "SSIM vs direct reference on 100 pairs " + fmt("%.2e", worst));
  return o;
}

Outcome uhd_plumbing(double budget_mib) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto m = DehazeModel<float>::create({8}, 33, FlowConfig{SolverKind::kRk4, 2}, LutMode::kLearnable, 9);
  {
    const auto x = make_synthetic_pairs<float>(1, 2160, 3840, 9)[0].hazy;
    const auto y = dehaze_tiled(x, m, m.flow, TilePlan{512, 32}, worker_threads());
    o.require(y.shape() == x.shape() && y.all_finite(), "3840x2160 output");
  }
  const double peak = static_cast<double>(peak_rss_bytes()) / (1024.0 * 1024.0);
  o.require(peak <= budget_mib, "peak RSS " + fmt("%.0f", peak) + " MiB vs budget " + fmt("%.0f", budget_mib));
  o.detail += "; " + fmt("%.1f", seconds_since(t0)) + " s";

  std::mt19937_64 rng(9);
  const auto small = oracle::uniform<float>({1, 3, 300, 200}, 0, 1, rng);
  o.require(dehaze_tiled(small, m, m.flow, TilePlan{512, 32}, 1) == integrate(small, m),
            "single tile bit-identical");
  double worst = 0;
  for (double v : blend_weight_sum(2160, 3840, TilePlan{512, 32})) worst = std::max(worst, std::abs(v - 1.0));
  o.require(worst < 1e-12, "blend weight sum max |w-1| " + fmt("%.1e", worst));
  return o;
}

Outcome persistence() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / ("dehazeflow_accept_" + std::to_string(std::random_device{}()));
  fs::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();
  auto m = DehazeModel<float>::create({4}, 5, FlowConfig{SolverKind::kMidpoint, 3}, LutMode::kLearnable, 10);
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 2;
  c.optimizer.lr = 1e-2;
  const auto res = train_loop<float>(std::move(m), make_synthetic_pairs<float>(4, 16, 16, 10), {}, c);
  save_checkpoint(path, res.final_model, TrainingMeta{10, 3, 0.0}, &res.opt_state);
  const auto ck = load_checkpoint<float>(path);
  fs::remove_all(dir);
  o.require(ck.model.net == res.final_model.net && ck.model.lut.grid == res.final_model.lut.grid &&
                ck.model.flow == res.final_model.flow && ck.optimizer && *ck.optimizer == res.opt_state,
            "parameters, flow settings and optimizer state bit-exact");
  std::mt19937_64 rng(10);
  const auto x = oracle::uniform<float>({1, 3, 40, 56}, 0, 1, rng);
  o.require(integrate(x, ck.model) == integrate(x, res.final_model), "dehaze after reload bit-exact");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  double budget_mib = 1024;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--rss-budget-mib" && i + 1 < argc) {
      budget_mib = std::atof(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--rss-budget-mib N]\n", argv[0]);
      return 1;
    }
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"solver correctness", solver_correctness},
      {"zero-field identity", zero_field_identity},
      {"LUT identity", lut_identity},
      {"purifier closed forms", purifier_closed_forms},
      {"gradient fidelity", gradient_fidelity},
      {"toy training improvement", toy_training},
      {"ablation wiring", ablation_wiring},
      {"metrics oracle", metrics_oracle},
      {"UHD plumbing", [&] { return uhd_plumbing(budget_mib); }},
      {"persistence", persistence},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.pass) ++failed;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
