// dehazeflow command-line tool: train / dehaze / eval / bench / ablate.
//
// Options may also come from a key=value file (--config, or the file named by
// DEHAZEFLOW_CONFIG). Keys are long option names without the dashes; flags
// given on the command line win over the file.
//
// Exit codes: 0 ok, 1 usage, 2 data, 3 numerical divergence.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dehazeflow/ablation.hpp"
#include "dehazeflow/bench.hpp"
#include "dehazeflow/checkpoint.hpp"
#include "dehazeflow/dataset.hpp"
#include "dehazeflow/flow.hpp"
#include "dehazeflow/image_io.hpp"
#include "dehazeflow/metrics.hpp"
#include "dehazeflow/tiling.hpp"
#include "dehazeflow/training.hpp"

namespace fs = std::filesystem;
using namespace dehazeflow;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::map<std::string, std::string> read_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  for (int no = 1; std::getline(is, line); ++no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(no) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    if (key.rfind("--", 0) == 0) key.erase(0, 2);
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::string option_key(const CLI::Option* o) {
  if (!o->get_lnames().empty()) return o->get_lnames().front();
  return o->get_name(false, true);
}

// Fill every option of `apps` that the command line left unset.
void apply_config(const std::map<std::string, std::string>& kv, const std::vector<CLI::App*>& active,
                  const std::vector<CLI::App*>& all) {
  for (const auto& [key, value] : kv) {
    bool known = false;
    for (CLI::App* app : all)
      for (const CLI::Option* o : app->get_options())
        if (option_key(o) == key) known = true;
    if (!known) throw UsageError("unknown config key '" + key + "'");
  }
  for (CLI::App* app : active) {
    for (CLI::Option* o : app->get_options()) {
      const auto it = kv.find(option_key(o));
      if (it == kv.end() || o->count() > 0) continue;
      o->add_result(it->second);
      o->run_callback();
    }
  }
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required option --") + flag);
}

// ---------------------------------------------------------------------------
// Shared option groups

struct ModelOptions {
  std::size_t net_width = 16;
  std::size_t lut_size = 2;
  std::string lut_mode = "learnable";
  std::string solver = "rk4";
  std::size_t steps = 2;
  double lambda = 0.5;

  void add(CLI::App* app) {
    app->add_option("--net-width", net_width, "Purifier base channel width")->capture_default_str();
    app->add_option("--lut-size", lut_size, "Haze-LUT bins per channel (M)")->capture_default_str();
    app->add_option("--lut-mode", lut_mode, "learnable, fixed or removed")->capture_default_str();
    app->add_option("--solver", solver, "euler, midpoint or rk4")->capture_default_str();
    app->add_option("--steps", steps, "Solver steps over [0, 1]")->capture_default_str();
    app->add_option("--lambda", lambda, "Weight of the Haze-LUT branch")->capture_default_str();
  }

  FlowConfig flow() const {
    FlowConfig f;
    f.solver = solver_from_string(solver);
    f.steps = steps;
    f.lambda = lambda;
    f.validate();
    return f;
  }
};

struct DataOptions {
  std::string data;
  std::string val_data;
  std::size_t synthetic = 16;
  std::size_t val_count = 8;
  std::size_t size = 32;
  std::uint64_t data_seed = 11;
  std::uint64_t val_seed = 12;

  void add(CLI::App* app) {
    app->add_option("--data", data, "Paired training folder (hazy/, clean/); synthetic when omitted");
    app->add_option("--val-data", val_data, "Paired validation folder; synthetic when omitted");
    app->add_option("--synthetic", synthetic, "Synthetic training pairs")->capture_default_str();
    app->add_option("--val-count", val_count, "Synthetic validation pairs")->capture_default_str();
    app->add_option("--size", size, "Synthetic image side length")->capture_default_str();
    app->add_option("--data-seed", data_seed, "Seed of the synthetic training set")->capture_default_str();
    app->add_option("--val-seed", val_seed, "Seed of the synthetic validation set")->capture_default_str();
  }

  std::vector<ImagePair<float>> train_pairs() const {
    if (!data.empty()) return load_paired_directory<float>(data).pairs;
    return make_synthetic_pairs<float>(synthetic, size, size, data_seed);
  }
  std::vector<ImagePair<float>> val_pairs() const {
    if (!val_data.empty()) return load_paired_directory<float>(val_data).pairs;
    return make_synthetic_pairs<float>(val_count, size, size, val_seed);
  }
};

struct TrainOptions {
  std::size_t epochs = 60;
  std::size_t batch_size = 2;
  double lr = 1e-2;
  double weight_decay = 1e-4;
  std::size_t patience = 100;
  double factor = 0.5;
  double clip = 1.0;
  std::size_t warmup = 15;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs)->capture_default_str();
    app->add_option("--batch-size", batch_size)->capture_default_str();
    app->add_option("--lr", lr, "AdamW learning rate")->capture_default_str();
    app->add_option("--weight-decay", weight_decay)->capture_default_str();
    app->add_option("--patience", patience, "Plateau scheduler patience (epochs)")->capture_default_str();
    app->add_option("--factor", factor, "Plateau scheduler decay factor")->capture_default_str();
    app->add_option("--clip", clip, "Global gradient-norm clip, 0 disables")->capture_default_str();
    app->add_option("--warmup", warmup, "Epochs training only the global terms")->capture_default_str();
  }

  TrainConfig config(std::uint64_t seed, std::size_t threads) const {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.optimizer.lr = lr;
    c.optimizer.weight_decay = weight_decay;
    c.patience = patience;
    c.lr_factor = factor;
    c.clip_norm = clip;
    c.warmup_epochs = warmup;
    c.seed = seed;
    c.threads = threads;
    c.validate();
    return c;
  }
};

struct TileOptions {
  std::size_t tile = 512;
  std::size_t overlap = 32;

  void add(CLI::App* app) {
    app->add_option("--tile", tile, "Tile side length")->capture_default_str();
    app->add_option("--overlap", overlap, "Tile overlap")->capture_default_str();
  }
  TilePlan plan() const {
    TilePlan p{tile, overlap};
    p.validate();
    return p;
  }
};

// Flow overrides for commands that read a checkpoint.
struct FlowOverrides {
  std::optional<std::string> solver;
  std::optional<std::size_t> steps;
  std::optional<double> lambda;

  void add(CLI::App* app) {
    app->add_option("--solver", solver, "Override the checkpoint solver");
    app->add_option("--steps", steps, "Override the checkpoint step count");
    app->add_option("--lambda", lambda, "Override the checkpoint LUT weight");
  }
  FlowConfig apply(FlowConfig f) const {
    if (solver) f.solver = solver_from_string(*solver);
    if (steps) f.steps = *steps;
    if (lambda) f.lambda = *lambda;
    f.validate();
    return f;
  }
};

struct Globals {
  std::string config;
  std::size_t threads = 1;
  std::uint64_t seed = 7;
};

// ---------------------------------------------------------------------------
// Commands

struct TrainCmd {
  ModelOptions model;
  DataOptions data;
  TrainOptions train;
  std::string out;
  std::string history;
  std::string export_lut;
  std::string keep = "final";

  void add(CLI::App* app) {
    model.add(app);
    data.add(app);
    train.add(app);
    app->add_option("-o,--out", out, "Checkpoint to write");
    app->add_option("--history", history, "Write the per-epoch loss history here");
    app->add_option("--export-lut", export_lut, "Write the trained LUT as a .cube text file");
    app->add_option("--keep", keep, "final or best (lowest validation L1)")->capture_default_str();
  }

  int run(const Globals& g) const {
    require(out, "out");
    if (keep != "final" && keep != "best") throw UsageError("--keep must be final or best");
    const auto tr = data.train_pairs();
    const auto va = data.val_pairs();
    DehazeModel<float> m = DehazeModel<float>::create(PurifierConfig{model.net_width}, model.lut_size,
                                                      model.flow(), lut_mode_from_string(model.lut_mode), g.seed);
    std::fprintf(stderr, "training on %zu pairs, validating on %zu, %zu parameters\n", tr.size(), va.size(),
                 m.net.parameter_count() + (m.lut_trainable() ? m.lut.grid.numel() : 0));
    auto res = train_loop<float>(std::move(m), tr, va, train.config(g.seed, g.threads), [](const EpochRecord& e) {
      std::fprintf(stderr, "epoch %zu  train_l1 %.6f  val_l1 %.6f  lr %.3g\n", e.epoch, e.train_l1, e.val_l1, e.lr);
      return true;
    });
    const bool best = keep == "best";
    const DehazeModel<float>& chosen = best ? res.best_model : res.final_model;
    TrainingMeta meta{g.seed, best ? res.best_epoch : res.history.size(), res.best_val_l1};
    save_checkpoint(out, chosen, meta, best ? nullptr : &res.opt_state);
    if (!history.empty()) {
      std::ofstream os(history);
      if (!os) throw IoError("cannot write " + history);
      write_loss_history(os, res.history);
    }
    if (!export_lut.empty()) export_cube(chosen.lut, export_lut);

    MetricReport before, after;
    for (std::size_t i = 0; i < va.size(); ++i) {
      const auto o = integrate(va[i].hazy, chosen);
      before.add("val" + std::to_string(i), psnr(va[i].hazy, va[i].clean), ssim(va[i].hazy, va[i].clean));
      after.add("val" + std::to_string(i), psnr(o, va[i].clean), ssim(o, va[i].clean));
    }
    before.write_key_values(std::cout, "input.");
    after.write_key_values(std::cout, "output.");
    std::printf("best_epoch=%zu\nbest_val_l1=%.9g\ncheckpoint=%s\n", res.best_epoch, res.best_val_l1, out.c_str());
    return kOk;
  }
};

struct DehazeCmd {
  std::string checkpoint;
  std::string input;
  std::string output;
  FlowOverrides flow;
  TileOptions tiles;
  std::string trajectory;
  unsigned bit_depth = 8;

  void add(CLI::App* app) {
    app->add_option("input", input, "Hazy image (.png or .ppm)");
    app->add_option("output", output, "Output image (.png or .ppm)");
    app->add_option("-c,--checkpoint", checkpoint, "Trained model");
    flow.add(app);
    tiles.add(app);
    app->add_option("--record-trajectory", trajectory, "Write step_000.png .. step_n.png into this folder");
    app->add_option("--bit-depth", bit_depth, "8 or 16")->capture_default_str();
  }

  int run(const Globals& g) const {
    require(checkpoint, "checkpoint");
    require(input, "input");
    require(output, "output");
    if (bit_depth != 8 && bit_depth != 16) throw UsageError("--bit-depth must be 8 or 16");
    const auto ck = load_checkpoint<float>(checkpoint);
    const FlowConfig cfg = flow.apply(ck.model.flow);
    const TilePlan plan = tiles.plan();
    const Tensor<float> x = load_image<float>(input);
    if (trajectory.empty()) {
      save_image(dehaze_tiled(x, ck.model, cfg, plan, g.threads), output, bit_depth);
      return kOk;
    }
    const auto frames = dehaze_tiled_trajectory(x, ck.model, cfg, plan, g.threads);
    fs::create_directories(trajectory);
    auto frame_path = [&](std::size_t i) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%03zu.png", i);
      return (fs::path(trajectory) / name).string();
    };
    save_image(x, frame_path(0), bit_depth);
    for (std::size_t i = 0; i < frames.size(); ++i) save_image(frames[i], frame_path(i + 1), bit_depth);
    save_image(frames.back(), output, bit_depth);
    return kOk;
  }
};

struct EvalCmd {
  std::string data;
  std::string checkpoint;
  std::string out_dir;
  FlowOverrides flow;
  TileOptions tiles;

  void add(CLI::App* app) {
    app->add_option("--data", data, "Paired folder with hazy/ and clean/");
    app->add_option("-c,--checkpoint", checkpoint, "Model to evaluate; scores the hazy inputs when omitted");
    app->add_option("--out-dir", out_dir, "Also save the dehazed images here");
    flow.add(app);
    tiles.add(app);
  }

  int run(const Globals& g) const {
    require(data, "data");
    const auto set = load_paired_directory<float>(data);
    std::optional<Checkpoint<float>> ck;
    if (!checkpoint.empty()) ck = load_checkpoint<float>(checkpoint);
    const FlowConfig cfg = ck ? flow.apply(ck->model.flow) : FlowConfig{};
    if (!out_dir.empty()) fs::create_directories(out_dir);
    MetricReport rep;
    for (std::size_t i = 0; i < set.pairs.size(); ++i) {
      const auto& p = set.pairs[i];
      const Tensor<float> o = ck ? dehaze_tiled(p.hazy, ck->model, cfg, tiles.plan(), g.threads) : p.hazy;
      if (!out_dir.empty()) save_image(o, (fs::path(out_dir) / set.names[i]).string());
      rep.add(set.names[i], psnr(o, p.clean), ssim(o, p.clean));
    }
    rep.write_table(std::cout);
    rep.write_key_values(std::cout);
    return kOk;
  }
};

struct BenchCmd {
  BenchConfig cfg;
  ModelOptions model;
  TileOptions tiles;

  void add(CLI::App* app) {
    app->add_option("--height", cfg.height, "Image height")->capture_default_str();
    app->add_option("--width", cfg.width, "Image width")->capture_default_str();
    model.steps = 4;
    model.lut_size = 33;
    model.net_width = 16;
    model.add(app);
    tiles.add(app);
  }

  int run(const Globals& g) {
    cfg.flow = model.flow();
    cfg.purifier = PurifierConfig{model.net_width};
    cfg.lut_size = model.lut_size;
    cfg.plan = tiles.plan();
    cfg.threads = g.threads;
    cfg.seed = g.seed;
    run_bench<float>(cfg).write(std::cout);
    return kOk;
  }
};

struct AblateCmd {
  std::string suite = "all";
  ModelOptions model;
  DataOptions data;
  TrainOptions train;
  std::vector<double> lambdas{0.0, 0.1, 0.5, 1.0};
  std::string out_dir;

  void add(CLI::App* app) {
    app->add_option("--suite", suite, "lut, lambda, solver or all")->capture_default_str();
    model.add(app);
    data.add(app);
    train.add(app);
    app->add_option("--lambdas", lambdas, "LUT weights of the lambda suite")->delimiter(',')->capture_default_str();
    app->add_option("--out-dir", out_dir, "Write report.txt and per-row loss histories here");
  }

  int run(const Globals& g) const {
    const AblationSuite s = ablation_suite_from_string(suite);
    AblationConfig cfg;
    cfg.purifier = PurifierConfig{model.net_width};
    cfg.lut_size = model.lut_size;
    cfg.flow = model.flow();
    cfg.train = train.config(g.seed, g.threads);
    cfg.model_seed = g.seed;
    cfg.lambdas = lambdas;
    const auto tr = data.train_pairs();
    const auto va = data.val_pairs();
    const AblationReport rep = run_ablation<float>(s, cfg, tr, va, [](const AblationRow& r) {
      std::fprintf(stderr, "%s/%s  psnr %.4f  ssim %.5f\n", r.suite.c_str(), r.setting.c_str(), r.psnr, r.ssim);
    });
    std::ostringstream text;
    rep.write_table(text);
    rep.write_key_values(text);
    std::cout << text.str();
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      std::ofstream os(fs::path(out_dir) / "report.txt");
      os << text.str();
      for (const auto& r : rep.rows) {
        std::ofstream h(fs::path(out_dir) / (r.suite + "_" + r.setting + "_history.txt"));
        write_loss_history(h, r.history);
      }
      if (!os) throw IoError("cannot write report in " + out_dir);
    }
    return kOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Haze-aware flow dehazing: train, dehaze, evaluate, benchmark and ablate"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key=value configuration file (default: $DEHAZEFLOW_CONFIG)");
  app.add_option("--threads", g.threads, "Worker threads")->capture_default_str();
  app.add_option("--seed", g.seed, "Model / shuffling seed")->capture_default_str();

  TrainCmd train;
  DehazeCmd dehaze;
  EvalCmd eval;
  BenchCmd bench;
  AblateCmd ablate;
  CLI::App* sub_train = app.add_subcommand("train", "Train a model and write a checkpoint");
  CLI::App* sub_dehaze = app.add_subcommand("dehaze", "Dehaze one image with a trained model");
  CLI::App* sub_eval = app.add_subcommand("eval", "PSNR / SSIM over a paired folder");
  CLI::App* sub_bench = app.add_subcommand("bench", "Time and size the inference path");
  CLI::App* sub_ablate = app.add_subcommand("ablate", "Haze-LUT, lambda and solver ablations");
  train.add(sub_train);
  dehaze.add(sub_dehaze);
  eval.add(sub_eval);
  bench.add(sub_bench);
  ablate.add(sub_ablate);
  const std::vector<CLI::App*> subs{sub_train, sub_dehaze, sub_eval, sub_bench, sub_ablate};

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    std::string config = g.config;
    if (config.empty()) {
      if (const char* env = std::getenv("DEHAZEFLOW_CONFIG"); env && *env) config = env;
    }
    if (!config.empty()) {
      std::vector<CLI::App*> all{&app};
      all.insert(all.end(), subs.begin(), subs.end());
      std::vector<CLI::App*> active{&app};
      for (CLI::App* s : subs)
        if (s->parsed()) active.push_back(s);
      apply_config(read_config(config), active, all);
    }
    if (sub_train->parsed()) return train.run(g);
    if (sub_dehaze->parsed()) return dehaze.run(g);
    if (sub_eval->parsed()) return eval.run(g);
    if (sub_bench->parsed()) return bench.run(g);
    return ablate.run(g);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return kDivergence;
  } catch (const dehazeflow::Error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  }
}
