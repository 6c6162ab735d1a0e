#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "dehazeflow/ablation.hpp"
#include "dehazeflow/bench.hpp"
#include "dehazeflow/checkpoint.hpp"
#include "dehazeflow/dataset.hpp"
#include "dehazeflow/image_io.hpp"
#include "dehazeflow/tiling.hpp"
#include "oracles.hpp"

using namespace dehazeflow;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("dehazeflow_test_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

DehazeModel<float> trained_looking_model(std::uint64_t seed) {
  auto m = DehazeModel<float>::create({4}, 3, FlowConfig{SolverKind::kRk4, 2}, LutMode::kLearnable, seed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.2f, 0.2f);
  for (auto& v : m.net.param("head.weight").data()) v = u(rng);
  for (auto& v : m.lut.grid.data()) v += 0.1f * u(rng);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Image I/O

TEST(ImageIo, EightBitRoundTripWithinHalfCode) {
  TempDir dir;
  std::mt19937_64 rng(1);
  auto img = oracle::uniform<float>({1, 3, 7, 11}, 0, 1, rng);
  img[0] = 0.0f;
  img[1] = 1.0f;
  for (const char* ext : {"png", "ppm"}) {
    const std::string p = dir / (std::string("a.") + ext);
    save_image(img, p);
    const auto back = load_image<float>(p);
    ASSERT_EQ(back.shape(), img.shape());
    EXPECT_LE(max_abs_diff(back, img), 1.0f / 510.0f + 1e-7f) << ext;
    EXPECT_EQ(back[0], 0.0f);
    EXPECT_EQ(back[1], 1.0f);
  }
}

TEST(ImageIo, SixteenBitRoundTrip) {
  TempDir dir;
  std::mt19937_64 rng(2);
  const auto img = oracle::uniform<double>({1, 3, 5, 4}, 0, 1, rng);
  for (const char* ext : {"png", "ppm"}) {
    const std::string p = dir / (std::string("b.") + ext);
    save_image(img, p, 16);
    EXPECT_LE(max_abs_diff(load_image<double>(p), img), 1.0 / 131070.0 + 1e-12) << ext;
  }
}

TEST(ImageIo, OutOfRangeValuesAreClamped) {
  TempDir dir;
  Tensor<float> img({1, 3, 1, 2}, std::vector<float>{-0.5f, 1.5f, 0.2f, 0.2f, 0.3f, 0.3f});
  save_image(img, dir / "c.png");
  const auto back = load_image<float>(dir / "c.png");
  EXPECT_EQ(back[0], 0.0f);
  EXPECT_EQ(back[1], 1.0f);
}

TEST(ImageIo, Errors) {
  TempDir dir;
  const Tensor<float> img({1, 3, 2, 2}, 0.5f);
  EXPECT_THROW(save_image(img, dir / "x.bmp"), FormatError);
  EXPECT_THROW(save_image(img, dir / "x.png", 12), DomainError);
  EXPECT_THROW(save_image(Tensor<float>({1, 1, 2, 2}), dir / "x.png"), ShapeError);
  EXPECT_THROW(load_image<float>(dir / "missing.png"), IoError);
  std::ofstream(dir / "junk.png") << "not a png";
  EXPECT_THROW(load_image<float>(dir / "junk.png"), FormatError);
  std::ofstream(dir / "junk.ppm") << "P3\n2 2\n255\n";
  EXPECT_THROW(load_image<float>(dir / "junk.ppm"), FormatError);
}

TEST(Dataset, PairedDirectory) {
  TempDir dir;
  fs::create_directories(dir.path() / "hazy");
  fs::create_directories(dir.path() / "clean");
  const auto pairs = make_synthetic_pairs<float>(2, 12, 12, 3);
  save_image(pairs[0].hazy, dir / "hazy/b.png");
  save_image(pairs[0].clean, dir / "clean/b.png");
  save_image(pairs[1].hazy, dir / "hazy/a.ppm");
  save_image(pairs[1].clean, dir / "clean/a.ppm");
  std::ofstream(dir / "hazy/notes.txt") << "ignored";
  const auto np = load_paired_directory<float>(dir.path().string());
  ASSERT_EQ(np.names, (std::vector<std::string>{"a.ppm", "b.png"}));
  EXPECT_LE(max_abs_diff(np.pairs[1].hazy, pairs[0].hazy), 1.0f / 510.0f + 1e-7f);
  fs::remove(dir.path() / "clean/a.ppm");
  EXPECT_THROW(load_paired_directory<float>(dir.path().string()), IoError);
  EXPECT_THROW(load_paired_directory<float>(dir / "nope"), IoError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  auto m = trained_looking_model(3);
  m.flow = FlowConfig{SolverKind::kMidpoint, 5, 0.0, 1.0, 0.3};
  m.lut.spacing = LatticeSpacing::kBin;
  const auto pairs = make_synthetic_pairs<float>(2, 12, 12, 4);
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 2;
  const auto res = train_loop<float>(m, pairs, {}, c);
  save_checkpoint(dir / "m.ckpt", res.final_model, TrainingMeta{42, 1, 0.25}, &res.opt_state);
  const auto ck = load_checkpoint<float>(dir / "m.ckpt");
  EXPECT_EQ(ck.model.net, res.final_model.net);
  EXPECT_EQ(ck.model.lut.grid, res.final_model.lut.grid);
  EXPECT_EQ(ck.model.lut.spacing, LatticeSpacing::kBin);
  EXPECT_EQ(ck.model.flow, res.final_model.flow);
  EXPECT_EQ(ck.model.lut_mode, LutMode::kLearnable);
  EXPECT_EQ(ck.meta.seed, 42u);
  EXPECT_EQ(ck.meta.best_val_l1, 0.25);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(*ck.optimizer, res.opt_state);

  std::mt19937_64 rng(5);
  const auto x = oracle::uniform<float>({1, 3, 20, 20}, 0, 1, rng);
  EXPECT_EQ(integrate(x, ck.model), integrate(x, res.final_model));
}

TEST(Checkpoint, WithoutOptimizerAndWithNegativeZero) {
  TempDir dir;
  auto m = trained_looking_model(4);
  m.lut_mode = LutMode::kRemoved;
  m.net.param("b")[0] = -0.0f;
  save_checkpoint(dir / "m.ckpt", m);
  const auto ck = load_checkpoint<float>(dir / "m.ckpt");
  EXPECT_FALSE(ck.optimizer.has_value());
  EXPECT_TRUE(std::signbit(ck.model.net.param("b")[0]));
  EXPECT_EQ(ck.model.lut_mode, LutMode::kRemoved);
  EXPECT_TRUE(std::isnan(ck.meta.best_val_l1));
}

TEST(Checkpoint, RejectsOtherVersionsAndJunk) {
  TempDir dir;
  save_checkpoint(dir / "m.ckpt", trained_looking_model(5));
  std::string bytes;
  {
    std::ifstream is(dir / "m.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  std::string v2 = bytes;
  v2[8] = 2;
  std::ofstream(dir / "v2.ckpt", std::ios::binary) << v2;
  EXPECT_THROW(load_checkpoint<float>(dir / "v2.ckpt"), FormatError);
  std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 4);
  EXPECT_THROW(load_checkpoint<float>(dir / "short.ckpt"), FormatError);
  std::ofstream(dir / "junk.ckpt", std::ios::binary) << "hello world, not a checkpoint";
  EXPECT_THROW(load_checkpoint<float>(dir / "junk.ckpt"), FormatError);
  EXPECT_THROW(load_checkpoint<float>(dir / "missing.ckpt"), IoError);
}

// ---------------------------------------------------------------------------
// Tiling

TEST(Tiling, BlendWeightsSumToOne) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> side(1, 300), tile(2, 96);
  for (int i = 0; i < 40; ++i) {
    const std::size_t h = side(rng), w = side(rng);
    TilePlan plan;
    plan.tile = tile(rng);
    plan.overlap = std::uniform_int_distribution<std::size_t>(0, plan.tile - 1)(rng);
    for (double v : blend_weight_sum(h, w, plan)) ASSERT_NEAR(v, 1.0, 1e-12) << h << "x" << w;
  }
}

TEST(Tiling, TilesCoverTheImage) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 40; ++i) {
    const std::size_t h = std::uniform_int_distribution<std::size_t>(1, 400)(rng);
    const std::size_t w = std::uniform_int_distribution<std::size_t>(1, 400)(rng);
    const TilePlan plan{64, 8};
    std::vector<int> hits(h * w, 0);
    for (const auto& t : plan_tiles(h, w, plan)) {
      ASSERT_LE(t.y0 + t.h, h);
      ASSERT_LE(t.x0 + t.w, w);
      EXPECT_LE(t.h, 64u);
      for (std::size_t y = 0; y < t.h; ++y)
        for (std::size_t x = 0; x < t.w; ++x) ++hits[(t.y0 + y) * w + t.x0 + x];
    }
    for (int v : hits) ASSERT_GE(v, 1);
  }
  EXPECT_THROW(plan_tiles(10, 10, TilePlan{8, 8}), DomainError);
}

TEST(Tiling, SingleTileIsBitIdenticalToIntegrate) {
  const auto m = trained_looking_model(8);
  std::mt19937_64 rng(8);
  const auto x = oracle::uniform<float>({1, 3, 40, 56}, 0, 1, rng);
  EXPECT_EQ(dehaze_tiled(x, m, m.flow, TilePlan{64, 8}), integrate(x, m));
  EXPECT_EQ(dehaze_tiled(x, m, m.flow, TilePlan{56, 8}), integrate(x, m));
}

TEST(Tiling, PointwiseProcessIsSeamless) {
  std::mt19937_64 rng(9);
  const auto x = oracle::uniform<float>({1, 3, 130, 97}, 0, 1, rng);
  auto f = [](const Tensor<float>& t) {
    Tensor<float> y = t;
    for (auto& v : y.data()) v = 0.5f * v * v + 0.1f;
    return y;
  };
  const auto tiled = process_tiled(x, TilePlan{32, 6}, f, 3);
  EXPECT_LE(max_abs_diff(tiled, f(x)), 1e-6f);
  EXPECT_EQ(process_tiled(x, TilePlan{32, 6}, f, 1), tiled);
  const auto ident = process_tiled(x, TilePlan{32, 6}, [](const Tensor<float>& t) { return t; }, 2);
  EXPECT_LE(max_abs_diff(ident, x), 1e-6f);
}

TEST(Tiling, WiderOverlapBringsModelCloserToUntiled) {
  // instance norm sees per-tile statistics, so only the trend is exact
  auto m = trained_looking_model(10);
  m.net.param("b")[0] = 0.0f;
  const auto x = make_synthetic_pairs<float>(1, 96, 96, 10)[0].hazy;
  const auto whole = integrate(x, m);
  double prev = 0;
  for (std::size_t ov : {0, 8, 16, 24}) {
    const double p = psnr(dehaze_tiled(x, m, m.flow, TilePlan{48, ov}, 2), whole);
    EXPECT_GT(p, prev) << ov;
    EXPECT_LT(p, kPsnrCapDb);
    prev = p;
  }
  EXPECT_GT(prev, 25.0);
}

TEST(Tiling, TrajectoryEndsWithTiledOutput) {
  const auto m = trained_looking_model(11);
  std::mt19937_64 rng(11);
  const auto x = oracle::uniform<float>({1, 3, 50, 70}, 0, 1, rng);
  FlowConfig cfg = m.flow;
  cfg.steps = 3;
  const TilePlan plan{32, 8};
  const auto frames = dehaze_tiled_trajectory(x, m, cfg, plan, 2);
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_EQ(frames.back(), dehaze_tiled(x, m, cfg, plan, 1));
  // untiled trajectory agrees for a single tile
  std::vector<Tensor<float>> traj;
  (void)integrate(x, m, cfg, &traj);
  const auto one = dehaze_tiled_trajectory(x, m, cfg, TilePlan{128, 8});
  EXPECT_EQ(one[0], traj[0]);
  EXPECT_EQ(one[1], traj[1]);
}

// ---------------------------------------------------------------------------
// Bench

TEST(Bench, MacArithmetic) {
  EXPECT_EQ(conv_macs(16, 16, 3, 32, 32), 2359296u);
  EXPECT_EQ(conv_macs(3, 3, 1, 1, 1), 9u);
}

TEST(Bench, EvaluationCountsFollowSolver) {
  BenchConfig cfg;
  cfg.height = 24;
  cfg.width = 20;
  cfg.purifier = {2};
  cfg.lut_size = 3;
  cfg.flow.steps = 8;
  cfg.plan = TilePlan{16, 4};
  for (auto [s, evals] : {std::pair{SolverKind::kRk4, 32u}, {SolverKind::kMidpoint, 16u}, {SolverKind::kEuler, 8u}}) {
    cfg.flow.solver = s;
    const auto r = run_bench<float>(cfg);
    EXPECT_EQ(r.field_evaluations, evals) << to_string(s);
    EXPECT_EQ(r.step_seconds.size(), 8u);
    EXPECT_EQ(r.tiles, plan_tiles(24, 20, cfg.plan).size());
    EXPECT_EQ(r.macs_per_evaluation, purifier_macs({2}, 16, 16));
    EXPECT_EQ(r.total_macs, r.macs_per_evaluation * evals * r.tiles);
    EXPECT_GT(r.peak_rss, 0u);
  }
}

// ---------------------------------------------------------------------------
// Ablation wiring

TEST(Ablation, SuitesAndInvariants) {
  const auto train = make_synthetic_pairs<float>(4, 16, 16, 31);
  const auto val = make_synthetic_pairs<float>(2, 16, 16, 32);
  AblationConfig cfg;
  cfg.purifier = {2};
  cfg.lut_size = 3;
  cfg.train.epochs = 3;
  cfg.train.batch_size = 2;
  cfg.train.optimizer.lr = 1e-2;
  cfg.lambdas = {0.0, 0.5};
  const auto rep = run_ablation<float>(AblationSuite::kAll, cfg, train, val);
  ASSERT_EQ(rep.rows.size(), 3u + 2u + 3u);

  const auto& removed = rep.row("lut", "removed");
  const auto& zero = rep.row("lambda", "0");
  EXPECT_EQ(zero.psnr, removed.psnr);
  EXPECT_EQ(zero.ssim, removed.ssim);
  EXPECT_EQ(zero.val_l1, removed.val_l1);

  const auto& fixed = rep.row("lut", "fixed");
  EXPECT_EQ(fixed.checksum_before, fixed.checksum_after);
  const auto& learn = rep.row("lut", "learnable");
  EXPECT_NE(learn.checksum_before, learn.checksum_after);
  EXPECT_EQ(rep.row("solver", "rk4").val_l1, learn.val_l1);
  EXPECT_EQ(rep.row("lambda", "0.5").val_l1, learn.val_l1);
  EXPECT_EQ(rep.row("solver", "euler").solver, SolverKind::kEuler);
  EXPECT_EQ(rep.row("solver", "euler").history.size(), 3u);

  std::ostringstream kv;
  rep.write_key_values(kv);
  EXPECT_NE(kv.str().find("lut.fixed.grid_checksum_before="), std::string::npos);
  EXPECT_NE(kv.str().find("solver.rk4_le_euler_val_l1="), std::string::npos);
  EXPECT_THROW(rep.row("lut", "bogus"), DomainError);

  const auto only = run_ablation<float>(AblationSuite::kSolver, cfg, train, val);
  ASSERT_EQ(only.rows.size(), 3u);
  EXPECT_EQ(only.row("solver", "rk4").val_l1, learn.val_l1);
}

TEST(Ablation, SuiteNames) {
  EXPECT_EQ(ablation_suite_from_string("lambda"), AblationSuite::kLambda);
  EXPECT_THROW(ablation_suite_from_string("optimizer"), DomainError);
}
