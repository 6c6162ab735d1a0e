#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "dehazeflow/metrics.hpp"
#include "oracles.hpp"

using namespace dehazeflow;

TEST(Psnr, TenthOffsetIsTwentyDb) {
  std::mt19937_64 rng(1);
  const auto x = oracle::uniform<double>({1, 3, 16, 16}, 0, 0.9, rng);
  Tensor<double> y = x;
  for (auto& v : y.data()) v += 0.1;
  EXPECT_NEAR(psnr(x, y), 20.0, 1e-6);
  EXPECT_NEAR(psnr(x.cast<float>(), y.cast<float>()), 20.0, 1e-4);
}

TEST(Psnr, FullScaleErrorIsZeroDb) {
  EXPECT_NEAR(psnr(Tensor<double>({1, 3, 4, 4}, 0.0), Tensor<double>({1, 3, 4, 4}, 1.0)), 0.0, 1e-12);
}

TEST(Psnr, IdenticalImagesHitTheCap) {
  const Tensor<float> x({1, 3, 8, 8}, 0.3f);
  EXPECT_EQ(psnr(x, x), kPsnrCapDb);
}

TEST(Psnr, SymmetricAndShapeChecked) {
  std::mt19937_64 rng(2);
  const auto x = oracle::uniform<double>({1, 3, 12, 9}, 0, 1, rng);
  const auto y = oracle::uniform<double>({1, 3, 12, 9}, 0, 1, rng);
  EXPECT_EQ(psnr(x, y), psnr(y, x));
  EXPECT_THROW(psnr(x, Tensor<double>({1, 3, 9, 12})), ShapeError);
}

TEST(Ssim, SelfSimilarityIsOne) {
  std::mt19937_64 rng(3);
  const auto x = oracle::uniform<double>({1, 3, 24, 31}, 0, 1, rng);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
}

TEST(Ssim, EqualConstantsAreOne) {
  const Tensor<double> x({1, 3, 11, 11}, 0.4);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-15);
}

TEST(Ssim, ConstantPairClosedForm) {
  // no variance: SSIM = (2ab + C1) / (a^2 + b^2 + C1)
  const double a = 0.2, b = 0.6, c1 = 1e-4;
  const double expected = (2 * a * b + c1) / (a * a + b * b + c1);
  EXPECT_NEAR(ssim(Tensor<double>({1, 3, 13, 12}, a), Tensor<double>({1, 3, 13, 12}, b)), expected, 1e-12);
}

TEST(Ssim, MatchesDirectReferenceOnRandomPairs) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> side(11, 24);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const Shape4 s{1, 3, side(rng), side(rng)};
    const auto x = oracle::uniform<double>(s, 0, 1, rng);
    auto y = x;
    const double noise = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    std::uniform_real_distribution<double> n(-noise, noise);
    for (auto& v : y.data()) v = std::clamp(v + n(rng), 0.0, 1.0);
    worst = std::max(worst, std::abs(ssim(x, y) - oracle::ssim_direct(x, y)));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Ssim, FloatInputsMatchReference) {
  std::mt19937_64 rng(5);
  const auto x = oracle::uniform<float>({1, 3, 20, 20}, 0, 1, rng);
  const auto y = oracle::uniform<float>({1, 3, 20, 20}, 0, 1, rng);
  EXPECT_NEAR(ssim(x, y), oracle::ssim_direct(x, y), 1e-6);
}

TEST(Ssim, SymmetricAndBounded) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 20; ++i) {
    const auto x = oracle::uniform<double>({1, 3, 16, 16}, 0, 1, rng);
    const auto y = oracle::uniform<double>({1, 3, 16, 16}, 0, 1, rng);
    const double s = ssim(x, y);
    EXPECT_NEAR(s, ssim(y, x), 1e-15);
    EXPECT_LE(s, 1.0);
    EXPECT_GE(s, -1.0);
  }
}

TEST(Ssim, NoiseLowersScore) {
  std::mt19937_64 rng(7);
  const auto x = oracle::uniform<double>({1, 3, 32, 32}, 0.2, 0.8, rng);
  auto light = x, heavy = x;
  std::uniform_real_distribution<double> n(-1, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double e = n(rng);
    light[i] += 0.02 * e;
    heavy[i] += 0.2 * e;
  }
  EXPECT_GT(ssim(x, light), ssim(x, heavy));
}

TEST(Ssim, RejectsImagesSmallerThanWindow) {
  const Tensor<double> x({1, 3, 10, 32});
  EXPECT_THROW(ssim(x, x), ShapeError);
  EXPECT_THROW(ssim(Tensor<double>({1, 3, 16, 16}), Tensor<double>({1, 3, 16, 17})), ShapeError);
}

TEST(Ssim, GaussianWindowIsNormalised) {
  const auto w = gaussian_window(11, 1.5);
  double total = 0;
  for (double v : w) total += v;
  EXPECT_NEAR(total, 1.0, 1e-15);
  EXPECT_NEAR(w[0], w[10], 1e-18);
  EXPECT_GT(w[5], w[4]);
}

TEST(MetricReport, MeansAndKeyValues) {
  MetricReport r;
  r.add("a", 20.0, 0.5);
  r.add("b", 30.0, 0.7);
  EXPECT_DOUBLE_EQ(r.mean_psnr(), 25.0);
  EXPECT_DOUBLE_EQ(r.mean_ssim(), 0.6);
  std::ostringstream os;
  r.write_key_values(os, "output.");
  EXPECT_NE(os.str().find("output.count=2\n"), std::string::npos);
  EXPECT_NE(os.str().find("output.mean_psnr=25.000000\n"), std::string::npos);
}
