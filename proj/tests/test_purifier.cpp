#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dehazeflow/purifier.hpp"
#include "oracles.hpp"

using namespace dehazeflow;

namespace {

template <class T>
void randomize(PurifierNet<T>& net, std::uint64_t seed, double amp = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amp, amp);
  for (auto& p : net.params())
    for (auto& v : p.value.data()) v = static_cast<T>(u(rng));
}

// Scalar count of every layer, written out from the layer list.
std::size_t expected_parameter_count(std::size_t w) {
  auto conv = [](std::size_t cin, std::size_t cout, std::size_t k) { return cin * cout * k * k + cout; };
  auto norm = [](std::size_t c) { return 2 * c; };
  std::size_t n = 0;
  n += conv(3, w, 3) + norm(w);
  n += conv(w, 2 * w, 3) + norm(2 * w);
  n += conv(2 * w, 4 * w, 3) + norm(4 * w);
  n += conv(4 * w, 1, 3);
  n += conv(4 * w + 2 * w, 2 * w, 3) + norm(2 * w);
  n += conv(2 * w + w, w, 3) + norm(w);
  n += conv(w + 3, w, 3) + norm(w);
  n += conv(w, 3, 1);
  return n + 1;  // b
}

}  // namespace

TEST(Purify, UnitCoefficientAndUnitBiasIsIdentity) {
  Graph<float> g(false);
  std::mt19937_64 rng(1);
  const auto x = oracle::uniform<float>({1, 3, 9, 7}, 0, 1, rng);
  const auto out = purify_with(g.constant(Tensor<float>(x.shape(), 1.0f)), g.constant(x),
                               g.constant(Tensor<float>::scalar(1.0f)));
  EXPECT_EQ(out.value(), x);
}

TEST(Purify, ZeroNetworkGivesQuadratic) {
  const auto net = PurifierNet<float>::zeros({4});
  Graph<float> g(false);
  const auto b = bind_purifier(g, net, false);
  std::mt19937_64 rng(2);
  const auto x = oracle::uniform<float>({1, 3, 16, 16}, -1, 2, rng);
  const auto out = purify(g.constant(x), b).value();
  double worst = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double xi = x[i];
    worst = std::max(worst, std::abs(out[i] - (xi * xi - xi + 1.0)));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Purify, HalfCoefficientWorkedExample) {
  Graph<double> g(false);
  const auto out = purify_with(g.constant(Tensor<double>({1, 3, 1, 1}, 0.5)),
                               g.constant(Tensor<double>({1, 3, 1, 1}, 0.8)), g.constant(Tensor<double>::scalar(1.0)));
  for (double v : out.value().data()) EXPECT_NEAR(v, 0.9, 1e-15);
}

TEST(Purifier, InitialisedHeadGivesResidualOnly) {
  const auto net = PurifierNet<float>::init({8}, 3);
  Graph<float> g(false);
  std::mt19937_64 rng(3);
  const auto x = oracle::uniform<float>({1, 3, 20, 12}, 0, 1, rng);
  EXPECT_EQ(cnn_forward(g.constant(x), bind_purifier(g, net, false)).value(), x);
}

TEST(Purifier, OutputShapeFollowsInput) {
  auto net = PurifierNet<float>::init({4}, 4);
  randomize(net, 5);
  std::mt19937_64 rng(4);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{32, 32}, {33, 47}, {64, 64}, {1, 1}, {5, 3}}) {
    Graph<float> g(false);
    const auto x = oracle::uniform<float>({1, 3, h, w}, 0, 1, rng);
    const auto out = purify(g.constant(x), bind_purifier(g, net, false));
    EXPECT_EQ(out.shape(), x.shape()) << h << "x" << w;
    EXPECT_TRUE(out.value().all_finite());
  }
}

TEST(Purifier, RejectsNonRgbInput) {
  const auto net = PurifierNet<float>::init({4}, 4);
  Graph<float> g(false);
  EXPECT_THROW(cnn_forward(g.constant(Tensor<float>({1, 4, 8, 8})), bind_purifier(g, net, false)), ShapeError);
}

TEST(Purifier, ParameterCountMatchesLayerList) {
  for (std::size_t w : {1u, 4u, 8u, 16u}) {
    EXPECT_EQ(PurifierNet<float>::init({w}, 1).parameter_count(), expected_parameter_count(w)) << w;
  }
  EXPECT_EQ(PurifierNet<float>::init({16}, 1).parameter_count(), PurifierNet<float>::init({16}, 99).parameter_count());
  EXPECT_EQ(PurifierNet<float>::init({16}, 1).parameter_count(), 61925u);
}

TEST(Purifier, InitIsSeedDeterministic) {
  EXPECT_EQ(PurifierNet<float>::init({8}, 11), PurifierNet<float>::init({8}, 11));
  EXPECT_FALSE(PurifierNet<float>::init({8}, 11) == PurifierNet<float>::init({8}, 12));
}

TEST(Purifier, UnknownParameterNameThrows) {
  auto net = PurifierNet<float>::zeros({2});
  EXPECT_THROW(net.param("enc9.conv.weight"), Error);
}

TEST(Purifier, MacCountSmallCase) {
  // width 1 on 8x8: enc 432+72+72, attention 36, dec 432+432+2304, head 192
  EXPECT_EQ(purifier_macs({1}, 8, 8), 3972u);
}

TEST(Purifier, InputGradientMatchesFiniteDifferences) {
  auto net_d = PurifierNet<double>::init({3}, 8);
  randomize(net_d, 9);
  std::mt19937_64 rng(10);
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = oracle::uniform<double>({1, 3, 8, 6}, 0, 1, rng);
    const auto r = oracle::check_gradients<double>(
        {x},
        [&](auto& g, const auto& v) { return purify(v[0], bind_purifier(g, net_d, false)); },
        1e-5, rng);
    worst = std::max(worst, r.rel_error);
  }
  EXPECT_LT(worst, 1e-6);
}
