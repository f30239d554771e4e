#include <gtest/gtest.h>

#include <random>

#include "latentedit/adapter.hpp"
#include "latentedit/errors.hpp"
#include "test_util.hpp"

using namespace latentedit;
using latentedit::testing::central_difference;
using latentedit::testing::random_latent;
using latentedit::testing::relative_error;

namespace {

AdapterWeights randomized(int channels, std::uint64_t seed, double scale = 0.3) {
  AdapterWeights w = AdapterWeights::create(channels, seed);
  std::mt19937_64 rng(seed + 77);
  std::normal_distribution<double> n(0.0, scale);
  for (Eigen::Index i = 0; i < w.params.size(); ++i) w.params(i) = n(rng);
  return w;
}

}  // namespace

TEST(Adapter, FreshAdapterIsIdentity) {
  for (int c : {1, 4, 16}) {
    const AdapterWeights w = AdapterWeights::create(c, 3);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const LatentImage z = random_latent(6, 8, seed, 5.0);
      EXPECT_EQ(adapter_forward(w, z), z);
    }
  }
}

TEST(Adapter, ConstantShiftKeepsShapeAndFiniteness) {
  const AdapterWeights w = randomized(8, 1);
  LatentImage z = random_latent(8, 6, 2);
  for (double& v : z.values()) v += 3.0;
  const LatentImage out = adapter_forward(w, z);
  EXPECT_TRUE(out.same_shape(z));
  EXPECT_TRUE(out.all_finite());
}

TEST(Adapter, AttentionRowsSumToOne) {
  const AdapterWeights w = randomized(8, 2, 1.0);
  const Eigen::MatrixXd a = adapter_attention_weights(w, random_latent(8, 8, 3, 2.0));
  EXPECT_EQ(a.rows(), 16);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-6);
    EXPECT_GE(a.row(r).minCoeff(), 0.0);
  }
}

TEST(Adapter, OddDimensionsAreValidationError) {
  const AdapterWeights w = AdapterWeights::create(4, 0);
  EXPECT_THROW(adapter_forward(w, LatentImage(5, 4)), ValidationError);
  EXPECT_THROW(adapter_forward(w, LatentImage(4, 3)), ValidationError);
}

TEST(Adapter, ShapePreservedForEvenSizes) {
  const AdapterWeights w = randomized(4, 5);
  for (int r : {2, 4, 10})
    for (int c : {2, 6, 8}) EXPECT_TRUE(adapter_forward(w, LatentImage(r, c)).same_shape(LatentImage(r, c)));
}

TEST(Adapter, TiledEqualsIndependentTiles) {
  const AdapterWeights w = randomized(6, 6);
  const LatentImage z = random_latent(8, 12, 7);
  const LatentImage tiled = adapter_forward_tiled(w, z, 4);
  for (int r0 = 0; r0 < 8; r0 += 4) {
    for (int c0 = 0; c0 < 12; c0 += 4) {
      LatentImage tile(4, 4);
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
          for (int ch = 0; ch < 4; ++ch) tile.at(r, c, ch) = z.at(r0 + r, c0 + c, ch);
      const LatentImage out = adapter_forward(w, tile);
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
          for (int ch = 0; ch < 4; ++ch) EXPECT_EQ(tiled.at(r0 + r, c0 + c, ch), out.at(r, c, ch));
    }
  }
  EXPECT_EQ(adapter_forward_tiled(w, z, 0), adapter_forward(w, z));
}

TEST(AdapterParamCount, SingleChannelHandCount) {
  // down 9*4*1 + 1, attention 4 * (1 + 1), up 9*1*4 + 4
  EXPECT_EQ(adapter_param_count(1), 37u + 8u + 40u);
  EXPECT_EQ(AdapterWeights::create(1, 0).param_count(), 85u);
}

TEST(AdapterParamCount, StrictlyIncreasingAndMatchesWeights) {
  for (int c = 1; c < 300; ++c) EXPECT_LT(adapter_param_count(c), adapter_param_count(c + 1));
  for (int c : {3, 17, 64}) EXPECT_EQ(AdapterWeights::create(c, 0).param_count(), adapter_param_count(c));
}

TEST(AdapterParamCount, DefaultChannelsNearTwentyEightHundredThousand) {
  const int c = default_adapter_channels();
  const std::size_t n = adapter_param_count(c);
  EXPECT_GE(n, 260000u);
  EXPECT_LE(n, 300000u);
  // No other channel count lands closer to the budget.
  const auto gap = [](std::size_t v) { return v > kAdapterParamBudget ? v - kAdapterParamBudget : kAdapterParamBudget - v; };
  EXPECT_LE(gap(n), gap(adapter_param_count(c - 1)));
  EXPECT_LE(gap(n), gap(adapter_param_count(c + 1)));
}

TEST(LossRefinement, Examples) {
  const LatentImage a = random_latent(4, 4, 1);
  EXPECT_EQ(loss_refinement(a, a), 0.0);
  LatentImage b = a;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) b.at(r, c, 2) += 1.0;
  EXPECT_NEAR(loss_refinement(a, b), 1.0, 1e-12);
  const LatentImage d = random_latent(4, 4, 2);
  double ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ref += (a.values()[i] - d.values()[i]) * (a.values()[i] - d.values()[i]);
  EXPECT_NEAR(loss_refinement(a, d), ref / 16.0, 1e-12);
  EXPECT_THROW(loss_refinement(a, LatentImage(2, 2)), ValidationError);
}

TEST(AdapterGradient, ParametersMatchFiniteDifferences) {
  const std::vector<std::pair<int, std::pair<int, int>>> configs{{3, {4, 4}}, {5, {6, 4}}, {8, {4, 8}}};
  for (std::size_t k = 0; k < configs.size(); ++k) {
    const auto& [channels, shape] = configs[k];
    const AdapterWeights w = randomized(channels, 10 + k);
    const LatentImage z = random_latent(shape.first, shape.second, 20 + k);
    const LatentImage target = random_latent(shape.first, shape.second, 30 + k);
    const AdapterPass pass(w, z);
    LatentImage d_out(z.rows(), z.cols());
    const double n = static_cast<double>(z.pixel_count());
    for (std::size_t i = 0; i < z.size(); ++i) {
      d_out.values()[i] = 2.0 * (pass.output().values()[i] - target.values()[i]) / n;
    }
    Eigen::VectorXd g = Eigen::VectorXd::Zero(w.params.size());
    pass.backward(d_out, g);
    auto f = [&](const Eigen::VectorXd& p) {
      AdapterWeights x = w;
      x.params = p;
      return loss_refinement(adapter_forward(x, z), target);
    };
    EXPECT_LT(relative_error(g, central_difference(f, w.params, 1e-4)), 1e-4) << "configuration " << k;
  }
}

TEST(AdapterGradient, InputMatchesFiniteDifferences) {
  const AdapterWeights w = randomized(5, 3);
  const LatentImage z = random_latent(4, 6, 4);
  const LatentImage target = random_latent(4, 6, 5);
  const AdapterPass pass(w, z);
  LatentImage d_out(4, 6);
  for (std::size_t i = 0; i < z.size(); ++i) {
    d_out.values()[i] = 2.0 * (pass.output().values()[i] - target.values()[i]) / 24.0;
  }
  Eigen::VectorXd g = Eigen::VectorXd::Zero(w.params.size());
  const LatentImage dz = pass.backward(d_out, g);
  const Eigen::VectorXd x0 = Eigen::Map<const Eigen::VectorXd>(z.values().data(), static_cast<Eigen::Index>(z.size()));
  auto f = [&](const Eigen::VectorXd& x) {
    LatentImage zz(4, 6);
    for (std::size_t i = 0; i < zz.size(); ++i) zz.values()[i] = x(static_cast<Eigen::Index>(i));
    return loss_refinement(adapter_forward(w, zz), target);
  };
  const Eigen::VectorXd analytic =
      Eigen::Map<const Eigen::VectorXd>(dz.values().data(), static_cast<Eigen::Index>(dz.size()));
  EXPECT_LT(relative_error(analytic, central_difference(f, x0, 1e-5)), 1e-4);
}
