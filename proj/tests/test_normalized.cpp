#include <gtest/gtest.h>

#include "minsharp/checks.hpp"
#include "minsharp/normalized.hpp"
#include "test_util.hpp"

using namespace minsharp;
using minsharp::testing::gaussian_dataset;
using minsharp::testing::min_kink_distance;
using minsharp::testing::rel_err;

TEST(NsLayer, UniformEntriesGiveUniformMinimizer) {
  for (auto [m, k, c, w] : {std::tuple{3u, 4u, 0.5, 2.0}, std::tuple{2u, 2u, 1.0, 1.0}, std::tuple{5u, 1u, 3.0, 0.1}}) {
    const Matrix dg(m, k, c), wsq(m, k, w);
    const auto r = normalized_sharpness_layer(dg, wsq);
    EXPECT_LE(rel_err(r.value, m * k * (c + w)), 1e-12);
    for (double s : r.sigma1) EXPECT_NEAR(s, 1.0, 1e-12);
    for (double s : r.sigma2) EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(NsLayer, MatchesGridOracleOnTwoByTwo) {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix dg(2, 2), wsq(2, 2);
    for (double& v : dg.data()) v = std::exp(rng.uniform(-2.0, 2.0));
    for (double& v : wsq.data()) v = std::exp(rng.uniform(-2.0, 2.0));
    EXPECT_LE(rel_err(normalized_sharpness_layer(dg, wsq).value, checks::ns_grid_oracle_2x2(dg, wsq)), 1e-4);
  }
}

TEST(NsLayer, NeverAboveUniformPoint) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6);
    Matrix dg(m, k), wsq(m, k);
    for (double& v : dg.data()) v = rng.uniform();
    for (double& v : wsq.data()) v = rng.uniform();
    double uniform = 0.0;
    for (std::size_t i = 0; i < dg.size(); ++i) uniform += dg.data()[i] + wsq.data()[i];
    const auto r = normalized_sharpness_layer(dg, wsq);
    EXPECT_LE(r.value, uniform);
    EXPECT_GE(r.value, 0.0);
    double lp1 = 0.0, lp2 = 0.0;
    for (double s : r.sigma1) lp1 += std::log(s);
    for (double s : r.sigma2) lp2 += std::log(s);
    EXPECT_NEAR(lp1, 0.0, 1e-10);
    EXPECT_NEAR(lp2, 0.0, 1e-10);
  }
}

TEST(NsLayer, ObjectiveAtReturnedSigmas) {
  Rng rng(3);
  Matrix dg(3, 4), wsq(3, 4);
  for (double& v : dg.data()) v = std::exp(rng.uniform(-1.0, 1.0));
  for (double& v : wsq.data()) v = std::exp(rng.uniform(-1.0, 1.0));
  const auto r = normalized_sharpness_layer(dg, wsq);
  Vector u, v;
  for (double s : r.sigma1) u.push_back(std::log(s));
  for (double s : r.sigma2) v.push_back(std::log(s));
  EXPECT_LE(rel_err(ns_objective(dg, wsq, u, v), r.value), 1e-12);
  EXPECT_TRUE(r.converged);
}

TEST(NsLayer, Errors) {
  EXPECT_THROW((void)normalized_sharpness_layer(Matrix(2, 2, 1.0), Matrix(2, 3, 1.0)), std::invalid_argument);
  NsConfig bad;
  bad.max_iters = 0;
  EXPECT_THROW((void)normalized_sharpness_layer(Matrix(2, 2, 1.0), Matrix(2, 2, 1.0), bad), std::invalid_argument);
  bad = {};
  bad.step_size = -1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = {};
  bad.tol = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW((void)normalized_sharpness_layer(Matrix(1, 1, INFINITY), Matrix(1, 1, 1.0)), NumericError);
}

TEST(NormalizedSharpness, SumsLayersAndNamesFailingLayer) {
  Rng rng(4);
  const Mlp net = Mlp::random({4, 5, 3}, rng);
  const Dataset d = gaussian_dataset(10, 4, 3, rng);
  const auto dg = diag_exact(net, d);
  const auto r = normalized_sharpness(net, dg);
  ASSERT_EQ(r.per_layer.size(), 2u);
  EXPECT_LE(rel_err(r.total, r.per_layer[0] + r.per_layer[1]), 1e-15);
  for (std::size_t l = 0; l < 2; ++l)
    EXPECT_EQ(r.per_layer[l], normalized_sharpness_layer(dg.per_layer[l], square(net.weight(l))).value);

  LayerDiagonals broken = dg;
  broken.per_layer[1](0, 0) = INFINITY;
  try {
    (void)normalized_sharpness(net, broken);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
  }
  LayerDiagonals short_diag = dg;
  short_diag.per_layer.pop_back();
  EXPECT_THROW((void)normalized_sharpness(net, short_diag), std::invalid_argument);
}

TEST(StochasticDiag, BasisDirectionIsCentralDifference) {
  Rng rng(5);
  Mlp net;
  Dataset d;
  do {
    net = Mlp::random({4, 6, 3}, rng);
    d = gaussian_dataset(5, 4, 3, rng);
  } while (min_kink_distance(net, d) < 1e-2);
  const auto fd = oracle_fd_diag(net, d, 1e-4);
  for (std::size_t layer = 0; layer < 2; ++layer)
    for (std::size_t k = 0; k < net.weight(layer).size(); k += 5) {
      const auto est = stochastic_diag_along(net, d, 1e-4, 1, [&](std::size_t) {
        std::vector<Matrix> e;
        for (const auto& w : net.weights()) e.emplace_back(w.rows(), w.cols());
        e[layer].data()[k] = 1.0;
        return e;
      });
      EXPECT_NEAR(est.per_layer[layer].data()[k], fd.diag.per_layer[layer].data()[k], 1e-12);
    }
}

TEST(StochasticDiag, ErrorShrinksWithDrawsButStaysLargeAtTen) {
  Rng rng(6);
  const Mlp net = Mlp::random({20, 20, 10}, rng);
  const Dataset d = gaussian_dataset(20, 20, 10, rng);
  auto median = [&](std::size_t draws) {
    std::vector<double> e;
    for (std::uint64_t s = 0; s < 10; ++s) {
      Rng r(100 + s);
      e.push_back(stochastic_diag(net, d, 1e-5, draws, r).relative_error);
    }
    std::sort(e.begin(), e.end());
    return 0.5 * (e[4] + e[5]);
  };
  const double e10 = median(10), e1000 = median(1000);
  EXPECT_GT(e10, 0.1);
  EXPECT_LT(e1000, e10);
}

TEST(StochasticDiag, Preconditions) {
  Rng rng(7);
  const Mlp net = Mlp::random({3, 2}, rng);
  const Dataset d = gaussian_dataset(2, 3, 2, rng);
  EXPECT_THROW((void)stochastic_diag(net, d, 0.0, 10, rng), std::invalid_argument);
  EXPECT_THROW((void)stochastic_diag(net, d, 1e-3, 0, rng), std::invalid_argument);
}
