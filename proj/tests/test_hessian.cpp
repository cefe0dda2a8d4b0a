#include <gtest/gtest.h>

#include "minsharp/hessian.hpp"
#include "minsharp/sharpness.hpp"
#include "test_util.hpp"

using namespace minsharp;
using minsharp::testing::gaussian_dataset;
using minsharp::testing::max_rel_err;
using minsharp::testing::min_kink_distance;
using minsharp::testing::rel_err;

namespace {

Dataset single(std::vector<double> x, std::size_t classes, Label y = 0) {
  Dataset d;
  d.num_classes = classes;
  const std::size_t dim = x.size();
  d.features = Matrix(1, dim, std::move(x));
  d.labels = {y};
  return d;
}

std::vector<std::size_t> random_dims(Rng& rng) {
  const std::size_t depth = 2 + rng.below(3);
  std::vector<std::size_t> dims;
  for (std::size_t i = 0; i <= depth; ++i) dims.push_back(2 + rng.below(7));
  return dims;
}

}  // namespace

TEST(Score, SingleLayerTwoClasses) {
  const Mlp net({2, 2});
  const auto s = score(net, std::vector<double>{1.0, 0.0}, 0);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s[0], 0.5, 1e-15);
}

TEST(Score, SingleLayerThreeClasses) {
  const Mlp net({2, 3});
  EXPECT_NEAR(score(net, std::vector<double>{1.0, 1.0}, 2)[0], 4.0 / 3.0, 1e-15);
}

TEST(Score, LabelIndependent) {
  Rng rng(1);
  const Mlp net = Mlp::random({4, 6, 5}, rng);
  const Matrix x = gaussian_fill(rng, 4, 1, 1.0);
  const auto s0 = score(net, x.data(), 0);
  for (Label y = 1; y < 5; ++y) EXPECT_EQ(score(net, x.data(), y), s0);
  EXPECT_THROW((void)score(net, x.data(), 5), std::invalid_argument);
}

TEST(Score, SingleLayerClosedFormRandomInputs) {
  Rng rng(2);
  for (std::size_t k : {2u, 3u, 10u}) {
    const Mlp net({6, k});
    const Matrix x = gaussian_fill(rng, 6, 1, 1.0);
    const double expected = (1.0 - 1.0 / static_cast<double>(k)) * frobenius_sq(x);
    EXPECT_LE(rel_err(score(net, x.data(), 0)[0], expected), 1e-12);
  }
}

TEST(TraceExact, OneSampleEqualsScore) {
  Rng rng(3);
  const Mlp net = Mlp::random({3, 4, 2}, rng);
  const Dataset d = gaussian_dataset(1, 3, 2, rng);
  EXPECT_EQ(trace_exact(net, d).per_layer, score(net, d.sample(0), d.labels[0]));
}

TEST(TraceExact, DuplicatedDatasetGivesSameTraces) {
  Rng rng(4);
  const Mlp net = Mlp::random({5, 6, 3}, rng);
  const Dataset d = gaussian_dataset(7, 5, 3, rng);
  const auto a = trace_exact(net, d);
  const auto b = trace_exact(net, concat(d, d));
  for (std::size_t l = 0; l < 2; ++l) EXPECT_LE(rel_err(a.per_layer[l], b.per_layer[l]), 1e-14);
}

TEST(TraceExact, LinearInData) {
  Rng rng(5);
  const Mlp net = Mlp::random({4, 5, 4, 3}, rng);
  const Dataset a = gaussian_dataset(3, 4, 3, rng);
  const Dataset b = gaussian_dataset(8, 4, 3, rng);
  const auto ta = trace_exact(net, a), tb = trace_exact(net, b), tab = trace_exact(net, concat(a, b));
  for (std::size_t l = 0; l < 3; ++l)
    EXPECT_LE(rel_err(tab.per_layer[l], (3.0 * ta.per_layer[l] + 8.0 * tb.per_layer[l]) / 11.0), 1e-12);
}

TEST(TraceExact, ThreadCountDoesNotChangeBits) {
  Rng rng(6);
  const Mlp net = Mlp::random({6, 8, 4}, rng);
  const Dataset d = gaussian_dataset(50, 6, 4, rng);
  ExactOptions one{1, 7};
  ExactOptions four{4, 7};
  EXPECT_EQ(trace_exact(net, d, one).per_layer, trace_exact(net, d, four).per_layer);
  const auto d1 = diag_exact(net, d, one), d4 = diag_exact(net, d, four);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(d1.per_layer[l], d4.per_layer[l]);
}

TEST(TraceExact, DeadNetworkHasZeroTraces) {
  const Mlp net({3, 4, 2});  // all-zero weights
  Rng rng(7);
  const auto t = trace_exact(net, gaussian_dataset(5, 3, 2, rng));
  for (double v : t.per_layer) EXPECT_EQ(v, 0.0);
}

TEST(TraceExact, RejectsMismatchedData) {
  Rng rng(8);
  const Mlp net = Mlp::random({3, 4, 2}, rng);
  EXPECT_THROW((void)trace_exact(net, gaussian_dataset(3, 4, 2, rng)), std::invalid_argument);
  EXPECT_THROW((void)trace_exact(net, gaussian_dataset(3, 3, 3, rng)), std::invalid_argument);
}

TEST(DiagExact, SingleLayerHandExample) {
  const auto dg = diag_exact(Mlp({2, 2}), single({1.0, 0.0}, 2));
  EXPECT_EQ(dg.per_layer[0], (Matrix{{0.25, 0.0}, {0.25, 0.0}}));
  EXPECT_DOUBLE_EQ(dg.total(), 0.5);
}

TEST(DiagExact, SumsToTrace) {
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Mlp net = Mlp::random(random_dims(rng), rng);
    const Dataset d = gaussian_dataset(6, net.input_dim(), net.num_classes(), rng);
    const auto t = trace_exact(net, d);
    const auto dg = diag_exact(net, d);
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      double s = 0.0;
      for (double v : dg.per_layer[l].data()) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_LE(rel_err(s, t.per_layer[l]), 1e-10);
    }
  }
}

TEST(KroneckerBlock, FactorsSymmetricAndTraceFactorizes) {
  Rng rng(10);
  const Mlp net = Mlp::random({3, 5, 4, 3}, rng);
  const Matrix x = gaussian_fill(rng, 3, 1, 1.0);
  const auto t = forward(net, x.data());
  for (std::size_t l = 0; l < 3; ++l) {
    const auto b = kronecker_block(net, t, l);
    EXPECT_LE(max_rel_err(b.left, transpose(b.left)), 1e-12);
    EXPECT_LE(max_rel_err(b.right, transpose(b.right)), 1e-12);
    EXPECT_GE(trace(b.left), 0.0);
    EXPECT_LE(rel_err(trace(kron(b.left, b.right)), trace(b.left) * trace(b.right)), 1e-12);
  }
}

TEST(KroneckerBlock, JacobiansMatchBackprop) {
  Rng rng(11);
  const Mlp net = Mlp::random({4, 6, 5, 3}, rng);
  const Matrix x = gaussian_fill(rng, 4, 1, 1.0);
  const auto t = forward(net, x.data());
  const auto jac = logit_jacobians(net, t);
  for (std::size_t l = 0; l < 3; ++l) {
    Vector seed(3, 0.0);
    seed[l] = 1.0;
    const auto deltas = backprop_deltas(net, t, seed);
    for (std::size_t d = 0; d < 3; ++d)
      for (std::size_t r = 0; r < deltas[d].size(); ++r) EXPECT_NEAR(jac[d](l, r), deltas[d][r], 1e-14);
  }
}

TEST(OracleKron, AgreesWithExactOnTinyNet) {
  Rng rng(12);
  const Mlp net = Mlp::random({3, 4, 2}, rng);
  const Dataset d = gaussian_dataset(10, 3, 2, rng);
  const auto exact = trace_exact(net, d);
  const auto oracle = oracle_kron_trace(net, d, {true});
  const auto dg = diag_exact(net, d);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_LE(rel_err(exact.per_layer[l], oracle.traces.per_layer[l]), 1e-10);
    EXPECT_LE(max_rel_err(dg.per_layer[l], oracle.diagonals->per_layer[l]), 1e-10);
  }
}

TEST(OracleKron, AgreesWithExactOnRandomArchitectures) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Mlp net = Mlp::random(random_dims(rng), rng);
    const Dataset d = gaussian_dataset(10, net.input_dim(), net.num_classes(), rng);
    const auto exact = trace_exact(net, d);
    const auto oracle = oracle_kron_trace(net, d);
    EXPECT_LE(rel_err(exact.total(), oracle.traces.total()), 1e-10);
  }
}

TEST(OracleKron, StreamedRowsMatchFullKron) {
  Rng rng(14);
  const Mlp net = Mlp::random({6, 7, 3}, rng);
  const Dataset d = gaussian_dataset(4, 6, 3, rng);
  OracleOptions full{true, 1u << 20};
  OracleOptions streamed{true, 0};
  const auto a = oracle_kron_trace(net, d, full);
  const auto b = oracle_kron_trace(net, d, streamed);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(a.diagonals->per_layer[l], b.diagonals->per_layer[l]);
}

TEST(OracleKron, RefusesHugeLayers) {
  const Mlp net({1001, 1000, 2});
  Rng rng(15);
  EXPECT_THROW((void)oracle_kron_trace(net, gaussian_dataset(1, 1001, 2, rng)), std::invalid_argument);
}

TEST(OracleKron, UnsquaredNormsDisagree) {
  Rng rng(16);
  const Mlp net = Mlp::random({4, 5, 3}, rng);
  const Dataset d = gaussian_dataset(10, 4, 3, rng);
  ExactOptions bug;
  bug.norm = NormConvention::Unsquared;
  EXPECT_GT(rel_err(trace_exact(net, d, bug).total(), oracle_kron_trace(net, d).traces.total()), 1e-3);
}

TEST(OracleFd, ScalarLogisticCurvature) {
  // One weight w on the logit difference: o = (w x, 0); H = p(1-p) x^2.
  Dataset d = single({1.5}, 2);
  const Mlp net({1, 2}, {Matrix{{0.4}, {0.0}}});
  const auto fd = oracle_fd_diag(net, d);
  const double p = 1.0 / (1.0 + std::exp(-0.6));
  EXPECT_LE(rel_err(fd.diag.per_layer[0](0, 0), p * (1 - p) * 2.25), 1e-6);
}

TEST(OracleFd, LinearModelMatchesExact) {
  Rng rng(17);
  const Mlp net = Mlp::random({5, 4}, rng);
  const Dataset d = gaussian_dataset(6, 5, 4, rng);
  const auto fd = oracle_fd_diag(net, d);
  EXPECT_EQ(fd.flagged(), 0u);
  EXPECT_LE(max_rel_err(fd.diag.per_layer[0], diag_exact(net, d).per_layer[0]), 1e-6);
}

TEST(OracleFd, UnflaggedCoordinatesMatchExactOnReluNet) {
  Rng rng(18);
  const Mlp net = Mlp::random({5, 7, 4, 3}, rng);
  const Dataset d = gaussian_dataset(5, 5, 3, rng);
  const auto fd = oracle_fd_diag(net, d, 1e-4);
  const auto ex = diag_exact(net, d);
  std::size_t checked = 0;
  for (std::size_t l = 0; l < 3; ++l) {
    const double ref = max_abs(ex.per_layer[l].data());
    for (std::size_t k = 0; k < ex.per_layer[l].size(); ++k) {
      if (fd.kink[l].data()[k] != 0.0) continue;
      EXPECT_LE(std::abs(fd.diag.per_layer[l].data()[k] - ex.per_layer[l].data()[k]), 1e-4 * ref);
      ++checked;
    }
  }
  EXPECT_GT(checked, 50u);
}

TEST(OracleFd, FlagsKinks) {
  // Hidden pre-activation exactly zero for the only sample.
  const Mlp net({2, 1, 2}, {Matrix{{1.0, -1.0}}, Matrix{{1.0}, {-1.0}}});
  const auto fd = oracle_fd_diag(net, single({1.0, 1.0}, 2));
  EXPECT_GT(fd.flagged(), 0u);
  EXPECT_THROW((void)oracle_fd_diag(net, single({1.0, 1.0}, 2), 0.0), std::invalid_argument);
}

TEST(ScalingLaw, TracesScaleByInverseSquare) {
  Rng rng(19);
  const Mlp net = Mlp::random({4, 6, 5, 3}, rng);
  const Dataset d = gaussian_dataset(8, 4, 3, rng);
  const auto t0 = trace_exact(net, d);
  for (int trial = 0; trial < 10; ++trial) {
    const Alpha a = Alpha::random_log_uniform(3, 2.0, rng);
    const auto t1 = trace_exact(alpha_transform(net, a), d);
    for (std::size_t l = 0; l < 3; ++l) EXPECT_LE(rel_err(t1.per_layer[l], t0.per_layer[l] / (a[l] * a[l])), 1e-10);
  }
}

TEST(ClampNonnegative, Behaviour) {
  EXPECT_EQ(clamp_nonnegative(0.3, 1.0, "x"), 0.3);
  EXPECT_EQ(clamp_nonnegative(-1e-12, 1.0, "x"), 0.0);
  EXPECT_THROW((void)clamp_nonnegative(-1e-6, 1.0, "x"), NumericError);
}
