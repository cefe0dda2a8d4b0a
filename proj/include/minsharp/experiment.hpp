// Timing benchmark (K+1 backprop traces vs the Kronecker oracle) and the
// randomized-label experiment.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "minsharp/dataset.hpp"
#include "minsharp/hessian.hpp"
#include "minsharp/normalized.hpp"
#include "minsharp/sharpness.hpp"
#include "minsharp/stats.hpp"

namespace minsharp {

inline constexpr double kBenchAgreementTolerance = 1e-10;

struct BenchRow {
  std::string method;  // "oracle" or "exact"
  std::size_t n = 0;
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  double trace_value = 0.0;
};

struct BenchConfig {
  std::vector<std::size_t> dims{784, 20, 20, 10};
  std::vector<std::size_t> n_list{10, 100};
  std::size_t trials = 3;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  std::map<std::size_t, double> speedup;        // oracle / exact mean time, per n
  std::map<std::size_t, double> trace_rel_diff;  // per n
  bool agree = true;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

template <class F>
double seconds_of(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// Times both trace computations on the first n samples of `data` for a
// He-initialized network of the configured architecture.
inline BenchResult run_bench(const BenchConfig& cfg, const Dataset& data) {
  if (cfg.trials == 0) throw std::invalid_argument("bench: trials must be >= 1");
  if (cfg.n_list.empty()) throw std::invalid_argument("bench: empty n list");
  Rng rng(cfg.seed);
  const Mlp net = Mlp::random(cfg.dims, rng);
  BenchResult out;
  ExactOptions eo;
  eo.threads = cfg.threads;
  for (std::size_t n : cfg.n_list) {
    if (n == 0 || n > data.size())
      throw std::invalid_argument("bench: n=" + std::to_string(n) + " outside [1, " +
                                  std::to_string(data.size()) + "]");
    const auto idx = detail::all_rows(n);
    const Dataset sub = take(data, idx);
    std::vector<double> t_oracle, t_exact;
    double tr_oracle = 0.0, tr_exact = 0.0;
    for (std::size_t k = 0; k < cfg.trials; ++k) {
      t_oracle.push_back(detail::seconds_of([&] { tr_oracle = oracle_kron_trace(net, sub).traces.total(); }));
      t_exact.push_back(detail::seconds_of([&] { tr_exact = trace_exact(net, sub, eo).total(); }));
    }
    const auto [mo, so] = detail::mean_std(t_oracle);
    const auto [me, se] = detail::mean_std(t_exact);
    out.rows.push_back({"oracle", n, mo, so, tr_oracle});
    out.rows.push_back({"exact", n, me, se, tr_exact});
    out.speedup[n] = me > 0.0 ? mo / me : INFINITY;
    const double scale = std::max(std::abs(tr_oracle), std::abs(tr_exact));
    const double rel = scale > 0.0 ? std::abs(tr_oracle - tr_exact) / scale : 0.0;
    out.trace_rel_diff[n] = rel;
    if (!(rel <= kBenchAgreementTolerance)) out.agree = false;
  }
  return out;
}

// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::vector<std::size_t> dims{784, 128, 128, 10};
  SgdConfig sgd{0.1, 0.9, 1e-5, 1024, 200, 0};
  std::vector<double> ratios{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool with_ns = false;
  bool corrupt_test = false;
  std::size_t threads = 1;
  NsConfig ns;
};

struct ExperimentRow {
  double ratio = 0.0;
  std::uint64_t seed = 0;
  double gap = 0.0;
  double ms = 0.0;
  double ns = NAN;  // only with_ns
  double train_acc = 0.0;
  double test_acc = 0.0;
};

struct ExperimentResult {
  std::vector<ExperimentRow> rows;
  double pearson = NAN;
  double spearman = NAN;
  std::vector<std::pair<double, double>> mean_gap;  // (ratio, mean gap), in ratio order
  bool gap_increasing = false;
};

// One run: labels of the training set corrupted at `ratio`, fresh He init,
// SGD, then gap and sharpness of the trained network. Corruption and init use
// separate streams derived from `seed`.
inline ExperimentRow run_one(const ExperimentConfig& cfg, const Dataset& train_set,
                             const Dataset& test_set, double ratio, std::uint64_t seed) {
  const Rng base(seed);
  Rng corrupt_rng = base.split(1);
  Rng init_rng = base.split(2);
  Rng test_rng = base.split(3);
  const Dataset tr = corrupt_labels(train_set, ratio, corrupt_rng);
  const Dataset te = cfg.corrupt_test ? corrupt_labels(test_set, ratio, test_rng) : test_set;

  SgdConfig sgd = cfg.sgd;
  sgd.seed = seed;
  const Mlp net = train(Mlp::random(cfg.dims, init_rng), tr, sgd).net;

  ExperimentRow row;
  row.ratio = ratio;
  row.seed = seed;
  row.train_acc = accuracy(net, tr);
  row.test_acc = accuracy(net, te);
  row.gap = row.train_acc - row.test_acc;
  ExactOptions eo;
  eo.threads = cfg.threads;
  row.ms = minimum_sharpness(trace_exact(net, tr, eo)).ms;
  if (cfg.with_ns) row.ns = normalized_sharpness(net, diag_exact(net, tr, eo), cfg.ns).total;
  return row;
}

inline ExperimentResult run_randomized_label_experiment(
    const ExperimentConfig& cfg, const Dataset& train_set, const Dataset& test_set,
    const std::function<void(const ExperimentRow&)>& on_row = {}) {
  if (cfg.ratios.empty() || cfg.seeds.empty())
    throw std::invalid_argument("experiment: need at least one ratio and one seed");
  if (train_set.input_dim() != test_set.input_dim() || train_set.num_classes != test_set.num_classes)
    throw std::invalid_argument("experiment: train and test sets have different shapes");

  ExperimentResult out;
  std::vector<double> gaps, mss;
  for (double ratio : cfg.ratios) {
    double sum = 0.0;
    for (std::uint64_t seed : cfg.seeds) {
      out.rows.push_back(run_one(cfg, train_set, test_set, ratio, seed));
      const auto& row = out.rows.back();
      if (on_row) on_row(row);
      gaps.push_back(row.gap);
      mss.push_back(row.ms);
      sum += row.gap;
    }
    out.mean_gap.emplace_back(ratio, sum / static_cast<double>(cfg.seeds.size()));
  }
  if (gaps.size() >= 2) {
    out.pearson = pearson(gaps, mss);
    out.spearman = spearman(gaps, mss);
  }

  // Mean gap strictly increasing along ascending ratios.
  auto sorted = out.mean_gap;
  std::sort(sorted.begin(), sorted.end());
  out.gap_increasing = sorted.size() >= 2;
  for (std::size_t i = 1; i < sorted.size(); ++i)
    if (!(sorted[i].second > sorted[i - 1].second)) out.gap_increasing = false;
  return out;
}

}  // namespace minsharp
