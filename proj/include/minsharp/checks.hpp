// Self-contained numerical checks of the library against its oracles. Each
// check builds its own small problems from a seed and reports the worst
// deviation it saw next to the tolerance it was held to.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "minsharp/hessian.hpp"
#include "minsharp/normalized.hpp"
#include "minsharp/sharpness.hpp"

namespace minsharp {

struct CheckResult {
  std::string name;
  bool passed = false;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  double seconds = 0.0;
  double time_limit = 0.0;
  std::string detail;
};

struct CheckOptions {
  std::uint64_t seed = 0;
  NormConvention norm = NormConvention::Squared;  // mutation hook
};

namespace checks {

inline double rel_dev(double a, double b) {
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? std::abs(a - b) : std::abs(a - b) / s;
}

// max |a - b| / max |b|
inline double matrix_dev(const Matrix& a, const Matrix& b) {
  const double ref = max_abs(b.data());
  const double diff = max_abs(sub(a, b).data());
  return ref == 0.0 ? diff : diff / ref;
}

inline Dataset gaussian_data(std::size_t n, std::size_t dim, std::size_t classes, Rng& rng) {
  Dataset d;
  d.num_classes = classes;
  d.features = gaussian_fill(rng, n, dim, 1.0);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(rng.below(classes));
  return d;
}

// Depth 2-4, widths 2-8.
inline std::vector<std::size_t> random_dims(Rng& rng) {
  const std::size_t depth = 2 + rng.below(3);
  std::vector<std::size_t> dims;
  for (std::size_t i = 0; i <= depth; ++i) dims.push_back(2 + rng.below(7));
  return dims;
}

// Random net whose MS is positive on `data` (a ReLU layer can die entirely
// for unlucky draws of tiny widths).
inline Mlp live_net(const std::vector<std::size_t>& dims, const Dataset& data, Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    Mlp net = Mlp::random(dims, rng);
    if (!minimum_sharpness_of(net, data).degenerate) return net;
  }
  throw NumericError("checks: no non-degenerate network found");
}

// Runs `body`, which records into `r`, and applies the time limit.
inline CheckResult timed(std::string name, double tolerance, double time_limit,
                         const std::function<void(CheckResult&)>& body) {
  CheckResult r;
  r.name = std::move(name);
  r.tolerance = tolerance;
  r.time_limit = time_limit;
  r.passed = true;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!(r.max_deviation <= r.tolerance)) r.passed = false;
  if (r.seconds > r.time_limit) {
    r.passed = false;
    r.detail += (r.detail.empty() ? "" : "; ") + std::string("time limit exceeded");
  }
  return r;
}

inline void note(CheckResult& r, double dev) {
  if (!(dev <= r.max_deviation)) r.max_deviation = dev;  // NaN sticks
}

// Minimizes the 2x2 normalized sharpness objective by brute force over
// sigma1 = (e^a, e^-a), sigma2 = (e^b, e^-b): a coarse sweep of [-6, 6]^2
// at step 1e-2, then a sweep at step 1e-3 around the best coarse point.
inline double ns_grid_oracle_2x2(const Matrix& diag, const Matrix& wsq) {
  auto f = [&](double a, double b) {
    const double u[2] = {a, -a}, v[2] = {b, -b};
    return ns_objective(diag, wsq, u, v);
  };
  double best = std::numeric_limits<double>::infinity(), ba = 0.0, bb = 0.0;
  for (int i = -600; i <= 600; ++i)
    for (int j = -600; j <= 600; ++j) {
      const double v = f(i * 1e-2, j * 1e-2);
      if (v < best) best = v, ba = i * 1e-2, bb = j * 1e-2;
    }
  const double ca = ba, cb = bb;
  for (int i = -20; i <= 20; ++i)
    for (int j = -20; j <= 20; ++j) best = std::min(best, f(ca + i * 1e-3, cb + j * 1e-3));
  return best;
}

}  // namespace checks

// Single layer, zero weights: Tr[H] = (1 - 1/K) |x|^2.
inline CheckResult check_closed_form(const CheckOptions& opt = {}) {
  return checks::timed("closed-form single-layer trace", 1e-12, 1.0, [&](CheckResult& r) {
    Rng rng(opt.seed);
    for (std::size_t k : {2u, 3u, 10u})
      for (int trial = 0; trial < 10; ++trial) {
        const std::size_t dim = 1 + rng.below(20);
        const Mlp net({dim, k});
        const Dataset d = checks::gaussian_data(1, dim, k, rng);
        ExactOptions eo;
        eo.norm = opt.norm;
        const double got = trace_exact(net, d, eo).per_layer[0];
        const double want = (1.0 - 1.0 / static_cast<double>(k)) * norm_sq(d.sample(0));
        checks::note(r, checks::rel_dev(got, want));
      }
  });
}

// K+1 backprop traces and diagonals against the explicit Kronecker blocks.
inline CheckResult check_oracle_equivalence(const CheckOptions& opt = {}) {
  return checks::timed("kron-oracle equivalence", 1e-10, 30.0, [&](CheckResult& r) {
    Rng rng(opt.seed + 0x1000);
    ExactOptions eo;
    eo.norm = opt.norm;
    for (int trial = 0; trial < 20; ++trial) {
      const Mlp net = Mlp::random(checks::random_dims(rng), rng);
      const Dataset d = checks::gaussian_data(10, net.input_dim(), net.num_classes(), rng);
      const auto oracle = oracle_kron_trace(net, d, {true});
      const auto tr = trace_exact(net, d, eo);
      const auto dg = diag_exact(net, d, eo);
      for (std::size_t l = 0; l < net.num_layers(); ++l) {
        checks::note(r, checks::rel_dev(tr.per_layer[l], oracle.traces.per_layer[l]));
        checks::note(r, checks::matrix_dev(dg.per_layer[l], oracle.diagonals->per_layer[l]));
      }
    }
  });
}

// Finite differences of the loss gradient on coordinates whose perturbation
// does not flip any ReLU.
inline CheckResult check_fd_diagonal(const CheckOptions& opt = {}) {
  return checks::timed("finite-difference diagonal", 1e-4, 30.0, [&](CheckResult& r) {
    Rng rng(opt.seed + 0x2000);
    const Mlp net = Mlp::random({5, 7, 4, 3}, rng);
    const Dataset d = checks::gaussian_data(5, 5, 3, rng);
    const auto fd = oracle_fd_diag(net, d, 1e-4);
    const auto ex = diag_exact(net, d);
    std::size_t used = 0, total = 0;
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      // Entries far below the layer's scale are compared on that scale.
      const double floor = 1e-6 * max_abs(ex.per_layer[l].data());
      for (std::size_t k = 0; k < ex.per_layer[l].size(); ++k) {
        ++total;
        if (fd.kink[l].data()[k] != 0.0) continue;
        ++used;
        const double a = fd.diag.per_layer[l].data()[k], b = ex.per_layer[l].data()[k];
        checks::note(r, std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}));
      }
    }
    r.detail = std::to_string(used) + "/" + std::to_string(total) + " coordinates unflagged";
    if (2 * used < total) r.passed = false;
  });
}

// Gradients of the transformed net are (1/alpha_d) times the originals and
// layer traces scale by 1/alpha_d^2.
inline CheckResult check_scaling_law(const CheckOptions& opt = {}) {
  return checks::timed("alpha scaling law", 1e-10, 30.0, [&](CheckResult& r) {
    Rng rng(opt.seed + 0x3000);
    double grad_dev = 0.0, trace_dev = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const Mlp net = Mlp::random(checks::random_dims(rng), rng);
      const Dataset d = checks::gaussian_data(5, net.input_dim(), net.num_classes(), rng);
      const Alpha a = Alpha::random_log_uniform(net.num_layers(), 3.0, rng);
      for (std::size_t i = 0; i < d.size(); ++i)
        grad_dev = std::max(grad_dev, grad_scaling_check(net, a, d.sample(i)).max_rel_deviation);
      const auto t0 = trace_exact(net, d);
      const auto t1 = trace_exact(alpha_transform(net, a), d);
      for (std::size_t l = 0; l < net.num_layers(); ++l) {
        const double want = t0.per_layer[l] / (a[l] * a[l]);
        // dead layers: both sides are clamped zeros
        if (want == 0.0 && t1.per_layer[l] == 0.0) continue;
        trace_dev = std::max(trace_dev, checks::rel_dev(t1.per_layer[l], want));
      }
    }
    // Gradients are held to 1e-12, traces to 1e-10.
    checks::note(r, trace_dev);
    std::ostringstream s;
    s << "gradient deviation " << grad_dev << " (tol 1e-12), trace deviation " << trace_dev;
    r.detail = s.str();
    if (!(grad_dev <= 1e-12)) r.passed = false;
  });
}

// MS is unchanged by alpha-scale transformations, which keep the function.
inline CheckResult check_invariance(const CheckOptions& opt = {}) {
  return checks::timed("minimum sharpness invariance", 1e-8, 60.0, [&](CheckResult& r) {
    Rng rng(opt.seed + 0x4000);
    const Dataset d = checks::gaussian_data(20, 6, 4, rng);
    const Mlp net = checks::live_net({6, 10, 8, 4}, d, rng);
    const double ms = minimum_sharpness_of(net, d).ms;
    double out_dev = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Alpha a = Alpha::random_log_uniform(net.num_layers(), 3.0, rng);
      const Mlp scaled = alpha_transform(net, a);
      checks::note(r, checks::rel_dev(minimum_sharpness_of(scaled, d).ms, ms));
      for (std::size_t i = 0; i < d.size(); ++i) {
        const auto o0 = forward(net, d.sample(i)).logits;
        const auto o1 = forward(scaled, d.sample(i)).logits;
        out_dev = std::max(out_dev, checks::matrix_dev(Matrix::column(o1), Matrix::column(o0)));
      }
    }
    std::ostringstream s;
    s << "output deviation " << out_dev << " (tol 1e-10)";
    r.detail = s.str();
    if (!(out_dev <= 1e-10)) r.passed = false;
  });
}

// Closed form vs direct minimization, Monte-Carlo lower bound, and the
// minimizer itself.
inline CheckResult check_optimality(const CheckOptions& opt = {}) {
  return checks::timed("minimum sharpness optimality", 1e-6, 60.0, [&](CheckResult& r) {
    Rng rng(opt.seed + 0x5000);
    double alpha_dev = 0.0, product_dev = 0.0;
    std::size_t beaten = 0;
    for (int trial = 0; trial < 5; ++trial) {
      const auto dims = checks::random_dims(rng);
      const Dataset d = checks::gaussian_data(10, dims.front(), dims.back(), rng);
      const Mlp net = checks::live_net(dims, d, rng);
      const auto rep = minimum_sharpness_of(net, d);
      checks::note(r, checks::rel_dev(minimum_sharpness_numeric(rep.layer_traces), rep.ms));
      for (int s = 0; s < 1000; ++s) {
        const Alpha a = Alpha::random_log_uniform(net.num_layers(), 3.0, rng);
        beaten += transformed_trace(rep.layer_traces, a) < rep.ms;
      }
      double prod = 1.0;
      for (double a : *rep.alpha_star) prod *= a;
      product_dev = std::max(product_dev, std::abs(prod - 1.0));
      alpha_dev = std::max(alpha_dev,
                           checks::rel_dev(transformed_trace(rep.layer_traces, Alpha(*rep.alpha_star)), rep.ms));
    }
    std::ostringstream s;
    s << beaten << " Monte-Carlo points below MS; |prod alpha* - 1| " << product_dev
      << " (tol 1e-12); objective at alpha* deviation " << alpha_dev << " (tol 1e-12)";
    r.detail = s.str();
    if (beaten > 0 || !(product_dev <= 1e-12) || !(alpha_dev <= 1e-12)) r.passed = false;
  });
}

// MS <= Tr[H], with equality once alpha* has equalized the layer traces.
inline CheckResult check_am_gm(const CheckOptions& opt = {}) {
  return checks::timed("AM-GM bound", 1e-10, 10.0, [&](CheckResult& r) {
    Rng rng(opt.seed + 0x6000);
    std::size_t violations = 0;
    for (int trial = 0; trial < 20; ++trial) {
      const auto dims = checks::random_dims(rng);
      const Dataset d = checks::gaussian_data(8, dims.front(), dims.back(), rng);
      const Mlp net = checks::live_net(dims, d, rng);
      const auto rep = minimum_sharpness_of(net, d);
      violations += rep.ms > rep.layer_traces.total() * (1.0 + 1e-12);

      // At the minimizer every layer carries MS / D, so the bound is tight.
      const auto eq = trace_exact(alpha_transform(net, Alpha(*rep.alpha_star)), d);
      const double share = rep.ms / static_cast<double>(net.num_layers());
      for (double h : eq.per_layer) checks::note(r, checks::rel_dev(h, share));
      checks::note(r, checks::rel_dev(minimum_sharpness(eq).ms, eq.total()));
    }
    r.detail = std::to_string(violations) + " bound violations";
    if (violations > 0) r.passed = false;
  });
}

// Normalized sharpness against a brute-force grid, the sigma constraints on a
// real network, and the stochastic diagonal's convergence.
inline CheckResult check_normalized_sharpness(const CheckOptions& opt = {}) {
  return checks::timed("normalized sharpness baseline", 1e-4, 600.0, [&](CheckResult& r) {
    Rng rng(opt.seed + 0x7000);
    for (int trial = 0; trial < 5; ++trial) {
      Matrix dg(2, 2), wsq(2, 2);
      for (double& v : dg.data()) v = std::exp(rng.uniform(-2.0, 2.0));
      for (double& v : wsq.data()) v = std::exp(rng.uniform(-2.0, 2.0));
      const double got = normalized_sharpness_layer(dg, wsq).value;
      checks::note(r, checks::rel_dev(got, checks::ns_grid_oracle_2x2(dg, wsq)));
    }

    const Dataset d = checks::gaussian_data(20, 8, 4, rng);
    const Mlp net = Mlp::random({8, 12, 4}, rng);
    const auto ns = normalized_sharpness(net, diag_exact(net, d));
    double sigma_dev = 0.0;
    for (const auto* group : {&ns.sigma1, &ns.sigma2})
      for (const auto& s : *group) {
        double log_prod = 0.0;
        for (double v : s) {
          if (!(v > 0.0)) sigma_dev = INFINITY;
          log_prod += std::log(v);
        }
        sigma_dev = std::max(sigma_dev, std::abs(std::expm1(log_prod)));
      }

    // Median relative error of the stochastic estimator over 10 seeds.
    const Mlp small = Mlp::random({20, 20, 10}, rng);
    const Dataset sd = checks::gaussian_data(20, 20, 10, rng);
    auto median_error = [&](std::size_t draws) {
      std::vector<double> errs;
      for (std::uint64_t s = 0; s < 10; ++s) {
        Rng srng(opt.seed * 1000 + s);
        errs.push_back(stochastic_diag(small, sd, 1e-5, draws, srng).relative_error);
      }
      std::nth_element(errs.begin(), errs.begin() + 5, errs.end());
      const double hi = errs[5];
      const double lo = *std::max_element(errs.begin(), errs.begin() + 5);
      return 0.5 * (lo + hi);
    };
    const double e10 = median_error(10), e100 = median_error(100), e1000 = median_error(1000);

    std::ostringstream s;
    s << "sigma product deviation " << sigma_dev << " (tol 1e-10); stochastic median rel error "
      << e10 << " / " << e100 << " / " << e1000 << " at 10 / 100 / 1000 draws";
    r.detail = s.str();
    if (!(sigma_dev <= 1e-10) || !(e10 > e100 && e100 > e1000) || !(e10 > 0.1)) r.passed = false;
  });
}

// The verification suite run by `minsharp verify`.
inline std::vector<CheckResult> run_verification_suite(const CheckOptions& opt = {}) {
  return {check_closed_form(opt),      check_oracle_equivalence(opt), check_fd_diagonal(opt),
          check_scaling_law(opt),      check_invariance(opt),         check_optimality(opt),
          check_am_gm(opt),            check_normalized_sharpness(opt)};
}

}  // namespace minsharp
