// Normalized sharpness baseline and the stochastic DIAG[H] estimator it was
// originally paired with.
//
// Per layer, with D = DIAG[H_d] and S = W_d∘W_d in weight layout,
//
//     NS_d = min  sigma1^T D sigma2 + (1/sigma1)^T S (1/sigma2)
//            over positive sigma1, sigma2 with prod sigma1 = prod sigma2 = 1.
//
// In u = log sigma1, v = log sigma2 the objective is a sum of exponentials of
// affine functions, hence convex, and the constraints are sum u = sum v = 0.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "minsharp/hessian.hpp"
#include "minsharp/linalg.hpp"
#include "minsharp/network.hpp"

namespace minsharp {

struct NsConfig {
  std::size_t max_iters = 500;
  double step_size = 0.1;
  double tol = 1e-10;

  void validate() const {
    if (max_iters == 0) throw std::invalid_argument("NsConfig: max_iters must be >= 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("NsConfig: step_size must be > 0");
    if (!(tol > 0.0)) throw std::invalid_argument("NsConfig: tol must be > 0");
  }
};

struct LayerNs {
  double value = 0.0;
  Vector sigma1;  // one per output unit (rows)
  Vector sigma2;  // one per input unit (columns)
  bool converged = false;
  std::size_t iterations = 0;
};

struct NsReport {
  double total = 0.0;
  std::vector<double> per_layer;
  std::vector<Vector> sigma1, sigma2;
  bool converged = true;
};

inline double ns_objective(const Matrix& diag, const Matrix& wsq, std::span<const double> u,
                           std::span<const double> v) {
  double f = 0.0;
  for (std::size_t i = 0; i < diag.rows(); ++i)
    for (std::size_t j = 0; j < diag.cols(); ++j) {
      const double e = std::exp(u[i] + v[j]);
      f += diag(i, j) * e + wsq(i, j) / e;
    }
  return f;
}

namespace detail {

inline void remove_mean(std::span<double> x) {
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  for (double& v : x) v -= m;
}

// Descent direction (g - lambda) / h with lambda chosen so the direction sums
// to zero, i.e. the diagonally scaled gradient restricted to the constraint
// plane. Coordinates with h == 0 do not affect the objective and stay put.
inline void scaled_tangent(std::span<double> g, std::span<const double> h) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (h[i] > 0.0) {
      num += g[i] / h[i];
      den += 1.0 / h[i];
    }
  const double lambda = den > 0.0 ? num / den : 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = h[i] > 0.0 ? (g[i] - lambda) / h[i] : 0.0;
}

}  // namespace detail

// Minimizes one layer's objective by diagonally scaled gradient steps on the
// zero-sum planes of (u, v); a step that does not decrease the objective is
// halved.
inline LayerNs normalized_sharpness_layer(const Matrix& diag, const Matrix& wsq,
                                          const NsConfig& cfg = {}) {
  cfg.validate();
  if (diag.rows() != wsq.rows() || diag.cols() != wsq.cols())
    throw std::invalid_argument("normalized_sharpness_layer: shape mismatch " +
                                diag.shape_string() + " vs " + wsq.shape_string());
  const std::size_t m = diag.rows(), k = diag.cols();
  Vector u(m, 0.0), v(k, 0.0), du(m), dv(k), hu(m), hv(k), tu(m), tv(k);

  LayerNs out;
  double f = ns_objective(diag, wsq, u, v);
  if (!std::isfinite(f)) throw NumericError("normalized sharpness objective is not finite");
  double step = cfg.step_size;

  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    out.iterations = it + 1;
    std::fill(du.begin(), du.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::fill(hu.begin(), hu.end(), 0.0);
    std::fill(hv.begin(), hv.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double e = std::exp(u[i] + v[j]);
        const double a = diag(i, j) * e, b = wsq(i, j) / e;
        du[i] += a - b;
        dv[j] += a - b;
        hu[i] += a + b;
        hv[j] += a + b;
      }
    detail::scaled_tangent(du, hu);
    detail::scaled_tangent(dv, hv);

    double f_new = f;
    while (true) {
      for (std::size_t i = 0; i < m; ++i) tu[i] = u[i] - step * du[i];
      for (std::size_t j = 0; j < k; ++j) tv[j] = v[j] - step * dv[j];
      detail::remove_mean(tu);
      detail::remove_mean(tv);
      f_new = ns_objective(diag, wsq, tu, tv);
      if (!std::isfinite(f_new)) throw NumericError("normalized sharpness objective is not finite");
      if (f_new <= f || step < 1e-12) break;
      step *= 0.5;
    }
    if (f_new > f) {
      out.converged = true;  // no descent left at machine precision
      break;
    }
    const double improvement = f - f_new;
    u.swap(tu);
    v.swap(tv);
    f = f_new;
    step = std::min(2.0 * step, cfg.step_size);
    if (improvement < cfg.tol * std::abs(f)) {
      out.converged = true;
      break;
    }
  }

  out.value = f;
  out.sigma1.resize(m);
  out.sigma2.resize(k);
  for (std::size_t i = 0; i < m; ++i) out.sigma1[i] = std::exp(u[i]);
  for (std::size_t j = 0; j < k; ++j) out.sigma2[j] = std::exp(v[j]);
  return out;
}

// NS = sum_d NS_d with exact diagonals.
inline NsReport normalized_sharpness(const Mlp& net, const LayerDiagonals& diags,
                                     const NsConfig& cfg = {}) {
  if (diags.per_layer.size() != net.num_layers())
    throw std::invalid_argument("normalized_sharpness: diagonal/network layer count mismatch");
  NsReport r;
  for (std::size_t d = 0; d < net.num_layers(); ++d) {
    LayerNs layer;
    try {
      layer = normalized_sharpness_layer(diags.per_layer[d], square(net.weight(d)), cfg);
    } catch (const NumericError& e) {
      throw NumericError("normalized_sharpness: layer " + std::to_string(d) + ": " + e.what());
    }
    r.per_layer.push_back(layer.value);
    r.total += layer.value;
    r.converged = r.converged && layer.converged;
    r.sigma1.push_back(std::move(layer.sigma1));
    r.sigma2.push_back(std::move(layer.sigma2));
  }
  return r;
}

// ---------------------------------------------------------------------------

struct StochasticDiagResult {
  LayerDiagonals estimate;
  double l2_error = 0.0;        // |DIAG[H] - estimate|_2 over all parameters
  double relative_error = 0.0;  // l2_error / |DIAG[H]|_2
};

// Source of perturbation directions, one LayerGradients-shaped set per draw.
using DirectionFn = std::function<std::vector<Matrix>(std::size_t draw)>;

// Average of eps ∘ (grad L(theta + r eps) - grad L(theta - r eps)) / (2r) over
// the directions produced by `direction`.
inline LayerDiagonals stochastic_diag_along(const Mlp& net, const Dataset& data, double r,
                                            std::size_t num_draws, const DirectionFn& direction) {
  if (!(r > 0.0)) throw std::invalid_argument("stochastic_diag: r must be > 0");
  if (num_draws == 0) throw std::invalid_argument("stochastic_diag: num_draws must be >= 1");
  const std::size_t D = net.num_layers();
  LayerDiagonals est;
  est.n = data.size();
  for (const auto& w : net.weights()) est.per_layer.emplace_back(w.rows(), w.cols());

  for (std::size_t s = 0; s < num_draws; ++s) {
    const auto eps = direction(s);
    if (eps.size() != D) throw std::invalid_argument("stochastic_diag: direction layer count");
    std::vector<Matrix> plus_w, minus_w;
    for (std::size_t d = 0; d < D; ++d) {
      plus_w.push_back(add(net.weight(d), scale(eps[d], r)));
      minus_w.push_back(sub(net.weight(d), scale(eps[d], r)));
    }
    const auto g_plus = grad_loss(Mlp(net.dims(), std::move(plus_w)), data);
    const auto g_minus = grad_loss(Mlp(net.dims(), std::move(minus_w)), data);
    for (std::size_t d = 0; d < D; ++d) {
      auto acc = est.per_layer[d].data();
      auto e = eps[d].data();
      auto gp = g_plus.per_layer[d].data();
      auto gm = g_minus.per_layer[d].data();
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += e[k] * (gp[k] - gm[k]) / (2.0 * r);
    }
  }
  const double inv = 1.0 / static_cast<double>(num_draws);
  for (auto& m : est.per_layer)
    for (double& v : m.data()) v *= inv;
  return est;
}

inline double diagonal_distance(const LayerDiagonals& a, const LayerDiagonals& b) {
  if (a.per_layer.size() != b.per_layer.size())
    throw std::invalid_argument("diagonal_distance: layer count mismatch");
  double s = 0.0;
  for (std::size_t d = 0; d < a.per_layer.size(); ++d) s += frobenius_sq(sub(a.per_layer[d], b.per_layer[d]));
  return std::sqrt(s);
}

// Gaussian directions eps ~ N(0, I); the error is measured against diag_exact.
inline StochasticDiagResult stochastic_diag(const Mlp& net, const Dataset& data, double r,
                                            std::size_t num_draws, Rng& rng) {
  detail::check_dataset(net, data);
  StochasticDiagResult out;
  out.estimate = stochastic_diag_along(net, data, r, num_draws, [&](std::size_t) {
    std::vector<Matrix> eps;
    for (const auto& w : net.weights()) eps.push_back(gaussian_fill(rng, w.rows(), w.cols(), 1.0));
    return eps;
  });
  const auto exact = diag_exact(net, data);
  out.l2_error = diagonal_distance(out.estimate, exact);
  double norm = 0.0;
  for (const auto& m : exact.per_layer) norm += frobenius_sq(m);
  norm = std::sqrt(norm);
  out.relative_error = norm > 0.0 ? out.l2_error / norm : out.l2_error;
  return out;
}

}  // namespace minsharp
