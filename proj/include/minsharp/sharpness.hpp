// Scale transformation and Minimum Sharpness.
//
// Scaling W_d by alpha_d (alpha_d > 0, prod alpha_d = 1) leaves a ReLU network's
// function unchanged but maps the per-layer Hessian traces H_d to
// H_d / alpha_d^2. Minimum Sharpness is the smallest total trace over that
// orbit. Writing beta_d = alpha_d^-2 (also product one) the objective is
// sum_d beta_d H_d, minimized by AM-GM:
//
//     MS = D (prod_d H_d)^(1/D),   beta*_d = (prod_k H_k)^(1/D) / H_d.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "minsharp/hessian.hpp"
#include "minsharp/linalg.hpp"
#include "minsharp/network.hpp"

namespace minsharp {

inline constexpr double kAlphaProductTolerance = 1e-12;

// Per-layer weight scale factors of an alpha-scale transformation.
class Alpha {
 public:
  explicit Alpha(std::vector<double> per_layer) : v_(std::move(per_layer)) {
    if (v_.empty()) throw std::invalid_argument("Alpha: empty");
    double prod = 1.0;
    for (double a : v_) {
      if (!(a > 0.0) || !std::isfinite(a))
        throw std::invalid_argument("Alpha: entries must be positive and finite");
      prod *= a;
    }
    if (std::abs(prod - 1.0) > kAlphaProductTolerance) {
      throw std::invalid_argument("Alpha: product of scales is " + std::to_string(prod) +
                                  ", must be 1");
    }
  }

  static Alpha identity(std::size_t layers) { return Alpha(std::vector<double>(layers, 1.0)); }

  // Divides out the geometric mean so the product is one.
  static Alpha normalized(std::vector<double> raw) {
    double log_sum = 0.0;
    for (double a : raw) {
      if (!(a > 0.0)) throw std::invalid_argument("Alpha::normalized: entries must be positive");
      log_sum += std::log(a);
    }
    const double shift = log_sum / static_cast<double>(raw.size());
    for (double& a : raw) a = std::exp(std::log(a) - shift);
    return Alpha(std::move(raw));
  }

  // Each log alpha_d uniform in [-log_range, log_range], then normalized.
  static Alpha random_log_uniform(std::size_t layers, double log_range, Rng& rng) {
    std::vector<double> raw(layers);
    for (double& a : raw) a = std::exp(rng.uniform(-log_range, log_range));
    return normalized(std::move(raw));
  }

  std::size_t size() const { return v_.size(); }
  double operator[](std::size_t d) const { return v_[d]; }
  const std::vector<double>& values() const { return v_; }

 private:
  std::vector<double> v_;
};

inline Mlp alpha_transform(const Mlp& net, const Alpha& alpha) {
  if (alpha.size() != net.num_layers()) {
    throw std::invalid_argument("alpha_transform: " + std::to_string(alpha.size()) +
                                " scales for " + std::to_string(net.num_layers()) + " layers");
  }
  std::vector<Matrix> w;
  w.reserve(net.num_layers());
  for (std::size_t d = 0; d < net.num_layers(); ++d) w.push_back(scale(net.weight(d), alpha[d]));
  return Mlp(net.dims(), std::move(w));
}

// Tr[H] of the transformed network, sum_d H_d / alpha_d^2.
inline double transformed_trace(const LayerTraces& traces, const Alpha& alpha) {
  if (alpha.size() != traces.per_layer.size())
    throw std::invalid_argument("transformed_trace: layer count mismatch");
  double s = 0.0;
  for (std::size_t d = 0; d < alpha.size(); ++d) s += traces.per_layer[d] / (alpha[d] * alpha[d]);
  return s;
}

struct ScalingReport {
  double max_rel_deviation = 0.0;
  std::size_t worst_layer = 0;
};

// Compares gradients of the transformed network against (1/alpha_d) times the
// originals, for ln Z and every logit. Deviation per gradient matrix is
// max|a - b| / max|b|.
inline ScalingReport grad_scaling_check(const Mlp& net, const Alpha& alpha,
                                        std::span<const double> x) {
  const Mlp scaled = alpha_transform(net, alpha);
  const auto t0 = forward(net, x);
  const auto t1 = forward(scaled, x);
  ScalingReport report;

  auto compare = [&](const LayerGradients& orig, const LayerGradients& transformed) {
    for (std::size_t d = 0; d < net.num_layers(); ++d) {
      const Matrix expected = scale(orig.per_layer[d], 1.0 / alpha[d]);
      const double ref = max_abs(expected.data());
      const double diff = max_abs(sub(transformed.per_layer[d], expected).data());
      const double dev = ref > 0.0 ? diff / ref : diff;
      if (dev > report.max_rel_deviation) {
        report.max_rel_deviation = dev;
        report.worst_layer = d;
      }
    }
  };

  compare(grad_log_z(net, t0), grad_log_z(scaled, t1));
  for (std::size_t l = 0; l < net.num_classes(); ++l)
    compare(grad_logit(net, t0, l), grad_logit(scaled, t1, l));
  return report;
}

struct SharpnessReport {
  double ms = 0.0;
  // Weight scales alpha*_d (apply with alpha_transform to reach the minimum).
  std::optional<std::vector<double>> alpha_star;
  // The same minimizer as trace weights beta*_d = alpha*_d^-2.
  std::optional<std::vector<double>> alpha_prime_star;
  LayerTraces layer_traces;
  bool degenerate = false;
};

// A layer counts as zero when its trace is within the clamping tolerance of
// the positive term it was computed from.
inline bool numerically_zero(const LayerTraces& traces, std::size_t d) {
  const double scale = d < traces.scale.size() ? traces.scale[d] : 0.0;
  return traces.per_layer[d] <= kClampTolerance * scale;
}

inline SharpnessReport minimum_sharpness(const LayerTraces& traces) {
  const std::size_t D = traces.per_layer.size();
  if (D == 0) throw std::invalid_argument("minimum_sharpness: no layers");
  SharpnessReport r;
  r.layer_traces = traces;
  for (std::size_t d = 0; d < D; ++d) {
    const double h = traces.per_layer[d];
    if (!std::isfinite(h)) throw NumericError("minimum_sharpness: non-finite layer trace");
    const double scale = d < traces.scale.size() ? traces.scale[d] : std::abs(h);
    r.layer_traces.per_layer[d] = clamp_nonnegative(h, scale, "minimum_sharpness");
  }
  for (std::size_t d = 0; d < D; ++d) {
    if (numerically_zero(r.layer_traces, d)) {
      r.degenerate = true;
      r.ms = 0.0;
      return r;
    }
  }

  double log_mean = 0.0;
  for (double h : r.layer_traces.per_layer) log_mean += std::log(h);
  log_mean /= static_cast<double>(D);
  r.ms = static_cast<double>(D) * std::exp(log_mean);

  std::vector<double> beta(D), alpha(D);
  for (std::size_t d = 0; d < D; ++d) {
    const double log_h = std::log(r.layer_traces.per_layer[d]);
    beta[d] = std::exp(log_mean - log_h);
    alpha[d] = std::exp(0.5 * (log_h - log_mean));
  }
  r.alpha_prime_star = std::move(beta);
  r.alpha_star = std::move(alpha);
  return r;
}

// Direct minimization of sum_d exp(u_d) H_d over sum_d u_d = 0 by projected
// gradient descent with backtracking. Cross-check for the closed form.
inline double minimum_sharpness_numeric(const LayerTraces& traces, std::size_t budget = 10000) {
  const std::size_t D = traces.per_layer.size();
  if (D < 2) throw std::invalid_argument("minimum_sharpness_numeric: needs D >= 2");
  if (budget == 0) throw std::invalid_argument("minimum_sharpness_numeric: budget must be >= 1");
  const auto& h = traces.per_layer;

  auto objective = [&](const std::vector<double>& u) {
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) s += std::exp(u[d]) * h[d];
    return s;
  };

  std::vector<double> u(D, 0.0), grad(D), trial(D);
  double f = objective(u);
  double best = f;
  double step = 1.0;
  for (std::size_t it = 0; it < budget; ++it) {
    // Gradient of log f, projected onto sum(u) = 0.
    double mean = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      grad[d] = std::exp(u[d]) * h[d] / f;
      mean += grad[d];
    }
    mean /= static_cast<double>(D);
    double gnorm = 0.0;
    for (double& g : grad) {
      g -= mean;
      gnorm += g * g;
    }
    if (gnorm == 0.0) break;

    bool accepted = false;
    while (step > 1e-300) {
      double shift = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        trial[d] = u[d] - step * grad[d];
        shift += trial[d];
      }
      shift /= static_cast<double>(D);
      for (double& t : trial) t -= shift;
      const double ft = objective(trial);
      if (ft < f) {
        u.swap(trial);
        f = ft;
        accepted = true;
        step *= 1.5;
        break;
      }
      step *= 0.5;
    }
    best = std::min(best, f);
    if (!accepted) break;
  }
  return best;
}

struct SharpnessOptions {
  ExactOptions exact;
};

// Per-layer traces by the K+1 backprop formula, then the closed form.
inline SharpnessReport minimum_sharpness_of(const Mlp& net, const Dataset& data,
                                            const SharpnessOptions& opt = {}) {
  return minimum_sharpness(trace_exact(net, data, opt.exact));
}

inline double minimum_sharpness_numeric(const Mlp& net, const Dataset& data,
                                        std::size_t budget = 10000,
                                        const ExactOptions& opt = {}) {
  return minimum_sharpness_numeric(trace_exact(net, data, opt), budget);
}

}  // namespace minsharp
