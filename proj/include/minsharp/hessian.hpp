// Per-layer traces and diagonals of the softmax cross-entropy Hessian.
//
// For a ReLU network the second derivative of the activations vanishes almost
// everywhere, so the Hessian block of layer d for one sample is
//
//     H_d = (G^T P G) (x) (x_d x_d^T),    P = diag(p) - p p^T,
//
// where row l of G (K x m_{d+1}) is the backpropagated vector of logit l at
// z_d. Taking the trace and using the rank-1 form of the gradients gives
//
//     Tr[H_d] = sum_l p_l |do_l/dW_d|_F^2 - |d lnZ/dW_d|_F^2,
//
// which needs only K+1 backward passes. The same argument applied entrywise
// gives the diagonal. The oracles in this file build G explicitly from the
// layer Jacobians and materialize the Kronecker product instead.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "minsharp/dataset.hpp"
#include "minsharp/errors.hpp"
#include "minsharp/linalg.hpp"
#include "minsharp/network.hpp"
#include "minsharp/parallel.hpp"

namespace minsharp {

// Relative size of the rounding noise tolerated below zero before a
// theoretically nonnegative quantity is considered a bug.
inline constexpr double kClampTolerance = 1e-10;

struct LayerTraces {
  std::vector<double> per_layer;
  // Magnitude of the positive term each trace was computed from (the
  // reference for clamping and for "numerically zero").
  std::vector<double> scale;
  std::size_t n = 0;

  double total() const {
    double s = 0.0;
    for (double v : per_layer) s += v;
    return s;
  }

  // Traces given directly (scale = |value|).
  static LayerTraces from_values(std::vector<double> values, std::size_t n = 1) {
    LayerTraces t;
    t.scale.reserve(values.size());
    for (double v : values) t.scale.push_back(std::abs(v));
    t.per_layer = std::move(values);
    t.n = n;
    return t;
  }
};

struct LayerDiagonals {
  std::vector<Matrix> per_layer;
  std::size_t n = 0;

  double total() const {
    double s = 0.0;
    for (const auto& m : per_layer)
      for (double v : m.data()) s += v;
    return s;
  }
};

// How the gradient norms enter the score. `Unsquared` exists only as a
// mutation hook for the verification suite.
enum class NormConvention { Squared, Unsquared };

struct ExactOptions {
  std::size_t threads = 1;
  std::size_t chunk = 256;  // samples per accumulation chunk
  NormConvention norm = NormConvention::Squared;
};

// Clamps `value` to 0 when it is negative by no more than the tolerance
// relative to `scale`; throws on anything more negative.
inline double clamp_nonnegative(double value, double scale, const char* what) {
  if (value >= 0.0) return value;
  if (value >= -kClampTolerance * scale) return 0.0;
  throw NumericError(std::string(what) + ": negative value " + std::to_string(value) +
                     " beyond rounding tolerance (scale " + std::to_string(scale) + ")");
}

namespace detail {

struct ScoreTerms {
  std::vector<double> positive;  // sum_l p_l |do_l/dW_d|^2
  std::vector<double> negative;  // |d lnZ/dW_d|^2
};

// K+1 backward passes for one sample.
inline ScoreTerms score_terms(const Mlp& net, const ForwardTrace& t, NormConvention norm) {
  const std::size_t D = net.num_layers();
  const std::size_t K = net.num_classes();
  ScoreTerms s{std::vector<double>(D, 0.0), std::vector<double>(D, 0.0)};

  std::vector<double> x_sq(D);
  for (std::size_t d = 0; d < D; ++d) x_sq[d] = norm_sq(t.layer_inputs[d]);

  // |g x^T|_F^2 = |g|^2 |x|^2 for the rank-1 layer gradients.
  auto frob = [&](const Vector& delta, std::size_t d) {
    const double sq = norm_sq(delta) * x_sq[d];
    return norm == NormConvention::Squared ? sq : std::sqrt(sq);
  };

  Vector seed(K, 0.0);
  for (std::size_t l = 0; l < K; ++l) {
    seed[l] = 1.0;
    const auto deltas = backprop_deltas(net, t, seed);
    seed[l] = 0.0;
    for (std::size_t d = 0; d < D; ++d) s.positive[d] += t.probs[l] * frob(deltas[d], d);
  }
  const auto deltas_z = backprop_deltas(net, t, t.probs);
  for (std::size_t d = 0; d < D; ++d) s.negative[d] = frob(deltas_z[d], d);
  return s;
}

inline void check_dataset(const Mlp& net, const Dataset& data) {
  data.validate();
  if (data.input_dim() != net.input_dim() || data.num_classes != net.num_classes()) {
    throw std::invalid_argument("dataset (" + std::to_string(data.input_dim()) + " inputs, " +
                                std::to_string(data.num_classes) +
                                " classes) does not match network");
  }
}

}  // namespace detail

// Per-layer Tr[H_d] contribution of one sample. The softmax cross-entropy
// Hessian does not depend on the label; `y` is only range-checked.
inline std::vector<double> score(const Mlp& net, std::span<const double> x, Label y,
                                 NormConvention norm = NormConvention::Squared) {
  detail::check_label(net, y);
  const auto t = forward(net, x);
  const auto terms = detail::score_terms(net, t, norm);
  std::vector<double> out(net.num_layers());
  for (std::size_t d = 0; d < out.size(); ++d) out[d] = terms.positive[d] - terms.negative[d];
  return out;
}

// Mean of the per-sample scores, kept per layer.
inline LayerTraces trace_exact(const Mlp& net, const Dataset& data, const ExactOptions& opt = {}) {
  detail::check_dataset(net, data);
  const std::size_t D = net.num_layers();
  auto partials = map_chunks(data.size(), opt.chunk, opt.threads, [&](std::size_t b, std::size_t e) {
    detail::ScoreTerms acc{std::vector<double>(D, 0.0), std::vector<double>(D, 0.0)};
    for (std::size_t i = b; i < e; ++i) {
      const auto terms = detail::score_terms(net, forward(net, data.sample(i)), opt.norm);
      for (std::size_t d = 0; d < D; ++d) {
        acc.positive[d] += terms.positive[d];
        acc.negative[d] += terms.negative[d];
      }
    }
    return acc;
  });

  std::vector<double> pos(D, 0.0), neg(D, 0.0);
  for (const auto& p : partials)
    for (std::size_t d = 0; d < D; ++d) {
      pos[d] += p.positive[d];
      neg[d] += p.negative[d];
    }

  const double inv_n = 1.0 / static_cast<double>(data.size());
  LayerTraces out;
  out.n = data.size();
  for (std::size_t d = 0; d < D; ++d) {
    const double scale = pos[d] * inv_n;
    out.scale.push_back(scale);
    out.per_layer.push_back(clamp_nonnegative((pos[d] - neg[d]) * inv_n, scale, "trace_exact"));
  }
  return out;
}

// DIAG[H_d] in weight layout: entry (i, j) is
//   (sum_l p_l g_l[i]^2 - g_z[i]^2) * x_d[j]^2, averaged over samples.
inline LayerDiagonals diag_exact(const Mlp& net, const Dataset& data, const ExactOptions& opt = {}) {
  detail::check_dataset(net, data);
  const std::size_t D = net.num_layers();
  const std::size_t K = net.num_classes();

  struct Partial {
    std::vector<Matrix> pos, neg;
  };
  auto partials = map_chunks(data.size(), opt.chunk, opt.threads, [&](std::size_t b, std::size_t e) {
    Partial acc;
    for (const auto& w : net.weights()) {
      acc.pos.emplace_back(w.rows(), w.cols());
      acc.neg.emplace_back(w.rows(), w.cols());
    }
    std::vector<Vector> row_pos(D), row_neg(D);
    Vector seed(K, 0.0);
    for (std::size_t i = b; i < e; ++i) {
      const auto t = forward(net, data.sample(i));
      for (std::size_t d = 0; d < D; ++d) row_pos[d].assign(net.dims()[d + 1], 0.0);
      for (std::size_t l = 0; l < K; ++l) {
        seed[l] = 1.0;
        const auto deltas = backprop_deltas(net, t, seed);
        seed[l] = 0.0;
        for (std::size_t d = 0; d < D; ++d)
          for (std::size_t r = 0; r < deltas[d].size(); ++r)
            row_pos[d][r] += t.probs[l] * deltas[d][r] * deltas[d][r];
      }
      const auto dz = backprop_deltas(net, t, t.probs);
      for (std::size_t d = 0; d < D; ++d) {
        row_neg[d].resize(dz[d].size());
        for (std::size_t r = 0; r < dz[d].size(); ++r) row_neg[d][r] = dz[d][r] * dz[d][r];
        const auto& x = t.layer_inputs[d];
        for (std::size_t r = 0; r < row_pos[d].size(); ++r) {
          double* pr = acc.pos[d].row(r).data();
          double* nr = acc.neg[d].row(r).data();
          for (std::size_t c = 0; c < x.size(); ++c) {
            const double xx = x[c] * x[c];
            pr[c] += row_pos[d][r] * xx;
            nr[c] += row_neg[d][r] * xx;
          }
        }
      }
    }
    return acc;
  });

  const double inv_n = 1.0 / static_cast<double>(data.size());
  LayerDiagonals out;
  out.n = data.size();
  for (std::size_t d = 0; d < D; ++d) {
    Matrix pos(net.dims()[d + 1], net.dims()[d]);
    Matrix neg(pos.rows(), pos.cols());
    for (const auto& p : partials) {
      pos = add(pos, p.pos[d]);
      neg = add(neg, p.neg[d]);
    }
    Matrix diag(pos.rows(), pos.cols());
    auto dd = diag.data();
    auto pd = pos.data();
    auto nd = neg.data();
    for (std::size_t k = 0; k < dd.size(); ++k)
      dd[k] = clamp_nonnegative((pd[k] - nd[k]) * inv_n, pd[k] * inv_n, "diag_exact");
    out.per_layer.push_back(std::move(diag));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reference oracles.

// The two Kronecker factors of one sample's layer block.
struct KroneckerBlock {
  Matrix left;   // G^T P G, m_{d+1} x m_{d+1}
  Matrix right;  // x_d x_d^T, m_d x m_d
};

// Jacobians M_d = do/dz_d (K x m_{d+1}) built by explicit matrix products
// M_{d-1} = M_d W_d diag[relu'(z_{d-1})], independent of backprop_deltas.
inline std::vector<Matrix> logit_jacobians(const Mlp& net, const ForwardTrace& t) {
  const std::size_t D = net.num_layers();
  std::vector<Matrix> m(D);
  m[D - 1] = Matrix::identity(net.num_classes());
  for (std::size_t d = D - 1; d > 0; --d) {
    Matrix mask(net.dims()[d], net.dims()[d]);
    for (std::size_t j = 0; j < net.dims()[d]; ++j) mask(j, j) = t.layer_inputs[d][j] > 0.0 ? 1.0 : 0.0;
    m[d - 1] = matmul(matmul(m[d], net.weight(d)), mask);
  }
  return m;
}

inline Matrix softmax_curvature(std::span<const double> p) {
  Matrix c = scale(outer(p, p), -1.0);
  for (std::size_t l = 0; l < p.size(); ++l) c(l, l) += p[l];
  return c;
}

inline KroneckerBlock kronecker_block(const Mlp& net, const ForwardTrace& t, std::size_t layer) {
  const auto jac = logit_jacobians(net, t);
  const Matrix& g = jac.at(layer);
  return {matmul(matmul(transpose(g), softmax_curvature(t.probs)), g),
          outer(t.layer_inputs[layer], t.layer_inputs[layer])};
}

struct OracleResult {
  LayerTraces traces;
  std::optional<LayerDiagonals> diagonals;
};

struct OracleOptions {
  bool with_diagonals = false;
  // Blocks with at most this many parameters go through linalg::kron in one
  // piece; larger ones are materialized one Kronecker row at a time.
  std::size_t full_kron_limit = 2048;
};

inline constexpr std::size_t kOracleMaxLayerParams = 1'000'000;

// Ground truth by construction: per sample and layer, materialize
// left (x) right and read its diagonal.
inline OracleResult oracle_kron_trace(const Mlp& net, const Dataset& data,
                                      const OracleOptions& opt = {}) {
  detail::check_dataset(net, data);
  const std::size_t D = net.num_layers();
  for (std::size_t d = 0; d < D; ++d) {
    if (net.weight(d).size() > kOracleMaxLayerParams) {
      throw std::invalid_argument("oracle_kron_trace: layer " + std::to_string(d) + " has " +
                                  std::to_string(net.weight(d).size()) +
                                  " parameters (limit 1e6)");
    }
  }

  std::vector<Matrix> diag_sum;
  for (const auto& w : net.weights()) diag_sum.emplace_back(w.rows(), w.cols());
  std::vector<double> scale_sum(D, 0.0);
  Vector kron_row;

  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto t = forward(net, data.sample(i));
    const auto jac = logit_jacobians(net, t);
    const Matrix curvature = softmax_curvature(t.probs);
    for (std::size_t d = 0; d < D; ++d) {
      const Matrix left = matmul(matmul(transpose(jac[d]), curvature), jac[d]);
      const Matrix right = outer(t.layer_inputs[d], t.layer_inputs[d]);
      const std::size_t rows = left.rows(), cols = right.rows(), params = rows * cols;
      auto diag = diag_sum[d].data();

      if (params <= opt.full_kron_limit) {
        const Matrix h = kron(left, right);
        for (std::size_t k = 0; k < params; ++k) diag[k] += h(k, k);
      } else {
        // Row (a, j) of left (x) right is left(a, :) (x) right(j, :).
        kron_row.resize(params);
        for (std::size_t a = 0; a < rows; ++a)
          for (std::size_t j = 0; j < cols; ++j) {
            const auto rj = right.row(j);
            for (std::size_t b = 0; b < rows; ++b) {
              const double lab = left(a, b);
              double* dst = kron_row.data() + b * cols;
              for (std::size_t k = 0; k < cols; ++k) dst[k] = lab * rj[k];
            }
            diag[a * cols + j] += kron_row[a * cols + j];
          }
      }

      // |diag(p)| part of left, used only as the clamping reference.
      double pos = 0.0;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t l = 0; l < jac[d].rows(); ++l) pos += t.probs[l] * jac[d](l, r) * jac[d](l, r);
      scale_sum[d] += pos * norm_sq(t.layer_inputs[d]);
    }
  }

  const double inv_n = 1.0 / static_cast<double>(data.size());
  OracleResult out;
  out.traces.n = data.size();
  LayerDiagonals diags;
  diags.n = data.size();
  for (std::size_t d = 0; d < D; ++d) {
    Matrix m = scale(diag_sum[d], inv_n);
    double tr = 0.0;
    for (double v : m.data()) tr += v;
    const double sc = scale_sum[d] * inv_n;
    out.traces.scale.push_back(sc);
    out.traces.per_layer.push_back(clamp_nonnegative(tr, sc, "oracle_kron_trace"));
    for (double& v : m.data()) v = clamp_nonnegative(v, sc, "oracle_kron_trace");
    diags.per_layer.push_back(std::move(m));
  }
  if (opt.with_diagonals) out.diagonals = std::move(diags);
  return out;
}

struct FdDiagResult {
  LayerDiagonals diag;  // raw central differences, not clamped
  // kink[d](i, j) == 1 when some ReLU changed sign between the two
  // perturbed evaluations of parameter (d, i, j).
  std::vector<Matrix> kink;

  std::size_t flagged() const {
    std::size_t c = 0;
    for (const auto& m : kink)
      for (double v : m.data()) c += v != 0.0;
    return c;
  }
};

namespace detail {

inline std::vector<std::uint8_t> activation_pattern(const Mlp& net, const Dataset& data) {
  std::vector<std::uint8_t> pattern;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto t = forward(net, data.sample(i));
    for (std::size_t d = 1; d < t.layer_inputs.size(); ++d)
      for (double v : t.layer_inputs[d]) pattern.push_back(v > 0.0);
  }
  return pattern;
}

}  // namespace detail

// H_kk ~ (g_k(theta + eps e_k) - g_k(theta - eps e_k)) / (2 eps), with g the
// gradient of the mean loss.
inline FdDiagResult oracle_fd_diag(const Mlp& net, const Dataset& data, double eps = 1e-4) {
  if (!(eps > 0.0)) throw std::invalid_argument("oracle_fd_diag: eps must be > 0");
  detail::check_dataset(net, data);
  FdDiagResult out;
  out.diag.n = data.size();
  Mlp probe = net;
  for (std::size_t d = 0; d < net.num_layers(); ++d) {
    Matrix h(net.weight(d).rows(), net.weight(d).cols());
    Matrix kink(h.rows(), h.cols());
    for (std::size_t k = 0; k < h.size(); ++k) {
      const double w0 = net.weight(d).data()[k];
      probe.weight(d).data()[k] = w0 + eps;
      const double g_plus = grad_loss(probe, data).per_layer[d].data()[k];
      const auto pat_plus = detail::activation_pattern(probe, data);
      probe.weight(d).data()[k] = w0 - eps;
      const double g_minus = grad_loss(probe, data).per_layer[d].data()[k];
      const auto pat_minus = detail::activation_pattern(probe, data);
      probe.weight(d).data()[k] = w0;
      h.data()[k] = (g_plus - g_minus) / (2.0 * eps);
      kink.data()[k] = pat_plus != pat_minus ? 1.0 : 0.0;
    }
    out.diag.per_layer.push_back(std::move(h));
    out.kink.push_back(std::move(kink));
  }
  return out;
}

}  // namespace minsharp
