// No-bias fully connected ReLU networks with a softmax cross-entropy head.
//
// Layer d (0-based) maps x_d -> z_d = W_d x_d, and x_{d+1} = relu(z_d) for all
// but the last layer, whose output z_{D-1} is the logit vector o. Gradients of
// any scalar function of the logits are rank-1 per layer: dW_d = delta_d x_d^T,
// where delta_d is the backpropagated vector at z_d.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "minsharp/dataset.hpp"
#include "minsharp/errors.hpp"
#include "minsharp/linalg.hpp"

namespace minsharp {

class Mlp {
 public:
  Mlp() = default;

  // Zero weights.
  explicit Mlp(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    check_dims(dims_);
    for (std::size_t d = 0; d + 1 < dims_.size(); ++d) weights_.emplace_back(dims_[d + 1], dims_[d]);
  }

  Mlp(std::vector<std::size_t> dims, std::vector<Matrix> weights)
      : dims_(std::move(dims)), weights_(std::move(weights)) {
    validate();
  }

  // Gaussian weights with stddev sqrt(2 / fan_in).
  static Mlp random(std::vector<std::size_t> dims, Rng& rng) {
    Mlp net(std::move(dims));
    for (std::size_t d = 0; d < net.num_layers(); ++d) {
      net.weights_[d] = gaussian_fill(rng, net.dims_[d + 1], net.dims_[d],
                                      std::sqrt(2.0 / static_cast<double>(net.dims_[d])));
    }
    return net;
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t num_layers() const { return weights_.size(); }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t num_classes() const { return dims_.back(); }

  std::size_t num_parameters() const {
    std::size_t p = 0;
    for (const auto& w : weights_) p += w.size();
    return p;
  }

  const Matrix& weight(std::size_t d) const { return weights_.at(d); }
  Matrix& weight(std::size_t d) { return weights_.at(d); }
  const std::vector<Matrix>& weights() const { return weights_; }

  void validate() const {
    check_dims(dims_);
    if (weights_.size() + 1 != dims_.size()) {
      throw std::invalid_argument("Mlp: " + std::to_string(weights_.size()) +
                                  " weight matrices for " + std::to_string(dims_.size()) +
                                  " layer widths");
    }
    for (std::size_t d = 0; d < weights_.size(); ++d) {
      if (weights_[d].rows() != dims_[d + 1] || weights_[d].cols() != dims_[d]) {
        throw std::invalid_argument("Mlp: layer " + std::to_string(d) + " weight is " +
                                    weights_[d].shape_string() + ", expected " +
                                    std::to_string(dims_[d + 1]) + "x" +
                                    std::to_string(dims_[d]));
      }
    }
  }

 private:
  static void check_dims(const std::vector<std::size_t>& dims) {
    if (dims.size() < 2) throw std::invalid_argument("Mlp: need at least one layer");
    for (std::size_t m : dims)
      if (m == 0) throw std::invalid_argument("Mlp: zero layer width");
  }

  std::vector<std::size_t> dims_;
  std::vector<Matrix> weights_;
};

struct ForwardTrace {
  std::vector<Vector> layer_inputs;  // x_0 (the sample) ... x_{D-1}
  Vector logits;
  Vector probs;
  double log_z = 0.0;
};

// One matrix per layer, shaped like the weights.
struct LayerGradients {
  std::vector<Matrix> per_layer;
};

struct SgdConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::size_t batch_size = 1024;
  std::size_t epochs = 3000;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("SgdConfig: learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw std::invalid_argument("SgdConfig: momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("SgdConfig: weight_decay must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("SgdConfig: batch_size must be >= 1");
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;      // mean mini-batch loss seen during the epoch
  double train_acc = 0.0;  // mini-batch accuracy seen during the epoch
};

struct TrainResult {
  Mlp net;
  std::vector<EpochLog> log;
};

namespace detail {

inline void check_input(const Mlp& net, std::size_t len) {
  if (len != net.input_dim()) {
    throw std::invalid_argument("input has length " + std::to_string(len) + ", network expects " +
                                std::to_string(net.input_dim()));
  }
}

inline void check_label(const Mlp& net, std::size_t l) {
  if (l >= net.num_classes()) {
    throw std::invalid_argument("label " + std::to_string(l) + " out of range for " +
                                std::to_string(net.num_classes()) + " classes");
  }
}

// Max-shifted log-sum-exp softmax; fills probs, returns ln Z.
inline double softmax(std::span<const double> logits, std::span<double> probs) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (std::size_t l = 0; l < logits.size(); ++l) {
    probs[l] = std::exp(logits[l] - m);
    s += probs[l];
  }
  for (double& p : probs) p /= s;
  return m + std::log(s);
}

// y = W x
inline void matvec(const Matrix& w, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double* wi = w.row(i).data();
    double s = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) s += wi[j] * x[j];
    y[i] = s;
  }
}

// y = W^T v
inline void matvec_t(const Matrix& w, std::span<const double> v, std::span<double> y) {
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    const double* wi = w.row(i).data();
    for (std::size_t j = 0; j < w.cols(); ++j) y[j] += vi * wi[j];
  }
}

inline void check_trace(const Mlp& net, const ForwardTrace& trace) {
  bool ok = trace.layer_inputs.size() == net.num_layers() &&
            trace.logits.size() == net.num_classes() && trace.probs.size() == net.num_classes();
  for (std::size_t d = 0; ok && d < net.num_layers(); ++d)
    ok = trace.layer_inputs[d].size() == net.dims()[d];
  if (ok) {
    // Recompute the head; a trace from different weights will not reproduce it.
    Vector o(net.num_classes());
    matvec(net.weight(net.num_layers() - 1), trace.layer_inputs.back(), o);
    ok = o == trace.logits;
  }
  if (!ok) throw std::invalid_argument("forward trace does not belong to this network");
}

}  // namespace detail

inline ForwardTrace forward(const Mlp& net, std::span<const double> x) {
  detail::check_input(net, x.size());
  ForwardTrace t;
  const std::size_t D = net.num_layers();
  t.layer_inputs.reserve(D);
  t.layer_inputs.emplace_back(x.begin(), x.end());
  for (std::size_t d = 0; d + 1 < D; ++d) {
    Vector next(net.dims()[d + 1]);
    detail::matvec(net.weight(d), t.layer_inputs[d], next);
    for (double& v : next) v = v > 0.0 ? v : 0.0;
    t.layer_inputs.push_back(std::move(next));
  }
  t.logits.resize(net.num_classes());
  detail::matvec(net.weight(D - 1), t.layer_inputs.back(), t.logits);
  t.probs.resize(net.num_classes());
  t.log_z = detail::softmax(t.logits, t.probs);
  return t;
}

// Reverse-mode pass for the scalar s^T o. Returns delta_d = d(s^T o)/dz_d for
// every layer. ReLU derivative at 0 is taken as 0.
inline std::vector<Vector> backprop_deltas(const Mlp& net, const ForwardTrace& trace,
                                           std::span<const double> seed) {
  const std::size_t D = net.num_layers();
  std::vector<Vector> deltas(D);
  deltas[D - 1].assign(seed.begin(), seed.end());
  for (std::size_t d = D - 1; d > 0; --d) {
    Vector up(net.dims()[d]);
    detail::matvec_t(net.weight(d), deltas[d], up);
    const auto& x = trace.layer_inputs[d];
    for (std::size_t j = 0; j < up.size(); ++j)
      if (!(x[j] > 0.0)) up[j] = 0.0;
    deltas[d - 1] = std::move(up);
  }
  return deltas;
}

inline LayerGradients gradients_from_deltas(const ForwardTrace& trace,
                                            const std::vector<Vector>& deltas) {
  LayerGradients g;
  g.per_layer.reserve(deltas.size());
  for (std::size_t d = 0; d < deltas.size(); ++d)
    g.per_layer.push_back(outer(deltas[d], trace.layer_inputs[d]));
  return g;
}

inline LayerGradients grad_log_z(const Mlp& net, const ForwardTrace& trace) {
  detail::check_trace(net, trace);
  return gradients_from_deltas(trace, backprop_deltas(net, trace, trace.probs));
}

inline LayerGradients grad_logit(const Mlp& net, const ForwardTrace& trace, std::size_t l) {
  detail::check_label(net, l);
  detail::check_trace(net, trace);
  Vector seed(net.num_classes(), 0.0);
  seed[l] = 1.0;
  return gradients_from_deltas(trace, backprop_deltas(net, trace, seed));
}

namespace detail {

struct BatchPass {
  std::vector<Matrix> inputs;  // X_d, batch x dims[d]
  Matrix probs;                // batch x K
  Vector log_z;
};

inline Matrix gather_rows(const Matrix& features, std::span<const std::size_t> rows) {
  Matrix x(rows.size(), features.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = features.row(rows[r]);
    std::copy(src.begin(), src.end(), x.row(r).begin());
  }
  return x;
}

inline BatchPass batch_forward(const Mlp& net, Matrix x) {
  BatchPass pass;
  const std::size_t D = net.num_layers();
  pass.inputs.push_back(std::move(x));
  Matrix z;
  for (std::size_t d = 0; d < D; ++d) {
    z = matmul(pass.inputs[d], transpose(net.weight(d)));
    if (d + 1 < D) {
      for (double& v : z.data()) v = v > 0.0 ? v : 0.0;
      pass.inputs.push_back(std::move(z));
    }
  }
  pass.probs = std::move(z);
  pass.log_z.resize(pass.probs.rows());
  for (std::size_t i = 0; i < pass.probs.rows(); ++i) {
    auto row = pass.probs.row(i);
    Vector logits(row.begin(), row.end());
    pass.log_z[i] = softmax(logits, row);
  }
  return pass;
}

// Mean softmax cross-entropy gradient over the batch, given (P - Y) / B.
inline LayerGradients batch_backward(const Mlp& net, const BatchPass& pass, Matrix delta) {
  const std::size_t D = net.num_layers();
  LayerGradients g;
  g.per_layer.resize(D);
  for (std::size_t d = D; d-- > 0;) {
    g.per_layer[d] = matmul(transpose(delta), pass.inputs[d]);
    if (d > 0) {
      Matrix up = matmul(delta, net.weight(d));
      auto ud = up.data();
      auto xd = pass.inputs[d].data();
      for (std::size_t i = 0; i < ud.size(); ++i)
        if (!(xd[i] > 0.0)) ud[i] = 0.0;
      delta = std::move(up);
    }
  }
  return g;
}

struct BatchStats {
  LayerGradients grad;
  double loss_sum = 0.0;
  std::size_t correct = 0;
};

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline BatchStats batch_grad(const Mlp& net, const Dataset& data,
                             std::span<const std::size_t> rows) {
  BatchPass pass = batch_forward(net, gather_rows(data.features, rows));
  BatchStats stats;
  Matrix delta = pass.probs;
  const double inv_b = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Label y = data.labels[rows[r]];
    auto p = pass.probs.row(r);
    stats.loss_sum += -std::log(p[y]);
    if (argmax(p) == y) ++stats.correct;
    auto dr = delta.row(r);
    dr[y] -= 1.0;
    for (double& v : dr) v *= inv_b;
  }
  stats.grad = batch_backward(net, pass, std::move(delta));
  return stats;
}

inline std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

}  // namespace detail

inline double loss(const Mlp& net, const Dataset& data) {
  data.validate();
  detail::check_input(net, data.input_dim());
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    detail::check_label(net, data.labels[i]);
    const auto t = forward(net, data.sample(i));
    s += t.log_z - t.logits[data.labels[i]];
  }
  return s / static_cast<double>(data.size());
}

// Gradient of the mean softmax cross-entropy over `data`.
inline LayerGradients grad_loss(const Mlp& net, const Dataset& data) {
  data.validate();
  detail::check_input(net, data.input_dim());
  if (data.num_classes != net.num_classes())
    throw std::invalid_argument("grad_loss: dataset and network disagree on class count");
  return detail::batch_grad(net, data, detail::all_rows(data.size())).grad;
}

// Fraction of samples whose argmax logit equals the label; ties go to the
// smallest index.
inline double accuracy(const Mlp& net, const Dataset& data) {
  data.validate();
  detail::check_input(net, data.input_dim());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto t = forward(net, data.sample(i));
    if (detail::argmax(t.logits) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Mini-batch SGD with heavy-ball momentum and coupled L2 decay:
//   v <- mu v - lr (g + wd W);  W <- W + v.
// Batches come from a fresh seeded shuffle each epoch; the trailing partial
// batch is kept. `on_epoch` (optional) sees each epoch's log entry.
inline TrainResult train(Mlp net, const Dataset& data, const SgdConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  data.validate();
  net.validate();
  detail::check_input(net, data.input_dim());
  if (data.num_classes != net.num_classes())
    throw std::invalid_argument("train: dataset has " + std::to_string(data.num_classes) +
                                " classes, network has " + std::to_string(net.num_classes()));

  Rng rng(cfg.seed);
  std::vector<Matrix> velocity;
  for (const auto& w : net.weights()) velocity.emplace_back(w.rows(), w.cols());

  TrainResult result;
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(n, rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      auto stats = detail::batch_grad(
          net, data, std::span<const std::size_t>(order).subspan(begin, end - begin));
      loss_sum += stats.loss_sum;
      correct += stats.correct;
      for (std::size_t d = 0; d < net.num_layers(); ++d) {
        auto v = velocity[d].data();
        auto w = net.weight(d).data();
        auto g = stats.grad.per_layer[d].data();
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = cfg.momentum * v[i] - cfg.learning_rate * (g[i] + cfg.weight_decay * w[i]);
          w[i] += v[i];
        }
      }
    }
    EpochLog entry{epoch + 1, loss_sum / static_cast<double>(n),
                   static_cast<double>(correct) / static_cast<double>(n)};
    if (!std::isfinite(entry.loss)) {
      throw NumericError("train: loss became non-finite at epoch " + std::to_string(epoch + 1));
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  result.net = std::move(net);
  return result;
}

}  // namespace minsharp
