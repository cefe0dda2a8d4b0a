#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "minsharp/dataset.hpp"
#include "minsharp/linalg.hpp"
#include "minsharp/network.hpp"

namespace minsharp::testing {

inline double rel_err(double a, double b) {
  const double d = std::abs(a - b);
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? d : d / s;
}

// max |a - b| / max |b|
inline double max_rel_err(const Matrix& a, const Matrix& b) {
  const double ref = max_abs(b.data());
  const double diff = max_abs(sub(a, b).data());
  return ref == 0.0 ? diff : diff / ref;
}

inline Dataset gaussian_dataset(std::size_t n, std::size_t input_dim, std::size_t classes, Rng& rng) {
  Dataset d;
  d.num_classes = classes;
  d.features = gaussian_fill(rng, n, input_dim, 1.0);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(rng.below(classes));
  return d;
}

// Central differences of f with respect to every weight of `net`.
inline std::vector<Matrix> fd_gradient(const Mlp& net, const std::function<double(const Mlp&)>& f,
                                       double eps = 1e-5) {
  std::vector<Matrix> g;
  Mlp probe = net;
  for (std::size_t d = 0; d < net.num_layers(); ++d) {
    Matrix gd(net.weight(d).rows(), net.weight(d).cols());
    for (std::size_t k = 0; k < gd.size(); ++k) {
      const double w0 = net.weight(d).data()[k];
      probe.weight(d).data()[k] = w0 + eps;
      const double fp = f(probe);
      probe.weight(d).data()[k] = w0 - eps;
      const double fm = f(probe);
      probe.weight(d).data()[k] = w0;
      gd.data()[k] = (fp - fm) / (2.0 * eps);
    }
    g.push_back(std::move(gd));
  }
  return g;
}

// Smallest |pre-activation| over all hidden units and samples; finite
// differences are only trusted when this is well above eps.
inline double min_kink_distance(const Mlp& net, const Dataset& data) {
  double m = INFINITY;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Vector x(data.sample(i).begin(), data.sample(i).end());
    for (std::size_t d = 0; d + 1 < net.num_layers(); ++d) {
      Vector z(net.dims()[d + 1], 0.0);
      for (std::size_t r = 0; r < z.size(); ++r)
        for (std::size_t c = 0; c < x.size(); ++c) z[r] += net.weight(d)(r, c) * x[c];
      for (double v : z) m = std::min(m, std::abs(v));
      for (double& v : z) v = std::max(v, 0.0);
      x = z;
    }
  }
  return m;
}

}  // namespace minsharp::testing
