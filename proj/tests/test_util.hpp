#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "af/param_store.hpp"
#include "af/rng.hpp"
#include "af/tensor.hpp"

namespace af::testutil {

inline void perturb_params(ParameterStore& store, double scale, RngStream& stream) {
  for (const auto& name : store.names()) {
    auto& t = store.get(name);
    for (std::int64_t i = 0; i < t.size(); ++i) t.mutable_array()[i] += scale * stream.normal();
  }
}

// Max relative error between backward() gradients and central differences,
// taken over every coordinate of every parameter in the given stores.
inline double param_fd_max_rel(const std::function<Tensor()>& value,
                               const std::vector<ParameterStore*>& stores, double h) {
  Tensor y = value();
  y.backward();
  std::vector<std::vector<Eigen::ArrayXd>> grads;
  for (auto* s : stores) {
    grads.emplace_back();
    for (const auto& name : s->names()) grads.back().push_back(s->get(name).grad());
  }
  double max_rel = 0.0;
  for (size_t si = 0; si < stores.size(); ++si) {
    auto* s = stores[si];
    for (size_t pi = 0; pi < s->names().size(); ++pi) {
      auto& p = s->get(s->names()[pi]);
      for (std::int64_t i = 0; i < p.size(); ++i) {
        const double orig = p.array()[i];
        p.mutable_array()[i] = orig + h;
        double up = value().scalar_value();
        p.mutable_array()[i] = orig - h;
        double dn = value().scalar_value();
        p.mutable_array()[i] = orig;
        double fd = (up - dn) / (2.0 * h);
        double rel = std::abs(grads[si][pi][i] - fd) / (std::abs(fd) + 1e-12);
        max_rel = std::max(max_rel, rel);
      }
    }
  }
  return max_rel;
}

// Column-by-column central-difference Jacobian of an R^n -> R^n map.
inline Eigen::MatrixXd numeric_jacobian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& fn,
                                        const Eigen::VectorXd& at, double h = 1e-6) {
  const auto n = at.size();
  Eigen::VectorXd probe = fn(at);
  Eigen::MatrixXd J(probe.size(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::VectorXd p = at, m = at;
    p[j] += h;
    m[j] -= h;
    J.col(j) = (fn(p) - fn(m)) / (2.0 * h);
  }
  return J;
}

}  // namespace af::testutil
