// Shared helpers for the unit and acceptance suites: finite differences and a
// tiny model configuration that keeps gradient checks fast.

#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "agm/autodiff.hpp"
#include "agm/model.hpp"

namespace agm::testing {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.max_seq_len = 6;
  c.hidden_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.dropout = 0.0;
  return c;
}

inline ad::Matrix random_matrix(Eigen::Index r, Eigen::Index c,
                                std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  ad::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Central differences of a scalar function with respect to every entry of
// `target`, which is perturbed in place and restored.
inline ad::Matrix numeric_gradient(const std::function<double()>& f,
                                   ad::Matrix& target, double h = 1e-6) {
  ad::Matrix g(target.rows(), target.cols());
  for (Eigen::Index i = 0; i < target.size(); ++i) {
    const double saved = target.data()[i];
    target.data()[i] = saved + h;
    const double up = f();
    target.data()[i] = saved - h;
    const double down = f();
    target.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||), with an absolute floor so that two
// (numerically) zero gradients compare equal.
inline double relative_error(const ad::Matrix& a, const ad::Matrix& b,
                             double floor = 1e-9) {
  const double diff = (a - b).norm();
  const double scale = std::max({a.norm(), b.norm(), floor});
  if (diff < floor) return 0.0;
  return diff / scale;
}

}  // namespace agm::testing
