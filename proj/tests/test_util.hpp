#pragma once

#include "esd/types.hpp"

#include <algorithm>
#include <cmath>

namespace esd::testing {

// A A^T + n I with A ~ N(0,1): well conditioned, anisotropic.
inline Mat random_spd(Eigen::Index n, Rng& rng) {
  Mat a(n, n);
  std::normal_distribution<double> normal;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = normal(rng);
  return a * a.transpose() + Mat::Identity(n, n) * static_cast<double>(n) * 0.5;
}

inline Batch random_batch(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Batch b(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) b(i, j) = normal(rng);
  return b;
}

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline double rel_err(const Vec& got, const Vec& want) {
  return (got - want).norm() / std::max(want.norm(), 1e-300);
}

}  // namespace esd::testing
