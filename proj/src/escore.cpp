#include "esd/escore.hpp"

#include <cmath>

namespace esd {

namespace {

void check_batch(const Batch& b, Eigen::Index n, const char* what) {
  if (b.cols() != n) require_dim(b.cols(), n, what);
}

// Sum of |x_i - x_j|^beta over i < j.
double pairwise_sum(const Batch& xs, const EnergyScoreParams& es) {
  double total = 0.0;
  Vec d(xs.cols());
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < xs.rows(); ++j) {
      d = (xs.row(i) - xs.row(j)).transpose();
      total += es.distance_pow(d);
    }
  }
  return total;
}

double cross_mean(const Batch& xs, const Batch& ys, const EnergyScoreParams& es) {
  double total = 0.0;
  Vec d(xs.cols());
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    for (Eigen::Index j = 0; j < ys.rows(); ++j) {
      d = (xs.row(i) - ys.row(j)).transpose();
      total += es.distance_pow(d);
    }
  }
  return total / (static_cast<double>(xs.rows()) * static_cast<double>(ys.rows()));
}

}  // namespace

EnergyScoreParams EnergyScoreParams::mahalanobis(double beta, const Mat& sigma) {
  Eigen::LLT<Mat> llt(sigma);
  if (llt.info() != Eigen::Success) throw std::invalid_argument("EnergyScoreParams: sigma not SPD");
  const Mat c = llt.matrixL();
  return {beta, c.triangularView<Eigen::Lower>().solve(Mat::Identity(sigma.rows(), sigma.cols()))};
}

double EnergyScoreParams::distance_pow(const Eigen::Ref<const Vec>& d) const {
  const double r = sigma_inv_factor.size() == 0 ? d.norm() : (sigma_inv_factor * d).norm();
  if (r < kCoincidenceTolerance) return 0.0;
  if (beta == 1.0) return r;
  return beta == 2.0 ? r * r : std::pow(r, beta);
}

Vec EnergyScoreParams::apply_sigma_inv(const Vec& v) const {
  if (sigma_inv_factor.size() == 0) return v;
  return sigma_inv_factor.transpose() * (sigma_inv_factor * v);
}

double energy_score_mc(const Batch& samples, const Vec& y, const EnergyScoreParams& es) {
  const auto n_samples = samples.rows();
  if (n_samples < 2) throw std::invalid_argument("energy_score_mc: need at least 2 samples");
  check_batch(samples, y.size(), "energy_score_mc");
  double first = 0.0;
  for (Eigen::Index i = 0; i < n_samples; ++i) {
    first += es.distance_pow((samples.row(i).transpose() - y).eval());
  }
  first /= static_cast<double>(n_samples);
  // sum_{i != j} = 2 sum_{i < j}
  const double pair_mean =
      2.0 * pairwise_sum(samples, es) / (static_cast<double>(n_samples) * static_cast<double>(n_samples - 1));
  return first - 0.5 * pair_mean;
}

Vec energy_score_path_grad(const Batch& samples, const Vec& y, const EnergyScoreParams& es) {
  const auto n_samples = samples.rows();
  if (n_samples < 1) throw std::invalid_argument("energy_score_path_grad: empty sample batch");
  check_batch(samples, y.size(), "energy_score_path_grad");
  Vec acc = Vec::Zero(y.size());
  for (Eigen::Index i = 0; i < n_samples; ++i) {
    const Vec d = samples.row(i).transpose() - y;
    const double r = es.sigma_inv_factor.size() == 0 ? d.norm() : (es.sigma_inv_factor * d).norm();
    if (r < kCoincidenceTolerance) {
      if (es.beta < 2.0) {
        throw SingularityError("energy_score_path_grad: sample " + std::to_string(i) +
                                   " coincides with y (beta < 2)",
                               i);
      }
      continue;
    }
    acc += std::pow(r, es.beta - 2.0) * d;
  }
  return -es.beta * es.apply_sigma_inv(acc / static_cast<double>(n_samples));
}

double energy_distance(const Batch& xs, const Batch& ys, const EnergyScoreParams& es) {
  if (xs.rows() < 2 || ys.rows() < 2) throw std::invalid_argument("energy_distance: need >= 2 samples per batch");
  check_batch(ys, xs.cols(), "energy_distance");
  const auto nx = static_cast<double>(xs.rows());
  const auto ny = static_cast<double>(ys.rows());
  const double within_x = 2.0 * pairwise_sum(xs, es) / (nx * (nx - 1.0));
  const double within_y = 2.0 * pairwise_sum(ys, es) / (ny * (ny - 1.0));
  // Both summation orders, combined commutatively, keep the result exactly symmetric.
  const double cross = cross_mean(xs, ys, es) + cross_mean(ys, xs, es);
  return std::max(0.0, cross - (within_x + within_y));
}

double cnd_quadratic_form(const Batch& points, const Vec& weights, double beta, const Mat& sigma) {
  require_dim(weights.size(), points.rows(), "cnd_quadratic_form weights");
  require_dim(sigma.rows(), points.cols(), "cnd_quadratic_form sigma");
  if (std::abs(weights.sum()) >= 1e-12) throw std::invalid_argument("cnd_quadratic_form: weights must sum to zero");
  const auto es = EnergyScoreParams::mahalanobis(beta, sigma);
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < points.rows(); ++j) {
      total += 2.0 * weights(i) * weights(j) * es.distance_pow((points.row(i) - points.row(j)).transpose().eval());
    }
  }
  return total;
}

}  // namespace esd
