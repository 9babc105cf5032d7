#pragma once

// Mahalanobis energy scores (minimization convention), their path gradients,
// the energy distance and the conditionally-negative-definite quadratic form.

#include "esd/types.hpp"

namespace esd {

/// Parameters of ES_{Sigma^-1, beta}. Distances are |L d|_2 with Sigma^{-1} = L^T L.
struct EnergyScoreParams {
  double beta = 1.0;
  /// Empty means the identity.
  Mat sigma_inv_factor;

  /// Identity metric of any dimension.
  static EnergyScoreParams euclidean(double beta) { return {beta, Mat()}; }
  /// Metric Sigma^{-1} from a symmetric positive definite Sigma.
  static EnergyScoreParams mahalanobis(double beta, const Mat& sigma);

  /// |d|^beta in this metric.
  double distance_pow(const Eigen::Ref<const Vec>& d) const;
  /// Sigma^{-1} v (v itself for the identity metric).
  Vec apply_sigma_inv(const Vec& v) const;
};

/// Pairs closer than this count as coincident.
inline constexpr double kCoincidenceTolerance = 1e-12;

/// U-statistic estimate of ES(P, y) from N >= 2 samples of P:
/// mean_i |X_i - y|^beta - 1/2 * mean_{i != j} |X_i - X_j|^beta.
double energy_score_mc(const Batch& samples, const Vec& y, const EnergyScoreParams& es);

/// Path (fixed-measure) gradient in y of the estimate above:
/// -beta Sigma^{-1} mean_i |X_i - y|^{beta-2} (X_i - y).
/// Throws SingularityError naming the sample when X_i == y and beta < 2.
Vec energy_score_path_grad(const Batch& samples, const Vec& y, const EnergyScoreParams& es);

/// 2 E|X - Y|^beta - E|X - X'|^beta - E|Y - Y'|^beta with U-statistic
/// within-batch terms, clipped at zero. Both batches need >= 2 samples.
double energy_distance(const Batch& xs, const Batch& ys, const EnergyScoreParams& es);

/// sum_ij a_i a_j |x_i - x_j|^beta_{Sigma^-1}. Weights must sum to zero.
double cnd_quadratic_form(const Batch& points, const Vec& weights, double beta, const Mat& sigma);

}  // namespace esd
