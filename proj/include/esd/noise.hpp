#pragma once

// Elliptical noise: the generalized Gaussian q(u) ~ exp(-(lambda/beta) |u|^beta_{Sigma^-1})
// and central potentials V of the Mahalanobis norm.

#include "esd/types.hpp"

#include <json.hpp>

#include <variant>

namespace esd {

/// Noise triple (beta, lambda, Sigma) with a cached factorization of Sigma.
class GenGaussParams {
 public:
  /// Throws std::invalid_argument for beta <= 0, lambda <= 0 or a Sigma that is
  /// not symmetric positive definite.
  GenGaussParams(double beta, double lambda, Mat sigma);

  /// beta, lambda and Sigma = scale^2 * I_n.
  static GenGaussParams isotropic(double beta, double lambda, double scale, Eigen::Index n);

  double beta() const { return beta_; }
  double lambda() const { return lambda_; }
  Eigen::Index dim() const { return sigma_.rows(); }

  const Mat& sigma() const { return sigma_; }
  const Mat& sigma_inv() const { return sigma_inv_; }
  /// Lower Cholesky factor C with Sigma = C C^T.
  const Mat& sqrt_sigma() const { return chol_; }
  /// Whitening factor L = C^{-1}; Sigma^{-1} = L^T L.
  const Mat& whitening() const { return whiten_; }

  nlohmann::json to_json() const;
  static GenGaussParams from_json(const nlohmann::json& j);

 private:
  double beta_;
  double lambda_;
  Mat sigma_;
  Mat sigma_inv_;
  Mat chol_;
  Mat whiten_;
};

/// V(r) = lambda r^beta / beta.
struct PowerLaw {
  double beta;
  double lambda;
};

/// V(r) = ((nu + n) / 2) log(1 + r^2 / nu).
struct StudentT {
  double nu;
  double n;
};

/// Central potential V of the Mahalanobis radius.
class Potential {
 public:
  using Kind = std::variant<PowerLaw, StudentT>;

  Potential(Kind kind);  // NOLINT(google-explicit-constructor)

  static Potential power_law(double beta, double lambda) { return Potential(PowerLaw{beta, lambda}); }
  static Potential student_t(double nu, double n) { return Potential(StudentT{nu, n}); }
  /// Power law matching the generalized Gaussian parameters.
  static Potential of(const GenGaussParams& p) { return power_law(p.beta(), p.lambda()); }

  double v(double r) const;
  double v_prime(double r) const;
  /// V'(r)/r. Throws SingularityError at r = 0 when the ratio is unbounded.
  double v_prime_over_r(double r) const;

  const Kind& kind() const { return kind_; }

 private:
  Kind kind_;
};

/// |u|_{Sigma^-1} = |L u|_2.
double mahalanobis_norm(const Vec& u, const GenGaussParams& params);

/// Unnormalized log-density -(lambda/beta)|u|^beta_{Sigma^-1}.
double gg_log_density_unnorm(const GenGaussParams& params, const Vec& u);

/// -V(|u|_{Sigma^-1}) for an arbitrary potential.
double log_density_unnorm(const Potential& potential, const Vec& u, const GenGaussParams& params);

/// Score of the noising kernel, -(V'(r)/r) Sigma^{-1} u with r = |u|_{Sigma^-1}.
/// At u = 0 returns 0 when V'(r)/r stays bounded, otherwise throws SingularityError.
Vec elliptic_kernel_score(const Potential& potential, const Vec& u, const GenGaussParams& params);

/// `count` exact i.i.d. draws, one per row.
///
/// Radial-directional construction: with t ~ Gamma(n/beta, 1) the radius
/// r = (beta t / lambda)^{1/beta} has density proportional to
/// r^{n-1} exp(-lambda r^beta / beta), which combined with a uniform direction
/// s on the sphere and the map u = C r s gives the target density.
Batch gg_sample(const GenGaussParams& params, Eigen::Index count, Rng& rng);

/// One draw in whitened coordinates (Sigma = I).
Vec gg_sample_whitened(double beta, double lambda, Eigen::Index n, Rng& rng);

}  // namespace esd
