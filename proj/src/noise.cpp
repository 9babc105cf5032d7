#include "esd/noise.hpp"

#include <cmath>
#include <limits>

namespace esd {

GenGaussParams::GenGaussParams(double beta, double lambda, Mat sigma)
    : beta_(beta), lambda_(lambda), sigma_(std::move(sigma)) {
  if (!(beta_ > 0.0) || !std::isfinite(beta_)) {
    throw std::invalid_argument("GenGaussParams: beta must be positive and finite");
  }
  if (!(lambda_ > 0.0) || !std::isfinite(lambda_)) {
    throw std::invalid_argument("GenGaussParams: lambda must be positive and finite");
  }
  if (sigma_.rows() == 0 || sigma_.rows() != sigma_.cols()) {
    throw DimensionError("GenGaussParams: sigma must be a non-empty square matrix");
  }
  const double scale = std::max(sigma_.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  if ((sigma_ - sigma_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw std::invalid_argument("GenGaussParams: sigma must be symmetric");
  }
  sigma_ = 0.5 * (sigma_ + sigma_.transpose());
  Eigen::LLT<Mat> llt(sigma_);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument("GenGaussParams: sigma must be positive definite");
  }
  chol_ = llt.matrixL();
  const auto n = sigma_.rows();
  whiten_ = chol_.triangularView<Eigen::Lower>().solve(Mat::Identity(n, n));
  sigma_inv_ = whiten_.transpose() * whiten_;
}

GenGaussParams GenGaussParams::isotropic(double beta, double lambda, double scale, Eigen::Index n) {
  return {beta, lambda, Mat::Identity(n, n) * (scale * scale)};
}

nlohmann::json GenGaussParams::to_json() const {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(sigma_.size()));
  for (Eigen::Index i = 0; i < sigma_.rows(); ++i)
    for (Eigen::Index j = 0; j < sigma_.cols(); ++j) flat.push_back(sigma_(i, j));
  return {{"beta", beta_}, {"lambda", lambda_}, {"sigma", flat}};
}

GenGaussParams GenGaussParams::from_json(const nlohmann::json& j) {
  const auto flat = j.at("sigma").get<std::vector<double>>();
  const auto n = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(flat.size()))));
  if (n * n != static_cast<Eigen::Index>(flat.size()) || n == 0) {
    throw DimensionError("GenGaussParams: sigma array is not a square matrix");
  }
  Mat sigma(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < n; ++k) sigma(i, k) = flat[static_cast<std::size_t>(i * n + k)];
  return {j.at("beta").get<double>(), j.at("lambda").get<double>(), std::move(sigma)};
}

Potential::Potential(Kind kind) : kind_(kind) {
  if (const auto* p = std::get_if<PowerLaw>(&kind_)) {
    if (!(p->beta > 0.0) || !(p->lambda > 0.0)) throw std::invalid_argument("PowerLaw: beta, lambda must be > 0");
  } else {
    const auto& s = std::get<StudentT>(kind_);
    if (!(s.nu > 0.0) || !(s.n > 0.0)) throw std::invalid_argument("StudentT: nu, n must be > 0");
  }
}

double Potential::v(double r) const {
  if (const auto* p = std::get_if<PowerLaw>(&kind_)) return p->lambda * std::pow(r, p->beta) / p->beta;
  const auto& s = std::get<StudentT>(kind_);
  return 0.5 * (s.nu + s.n) * std::log1p(r * r / s.nu);
}

double Potential::v_prime(double r) const {
  if (const auto* p = std::get_if<PowerLaw>(&kind_)) return p->lambda * std::pow(r, p->beta - 1.0);
  const auto& s = std::get<StudentT>(kind_);
  return 0.5 * (s.nu + s.n) * (2.0 * r / s.nu) / (1.0 + r * r / s.nu);
}

double Potential::v_prime_over_r(double r) const {
  if (const auto* p = std::get_if<PowerLaw>(&kind_)) {
    if (r == 0.0) {
      if (p->beta < 2.0) throw SingularityError("power-law kernel score is singular at u = 0 for beta < 2");
      return p->beta == 2.0 ? p->lambda : 0.0;
    }
    return p->lambda * std::pow(r, p->beta - 2.0);
  }
  const auto& s = std::get<StudentT>(kind_);
  return 0.5 * (s.nu + s.n) * (2.0 / s.nu) / (1.0 + r * r / s.nu);
}

double mahalanobis_norm(const Vec& u, const GenGaussParams& params) {
  require_dim(u.size(), params.dim(), "mahalanobis_norm");
  return (params.whitening().triangularView<Eigen::Lower>() * u).norm();
}

double gg_log_density_unnorm(const GenGaussParams& params, const Vec& u) {
  const double r = mahalanobis_norm(u, params);
  return -(params.lambda() / params.beta()) * std::pow(r, params.beta());
}

double log_density_unnorm(const Potential& potential, const Vec& u, const GenGaussParams& params) {
  return -potential.v(mahalanobis_norm(u, params));
}

Vec elliptic_kernel_score(const Potential& potential, const Vec& u, const GenGaussParams& params) {
  const double r = mahalanobis_norm(u, params);
  if (r == 0.0) {
    // Bounded ratio times a zero vector; throws for singular potentials.
    potential.v_prime_over_r(0.0);
    return Vec::Zero(u.size());
  }
  return -potential.v_prime_over_r(r) * (params.sigma_inv() * u);
}

Vec gg_sample_whitened(double beta, double lambda, Eigen::Index n, Rng& rng) {
  std::gamma_distribution<double> gamma(static_cast<double>(n) / beta, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double t = gamma(rng);
  const double r = std::pow(beta * t / lambda, 1.0 / beta);
  Vec s(n);
  double norm = 0.0;
  do {
    for (Eigen::Index i = 0; i < n; ++i) s(i) = normal(rng);
    norm = s.norm();
  } while (norm == 0.0);
  return (r / norm) * s;
}

Batch gg_sample(const GenGaussParams& params, Eigen::Index count, Rng& rng) {
  if (count < 1) throw std::invalid_argument("gg_sample: count must be >= 1");
  const auto n = params.dim();
  Batch out(count, n);
  const auto c = params.sqrt_sigma().triangularView<Eigen::Lower>();
  for (Eigen::Index i = 0; i < count; ++i) {
    out.row(i) = (c * gg_sample_whitened(params.beta(), params.lambda(), n, rng)).transpose();
  }
  return out;
}

}  // namespace esd
