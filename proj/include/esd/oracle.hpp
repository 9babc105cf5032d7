#pragma once

// Desk-scale ground truth: the Eight Gaussians mixture, its analytic noisy score under
// Gaussian noise, and importance-sampled posteriors for generalized Gaussian noise.

#include "esd/identity.hpp"

#include <memory>

namespace esd {

/// Isotropic Gaussian mixture with a shared component standard deviation.
struct GaussianMixture {
  std::vector<Vec> means;
  double component_std = 0.1;
  Vec weights;

  /// Throws std::invalid_argument unless weights are a probability vector matching the means.
  void validate() const;
  Eigen::Index dim() const { return means.empty() ? 0 : means.front().size(); }
};

struct EightGaussiansConfig {
  double radius = 2.0;
  double component_std = 0.1;
  /// Empty means uniform.
  Vec weights;
};

/// Mixture with means radius * (cos(k pi/4), sin(k pi/4)), k = 0..7.
GaussianMixture eight_gaussians_mixture(const EightGaussiansConfig& config = {});

Batch sample_mixture(const GaussianMixture& mixture, Eigen::Index count, Rng& rng);

Batch eight_gaussians(const EightGaussiansConfig& config, Eigen::Index count, Rng& rng);

/// Index of the nearest component mean.
Eigen::Index nearest_component(const GaussianMixture& mixture, const Vec& x);

/// log m(y) up to a constant, m = mixture convolved with N(0, noise_cov).
double gmm_log_density_gaussian(const Vec& y, const GaussianMixture& mixture, const Mat& noise_cov);

/// Exact grad log m(y) for Gaussian noise (log-sum-exp stabilized responsibilities).
Vec gmm_noisy_score_gaussian(const Vec& y, const GaussianMixture& mixture, const Mat& noise_cov);

/// Exact E[X | Y = y] for Gaussian noise.
Vec gmm_posterior_mean_gaussian(const Vec& y, const GaussianMixture& mixture, const Mat& noise_cov);

/// Prior particles with self-normalized importance log-weights.
struct ParticleCloud {
  std::shared_ptr<const Batch> particles;
  Vec log_weights;

  /// Normalized weights (sum to one).
  Vec weights() const;
  double effective_sample_size() const;
  Vec mean() const;
  /// Multinomial resampling to an unweighted batch.
  Batch resample(Eigen::Index count, Rng& rng) const;
};

/// Reweights prior particles with the generalized Gaussian likelihood q(y - x_i).
/// Throws NumericError when the effective sample size drops below 2.
ParticleCloud is_posterior(const Vec& y, std::shared_ptr<const Batch> prior_particles, const GenGaussParams& params);

/// Self-normalized weighted score -lambda Sigma^{-1} sum_i w_i |y - x_i|^{beta-2} (y - x_i).
Vec is_noisy_score(const Vec& y, const ParticleCloud& cloud, const GenGaussParams& params);

/// Uniform lattice of size x size points over [lo, hi]^2, row-major (y1 outer).
Batch square_grid(Eigen::Index size, double lo = -3.0, double hi = 3.0);

/// Posterior draws by importance resampling of a fixed prior particle set; noise Sigma =
/// sigma^2 Sigma_0 with (beta, lambda, sigma) read from the requested level.
class IsPosteriorSampler : public PosteriorSampler {
 public:
  IsPosteriorSampler(std::shared_ptr<const Batch> prior, Mat base_sigma);
  Eigen::Index dim() const override { return prior_->cols(); }
  Batch sample(const Vec& y, const NoiseLevel& level, Eigen::Index count, Rng& rng) const override;
  GenGaussParams params(const NoiseLevel& level) const;

 private:
  std::shared_ptr<const Batch> prior_;
  Mat base_sigma_;
};

/// Exact posterior of a Gaussian mixture prior under Gaussian noise (beta = 2, lambda = 1
/// implied): a mixture of Gaussians. The level's beta and lambda are ignored.
class GmmGaussianPosterior : public PosteriorSampler {
 public:
  GmmGaussianPosterior(GaussianMixture mixture, Mat base_sigma);
  Eigen::Index dim() const override { return mixture_.dim(); }
  Batch sample(const Vec& y, const NoiseLevel& level, Eigen::Index count, Rng& rng) const override;

 private:
  GaussianMixture mixture_;
  Mat base_sigma_;
};

/// Posterior of a point-mass prior: every draw is x0.
class PointMassPosterior : public PosteriorSampler {
 public:
  explicit PointMassPosterior(Vec x0) : x0_(std::move(x0)) {}
  Eigen::Index dim() const override { return x0_.size(); }
  Batch sample(const Vec& y, const NoiseLevel& level, Eigen::Index count, Rng& rng) const override;

 private:
  Vec x0_;
};

/// Draws X = y: the Gaussian-case score estimate is identically zero.
class NullPosterior : public PosteriorSampler {
 public:
  explicit NullPosterior(Eigen::Index n) : n_(n) {}
  Eigen::Index dim() const override { return n_; }
  Batch sample(const Vec& y, const NoiseLevel& level, Eigen::Index count, Rng& rng) const override;

 private:
  Eigen::Index n_;
};

/// Standard normal prior with isotropic Gaussian noise sigma^2 I: posterior
/// N(y / (1 + sigma^2), sigma^2 / (1 + sigma^2) I). Draws come in antithetic pairs so the
/// sample mean of an even count equals the posterior mean up to rounding.
class ConjugateGaussianPosterior : public PosteriorSampler {
 public:
  explicit ConjugateGaussianPosterior(Eigen::Index n) : n_(n) {}
  Eigen::Index dim() const override { return n_; }
  Batch sample(const Vec& y, const NoiseLevel& level, Eigen::Index count, Rng& rng) const override;

 private:
  Eigen::Index n_;
};

}  // namespace esd
