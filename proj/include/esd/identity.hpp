#pragma once

// Score estimators built on the Energy-Score identity
//   s_m(y) = -(lambda / beta) grad^PD_y ES_{Sigma^-1, beta}(P(X | Y = y), y)
// and its Gaussian (Tweedie) reduction.

#include "esd/noise.hpp"
#include "esd/schedule.hpp"

#include <functional>
#include <vector>

namespace esd {

/// Monte-Carlo estimate of the noisy-marginal score s_m(y).
struct ScoreEstimate {
  Vec value;
  Eigen::Index n_samples = 0;
  GenGaussParams params;
};

/// Source of draws from P(X | Y = y) at a given noise level.
class PosteriorSampler {
 public:
  virtual ~PosteriorSampler() = default;

  virtual Eigen::Index dim() const = 0;

  /// Conditioning time at which the sampler sees noise scale sigma. Samplers that are
  /// parameterized by sigma directly return NaN.
  virtual double t_for_sigma(double sigma) const;

  /// `count` draws, one per row.
  virtual Batch sample(const Vec& y, const NoiseLevel& level, Eigen::Index count, Rng& rng) const = 0;

  /// Draws for several conditioning points; rows [i*count, (i+1)*count) belong to ys.row(i)
  /// and use rngs[i]. Override when a batched evaluation is cheaper.
  virtual Batch sample_many(const Batch& ys, const NoiseLevel& level, Eigen::Index count,
                            std::vector<Rng>& rngs) const;
};

/// -lambda Sigma^{-1} mean_i |y - X_i|^{beta-2}_{Sigma^-1} (y - X_i).
/// Throws SingularityError on an exact tie X_i == y when beta < 2.
ScoreEstimate noisy_score_mc(const Batch& posterior_samples, const Vec& y, const GenGaussParams& params);

/// -mean_i grad_y V(|y - X_i|_{Sigma^-1}) for an arbitrary central potential.
ScoreEstimate elliptic_score_mc(const Batch& posterior_samples, const Vec& y, const Potential& potential,
                                const GenGaussParams& params);

/// y + Sigma * score.
Vec tweedie_posterior_mean(const Vec& y, const Vec& score, const Mat& sigma);

/// Score estimate at the small scale eps with Sigma = eps^2 Sigma_0 (Sigma_0, beta, lambda taken
/// from params0). Approximates grad log p(y) with a bias that vanishes as eps -> 0.
Vec clean_score_eps(const PosteriorSampler& sampler, const Vec& y, double eps, const GenGaussParams& params0,
                    Eigen::Index count, Rng& rng);

/// (eps2^2 s(eps1) - eps1^2 s(eps2)) / (eps2^2 - eps1^2); cancels the O(eps^2) bias term.
Vec clean_score_richardson(const std::function<Vec(double)>& score_at_eps, double eps1, double eps2);

/// Builds the central-difference Jacobian J of f(y) = y + Sigma s(y) and returns
/// max |J^T Sigma^{-1} - Sigma^{-1} J|.
double denoiser_selfadjointness_residual(const std::function<Vec(const Vec&)>& score_field, const Vec& y,
                                         const Mat& sigma, double fd_step = 1e-4);

}  // namespace esd
