#include "esd/identity.hpp"

#include <cmath>
#include <limits>

namespace esd {

double PosteriorSampler::t_for_sigma(double /*sigma*/) const { return std::numeric_limits<double>::quiet_NaN(); }

Batch PosteriorSampler::sample_many(const Batch& ys, const NoiseLevel& level, Eigen::Index count,
                                    std::vector<Rng>& rngs) const {
  if (static_cast<Eigen::Index>(rngs.size()) != ys.rows()) {
    throw DimensionError("sample_many: one rng per conditioning point required");
  }
  Batch out(ys.rows() * count, dim());
  for (Eigen::Index i = 0; i < ys.rows(); ++i) {
    out.middleRows(i * count, count) = sample(ys.row(i).transpose(), level, count, rngs[static_cast<std::size_t>(i)]);
  }
  return out;
}

ScoreEstimate noisy_score_mc(const Batch& posterior_samples, const Vec& y, const GenGaussParams& params) {
  const auto n_samples = posterior_samples.rows();
  if (n_samples < 1) throw std::invalid_argument("noisy_score_mc: empty posterior batch");
  require_dim(posterior_samples.cols(), params.dim(), "noisy_score_mc samples");
  require_dim(y.size(), params.dim(), "noisy_score_mc y");
  const Mat& prec = params.sigma_inv();
  const double beta = params.beta();
  Vec acc = Vec::Zero(y.size());
  Vec d(y.size());
  for (Eigen::Index i = 0; i < n_samples; ++i) {
    d = y - posterior_samples.row(i).transpose();
    const double r2 = d.dot(prec * d);
    if (r2 == 0.0) {
      if (beta < 2.0) {
        throw SingularityError("noisy_score_mc: posterior sample " + std::to_string(i) + " ties with y (beta < 2)", i);
      }
      continue;
    }
    // |d|^{beta-2} = (r^2)^{(beta-2)/2}
    acc += (beta == 2.0 ? 1.0 : std::pow(r2, 0.5 * (beta - 2.0))) * d;
  }
  acc /= static_cast<double>(n_samples);
  return {-params.lambda() * (prec * acc), n_samples, params};
}

ScoreEstimate elliptic_score_mc(const Batch& posterior_samples, const Vec& y, const Potential& potential,
                                const GenGaussParams& params) {
  const auto n_samples = posterior_samples.rows();
  if (n_samples < 1) throw std::invalid_argument("elliptic_score_mc: empty posterior batch");
  require_dim(posterior_samples.cols(), params.dim(), "elliptic_score_mc samples");
  Vec acc = Vec::Zero(y.size());
  for (Eigen::Index i = 0; i < n_samples; ++i) {
    try {
      acc += elliptic_kernel_score(potential, y - posterior_samples.row(i).transpose(), params);
    } catch (const SingularityError&) {
      throw SingularityError("elliptic_score_mc: posterior sample " + std::to_string(i) + " ties with y", i);
    }
  }
  return {acc / static_cast<double>(n_samples), n_samples, params};
}

Vec tweedie_posterior_mean(const Vec& y, const Vec& score, const Mat& sigma) {
  require_dim(score.size(), y.size(), "tweedie_posterior_mean score");
  require_dim(sigma.rows(), y.size(), "tweedie_posterior_mean sigma");
  return y + sigma * score;
}

Vec clean_score_eps(const PosteriorSampler& sampler, const Vec& y, double eps, const GenGaussParams& params0,
                    Eigen::Index count, Rng& rng) {
  if (!(eps > 0.0)) throw std::invalid_argument("clean_score_eps: eps must be positive");
  const GenGaussParams scaled(params0.beta(), params0.lambda(), params0.sigma() * (eps * eps));
  const NoiseLevel level{sampler.t_for_sigma(eps), eps, params0.beta(), params0.lambda()};
  const Batch draws = sampler.sample(y, level, count, rng);
  return noisy_score_mc(draws, y, scaled).value;
}

Vec clean_score_richardson(const std::function<Vec(double)>& score_at_eps, double eps1, double eps2) {
  if (!(eps1 > 0.0) || !(eps2 > 0.0)) throw std::invalid_argument("clean_score_richardson: eps must be positive");
  if (eps1 == eps2) throw std::invalid_argument("clean_score_richardson: eps1 and eps2 must differ");
  const double e1 = eps1 * eps1;
  const double e2 = eps2 * eps2;
  const Vec s1 = score_at_eps(eps1);
  const Vec s2 = score_at_eps(eps2);
  require_dim(s2.size(), s1.size(), "clean_score_richardson");
  return (e2 * s1 - e1 * s2) / (e2 - e1);
}

double denoiser_selfadjointness_residual(const std::function<Vec(const Vec&)>& score_field, const Vec& y,
                                         const Mat& sigma, double fd_step) {
  const auto n = y.size();
  require_dim(sigma.rows(), n, "denoiser_selfadjointness_residual");
  auto denoise = [&](const Vec& v) -> Vec { return v + sigma * score_field(v); };
  Mat jac(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    Vec plus = y;
    Vec minus = y;
    plus(k) += fd_step;
    minus(k) -= fd_step;
    jac.col(k) = (denoise(plus) - denoise(minus)) / (2.0 * fd_step);
  }
  const Mat prec = sigma.llt().solve(Mat::Identity(n, n));
  return (jac.transpose() * prec - prec * jac).cwiseAbs().maxCoeff();
}

}  // namespace esd
