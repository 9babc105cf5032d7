#include "esd/oracle.hpp"

#include <cmath>
#include <numbers>

namespace esd {

void GaussianMixture::validate() const {
  if (means.empty()) throw std::invalid_argument("GaussianMixture: no components");
  if (weights.size() != static_cast<Eigen::Index>(means.size())) {
    throw std::invalid_argument("GaussianMixture: one weight per component required");
  }
  if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-12) {
    throw std::invalid_argument("GaussianMixture: weights must be nonnegative and sum to 1");
  }
  if (!(component_std > 0.0)) throw std::invalid_argument("GaussianMixture: component_std must be positive");
  for (const auto& m : means) require_dim(m.size(), dim(), "GaussianMixture means");
}

GaussianMixture eight_gaussians_mixture(const EightGaussiansConfig& config) {
  GaussianMixture mix;
  for (int k = 0; k < 8; ++k) {
    const double angle = k * std::numbers::pi / 4.0;
    Vec m(2);
    m << config.radius * std::cos(angle), config.radius * std::sin(angle);
    mix.means.push_back(m);
  }
  mix.component_std = config.component_std;
  mix.weights = config.weights.size() == 0 ? Vec::Constant(8, 1.0 / 8.0) : config.weights;
  mix.validate();
  return mix;
}

Batch sample_mixture(const GaussianMixture& mixture, Eigen::Index count, Rng& rng) {
  if (count < 1) throw std::invalid_argument("sample_mixture: count must be >= 1");
  mixture.validate();
  std::discrete_distribution<Eigen::Index> pick(mixture.weights.data(),
                                                mixture.weights.data() + mixture.weights.size());
  std::normal_distribution<double> normal(0.0, mixture.component_std);
  const auto n = mixture.dim();
  Batch out(count, n);
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto k = pick(rng);
    for (Eigen::Index d = 0; d < n; ++d) out(i, d) = mixture.means[static_cast<std::size_t>(k)](d) + normal(rng);
  }
  return out;
}

Batch eight_gaussians(const EightGaussiansConfig& config, Eigen::Index count, Rng& rng) {
  return sample_mixture(eight_gaussians_mixture(config), count, rng);
}

Eigen::Index nearest_component(const GaussianMixture& mixture, const Vec& x) {
  Eigen::Index best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < mixture.means.size(); ++k) {
    const double d = (x - mixture.means[k]).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<Eigen::Index>(k);
    }
  }
  return best;
}

namespace {

struct MixtureTerms {
  Mat cov_inv;
  Vec log_terms;  // log pi_k - 1/2 (y - mu_k)^T C^{-1} (y - mu_k)
  double log_norm = 0.0;
};

MixtureTerms mixture_terms(const Vec& y, const GaussianMixture& mixture, const Mat& noise_cov) {
  mixture.validate();
  const auto n = mixture.dim();
  require_dim(y.size(), n, "gmm y");
  require_dim(noise_cov.rows(), n, "gmm noise_cov");
  const Mat cov = Mat::Identity(n, n) * (mixture.component_std * mixture.component_std) + noise_cov;
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success) throw std::invalid_argument("gmm: noise covariance not SPD");
  MixtureTerms t;
  t.cov_inv = llt.solve(Mat::Identity(n, n));
  t.log_terms.resize(static_cast<Eigen::Index>(mixture.means.size()));
  for (std::size_t k = 0; k < mixture.means.size(); ++k) {
    const Vec d = y - mixture.means[k];
    const double w = mixture.weights(static_cast<Eigen::Index>(k));
    t.log_terms(static_cast<Eigen::Index>(k)) =
        (w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity()) - 0.5 * d.dot(t.cov_inv * d);
  }
  const double mx = t.log_terms.maxCoeff();
  t.log_norm = mx + std::log((t.log_terms.array() - mx).exp().sum());
  return t;
}

}  // namespace

double gmm_log_density_gaussian(const Vec& y, const GaussianMixture& mixture, const Mat& noise_cov) {
  return mixture_terms(y, mixture, noise_cov).log_norm;
}

Vec gmm_noisy_score_gaussian(const Vec& y, const GaussianMixture& mixture, const Mat& noise_cov) {
  const auto t = mixture_terms(y, mixture, noise_cov);
  Vec mean_mu = Vec::Zero(y.size());
  for (std::size_t k = 0; k < mixture.means.size(); ++k) {
    mean_mu += std::exp(t.log_terms(static_cast<Eigen::Index>(k)) - t.log_norm) * mixture.means[k];
  }
  return -t.cov_inv * (y - mean_mu);
}

Vec gmm_posterior_mean_gaussian(const Vec& y, const GaussianMixture& mixture, const Mat& noise_cov) {
  const auto t = mixture_terms(y, mixture, noise_cov);
  const double s2 = mixture.component_std * mixture.component_std;
  Vec out = Vec::Zero(y.size());
  for (std::size_t k = 0; k < mixture.means.size(); ++k) {
    const Vec mk = mixture.means[k] + s2 * (t.cov_inv * (y - mixture.means[k]));
    out += std::exp(t.log_terms(static_cast<Eigen::Index>(k)) - t.log_norm) * mk;
  }
  return out;
}

Vec ParticleCloud::weights() const {
  const double mx = log_weights.maxCoeff();
  Vec w = (log_weights.array() - mx).exp().matrix();
  return w / w.sum();
}

double ParticleCloud::effective_sample_size() const {
  const Vec w = weights();
  return 1.0 / w.squaredNorm();
}

Vec ParticleCloud::mean() const { return particles->transpose() * weights(); }

Batch ParticleCloud::resample(Eigen::Index count, Rng& rng) const {
  if (count < 1) throw std::invalid_argument("ParticleCloud::resample: count must be >= 1");
  const Vec w = weights();
  std::discrete_distribution<Eigen::Index> pick(w.data(), w.data() + w.size());
  Batch out(count, particles->cols());
  for (Eigen::Index i = 0; i < count; ++i) out.row(i) = particles->row(pick(rng));
  return out;
}

ParticleCloud is_posterior(const Vec& y, std::shared_ptr<const Batch> prior_particles, const GenGaussParams& params) {
  if (!prior_particles || prior_particles->rows() == 0) throw std::invalid_argument("is_posterior: no prior particles");
  require_dim(prior_particles->cols(), params.dim(), "is_posterior particles");
  require_dim(y.size(), params.dim(), "is_posterior y");
  const Batch& xs = *prior_particles;
  const auto count = xs.rows();
  // Whitened residuals: rows of (y - x_i)^T L^T.
  const Batch white = (xs.rowwise() - y.transpose()) * (-params.whitening().transpose());
  const double scale = params.lambda() / params.beta();
  const double half_beta = 0.5 * params.beta();
  ParticleCloud cloud{std::move(prior_particles), Vec(count)};
  for (Eigen::Index i = 0; i < count; ++i) {
    const double r2 = white.row(i).squaredNorm();
    cloud.log_weights(i) = -scale * (half_beta == 1.0 ? r2 : std::pow(r2, half_beta));
  }
  cloud.log_weights.array() -= cloud.log_weights.maxCoeff();
  const double ess = cloud.effective_sample_size();
  if (!(ess >= 2.0)) {
    throw NumericError("is_posterior: effective sample size " + std::to_string(ess) +
                       " < 2; increase the particle count or the noise scale");
  }
  return cloud;
}

Vec is_noisy_score(const Vec& y, const ParticleCloud& cloud, const GenGaussParams& params) {
  const double ess = cloud.effective_sample_size();
  if (!(ess >= 2.0)) throw NumericError("is_noisy_score: effective sample size below 2");
  const Vec w = cloud.weights();
  const Batch& xs = *cloud.particles;
  const Mat& prec = params.sigma_inv();
  const double beta = params.beta();
  Vec acc = Vec::Zero(y.size());
  Vec d(y.size());
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    if (w(i) == 0.0) continue;
    d = y - xs.row(i).transpose();
    const double r2 = d.dot(prec * d);
    if (r2 == 0.0) {
      if (beta < 2.0) throw SingularityError("is_noisy_score: particle ties with y (beta < 2)", i);
      continue;
    }
    acc += w(i) * (beta == 2.0 ? 1.0 : std::pow(r2, 0.5 * (beta - 2.0))) * d;
  }
  return -params.lambda() * (prec * acc);
}

Batch square_grid(Eigen::Index size, double lo, double hi) {
  if (size < 2) throw std::invalid_argument("square_grid: size must be >= 2");
  Batch out(size * size, 2);
  // Convex combination so both ends land exactly on lo and hi.
  const auto at = [&](Eigen::Index k) {
    const double w = static_cast<double>(k) / static_cast<double>(size - 1);
    return (1.0 - w) * lo + w * hi;
  };
  for (Eigen::Index i = 0; i < size; ++i) {
    for (Eigen::Index j = 0; j < size; ++j) {
      out(i * size + j, 0) = at(j);
      out(i * size + j, 1) = at(i);
    }
  }
  return out;
}

IsPosteriorSampler::IsPosteriorSampler(std::shared_ptr<const Batch> prior, Mat base_sigma)
    : prior_(std::move(prior)), base_sigma_(std::move(base_sigma)) {
  if (!prior_ || prior_->rows() == 0) throw std::invalid_argument("IsPosteriorSampler: no prior particles");
  require_dim(base_sigma_.rows(), prior_->cols(), "IsPosteriorSampler base_sigma");
}

GenGaussParams IsPosteriorSampler::params(const NoiseLevel& level) const {
  return {level.beta, level.lambda, base_sigma_ * (level.sigma * level.sigma)};
}

Batch IsPosteriorSampler::sample(const Vec& y, const NoiseLevel& level, Eigen::Index count, Rng& rng) const {
  return is_posterior(y, prior_, params(level)).resample(count, rng);
}

GmmGaussianPosterior::GmmGaussianPosterior(GaussianMixture mixture, Mat base_sigma)
    : mixture_(std::move(mixture)), base_sigma_(std::move(base_sigma)) {
  mixture_.validate();
  require_dim(base_sigma_.rows(), mixture_.dim(), "GmmGaussianPosterior base_sigma");
}

Batch GmmGaussianPosterior::sample(const Vec& y, const NoiseLevel& level, Eigen::Index count, Rng& rng) const {
  const auto n = mixture_.dim();
  const Mat noise_cov = base_sigma_ * (level.sigma * level.sigma);
  const auto t = mixture_terms(y, mixture_, noise_cov);
  const double s2 = mixture_.component_std * mixture_.component_std;
  // Component posterior covariance s^2 I - s^4 C^{-1}, shared by all components.
  const Mat post_cov = Mat::Identity(n, n) * s2 - (s2 * s2) * t.cov_inv;
  const Mat chol = post_cov.llt().matrixL();
  const Vec resp = (t.log_terms.array() - t.log_norm).exp().matrix();
  std::discrete_distribution<Eigen::Index> pick(resp.data(), resp.data() + resp.size());
  Batch out(count, n);
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto k = static_cast<std::size_t>(pick(rng));
    const Vec mk = mixture_.means[k] + s2 * (t.cov_inv * (y - mixture_.means[k]));
    out.row(i) = (mk + chol * standard_normal(n, rng)).transpose();
  }
  return out;
}

Batch PointMassPosterior::sample(const Vec& y, const NoiseLevel& /*level*/, Eigen::Index count,
                                 Rng& /*rng*/) const {
  require_dim(y.size(), x0_.size(), "PointMassPosterior");
  return x0_.transpose().replicate(count, 1);
}

Batch NullPosterior::sample(const Vec& y, const NoiseLevel& /*level*/, Eigen::Index count, Rng& /*rng*/) const {
  require_dim(y.size(), n_, "NullPosterior");
  return y.transpose().replicate(count, 1);
}

Batch ConjugateGaussianPosterior::sample(const Vec& y, const NoiseLevel& level, Eigen::Index count,
                                         Rng& rng) const {
  require_dim(y.size(), n_, "ConjugateGaussianPosterior");
  const double s2 = level.sigma * level.sigma;
  const Vec mean = y / (1.0 + s2);
  const double sd = std::sqrt(s2 / (1.0 + s2));
  Batch out(count, n_);
  for (Eigen::Index i = 0; i + 1 < count; i += 2) {
    const Vec dev = sd * standard_normal(n_, rng);
    out.row(i) = (mean + dev).transpose();
    out.row(i + 1) = (mean - dev).transpose();
  }
  if (count % 2 == 1) out.row(count - 1) = mean.transpose();
  return out;
}

}  // namespace esd
