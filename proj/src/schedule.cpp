#include "esd/schedule.hpp"

#include <cmath>
#include <cstdio>

namespace esd {

NoiseSchedule::NoiseSchedule(double sigma_max, double sigma_min, int levels, double beta, double lambda,
                             Mat base_sigma)
    : sigma_max_(sigma_max),
      sigma_min_(sigma_min),
      beta_(beta),
      lambda_(lambda),
      base_sigma_(std::move(base_sigma)) {
  if (!(sigma_max_ > sigma_min_) || !(sigma_min_ > 0.0)) {
    throw std::invalid_argument("NoiseSchedule: need sigma_max > sigma_min > 0");
  }
  if (sigma_max_ > 1.0) throw std::invalid_argument("NoiseSchedule: sigma_max must be <= 1");
  if (levels < 2) throw std::invalid_argument("NoiseSchedule: need at least 2 levels");
  // Validates beta, lambda and Sigma_0.
  (void)GenGaussParams(beta_, lambda_, base_sigma_);
  levels_.reserve(static_cast<std::size_t>(levels));
  const double ratio = sigma_min_ / sigma_max_;
  for (int k = 0; k < levels; ++k) {
    const double frac = static_cast<double>(k) / static_cast<double>(levels - 1);
    NoiseLevel level;
    level.t = 1.0 - frac;
    level.sigma = k == 0 ? sigma_max_ : (k == levels - 1 ? sigma_min_ : sigma_max_ * std::pow(ratio, frac));
    level.beta = beta_;
    level.lambda = lambda_;
    levels_.push_back(level);
  }
}

double NoiseSchedule::sigma_at(double t) const { return sigma_min_ * std::pow(sigma_max_ / sigma_min_, t); }

double NoiseSchedule::t_for_sigma(double sigma) const {
  if (!(sigma > 0.0)) throw std::invalid_argument("NoiseSchedule: sigma must be positive");
  return std::log(sigma / sigma_min_) / std::log(sigma_max_ / sigma_min_);
}

NoiseLevel NoiseSchedule::at(double t) const { return {t, sigma_at(t), beta_, lambda_}; }

GenGaussParams NoiseSchedule::params(const NoiseLevel& level) const {
  return {level.beta, level.lambda, base_sigma_ * (level.sigma * level.sigma)};
}

nlohmann::json NoiseSchedule::to_json() const {
  std::vector<double> base;
  for (Eigen::Index i = 0; i < base_sigma_.rows(); ++i)
    for (Eigen::Index j = 0; j < base_sigma_.cols(); ++j) base.push_back(base_sigma_(i, j));
  return {{"kind", "sigma_only_geometric"},
          {"sigma_max", sigma_max_},
          {"sigma_min", sigma_min_},
          {"levels", levels_.size()},
          {"beta", beta_},
          {"lambda", lambda_},
          {"base_sigma", base}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  if (j.value("kind", std::string("sigma_only_geometric")) != "sigma_only_geometric") {
    throw std::invalid_argument("NoiseSchedule: unknown kind");
  }
  const auto base = j.at("base_sigma").get<std::vector<double>>();
  const auto n = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(base.size()))));
  if (n * n != static_cast<Eigen::Index>(base.size())) throw DimensionError("NoiseSchedule: base_sigma not square");
  Mat sigma(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < n; ++k) sigma(i, k) = base[static_cast<std::size_t>(i * n + k)];
  return {j.at("sigma_max").get<double>(), j.at("sigma_min").get<double>(), j.at("levels").get<int>(),
          j.at("beta").get<double>(),      j.at("lambda").get<double>(),    std::move(sigma)};
}

std::string NoiseSchedule::hash() const { return hex64(fnv1a(to_json().dump())); }

NoiseSchedule make_schedule(ScheduleKind kind, double sigma_max, double sigma_min, int levels, double beta,
                            double lambda, const Mat& base_sigma) {
  switch (kind) {
    case ScheduleKind::sigma_only_geometric:
      return {sigma_max, sigma_min, levels, beta, lambda, base_sigma};
  }
  throw std::invalid_argument("make_schedule: unknown kind");
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace esd
