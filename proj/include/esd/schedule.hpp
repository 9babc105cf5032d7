#pragma once

#include "esd/noise.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace esd {

/// One rung of the noise ladder: Sigma_t = sigma^2 * Sigma_0.
struct NoiseLevel {
  double t = 1.0;
  double sigma = 1.0;
  double beta = 2.0;
  double lambda = 1.0;
};

enum class ScheduleKind { sigma_only_geometric };

/// t -> (sigma_t, beta_t, lambda_t) with sigma_t = sigma_min (sigma_max / sigma_min)^t,
/// plus the discrete ladder used by the sampler (sigma strictly decreasing).
class NoiseSchedule {
 public:
  NoiseSchedule(double sigma_max, double sigma_min, int levels, double beta, double lambda, Mat base_sigma);

  const std::vector<NoiseLevel>& levels() const { return levels_; }
  const Mat& base_sigma() const { return base_sigma_; }
  Eigen::Index dim() const { return base_sigma_.rows(); }
  double sigma_max() const { return sigma_max_; }
  double sigma_min() const { return sigma_min_; }
  double beta() const { return beta_; }
  double lambda() const { return lambda_; }

  double sigma_at(double t) const;
  double t_for_sigma(double sigma) const;
  NoiseLevel at(double t) const;
  NoiseLevel at_sigma(double sigma) const { return at(t_for_sigma(sigma)); }

  /// Noise parameters (beta, lambda, sigma^2 Sigma_0) of a level.
  GenGaussParams params(const NoiseLevel& level) const;

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
  /// Stable FNV-1a hash of the canonical JSON form, as 16 hex digits.
  std::string hash() const;

 private:
  double sigma_max_;
  double sigma_min_;
  double beta_;
  double lambda_;
  Mat base_sigma_;
  std::vector<NoiseLevel> levels_;
};

/// Geometric sigma ladder from sigma_max down to sigma_min; beta and lambda shared by all levels.
NoiseSchedule make_schedule(ScheduleKind kind, double sigma_max, double sigma_min, int levels, double beta,
                            double lambda, const Mat& base_sigma);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& bytes);
std::string hex64(std::uint64_t v);

}  // namespace esd
