#pragma once

// Annealed Langevin generation driven by the Monte-Carlo score estimate.

#include "esd/escore.hpp"
#include "esd/identity.hpp"
#include "esd/schedule.hpp"

#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace esd {

struct SamplerConfig {
  int steps_per_level = 50;
  /// alpha_k = base_step_size * sigma_k^2 / sigma_min^2.
  double base_step_size = 2e-5;
  /// Posterior draws per score evaluation.
  Eigen::Index posterior_draws = 128;
  /// Finish with y <- y + sigma_L^2 Sigma_0 s(y) at the last level, no injected noise.
  bool final_denoise = true;
  /// Optional per-step hook: (level index, step, chain positions before the update, scores).
  std::function<void(std::size_t, int, const Batch&, const Batch&)> observer;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Chain population at the end of one level. `chains` holds the chain id of each row.
struct Snapshot {
  std::size_t level = 0;
  double sigma = 0.0;
  Batch points;
  std::vector<Eigen::Index> chains;
};

struct LangevinResult {
  /// Surviving chains after the last level (and the final denoise step).
  Batch final;
  std::vector<Eigen::Index> final_chains;
  std::vector<Snapshot> snapshots;
  Eigen::Index diverged = 0;
  std::vector<std::string> diagnostics;
};

/// y_0 ~ N(0, sigma_max^2 Sigma_0), then for each level and step
///   y <- y + (alpha_k / 2) s_hat(y) + sqrt(alpha_k) xi.
/// Chain c draws from its own stream derived from one value taken from `rng`, so the run
/// is reproducible for a fixed rng state and chain count. A chain whose state turns
/// non-finite is dropped and reported.
LangevinResult annealed_langevin(const PosteriorSampler& sampler, const NoiseSchedule& schedule,
                                 const SamplerConfig& cfg, Eigen::Index n_chains, Rng& rng);

struct EnergyDistancePoint {
  std::size_t level = 0;
  double sigma = 0.0;
  double mean = 0.0;
  /// Sample standard deviation over runs; 0 for a single run.
  double std = 0.0;
};

/// Per-level energy distance between the chain population and `clean`, aggregated over
/// runs (one snapshot list per seed). All runs must have the same number of levels.
std::vector<EnergyDistancePoint> trajectory_energy_distance(const std::vector<std::vector<Snapshot>>& runs,
                                                            const Batch& clean, const EnergyScoreParams& es);

}  // namespace esd
