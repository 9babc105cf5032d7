#include "esd/sampler.hpp"

#include <cmath>
#include <limits>

namespace esd {

void SamplerConfig::validate() const {
  if (steps_per_level < 1 || steps_per_level > 50) throw std::invalid_argument("SamplerConfig: steps_per_level must be in [1, 50]");
  if (posterior_draws < 1) throw std::invalid_argument("SamplerConfig: posterior_draws must be >= 1");
  if (!(base_step_size > 0.0)) throw std::invalid_argument("SamplerConfig: base_step_size must be positive");
}

nlohmann::json SamplerConfig::to_json() const {
  return {{"steps_per_level", steps_per_level},
          {"base_step_size", base_step_size},
          {"posterior_draws", posterior_draws},
          {"final_denoise", final_denoise}};
}

namespace {

Batch gather_rows(const Batch& ys, const std::vector<Eigen::Index>& rows) {
  Batch out(static_cast<Eigen::Index>(rows.size()), ys.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = ys.row(rows[i]);
  return out;
}

// Scores for every live chain; a chain whose draws tie with its position is redrawn once.
Batch score_batch(const PosteriorSampler& sampler, const Batch& live, const NoiseLevel& level,
                  const GenGaussParams& params, Eigen::Index draws, std::vector<Rng>& rngs) {
  const Batch samples = sampler.sample_many(live, level, draws, rngs);
  Batch scores(live.rows(), live.cols());
  for (Eigen::Index i = 0; i < live.rows(); ++i) {
    const Vec y = live.row(i).transpose();
    Batch block = samples.middleRows(i * draws, draws);
    try {
      scores.row(i) = noisy_score_mc(block, y, params).value.transpose();
    } catch (const SingularityError&) {
      block = sampler.sample(y, level, draws, rngs[static_cast<std::size_t>(i)]);
      scores.row(i) = noisy_score_mc(block, y, params).value.transpose();
    }
  }
  return scores;
}

}  // namespace

LangevinResult annealed_langevin(const PosteriorSampler& sampler, const NoiseSchedule& schedule,
                                 const SamplerConfig& cfg, Eigen::Index n_chains, Rng& rng) {
  cfg.validate();
  if (n_chains < 1) throw std::invalid_argument("annealed_langevin: n_chains must be >= 1");
  const auto n = schedule.dim();
  require_dim(sampler.dim(), n, "annealed_langevin sampler");
  const std::uint64_t base_seed = rng();
  const Mat c0 = GenGaussParams(2.0, 1.0, schedule.base_sigma()).sqrt_sigma();

  std::vector<Rng> streams;
  streams.reserve(static_cast<std::size_t>(n_chains));
  for (Eigen::Index c = 0; c < n_chains; ++c) streams.push_back(make_stream(base_seed, static_cast<std::uint64_t>(c)));

  Batch ys(n_chains, n);
  for (Eigen::Index c = 0; c < n_chains; ++c) {
    ys.row(c) = (schedule.sigma_max() * (c0 * standard_normal(n, streams[static_cast<std::size_t>(c)]))).transpose();
  }

  LangevinResult result;
  std::vector<Eigen::Index> alive(static_cast<std::size_t>(n_chains));
  for (Eigen::Index c = 0; c < n_chains; ++c) alive[static_cast<std::size_t>(c)] = c;

  // Runs one score evaluation over live chains, keeping each chain's stream in place.
  auto scores_for = [&](const Batch& live, const NoiseLevel& level, const GenGaussParams& params) {
    std::vector<Rng> local;
    local.reserve(alive.size());
    for (auto c : alive) local.push_back(streams[static_cast<std::size_t>(c)]);
    Batch s = score_batch(sampler, live, level, params, cfg.posterior_draws, local);
    for (std::size_t i = 0; i < alive.size(); ++i) streams[static_cast<std::size_t>(alive[i])] = local[i];
    return s;
  };

  const double sigma_min = schedule.sigma_min();
  const auto& levels = schedule.levels();
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const NoiseLevel& level = levels[k];
    const GenGaussParams params = schedule.params(level);
    const double alpha = cfg.base_step_size * (level.sigma * level.sigma) / (sigma_min * sigma_min);
    const double noise_scale = std::sqrt(alpha);
    for (int step = 0; step < cfg.steps_per_level; ++step) {
      if (alive.empty()) break;
      const Batch live = gather_rows(ys, alive);
      const Batch scores = scores_for(live, level, params);
      if (cfg.observer) cfg.observer(k, step, live, scores);
      std::vector<Eigen::Index> still;
      still.reserve(alive.size());
      for (std::size_t i = 0; i < alive.size(); ++i) {
        const auto c = alive[i];
        const Vec xi = standard_normal(n, streams[static_cast<std::size_t>(c)]);
        ys.row(c) += (0.5 * alpha) * scores.row(static_cast<Eigen::Index>(i)) + noise_scale * xi.transpose();
        if (ys.row(c).allFinite()) {
          still.push_back(c);
        } else {
          ++result.diverged;
          result.diagnostics.push_back("chain " + std::to_string(c) + " became non-finite at level " +
                                       std::to_string(k) + ", step " + std::to_string(step) + " (sigma " +
                                       std::to_string(level.sigma) + ")");
        }
      }
      alive = std::move(still);
    }
    result.snapshots.push_back({k, level.sigma, gather_rows(ys, alive), alive});
  }

  if (cfg.final_denoise && !alive.empty()) {
    const NoiseLevel& last = levels.back();
    const GenGaussParams params = schedule.params(last);
    const Batch live = gather_rows(ys, alive);
    const Batch scores = scores_for(live, last, params);
    std::vector<Eigen::Index> still;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      const auto c = alive[i];
      ys.row(c) += (params.sigma() * scores.row(static_cast<Eigen::Index>(i)).transpose()).transpose();
      if (ys.row(c).allFinite()) {
        still.push_back(c);
      } else {
        ++result.diverged;
        result.diagnostics.push_back("chain " + std::to_string(c) + " became non-finite in the final denoise step");
      }
    }
    alive = std::move(still);
  }
  result.final = gather_rows(ys, alive);
  result.final_chains = alive;
  return result;
}

std::vector<EnergyDistancePoint> trajectory_energy_distance(const std::vector<std::vector<Snapshot>>& runs,
                                                            const Batch& clean, const EnergyScoreParams& es) {
  if (runs.empty() || runs.front().empty()) throw std::invalid_argument("trajectory_energy_distance: empty trajectory");
  const std::size_t levels = runs.front().size();
  for (const auto& r : runs) {
    if (r.size() != levels) throw DimensionError("trajectory_energy_distance: runs differ in level count");
  }
  std::vector<EnergyDistancePoint> out;
  for (std::size_t k = 0; k < levels; ++k) {
    std::vector<double> values;
    for (const auto& r : runs) {
      const Batch& pts = r[k].points;
      values.push_back(pts.rows() >= 2 ? energy_distance(pts, clean, es) : std::numeric_limits<double>::quiet_NaN());
    }
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    const double sd = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
    out.push_back({k, runs.front()[k].sigma, mean, sd});
  }
  return out;
}

}  // namespace esd
