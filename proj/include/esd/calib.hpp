#pragma once

// Noise-parameter estimation: pick (beta, lambda, s) so that the identity-based score
// estimate with Sigma = s^2 Sigma_0 matches a reference score field on noisy data.

#include "esd/identity.hpp"

#include <json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace esd {

/// Closed intervals for the searched parameters. lo == hi pins that parameter.
struct CalibBounds {
  double beta_lo = 0.5, beta_hi = 2.0;
  double lambda_lo = 0.1, lambda_hi = 5.0;
  double s_lo = 0.05, s_hi = 2.0;

  void validate() const;
};

struct CalibProblem {
  Batch noisy_batch;
  /// Draws from P(X | Y = y). They do not depend on the candidate noise parameters.
  std::function<Batch(const Vec& y, Eigen::Index count, Rng& rng)> posterior;
  /// Reference score at y, independent of the candidate.
  std::function<Vec(const Vec& y)> reference_score;
  CalibBounds bounds;
  /// Shape of the noise covariance: Sigma = s^2 base_sigma. Empty means the identity.
  Mat base_sigma;

  Mat shape() const;
};

/// Posterior draws and reference scores evaluated once, so that every candidate sees the
/// same random numbers.
struct CalibCache {
  std::vector<Eigen::Index> rows;  // rows of the noisy batch that are usable
  std::vector<Batch> draws;
  std::vector<Vec> reference;
  std::vector<std::string> warnings;
};

/// Rows whose posterior or reference fails are skipped with a warning; throws NumericError
/// when every row fails.
CalibCache prepare_calibration(const CalibProblem& problem, Eigen::Index draws_per_y, Rng& rng);

/// mean_y |reference(y) - noisy_score_mc(draws(y), y, candidate)|_2^2 over the cached rows.
double score_discrepancy(const GenGaussParams& candidate, const CalibCache& cache, const Batch& noisy_batch);

/// Convenience form that draws a fresh cache from rng.
double score_discrepancy(const GenGaussParams& candidate, const CalibProblem& problem, Eigen::Index draws_per_y,
                         Rng& rng);

enum class CalibSearch { grid, nelder_mead };

struct CalibTraceEntry {
  double beta = 0.0;
  double lambda = 0.0;
  double s = 0.0;
  double discrepancy = 0.0;
  std::string phase;
};

struct CalibResult {
  double beta = 0.0;
  double lambda = 0.0;
  double s = 0.0;
  Mat sigma;
  double discrepancy = 0.0;
  std::vector<CalibTraceEntry> trace;
  /// Set when the data cannot pin down the free parameters (too few points, or a wide
  /// near-optimal region in the trace).
  bool low_confidence = false;
  std::string confidence_note;
  std::vector<std::string> warnings;

  GenGaussParams params() const { return GenGaussParams(beta, lambda, sigma); }
  nlohmann::json to_json() const;
};

struct CalibOptions {
  CalibSearch search = CalibSearch::grid;
  /// Grid: lattice size (floor(budget^(1/d)) points per free axis), followed by one
  /// refinement lattice of the same size. Nelder-Mead: objective evaluations.
  int budget = 125;
  Eigen::Index draws_per_y = 256;
};

/// Minimizes score_discrepancy over the bounds. beta is searched linearly, lambda and s on
/// a log scale. Throws NumericError when the objective is non-finite everywhere.
CalibResult fit_noise_params(const CalibProblem& problem, const CalibOptions& options, Rng& rng);

/// Same search over a prepared cache.
CalibResult fit_noise_params(const CalibProblem& problem, const CalibCache& cache, const CalibOptions& options);

CalibSearch parse_search(const std::string& name);

}  // namespace esd
