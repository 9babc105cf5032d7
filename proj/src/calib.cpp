#include "esd/calib.hpp"

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace esd {

void CalibBounds::validate() const {
  auto check = [](double lo, double hi, const char* name) {
    if (!(lo > 0.0) || !(hi >= lo) || !std::isfinite(hi)) {
      throw std::invalid_argument(std::string("CalibBounds: invalid ") + name + " interval");
    }
  };
  check(beta_lo, beta_hi, "beta");
  check(lambda_lo, lambda_hi, "lambda");
  check(s_lo, s_hi, "s");
}

Mat CalibProblem::shape() const {
  const auto n = noisy_batch.cols();
  return base_sigma.size() == 0 ? Mat(Mat::Identity(n, n)) : base_sigma;
}

CalibCache prepare_calibration(const CalibProblem& problem, Eigen::Index draws_per_y, Rng& rng) {
  if (problem.noisy_batch.rows() == 0) throw std::invalid_argument("calibration: empty noisy batch");
  if (draws_per_y < 1) throw std::invalid_argument("calibration: draws_per_y must be >= 1");
  if (!problem.posterior || !problem.reference_score) throw std::invalid_argument("calibration: missing posterior or reference");
  CalibCache cache;
  for (Eigen::Index i = 0; i < problem.noisy_batch.rows(); ++i) {
    const Vec y = problem.noisy_batch.row(i).transpose();
    try {
      Batch draws = problem.posterior(y, draws_per_y, rng);
      Vec ref = problem.reference_score(y);
      require_dim(draws.cols(), y.size(), "calibration posterior");
      require_dim(ref.size(), y.size(), "calibration reference");
      if (!draws.allFinite() || !ref.allFinite()) throw NumericError("non-finite posterior draws or reference");
      cache.rows.push_back(i);
      cache.draws.push_back(std::move(draws));
      cache.reference.push_back(std::move(ref));
    } catch (const std::runtime_error& e) {
      cache.warnings.push_back("row " + std::to_string(i) + " skipped: " + e.what());
    } catch (const std::domain_error& e) {
      cache.warnings.push_back("row " + std::to_string(i) + " skipped: " + e.what());
    }
  }
  if (cache.rows.empty()) throw NumericError("calibration: posterior failed at every noisy point");
  return cache;
}

double score_discrepancy(const GenGaussParams& candidate, const CalibCache& cache, const Batch& noisy_batch) {
  if (cache.rows.empty()) throw std::invalid_argument("score_discrepancy: empty cache");
  double total = 0.0;
  for (std::size_t k = 0; k < cache.rows.size(); ++k) {
    const Vec y = noisy_batch.row(cache.rows[k]).transpose();
    const Vec s = noisy_score_mc(cache.draws[k], y, candidate).value;
    total += (cache.reference[k] - s).squaredNorm();
  }
  return total / static_cast<double>(cache.rows.size());
}

double score_discrepancy(const GenGaussParams& candidate, const CalibProblem& problem, Eigen::Index draws_per_y,
                         Rng& rng) {
  return score_discrepancy(candidate, prepare_calibration(problem, draws_per_y, rng), problem.noisy_batch);
}

CalibSearch parse_search(const std::string& name) {
  if (name == "grid") return CalibSearch::grid;
  if (name == "nelder_mead" || name == "nelder-mead") return CalibSearch::nelder_mead;
  throw std::invalid_argument("unknown search: " + name);
}

nlohmann::json CalibResult::to_json() const {
  nlohmann::json tr = nlohmann::json::array();
  for (const auto& e : trace) {
    tr.push_back({{"beta", e.beta}, {"lambda", e.lambda}, {"s", e.s}, {"discrepancy", e.discrepancy}, {"phase", e.phase}});
  }
  std::vector<double> flat;
  for (Eigen::Index i = 0; i < sigma.rows(); ++i)
    for (Eigen::Index j = 0; j < sigma.cols(); ++j) flat.push_back(sigma(i, j));
  return {{"beta", beta},
          {"lambda", lambda},
          {"s", s},
          {"sigma", flat},
          {"discrepancy", discrepancy},
          {"low_confidence", low_confidence},
          {"confidence_note", confidence_note},
          {"warnings", warnings},
          {"trace", tr}};
}

namespace {

// Search coordinates u = (beta, log lambda, log s).
struct Space {
  std::array<double, 3> lo{}, hi{};
  std::vector<int> free;

  explicit Space(const CalibBounds& b) {
    lo = {b.beta_lo, std::log(b.lambda_lo), std::log(b.s_lo)};
    hi = {b.beta_hi, std::log(b.lambda_hi), std::log(b.s_hi)};
    for (int k = 0; k < 3; ++k)
      if (hi[static_cast<std::size_t>(k)] > lo[static_cast<std::size_t>(k)]) free.push_back(k);
  }
  std::array<double, 3> clamp(std::array<double, 3> u) const {
    for (std::size_t k = 0; k < 3; ++k) u[k] = std::clamp(u[k], lo[k], hi[k]);
    return u;
  }
  std::array<double, 3> center() const {
    std::array<double, 3> u{};
    for (std::size_t k = 0; k < 3; ++k) u[k] = 0.5 * (lo[k] + hi[k]);
    return u;
  }
};

class Objective {
 public:
  Objective(const CalibProblem& problem, const CalibCache& cache)
      : problem_(problem), cache_(cache), shape_(problem.shape()) {}

  double operator()(const std::array<double, 3>& u, const std::string& phase) {
    const double beta = u[0];
    const double lambda = std::exp(u[1]);
    const double s = std::exp(u[2]);
    double d = std::numeric_limits<double>::infinity();
    try {
      d = score_discrepancy(GenGaussParams(beta, lambda, shape_ * (s * s)), cache_, problem_.noisy_batch);
    } catch (const std::exception&) {
      d = std::numeric_limits<double>::infinity();
    }
    if (!std::isfinite(d)) d = std::numeric_limits<double>::infinity();
    trace.push_back({beta, lambda, s, d, phase});
    if (d < best_value) {
      best_value = d;
      best = u;
    }
    return d;
  }

  std::vector<CalibTraceEntry> trace;
  double best_value = std::numeric_limits<double>::infinity();
  std::array<double, 3> best{};

 private:
  const CalibProblem& problem_;
  const CalibCache& cache_;
  Mat shape_;
};

int points_per_axis(int budget, std::size_t dims) {
  if (dims == 0) return 1;
  int p = 1;
  while (std::pow(static_cast<double>(p + 1), static_cast<double>(dims)) <= static_cast<double>(budget) + 1e-9) ++p;
  return std::max(p, 2);
}

void run_lattice(Objective& f, const Space& space, const std::array<double, 3>& lo, const std::array<double, 3>& hi,
                 const std::array<double, 3>& fixed, int p, const std::string& phase) {
  const auto dims = space.free.size();
  std::vector<int> idx(dims, 0);
  while (true) {
    std::array<double, 3> u = fixed;
    for (std::size_t a = 0; a < dims; ++a) {
      const auto k = static_cast<std::size_t>(space.free[a]);
      u[k] = p == 1 ? lo[k] : lo[k] + (hi[k] - lo[k]) * idx[a] / (p - 1);
    }
    f(u, phase);
    std::size_t a = 0;
    while (a < dims && ++idx[a] == p) idx[a++] = 0;
    if (a == dims) break;
  }
}

struct NmContext {
  Objective* f;
  const Space* space;
  std::array<double, 3> base;
  int evals = 0;
};

double nm_eval(const gsl_vector* x, void* params) {
  auto* ctx = static_cast<NmContext*>(params);
  std::array<double, 3> u = ctx->base;
  for (std::size_t a = 0; a < ctx->space->free.size(); ++a) {
    u[static_cast<std::size_t>(ctx->space->free[a])] = gsl_vector_get(x, a);
  }
  ++ctx->evals;
  const double d = (*ctx->f)(ctx->space->clamp(u), "nelder_mead");
  return std::isfinite(d) ? d : 1e300;
}

void run_nelder_mead(Objective& f, const Space& space, int budget) {
  const auto dims = space.free.size();
  NmContext ctx{&f, &space, space.center(), 0};
  gsl_set_error_handler_off();
  gsl_multimin_function fn{&nm_eval, dims, &ctx};
  gsl_vector* x = gsl_vector_alloc(dims);
  gsl_vector* step = gsl_vector_alloc(dims);
  for (std::size_t a = 0; a < dims; ++a) {
    const auto k = static_cast<std::size_t>(space.free[a]);
    gsl_vector_set(x, a, ctx.base[k]);
    gsl_vector_set(step, a, 0.25 * (space.hi[k] - space.lo[k]));
  }
  gsl_multimin_fminimizer* nm = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, dims);
  gsl_multimin_fminimizer_set(nm, &fn, x, step);
  while (ctx.evals < budget) {
    if (gsl_multimin_fminimizer_iterate(nm) != GSL_SUCCESS) break;
    if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(nm), 1e-6) == GSL_SUCCESS) break;
  }
  gsl_multimin_fminimizer_free(nm);
  gsl_vector_free(step);
  gsl_vector_free(x);
}

void assess_confidence(CalibResult& result, const Space& space, std::size_t used_rows) {
  const auto dims = space.free.size();
  if (dims == 0) return;
  if (used_rows <= dims) {
    result.low_confidence = true;
    result.confidence_note = std::to_string(used_rows) + " usable point(s) for " + std::to_string(dims) +
                             " free parameter(s)";
    return;
  }
  std::vector<double> values;
  for (const auto& e : result.trace)
    if (std::isfinite(e.discrepancy)) values.push_back(e.discrepancy);
  std::sort(values.begin(), values.end());
  const double best = values.front();
  const double median = values[values.size() / 2];
  const double cut = best + 0.01 * (median - best);
  static const char* names[3] = {"beta", "lambda", "s"};
  for (int k : space.free) {
    const auto kk = static_cast<std::size_t>(k);
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& e : result.trace) {
      if (!(e.discrepancy <= cut)) continue;
      const double u = kk == 0 ? e.beta : std::log(kk == 1 ? e.lambda : e.s);
      lo = std::min(lo, u);
      hi = std::max(hi, u);
    }
    if (hi - lo > 0.25 * (space.hi[kk] - space.lo[kk])) {
      result.low_confidence = true;
      result.confidence_note += std::string(result.confidence_note.empty() ? "" : "; ") + "flat direction in " +
                                names[k] + " (near-optimal set spans " +
                                std::to_string(100.0 * (hi - lo) / (space.hi[kk] - space.lo[kk])) + "% of range)";
    }
  }
}

}  // namespace

CalibResult fit_noise_params(const CalibProblem& problem, const CalibCache& cache, const CalibOptions& options) {
  problem.bounds.validate();
  if (options.budget < 10) throw std::invalid_argument("fit_noise_params: budget must be >= 10");
  const Space space(problem.bounds);
  Objective f(problem, cache);

  if (space.free.empty()) {
    f(space.lo, "fixed");
  } else if (options.search == CalibSearch::grid) {
    const int p = points_per_axis(options.budget, space.free.size());
    run_lattice(f, space, space.lo, space.hi, space.lo, p, "lattice");
    if (std::isfinite(f.best_value)) {
      std::array<double, 3> lo = f.best;
      std::array<double, 3> hi = f.best;
      for (int k : space.free) {
        const auto kk = static_cast<std::size_t>(k);
        const double h = (space.hi[kk] - space.lo[kk]) / (p - 1);
        lo[kk] = std::max(space.lo[kk], f.best[kk] - h);
        hi[kk] = std::min(space.hi[kk], f.best[kk] + h);
      }
      run_lattice(f, space, lo, hi, f.best, p, "refine");
    }
  } else {
    run_nelder_mead(f, space, options.budget);
  }
  if (!std::isfinite(f.best_value)) throw NumericError("fit_noise_params: objective is non-finite at every candidate");

  CalibResult result;
  result.beta = f.best[0];
  result.lambda = std::exp(f.best[1]);
  result.s = std::exp(f.best[2]);
  result.sigma = problem.shape() * (result.s * result.s);
  result.discrepancy = f.best_value;
  result.trace = std::move(f.trace);
  result.warnings = cache.warnings;
  assess_confidence(result, space, cache.rows.size());
  return result;
}

CalibResult fit_noise_params(const CalibProblem& problem, const CalibOptions& options, Rng& rng) {
  const CalibCache cache = prepare_calibration(problem, options.draws_per_y, rng);
  return fit_noise_params(problem, cache, options);
}

}  // namespace esd
