#include "esd/harness.hpp"

#include "esd/calib.hpp"
#include "esd/engression.hpp"
#include "esd/escore.hpp"
#include "esd/identity.hpp"
#include "esd/io.hpp"
#include "esd/oracle.hpp"
#include "esd/sampler.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <memory>

namespace esd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Mat random_spd(Eigen::Index n, Rng& rng) {
  Mat a(n, n);
  for (Eigen::Index j = 0; j < n; ++j) a.col(j) = standard_normal(n, rng);
  return a * a.transpose() + Mat::Identity(n, n) * (0.5 * static_cast<double>(n));
}

Batch random_batch(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Batch b(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) b.row(i) = standard_normal(cols, rng).transpose();
  return b;
}

double rel_err(const Vec& got, const Vec& want) { return (got - want).norm() / std::max(want.norm(), 1e-300); }

struct Context {
  Suite suite;
  std::uint64_t seed;
  const HarnessOptions& options;
  std::string gaussian_ckpt;
  std::string gengauss_ckpt;

  Rng stream(int id) const { return make_stream(seed, static_cast<std::uint64_t>(id)); }
};

CriterionResult identity_check(const Context& ctx) {
  CriterionResult r{1, "energy_score_identity", "noisy_score_mc == -(lambda/beta) path grad, 1000 cases", 0, "< 1e-12 relative"};
  Rng rng = ctx.stream(1);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Index n = 1 + trial % 5;
    const GenGaussParams p(uniform(rng, 0.05, 2.0), uniform(rng, 0.1, 5.0), random_spd(n, rng));
    const Batch x = random_batch(1 + trial % 40, n, rng);
    const Vec y = standard_normal(n, rng);
    const Vec s = noisy_score_mc(x, y, p).value;
    const Vec g = energy_score_path_grad(x, y, EnergyScoreParams::mahalanobis(p.beta(), p.sigma()));
    worst = std::max(worst, rel_err(s, -(p.lambda() / p.beta()) * g));
  }
  r.measured = worst;
  r.pass = worst < 1e-12;
  r.time_limit = 5;
  return r;
}

CriterionResult tweedie_check(const Context& ctx) {
  CriterionResult r{2, "tweedie_reduction", "y + Sigma s equals posterior-sample mean at beta=2, lambda=1, 1000 cases", 0,
                    "< 1e-12 relative"};
  Rng rng = ctx.stream(2);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Index n = 1 + trial % 5;
    const GenGaussParams p(2.0, 1.0, random_spd(n, rng));
    const Batch x = random_batch(2 + trial % 30, n, rng);
    const Vec y = 2.0 * standard_normal(n, rng);
    const Vec mean = x.colwise().mean().transpose();
    const Vec denoised = tweedie_posterior_mean(y, noisy_score_mc(x, y, p).value, p.sigma());
    // Relative to the scale of the inputs: the mean itself can sit arbitrarily close to zero.
    worst = std::max(worst, (denoised - mean).norm() / std::max(y.norm(), mean.norm()));
  }
  r.measured = worst;
  r.pass = worst < 1e-12;
  r.time_limit = 2;
  return r;
}

CriterionResult propriety_check(const Context& ctx) {
  CriterionResult r{3, "propriety_cnd", "1000 random CND forms <= 1e-9; beta=3 midpoint form >= 0.5", 0, "max form <= 1e-9"};
  Rng rng = ctx.stream(3);
  double worst = -std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Index m = 3 + trial % 8;
    const Eigen::Index n = 1 + trial % 5;
    Batch pts = random_batch(m, n, rng) * 2.0;
    Vec a = standard_normal(m, rng);
    a.array() -= a.mean();
    a(m - 1) = -a.head(m - 1).sum();
    worst = std::max(worst, cnd_quadratic_form(pts, a, uniform(rng, 1e-3, 2.0), random_spd(n, rng)));
  }
  Batch mid(3, 1);
  mid << 0.0, 1.0, 0.5;
  Vec a(3);
  a << 1, 1, -2;
  const double violation = cnd_quadratic_form(mid, a, 3.0, Mat::Identity(1, 1));
  r.measured = worst;
  r.details = {{"counterexample_beta3", violation}};
  r.pass = worst <= 1e-9 && violation >= 0.5;
  r.time_limit = 10;
  return r;
}

CriterionResult moment_check(const Context& ctx) {
  CriterionResult r{4, "gengauss_moment", "E|u|^beta = n/lambda for beta=1.4, lambda=1.8, n=2", 0, "within 4 standard errors"};
  Rng rng = ctx.stream(4);
  const GenGaussParams p = GenGaussParams::isotropic(1.4, 1.8, 1.0, 2);
  const Batch u = gg_sample(p, 100000, rng);
  const Eigen::ArrayXd m = u.rowwise().norm().array().pow(1.4);
  const double mean = m.mean();
  const double se = std::sqrt((m - mean).square().sum() / (m.size() - 1.0) / m.size());
  const double z = (mean - 2.0 / 1.8) / se;
  r.measured = z;
  r.details = {{"mean", mean}, {"expected", 2.0 / 1.8}, {"standard_error", se}};
  r.pass = std::abs(z) <= 4.0;
  r.time_limit = 5;
  return r;
}

CriterionResult fidelity_check(const Context& ctx) {
  CriterionResult r{5, "score_fidelity",
                    "IS oracle vs analytic at sigma=0.8: cosine >= 0.999, MSE <= 1e-3; model cosine >= 0.9 at sigma 0.4, 0.8",
                    0, "see target"};
  Rng rng = ctx.stream(5);
  const auto mix = eight_gaussians_mixture();
  const Batch grid = square_grid(20);
  auto prior = std::make_shared<const Batch>(sample_mixture(mix, 100000, rng));
  const GenGaussParams p08 = GenGaussParams::isotropic(2.0, 1.0, 0.8, 2);
  double cos_is = 0.0, mse_is = 0.0;
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    const Vec y = grid.row(i).transpose();
    const Vec a = is_noisy_score(y, is_posterior(y, prior, p08), p08);
    const Vec b = gmm_noisy_score_gaussian(y, mix, p08.sigma());
    cos_is += a.dot(b) / (a.norm() * b.norm()) / static_cast<double>(grid.rows());
    mse_is += (a - b).squaredNorm() / 2.0 / static_cast<double>(grid.rows());
  }
  const Checkpoint ck = Checkpoint::load(ctx.gaussian_ckpt);
  const EngressionSampler model(ck.params);
  nlohmann::json model_cos = nlohmann::json::object();
  double worst_model = 1.0;
  for (double sigma : {0.4, 0.8}) {
    const NoiseLevel level = ck.schedule.at_sigma(sigma);
    const GenGaussParams p = ck.schedule.params(level);
    double c = 0.0;
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
      const Vec y = grid.row(i).transpose();
      const Vec a = noisy_score_mc(model.sample(y, level, 1024, rng), y, p).value;
      const Vec b = gmm_noisy_score_gaussian(y, mix, p.sigma());
      c += a.dot(b) / (a.norm() * b.norm()) / static_cast<double>(grid.rows());
    }
    model_cos[format_double(sigma)] = c;
    worst_model = std::min(worst_model, c);
  }
  r.measured = cos_is;
  r.details = {{"is_mean_cosine", cos_is}, {"is_mse", mse_is}, {"model_mean_cosine", model_cos}};
  r.pass = cos_is >= 0.999 && mse_is <= 1e-3 && worst_model >= 0.9;
  r.time_limit = 120;
  return r;
}

CriterionResult richardson_check(const Context& ctx) {
  CriterionResult r{6, "richardson_extrapolation",
                    "conjugate toy, eps 0.1/0.05: error vs -y <= 3e-5 relative; halving eps cuts error >= 8x", 0,
                    "3e-5 relative, ratio >= 8"};
  Rng rng = ctx.stream(6);
  const ConjugateGaussianPosterior post(2);
  const GenGaussParams p0(2.0, 1.0, Mat::Identity(2, 2));
  double worst = 0.0, worst_ratio = std::numeric_limits<double>::infinity(), worst_closed = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Vec y = 2.0 * standard_normal(2, rng);
    auto field = [&](double eps) { return clean_score_eps(post, y, eps, p0, 64, rng); };
    const Vec re = clean_score_richardson(field, 0.1, 0.05);
    const Vec re_half = clean_score_richardson(field, 0.05, 0.025);
    const double e1 = 0.01, e2 = 0.0025;
    worst_closed = std::max(worst_closed, rel_err(re, -y * (1 + e1 + e2) / ((1 + e1) * (1 + e2))));
    const double err = rel_err(re, -y);
    worst = std::max(worst, err);
    worst_ratio = std::min(worst_ratio, err / rel_err(re_half, -y));
  }
  r.measured = worst;
  r.details = {{"min_halving_ratio", worst_ratio}, {"closed_form_deviation", worst_closed}};
  r.pass = worst <= 3e-5 && worst_ratio >= 8.0;
  r.time_limit = 10;
  return r;
}

CriterionResult generation_check(const Context& ctx) {
  CriterionResult r{7, "generation", "final energy distance <= 0.05 and below the initial level; every mode >= 2%", 0,
                    "0.05"};
  const auto mix = eight_gaussians_mixture();
  Rng rng = ctx.stream(7);
  const Batch clean = eight_gaussians({}, 1000, rng);
  const auto es = EnergyScoreParams::euclidean(1.0);
  double worst = 0.0;
  bool ok = true;
  for (const auto& [name, path] : {std::pair{"gaussian", ctx.gaussian_ckpt}, std::pair{"gengauss", ctx.gengauss_ckpt}}) {
    const Checkpoint ck = Checkpoint::load(path);
    const EngressionSampler sampler(ck.params);
    SamplerConfig cfg;
    cfg.steps_per_level = 50;
    cfg.posterior_draws = 32;
    const LangevinResult res = annealed_langevin(sampler, ck.schedule, cfg, 1000, rng);
    const auto series = trajectory_energy_distance({res.snapshots}, clean, es);
    const double final_ed = energy_distance(res.final, clean, es);
    std::vector<int> counts(8, 0);
    for (Eigen::Index i = 0; i < res.final.rows(); ++i) ++counts[static_cast<std::size_t>(nearest_component(mix, res.final.row(i).transpose()))];
    const int min_count = *std::min_element(counts.begin(), counts.end());
    const bool model_ok = final_ed <= 0.05 && final_ed < series.front().mean && min_count >= 20;
    ok = ok && model_ok;
    worst = std::max(worst, final_ed);
    r.details[name] = {{"initial_energy_distance", series.front().mean},
                       {"final_energy_distance", final_ed},
                       {"mode_counts", counts},
                       {"diverged", res.diverged},
                       {"pass", model_ok}};
  }
  r.measured = worst;
  r.pass = ok;
  r.time_limit = 600;
  return r;
}

CriterionResult recovery_check(const Context& ctx) {
  CriterionResult r{8, "parameter_recovery", "beta 1.4 +- 0.15, lambda 1.8 +- 0.3; Gaussian truth beta >= 1.9", 0,
                    "see target"};
  Rng rng = ctx.stream(8);
  const auto mix = eight_gaussians_mixture();
  auto particles = std::make_shared<const Batch>(sample_mixture(mix, 20000, rng));
  auto ref_particles = std::make_shared<const Batch>(sample_mixture(mix, 100000, rng));
  auto fit = [&](double beta, double lambda) {
    const double s = 0.8;
    const GenGaussParams truth = GenGaussParams::isotropic(beta, lambda, s, 2);
    CalibProblem problem;
    problem.noisy_batch = sample_mixture(mix, 64, rng) + gg_sample(truth, 64, rng);
    problem.posterior = [truth, particles](const Vec& y, Eigen::Index count, Rng& g) {
      return is_posterior(y, particles, truth).resample(count, g);
    };
    problem.reference_score = [truth, ref_particles](const Vec& y) {
      return is_noisy_score(y, is_posterior(y, ref_particles, truth), truth);
    };
    // lambda and s trade off against each other; the scale is pinned at its true value.
    problem.bounds.s_lo = problem.bounds.s_hi = s;
    CalibOptions opt;
    return fit_noise_params(problem, opt, rng);
  };
  const CalibResult gg = fit(1.4, 1.8);
  const CalibResult gauss = fit(2.0, 1.0);
  r.measured = gg.beta;
  r.details = {{"gengauss", {{"beta", gg.beta}, {"lambda", gg.lambda}, {"discrepancy", gg.discrepancy}}},
               {"gaussian", {{"beta", gauss.beta}, {"lambda", gauss.lambda}, {"discrepancy", gauss.discrepancy}}},
               {"fixed_s", 0.8}};
  r.pass = std::abs(gg.beta - 1.4) <= 0.15 && std::abs(gg.lambda - 1.8) <= 0.3 && gauss.beta >= 1.9;
  r.time_limit = 300;
  return r;
}

CriterionResult gradient_check(const Context& ctx) {
  CriterionResult r{9, "engression_gradient", "reverse-mode vs central differences, 50 coordinates x 3 architectures", 0,
                    "< 1e-4 relative"};
  Rng rng = ctx.stream(9);
  struct Arch {
    std::vector<Eigen::Index> hidden;
    OutputMode out;
    double beta;
  };
  const std::vector<Arch> archs{{{12}, OutputMode::direct, 2.0},
                                {{10, 9}, OutputMode::sigma_residual, 1.4},
                                {{8, 8, 8}, OutputMode::sigma_residual, 1.0}};
  double worst = 0.0;
  for (const auto& a : archs) {
    const NoiseSchedule sched(1.0, 0.05, 10, a.beta, 1.3, Mat::Identity(2, 2));
    MlpArchitecture arch;
    arch.noise_dim = 3;
    arch.hidden = a.hidden;
    arch.output = a.out;
    MlpParams p = init_mlp(arch, sched, rng);
    for (auto& l : p.layers) l.bias = 0.1 * standard_normal(l.bias.size(), rng);
    std::vector<TrainingPair> batch;
    for (int i = 0; i < 4; ++i) {
      const Vec x = standard_normal(2, rng);
      batch.push_back({x, x + 0.3 * standard_normal(2, rng), uniform(rng, 0.0, 1.0)});
    }
    TrainConfig cfg;
    cfg.inner_samples = 5;
    Mat zs(3, 20);
    for (Eigen::Index c = 0; c < zs.cols(); ++c) zs.col(c) = standard_normal(3, rng);
    const LossAndGrad lg = es_loss_and_grad_fixed(p, batch, zs, sched, cfg);
    for (int k = 0; k < 50; ++k) {
      const auto layer = static_cast<std::size_t>(rng() % p.layers.size());
      const bool bias = rng() % 4 == 0;
      const auto row = static_cast<Eigen::Index>(rng() % p.layers[layer].weight.rows());
      const auto col = static_cast<Eigen::Index>(rng() % p.layers[layer].weight.cols());
      double& w = bias ? p.layers[layer].bias(row) : p.layers[layer].weight(row, col);
      const double analytic = bias ? lg.grads[layer].bias(row) : lg.grads[layer].weight(row, col);
      const double keep = w;
      const double h = 1e-5;
      w = keep + h;
      const double up = es_loss_and_grad_fixed(p, batch, zs, sched, cfg).loss;
      w = keep - h;
      const double down = es_loss_and_grad_fixed(p, batch, zs, sched, cfg).loss;
      w = keep;
      const double fd = (up - down) / (2.0 * h);
      // Below 1e-6 absolute both values are rounding noise of the difference quotient.
      worst = std::max(worst, std::abs(analytic - fd) / std::max(std::abs(fd), 1e-6));
    }
  }
  r.measured = worst;
  r.pass = worst < 1e-4;
  r.time_limit = 30;
  return r;
}

CriterionResult selfadjoint_check(const Context& ctx) {
  CriterionResult r{10, "self_adjointness", "GMM score field residual < 1e-4 at 20 points; rotational field residual 2",
                    0, "1e-4; 2 +- 1e-6"};
  Rng rng = ctx.stream(10);
  const auto mix = eight_gaussians_mixture();
  const Mat sigma = Eigen::Vector2d(1.0, 0.25).asDiagonal();
  auto field = [&](const Vec& y) { return gmm_noisy_score_gaussian(y, mix, sigma); };
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Vec y = Eigen::Vector2d(uniform(rng, -3, 3), uniform(rng, -3, 3));
    worst = std::max(worst, denoiser_selfadjointness_residual(field, y, sigma));
  }
  auto rot = [](const Vec& y) -> Vec { return Eigen::Vector2d(-y(1), y(0)); };
  const double rotational = denoiser_selfadjointness_residual(rot, Eigen::Vector2d(0.3, -0.7), Mat::Identity(2, 2));
  r.measured = worst;
  r.details = {{"rotational_residual", rotational}};
  r.pass = worst < 1e-4 && std::abs(rotational - 2.0) <= 1e-6;
  r.time_limit = 10;
  return r;
}

void train_fresh(Context& ctx) {
  namespace fs = std::filesystem;
  fs::create_directories(ctx.options.work_dir);
  const Batch data = read_points((fs::path(ctx.options.data_dir) / "eight_gaussians.csv").string());
  for (std::string* path : {&ctx.gaussian_ckpt, &ctx.gengauss_ckpt}) {
    // Retrain with the exact configuration recorded in the committed checkpoint.
    const Checkpoint committed = Checkpoint::load(*path);
    TrainResult res = train(data, committed.schedule, committed.config);
    if (!res.completed) throw NumericError("full suite training stopped: " + res.message);
    const std::string out = (fs::path(ctx.options.work_dir) / fs::path(*path).filename()).string();
    Checkpoint{std::move(res.params), committed.schedule, committed.config}.save(out);
    *path = out;
  }
}

}  // namespace

Suite parse_suite(const std::string& name) {
  if (name == "fast") return Suite::fast;
  if (name == "full") return Suite::full;
  throw std::invalid_argument("unknown suite: " + name);
}

std::string to_string(Suite suite) { return suite == Suite::fast ? "fast" : "full"; }

bool AcceptanceReport::all_pass() const {
  return !criteria.empty() && std::all_of(criteria.begin(), criteria.end(), [](const auto& c) { return c.pass; });
}

nlohmann::json AcceptanceReport::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& c : criteria) {
    list.push_back({{"id", c.id},
                    {"name", c.name},
                    {"target", c.target},
                    {"measured", c.measured},
                    {"tolerance", c.tolerance},
                    {"pass", c.pass},
                    {"seconds", c.seconds},
                    {"time_limit_seconds", c.time_limit},
                    {"details", c.details}});
  }
  return {{"format", "esd-acceptance-v1"},
          {"suite", to_string(suite)},
          {"seeds", {{"base", seed}, {"per_criterion", "make_stream(base, id)"}}},
          {"criteria", list},
          {"all_pass", all_pass()},
          {"training_seconds", training_seconds},
          {"runtime_seconds", runtime_seconds}};
}

AcceptanceReport run_acceptance(Suite suite, std::uint64_t seed, const HarnessOptions& options) {
  namespace fs = std::filesystem;
  const auto t0 = Clock::now();
  Context ctx{suite, seed, options, (fs::path(options.data_dir) / "checkpoints" / "gaussian.json").string(),
              (fs::path(options.data_dir) / "checkpoints" / "gengauss.json").string()};
  AcceptanceReport report;
  report.suite = suite;
  report.seed = seed;
  double training_seconds = 0.0;
  if (suite == Suite::full) {
    const auto tt = Clock::now();
    train_fresh(ctx);
    training_seconds = seconds_since(tt);
  }
  using Check = CriterionResult (*)(const Context&);
  const Check checks[] = {identity_check, tweedie_check,    propriety_check, moment_check,   fidelity_check,
                          richardson_check, generation_check, recovery_check,  gradient_check, selfadjoint_check};
  static const char* names[] = {"energy_score_identity", "tweedie_reduction",  "propriety_cnd",
                                "gengauss_moment",       "score_fidelity",     "richardson_extrapolation",
                                "generation",            "parameter_recovery", "engression_gradient",
                                "self_adjointness"};
  for (int i = 0; i < 10; ++i) {
    const auto tc = Clock::now();
    CriterionResult r;
    try {
      r = checks[i](ctx);
    } catch (const std::exception& e) {
      r.id = i + 1;
      r.name = names[i];
      r.pass = false;
      r.details = {{"error", e.what()}};
    }
    r.seconds = seconds_since(tc);
    if (r.time_limit > 0 && r.seconds > r.time_limit) {
      r.pass = false;
      r.details["over_time_limit"] = true;
    }
    report.criteria.push_back(r);
    if (options.on_result) options.on_result(report.criteria.back());
  }
  report.runtime_seconds = seconds_since(t0);
  report.training_seconds = training_seconds;
  return report;
}

}  // namespace esd
