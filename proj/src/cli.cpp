#include "esd/cli.hpp"

#include "esd/calib.hpp"
#include "esd/engression.hpp"
#include "esd/io.hpp"
#include "esd/oracle.hpp"
#include "esd/sampler.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <ostream>

namespace esd::cli {

namespace fs = std::filesystem;

std::string stem(const std::string& path) {
  for (const char* ext : {".json", ".csv", ".svg"}) {
    const std::string e(ext);
    if (path.size() > e.size() && path.compare(path.size() - e.size(), e.size(), e) == 0) {
      return path.substr(0, path.size() - e.size());
    }
  }
  return path;
}

namespace {

using Clock = std::chrono::steady_clock;

// Returns the seed list with ESD_SEED applied.
std::vector<std::uint64_t> effective_seeds(std::vector<std::uint64_t> seeds) {
  if (const char* env = std::getenv("ESD_SEED"); env && *env) {
    try {
      return {std::stoull(env)};
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("ESD_SEED is not an unsigned integer: ") + env);
    }
  }
  return seeds;
}

std::uint64_t effective_seed(std::uint64_t seed) { return effective_seeds({seed}).front(); }

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw std::ios_base::failure("cannot create directory " + parent.string());
  }
}

struct Manifest {
  nlohmann::json j;
  Clock::time_point start = Clock::now();

  Manifest(const std::string& command, const std::vector<std::string>& args) {
    j["command"] = command;
    j["args"] = args;
    j["inputs"] = nlohmann::json::array();
    j["outputs"] = nlohmann::json::array();
  }
  void input(const std::string& path) { j["inputs"].push_back({{"path", path}, {"hash", file_hash(path)}}); }
  void output(const std::string& path) { j["outputs"].push_back(path); }
  void write(const std::string& path) {
    j["wall_clock_seconds"] = std::chrono::duration<double>(Clock::now() - start).count();
    write_manifest(path, j);
  }
};

Mat to_mat(const Batch& b) { return Mat(b); }

Mat base_sigma_for(const std::optional<Checkpoint>& ck, Eigen::Index n) {
  return ck ? ck->schedule.base_sigma() : Mat(Mat::Identity(n, n));
}

// ---------------------------------------------------------------- gen-data

struct GenDataOpts {
  Eigen::Index n = 8000;
  double radius = 2.0;
  double std = 0.1;
  std::uint64_t seed = 1;
  std::string out;
  std::optional<double> noise_beta, noise_lambda, noise_s;
};

int cmd_gen_data(const GenDataOpts& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.n < 1) throw std::invalid_argument("--n must be >= 1");
  const auto seed = effective_seed(o.seed);
  Manifest m("gen-data", args);
  EightGaussiansConfig cfg{o.radius, o.std, {}};
  Rng rng = make_stream(seed, 0);
  Batch pts = eight_gaussians(cfg, o.n, rng);
  m.j["config"] = {{"n", o.n}, {"radius", o.radius}, {"std", o.std}};
  m.j["seeds"] = {seed};
  const int noise_flags = (o.noise_beta ? 1 : 0) + (o.noise_lambda ? 1 : 0) + (o.noise_s ? 1 : 0);
  if (noise_flags != 0 && noise_flags != 3) {
    throw std::invalid_argument("--noise-beta, --noise-lambda and --noise-s go together");
  }
  if (noise_flags == 3) {
    const auto params = GenGaussParams::isotropic(*o.noise_beta, *o.noise_lambda, *o.noise_s, 2);
    Rng noise_rng = make_stream(seed, 1);
    pts += gg_sample(params, o.n, noise_rng);
    m.j["config"]["noise"] = {{"beta", *o.noise_beta}, {"lambda", *o.noise_lambda}, {"s", *o.noise_s}};
  }
  ensure_parent(o.out);
  write_points(o.out, pts);
  m.output(o.out);
  m.write(stem(o.out) + ".manifest.json");
  out << "wrote " << o.n << " rows to " << o.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainOpts {
  std::string data;
  double beta = 2.0, lambda = 1.0;
  double sigma_max = 1.0, sigma_min = 0.01;
  int levels = 10;
  int epochs = 150;
  int m = 16;
  int batch = 128;
  double lr = 1e-3;
  double lr_final = 0.05;
  std::string loss_beta = "matched";
  std::string output = "sigma_residual";
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_train(const TrainOpts& o, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const auto seed = effective_seed(o.seed);
  Manifest m("train", args);
  m.input(o.data);
  const Batch data = read_points(o.data);
  const NoiseSchedule schedule = make_schedule(ScheduleKind::sigma_only_geometric, o.sigma_max, o.sigma_min, o.levels,
                                               o.beta, o.lambda, Mat::Identity(data.cols(), data.cols()));
  TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch;
  cfg.inner_samples = o.m;
  cfg.learning_rate = o.lr;
  cfg.lr_final_fraction = o.lr_final;
  cfg.seed = seed;
  cfg.arch.data_dim = data.cols();
  if (o.output == "direct") {
    cfg.arch.output = OutputMode::direct;
  } else if (o.output != "sigma_residual") {
    throw std::invalid_argument("--output must be direct or sigma_residual");
  }
  if (o.loss_beta != "matched") {
    try {
      cfg.loss_beta = {false, std::stod(o.loss_beta)};
    } catch (const std::logic_error&) {
      throw std::invalid_argument("--loss-beta must be 'matched' or a number");
    }
  }
  const TrainResult res = train(data, schedule, cfg);

  ensure_parent(o.out);
  const std::string trace_path = stem(o.out) + ".loss.csv";
  Mat trace(static_cast<Eigen::Index>(res.trace.size()), 2);
  for (std::size_t i = 0; i < res.trace.size(); ++i) {
    trace(static_cast<Eigen::Index>(i), 0) = res.trace[i].epoch;
    trace(static_cast<Eigen::Index>(i), 1) = res.trace[i].loss;
  }
  write_csv(trace_path, {"epoch", "loss"}, trace);
  m.output(trace_path);
  m.j["config"] = cfg.to_json();
  m.j["schedule"] = schedule.to_json();
  m.j["seeds"] = {seed};
  m.j["completed"] = res.completed;
  if (!res.completed) {
    m.j["message"] = res.message;
    m.write(stem(o.out) + ".manifest.json");
    err << "training aborted: " << res.message << "\n";
    return kNumeric;
  }
  Checkpoint{res.params, schedule, cfg}.save(o.out);
  m.output(o.out);
  m.j["checkpoint_hash"] = file_hash(o.out);
  m.write(stem(o.out) + ".manifest.json");
  out << "trained " << o.epochs << " epochs, final loss "
      << (res.trace.empty() ? std::string("n/a") : format_double(res.trace.back().loss)) << "; wrote " << o.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- sample

struct SampleOpts {
  std::string model;
  Eigen::Index chains = 1000;
  int steps = 50;
  Eigen::Index draws = 32;
  double step_size = 2e-5;
  std::vector<std::uint64_t> seeds{1};
  std::string trace_dir;
  std::string clean;
  Eigen::Index clean_n = 1000;
  bool no_final_denoise = false;
  std::optional<double> beta, lambda;
};

int cmd_sample(const SampleOpts& o, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const auto seeds = effective_seeds(o.seeds);
  if (seeds.empty()) throw std::invalid_argument("--seed needs at least one value");
  Manifest m("sample", args);
  m.input(o.model);
  const Checkpoint ck = Checkpoint::load(o.model);
  const NoiseSchedule schedule(ck.schedule.sigma_max(), ck.schedule.sigma_min(),
                               static_cast<int>(ck.schedule.levels().size()), o.beta.value_or(ck.schedule.beta()),
                               o.lambda.value_or(ck.schedule.lambda()), ck.schedule.base_sigma());
  const EngressionSampler sampler(ck.params);
  SamplerConfig cfg;
  cfg.steps_per_level = o.steps;
  cfg.posterior_draws = o.draws;
  cfg.base_step_size = o.step_size;
  cfg.final_denoise = !o.no_final_denoise;

  Batch clean;
  if (!o.clean.empty()) {
    m.input(o.clean);
    clean = read_points(o.clean);
  } else {
    Rng crng = make_stream(seeds.front(), 0xC1EA);
    clean = eight_gaussians({}, o.clean_n, crng);
  }

  fs::create_directories(o.trace_dir);
  std::vector<std::vector<Snapshot>> runs;
  Eigen::Index worst_diverged = 0;
  nlohmann::json per_seed = nlohmann::json::array();
  for (std::size_t si = 0; si < seeds.size(); ++si) {
    Rng rng = make_stream(seeds[si], 0);
    LangevinResult res = annealed_langevin(sampler, schedule, cfg, o.chains, rng);
    worst_diverged = std::max(worst_diverged, res.diverged);
    for (const auto& d : res.diagnostics) err << "seed " << seeds[si] << ": " << d << "\n";
    const auto es = EnergyScoreParams::euclidean(1.0);
    const double final_ed = res.final.rows() >= 2 ? energy_distance(res.final, clean, es) : NAN;
    const auto mixture = eight_gaussians_mixture();
    std::vector<Eigen::Index> modes(mixture.means.size(), 0);
    for (Eigen::Index i = 0; i < res.final.rows(); ++i) ++modes[static_cast<std::size_t>(nearest_component(mixture, res.final.row(i).transpose()))];
    per_seed.push_back({{"seed", seeds[si]}, {"diverged", res.diverged}, {"final_energy_distance", final_ed}, {"mode_counts", modes}});
    if (si == 0) {
      auto with_chain = [](const Batch& pts, const std::vector<Eigen::Index>& ids) {
        Mat rows(pts.rows(), 1 + pts.cols());
        for (Eigen::Index i = 0; i < pts.rows(); ++i) {
          rows(i, 0) = static_cast<double>(ids[static_cast<std::size_t>(i)]);
          rows.row(i).tail(pts.cols()) = pts.row(i);
        }
        return rows;
      };
      std::vector<std::string> header{"chain"};
      for (Eigen::Index j = 0; j < res.final.cols(); ++j) header.push_back("x" + std::to_string(j));
      for (const auto& snap : res.snapshots) {
        std::ostringstream name;
        name << "level_" << std::setw(2) << std::setfill('0') << snap.level << ".csv";
        const std::string path = (fs::path(o.trace_dir) / name.str()).string();
        write_csv(path, header, with_chain(snap.points, snap.chains), {"sigma=" + format_double(snap.sigma)});
        m.output(path);
      }
      const std::string final_path = (fs::path(o.trace_dir) / "final.csv").string();
      write_csv(final_path, header, with_chain(res.final, res.final_chains));
      m.output(final_path);
    }
    runs.push_back(std::move(res.snapshots));
  }
  const auto series = trajectory_energy_distance(runs, clean, EnergyScoreParams::euclidean(1.0));
  Mat rows(static_cast<Eigen::Index>(series.size()), 4);
  for (std::size_t k = 0; k < series.size(); ++k) {
    rows.row(static_cast<Eigen::Index>(k)) << static_cast<double>(series[k].level), series[k].sigma, series[k].mean, series[k].std;
  }
  const std::string ed_path = (fs::path(o.trace_dir) / "energy_distance.csv").string();
  write_csv(ed_path, {"level", "sigma", "mean", "std"}, rows);
  m.output(ed_path);

  m.j["config"] = cfg.to_json();
  m.j["config"]["chains"] = o.chains;
  m.j["schedule"] = schedule.to_json();
  m.j["seeds"] = seeds;
  m.j["checkpoint_hash"] = file_hash(o.model);
  m.j["runs"] = per_seed;
  m.write((fs::path(o.trace_dir) / "manifest.json").string());
  out << "sampled " << o.chains << " chains x " << seeds.size() << " seed(s); final energy distance "
      << format_double(series.back().mean) << "\n";
  if (static_cast<double>(worst_diverged) > 0.1 * static_cast<double>(o.chains)) {
    err << worst_diverged << " of " << o.chains << " chains diverged\n";
    return kNumeric;
  }
  return kOk;
}

// ---------------------------------------------------------------- score-field

struct ScoreFieldOpts {
  std::vector<std::string> sources;
  std::string model;
  double sigma = 0.8;
  std::optional<double> beta, lambda;
  Eigen::Index grid = 20;
  double lo = -3.0, hi = 3.0;
  Eigen::Index draws = 1024;
  Eigen::Index particles = 100000;
  std::uint64_t seed = 1;
  std::string out;
};

struct FieldContext {
  std::optional<Checkpoint> ck;
  GenGaussParams params;
  NoiseLevel level;
  std::uint64_t seed;
  Eigen::Index draws;
  Eigen::Index particles;
};

Mat compute_field(const std::string& source, const Batch& grid, const FieldContext& c, std::vector<std::string>& notes) {
  const auto n = grid.cols();
  Mat field(grid.rows(), n);
  const auto mixture = eight_gaussians_mixture();
  if (source == "oracle") {
    if (c.params.beta() != 2.0 || c.params.lambda() != 1.0) {
      throw std::invalid_argument("--source oracle needs beta = 2 and lambda = 1 (analytic Gaussian case); use --source is");
    }
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
      field.row(i) = gmm_noisy_score_gaussian(grid.row(i).transpose(), mixture, c.params.sigma()).transpose();
    }
  } else if (source == "is") {
    Rng prng = make_stream(c.seed, 0x15);
    auto prior = std::make_shared<const Batch>(sample_mixture(mixture, c.particles, prng));
    Eigen::Index failed = 0;
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
      const Vec y = grid.row(i).transpose();
      try {
        field.row(i) = is_noisy_score(y, is_posterior(y, prior, c.params), c.params).transpose();
      } catch (const NumericError&) {
        field.row(i).setConstant(std::numeric_limits<double>::quiet_NaN());
        ++failed;
      }
    }
    if (failed) notes.push_back(std::to_string(failed) + " grid points with collapsed importance weights");
  } else if (source == "model") {
    if (!c.ck) throw std::invalid_argument("--source model needs --model");
    const EngressionSampler sampler(c.ck->params);
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
      const Vec y = grid.row(i).transpose();
      Rng rng = make_stream(c.seed, static_cast<std::uint64_t>(i));
      field.row(i) = noisy_score_mc(sampler.sample(y, c.level, c.draws, rng), y, c.params).value.transpose();
    }
  } else {
    throw std::invalid_argument("unknown --source " + source + " (model, oracle or is)");
  }
  return field;
}

int cmd_score_field(const ScoreFieldOpts& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.sources.empty() || o.sources.size() > 2) throw std::invalid_argument("give one or two --source values");
  if (o.grid < 2) throw std::invalid_argument("--grid must be >= 2");
  const auto seed = effective_seed(o.seed);
  Manifest m("score-field", args);
  FieldContext c{std::nullopt, GenGaussParams::isotropic(2.0, 1.0, 1.0, 2), {}, seed, o.draws, o.particles};
  if (!o.model.empty()) {
    m.input(o.model);
    c.ck = Checkpoint::load(o.model);
    m.j["checkpoint_hash"] = file_hash(o.model);
  }
  const double beta = o.beta.value_or(c.ck ? c.ck->schedule.beta() : 2.0);
  const double lambda = o.lambda.value_or(c.ck ? c.ck->schedule.lambda() : 1.0);
  const Mat base = base_sigma_for(c.ck, 2);
  c.params = GenGaussParams(beta, lambda, base * (o.sigma * o.sigma));
  c.level = {c.ck ? c.ck->params.t_for_sigma(o.sigma) : std::numeric_limits<double>::quiet_NaN(), o.sigma, beta, lambda};
  const Batch grid = square_grid(o.grid, o.lo, o.hi);

  std::vector<std::string> notes;
  std::vector<Mat> fields;
  for (const auto& s : o.sources) fields.push_back(compute_field(s, grid, c, notes));

  ensure_parent(o.out);
  auto write_field = [&](const std::string& path, const std::string& source, const Mat& f) {
    Mat rows(grid.rows(), 4);
    rows << to_mat(grid), f;
    write_csv(path, {"y0", "y1", "s0", "s1"}, rows,
              {"source=" + source, "sigma=" + format_double(o.sigma), "beta=" + format_double(beta),
               "lambda=" + format_double(lambda)});
    m.output(path);
  };
  write_field(o.out, o.sources[0], fields[0]);
  m.j["config"] = {{"sources", o.sources}, {"sigma", o.sigma}, {"beta", beta}, {"lambda", lambda}, {"grid", o.grid},
                   {"draws", o.draws}, {"particles", o.particles}};
  m.j["seeds"] = {seed};
  if (fields.size() == 2) {
    const std::string second = stem(o.out) + "." + o.sources[1] + ".csv";
    write_field(second, o.sources[1], fields[1]);
    Mat agree(grid.rows(), 4);
    double cos_sum = 0.0, mse_sum = 0.0;
    Eigen::Index counted = 0;
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
      const Vec a = fields[0].row(i).transpose();
      const Vec b = fields[1].row(i).transpose();
      const double mse = (a - b).squaredNorm() / static_cast<double>(a.size());
      const double cosine = a.dot(b) / (a.norm() * b.norm());
      agree.row(i) << grid(i, 0), grid(i, 1), mse, cosine;
      if (std::isfinite(mse) && std::isfinite(cosine)) {
        cos_sum += cosine;
        mse_sum += mse;
        ++counted;
      }
    }
    const std::string agree_path = stem(o.out) + ".agreement.csv";
    write_csv(agree_path, {"y0", "y1", "mse", "cosine"}, agree,
              {"first=" + o.sources[0], "second=" + o.sources[1]});
    m.output(agree_path);
    const double mean_cos = counted ? cos_sum / counted : NAN;
    const double mean_mse = counted ? mse_sum / counted : NAN;
    m.j["agreement"] = {{"mean_cosine", mean_cos}, {"mean_mse", mean_mse}, {"points", counted}};
    out << "mean cosine " << format_double(mean_cos) << ", mean mse " << format_double(mean_mse) << "\n";
  }
  m.j["notes"] = notes;
  m.write(stem(o.out) + ".manifest.json");
  out << "wrote " << grid.rows() << " rows to " << o.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- richardson

struct RichardsonOpts {
  std::string source = "model";
  std::string model;
  double eps1 = 0.1, eps2 = 0.05;
  Eigen::Index grid = 20;
  double lo = -3.0, hi = 3.0;
  Eigen::Index draws = 1024;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_richardson(const RichardsonOpts& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.eps1 == o.eps2) throw std::invalid_argument("--eps1 and --eps2 must differ");
  if (!(o.eps1 > 0.0) || !(o.eps2 > 0.0)) throw std::invalid_argument("--eps1 and --eps2 must be positive");
  const auto seed = effective_seed(o.seed);
  Manifest m("richardson", args);
  std::unique_ptr<PosteriorSampler> sampler;
  GenGaussParams params0 = GenGaussParams::isotropic(2.0, 1.0, 1.0, 2);
  if (o.source == "model") {
    if (o.model.empty()) throw std::invalid_argument("--source model needs --model");
    m.input(o.model);
    const Checkpoint ck = Checkpoint::load(o.model);
    for (double e : {o.eps1, o.eps2}) {
      if (e < ck.schedule.sigma_min() || e > ck.schedule.sigma_max()) {
        throw std::invalid_argument("eps " + format_double(e) + " outside the model's trained range [" +
                                    format_double(ck.schedule.sigma_min()) + ", " +
                                    format_double(ck.schedule.sigma_max()) + "]");
      }
    }
    params0 = GenGaussParams(ck.schedule.beta(), ck.schedule.lambda(), ck.schedule.base_sigma());
    sampler = std::make_unique<EngressionSampler>(ck.params);
    m.j["checkpoint_hash"] = file_hash(o.model);
  } else if (o.source == "conjugate") {
    sampler = std::make_unique<ConjugateGaussianPosterior>(2);
  } else if (o.source == "gmm") {
    sampler = std::make_unique<GmmGaussianPosterior>(eight_gaussians_mixture(), Mat::Identity(2, 2));
  } else {
    throw std::invalid_argument("unknown --source " + o.source + " (model, conjugate or gmm)");
  }
  const Batch grid = square_grid(o.grid, o.lo, o.hi);
  Mat rows(grid.rows(), 8);
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    const Vec y = grid.row(i).transpose();
    Vec s1, s2;
    // Same stream at both scales (common random numbers).
    auto at = [&](double eps) {
      Rng rng = make_stream(seed, static_cast<std::uint64_t>(i));
      Vec s = clean_score_eps(*sampler, y, eps, params0, o.draws, rng);
      (eps == o.eps1 ? s1 : s2) = s;
      return s;
    };
    const Vec re = clean_score_richardson(at, o.eps1, o.eps2);
    rows.row(i) << y.transpose(), s1.transpose(), s2.transpose(), re.transpose();
  }
  ensure_parent(o.out);
  write_csv(o.out, {"y0", "y1", "s_eps1_0", "s_eps1_1", "s_eps2_0", "s_eps2_1", "s_re_0", "s_re_1"}, rows,
            {"source=" + o.source, "eps1=" + format_double(o.eps1), "eps2=" + format_double(o.eps2)});
  m.output(o.out);
  m.j["config"] = {{"source", o.source}, {"eps1", o.eps1}, {"eps2", o.eps2}, {"grid", o.grid}, {"draws", o.draws}};
  m.j["seeds"] = {seed};
  m.write(stem(o.out) + ".manifest.json");
  out << "wrote " << grid.rows() << " rows to " << o.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- estimate-noise

struct EstimateOpts {
  std::string noisy_data;
  std::string prior_data;
  Eigen::Index particles = 20000;
  Eigen::Index ref_particles = 100000;
  Eigen::Index rows = 64;
  Eigen::Index draws = 256;
  std::string search = "grid";
  int budget = 125;
  std::string posterior = "is";
  std::string reference = "is";
  std::string model;
  double oracle_beta = 1.4, oracle_lambda = 1.8, oracle_s = 0.8;
  std::optional<double> fix_s;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_estimate_noise(const EstimateOpts& o, const std::vector<std::string>& args, std::ostream& out,
                       std::ostream& err) {
  const auto seed = effective_seed(o.seed);
  Manifest m("estimate-noise", args);
  m.input(o.noisy_data);
  Batch noisy = read_points(o.noisy_data);
  if (o.rows > 0 && noisy.rows() > o.rows) noisy = Batch(noisy.topRows(o.rows));
  const auto mixture = eight_gaussians_mixture();
  Rng prng = make_stream(seed, 0x9A);
  std::shared_ptr<const Batch> prior;
  if (!o.prior_data.empty()) {
    m.input(o.prior_data);
    prior = std::make_shared<const Batch>(read_points(o.prior_data));
  } else {
    prior = std::make_shared<const Batch>(sample_mixture(mixture, o.particles, prng));
  }
  const auto ref_prior = std::make_shared<const Batch>(sample_mixture(mixture, o.ref_particles, prng));
  const GenGaussParams oracle = GenGaussParams::isotropic(o.oracle_beta, o.oracle_lambda, o.oracle_s, noisy.cols());

  CalibProblem problem;
  problem.noisy_batch = noisy;
  std::optional<EngressionSampler> model_sampler;
  if (o.posterior == "is") {
    problem.posterior = [prior, oracle](const Vec& y, Eigen::Index count, Rng& rng) {
      return is_posterior(y, prior, oracle).resample(count, rng);
    };
  } else if (o.posterior == "model") {
    if (o.model.empty()) throw std::invalid_argument("--posterior model needs --model");
    m.input(o.model);
    model_sampler.emplace(Checkpoint::load(o.model).params);
    const NoiseLevel level{model_sampler->t_for_sigma(o.oracle_s), o.oracle_s, o.oracle_beta, o.oracle_lambda};
    const EngressionSampler* s = &*model_sampler;
    problem.posterior = [s, level](const Vec& y, Eigen::Index count, Rng& rng) { return s->sample(y, level, count, rng); };
  } else {
    throw std::invalid_argument("--posterior must be is or model");
  }
  if (o.reference == "is") {
    problem.reference_score = [ref_prior, oracle](const Vec& y) {
      return is_noisy_score(y, is_posterior(y, ref_prior, oracle), oracle);
    };
  } else if (o.reference == "gaussian") {
    if (o.oracle_beta != 2.0 || o.oracle_lambda != 1.0) {
      throw std::invalid_argument("--reference gaussian needs --oracle-beta 2 --oracle-lambda 1");
    }
    problem.reference_score = [mixture, oracle](const Vec& y) {
      return gmm_noisy_score_gaussian(y, mixture, oracle.sigma());
    };
  } else {
    throw std::invalid_argument("--reference must be is or gaussian");
  }
  if (o.fix_s) problem.bounds.s_lo = problem.bounds.s_hi = *o.fix_s;

  CalibOptions opts;
  opts.search = parse_search(o.search);
  opts.budget = o.budget;
  opts.draws_per_y = o.draws;
  Rng rng = make_stream(seed, 0);
  const CalibResult res = fit_noise_params(problem, opts, rng);
  for (const auto& w : res.warnings) err << "warning: " << w << "\n";

  ensure_parent(o.out);
  write_file(o.out, res.to_json().dump(2) + "\n");
  m.output(o.out);
  m.j["config"] = {{"search", o.search}, {"budget", o.budget}, {"draws_per_y", o.draws}, {"rows", noisy.rows()},
                   {"particles", prior->rows()}, {"posterior", o.posterior}, {"fixed_s", o.fix_s ? nlohmann::json(*o.fix_s) : nlohmann::json()}};
  m.j["reference_source"] = o.reference == "is" ? "importance sampling, " + std::to_string(o.ref_particles) + " particles"
                                                : std::string("analytic Gaussian mixture score");
  m.j["oracle_params"] = {{"beta", o.oracle_beta}, {"lambda", o.oracle_lambda}, {"s", o.oracle_s}};
  m.j["seeds"] = {seed};
  m.write(stem(o.out) + ".manifest.json");
  out << "beta " << format_double(res.beta) << ", lambda " << format_double(res.lambda) << ", s "
      << format_double(res.s) << ", discrepancy " << format_double(res.discrepancy)
      << (res.low_confidence ? " (low confidence: " + res.confidence_note + ")" : std::string()) << "\n";
  return kOk;
}

// ---------------------------------------------------------------- plot

struct PlotOpts {
  std::vector<std::string> inputs;
  std::string kind = "scatter";
  std::string out;
  std::string title;
};

void pad_window(double& lo, double& hi) {
  const double pad = 0.05 * std::max(hi - lo, 1e-9);
  lo -= pad;
  hi += pad;
}

int cmd_plot(const PlotOpts& o, const std::vector<std::string>& args, std::ostream& out) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"};
  Manifest m("plot", args);
  std::vector<CsvTable> tables;
  for (const auto& path : o.inputs) {
    tables.push_back(read_csv(path));
    if (tables.back().data.rows() == 0) throw std::invalid_argument(path + ": no data rows");
    m.input(path);
  }
  if (tables.empty()) throw std::invalid_argument("--in is required");
  std::string svg;
  if (o.kind == "scatter") {
    if (tables.size() > 4) throw std::invalid_argument("scatter takes at most four inputs");
    std::vector<Mat> sets;
    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (std::size_t k = 0; k < tables.size(); ++k) {
      const auto c = tables[k].require_columns({"x0", "x1"}, o.inputs[k]);
      Mat xy(tables[k].data.rows(), 2);
      xy << tables[k].data.col(c[0]), tables[k].data.col(c[1]);
      for (Eigen::Index i = 0; i < xy.rows(); ++i) {
        if (!std::isfinite(xy(i, 0)) || !std::isfinite(xy(i, 1))) continue;
        xmin = std::min(xmin, xy(i, 0));
        xmax = std::max(xmax, xy(i, 0));
        ymin = std::min(ymin, xy(i, 1));
        ymax = std::max(ymax, xy(i, 1));
      }
      sets.push_back(std::move(xy));
    }
    pad_window(xmin, xmax);
    pad_window(ymin, ymax);
    SvgCanvas canvas(xmin, xmax, ymin, ymax);
    canvas.axes();
    for (std::size_t k = 0; k < sets.size(); ++k) canvas.points(sets[k], colors[k]);
    canvas.title(o.title);
    svg = canvas.str();
  } else if (o.kind == "quiver") {
    const auto& t = tables.front();
    const auto c = t.require_columns({"y0", "y1", "s0", "s1"}, o.inputs.front());
    double xmin = t.data.col(c[0]).minCoeff(), xmax = t.data.col(c[0]).maxCoeff();
    double ymin = t.data.col(c[1]).minCoeff(), ymax = t.data.col(c[1]).maxCoeff();
    const auto rows = t.data.rows();
    const double side = std::sqrt(static_cast<double>(rows));
    const double spacing = std::max(xmax - xmin, ymax - ymin) / std::max(1.0, side - 1.0);
    double max_len = 0.0;
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double len = std::hypot(t.data(i, c[2]), t.data(i, c[3]));
      if (std::isfinite(len)) max_len = std::max(max_len, len);
    }
    const double scale = max_len > 0.0 ? 0.9 * spacing / max_len : 0.0;
    pad_window(xmin, xmax);
    pad_window(ymin, ymax);
    SvgCanvas canvas(xmin, xmax, ymin, ymax);
    canvas.axes();
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double dx = t.data(i, c[2]) * scale, dy = t.data(i, c[3]) * scale;
      canvas.arrow(t.data(i, c[0]), t.data(i, c[1]), std::isfinite(dx) ? dx : 0.0, std::isfinite(dy) ? dy : 0.0,
                   colors[0]);
    }
    canvas.title(o.title);
    svg = canvas.str();
  } else if (o.kind == "series") {
    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    struct Series {
      std::vector<double> x, mean, lo, hi;
      bool band = false;
    };
    std::vector<Series> all;
    for (std::size_t k = 0; k < tables.size(); ++k) {
      const auto& t = tables[k];
      const std::string xname = t.column("level") >= 0 ? "level" : "sigma";
      const auto c = t.require_columns({xname, "mean"}, o.inputs[k]);
      const auto sd = t.column("std");
      Series s;
      s.band = sd >= 0;
      for (Eigen::Index i = 0; i < t.data.rows(); ++i) {
        const double x = t.data(i, c[0]), y = t.data(i, c[1]);
        const double e = s.band ? t.data(i, sd) : 0.0;
        s.x.push_back(x);
        s.mean.push_back(y);
        s.lo.push_back(y - e);
        s.hi.push_back(y + e);
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y - e);
        ymax = std::max(ymax, y + e);
      }
      all.push_back(std::move(s));
    }
    pad_window(xmin, xmax);
    pad_window(ymin, ymax);
    SvgCanvas canvas(xmin, xmax, ymin, ymax, 720, 420);
    canvas.axes();
    for (std::size_t k = 0; k < all.size(); ++k) {
      if (all[k].band) canvas.band(all[k].x, all[k].lo, all[k].hi, colors[k % 4]);
      canvas.polyline(all[k].x, all[k].mean, colors[k % 4]);
    }
    canvas.title(o.title);
    svg = canvas.str();
  } else {
    throw std::invalid_argument("--kind must be scatter, quiver or series");
  }
  ensure_parent(o.out);
  write_file(o.out, svg);
  m.output(o.out);
  m.j["config"] = {{"kind", o.kind}, {"title", o.title}};
  m.write(stem(o.out) + ".manifest.json");
  out << "wrote " << o.out << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Energy-score diffusion toolkit"};
  app.require_subcommand(1);

  GenDataOpts gd;
  auto* gen = app.add_subcommand("gen-data", "Sample the Eight Gaussians dataset");
  gen->add_option("--n", gd.n, "Number of points")->capture_default_str();
  gen->add_option("--radius", gd.radius, "Ring radius")->capture_default_str();
  gen->add_option("--std", gd.std, "Component standard deviation")->capture_default_str();
  gen->add_option("--seed", gd.seed, "Seed (ESD_SEED overrides)")->capture_default_str();
  gen->add_option("--noise-beta", gd.noise_beta, "Add generalized Gaussian noise: beta");
  gen->add_option("--noise-lambda", gd.noise_lambda, "Add generalized Gaussian noise: lambda");
  gen->add_option("--noise-s", gd.noise_s, "Add generalized Gaussian noise: scale s (Sigma = s^2 I)");
  gen->add_option("--out", gd.out, "Output CSV")->required();

  TrainOpts tr;
  auto* trn = app.add_subcommand("train", "Train the conditional generator");
  trn->add_option("--data", tr.data, "Training CSV (x0, x1)")->required();
  trn->add_option("--beta", tr.beta)->capture_default_str();
  trn->add_option("--lambda", tr.lambda)->capture_default_str();
  trn->add_option("--sigma-max", tr.sigma_max)->capture_default_str();
  trn->add_option("--sigma-min", tr.sigma_min)->capture_default_str();
  trn->add_option("--levels", tr.levels)->capture_default_str();
  trn->add_option("--epochs", tr.epochs)->capture_default_str();
  trn->add_option("--m", tr.m, "Draws per pair in the loss")->capture_default_str();
  trn->add_option("--batch", tr.batch)->capture_default_str();
  trn->add_option("--lr", tr.lr)->capture_default_str();
  trn->add_option("--lr-final", tr.lr_final, "Final learning-rate fraction (cosine decay)")->capture_default_str();
  trn->add_option("--loss-beta", tr.loss_beta, "'matched' or a fixed beta")->capture_default_str();
  trn->add_option("--output", tr.output, "direct or sigma_residual")->capture_default_str();
  trn->add_option("--seed", tr.seed)->capture_default_str();
  trn->add_option("--out", tr.out, "Checkpoint JSON")->required();

  SampleOpts sp;
  auto* smp = app.add_subcommand("sample", "Annealed Langevin generation");
  smp->add_option("--model", sp.model)->required();
  smp->add_option("--chains", sp.chains)->capture_default_str();
  smp->add_option("--steps", sp.steps, "Steps per level (<= 50)")->capture_default_str();
  smp->add_option("--draws", sp.draws, "Posterior draws per score evaluation")->capture_default_str();
  smp->add_option("--step-size", sp.step_size, "Base step size eps0")->capture_default_str();
  smp->add_option("--seed", sp.seeds, "One or more seeds")->delimiter(',');
  smp->add_option("--trace-dir", sp.trace_dir)->required();
  smp->add_option("--clean", sp.clean, "Clean reference CSV (default: fresh Eight Gaussians)");
  smp->add_option("--clean-n", sp.clean_n)->capture_default_str();
  smp->add_flag("--no-final-denoise", sp.no_final_denoise);
  smp->add_option("--beta", sp.beta, "Override the schedule's beta");
  smp->add_option("--lambda", sp.lambda, "Override the schedule's lambda");

  ScoreFieldOpts sf;
  auto* scf = app.add_subcommand("score-field", "Export a score field over a grid");
  scf->add_option("--source", sf.sources, "model, oracle or is (give two to compare)")->required();
  scf->add_option("--model", sf.model);
  scf->add_option("--sigma", sf.sigma)->capture_default_str();
  scf->add_option("--beta", sf.beta);
  scf->add_option("--lambda", sf.lambda);
  scf->add_option("--grid", sf.grid)->capture_default_str();
  scf->add_option("--lo", sf.lo)->capture_default_str();
  scf->add_option("--hi", sf.hi)->capture_default_str();
  scf->add_option("--draws", sf.draws)->capture_default_str();
  scf->add_option("--particles", sf.particles)->capture_default_str();
  scf->add_option("--seed", sf.seed)->capture_default_str();
  scf->add_option("--out", sf.out)->required();

  RichardsonOpts rc;
  auto* ric = app.add_subcommand("richardson", "Clean-score field by Richardson extrapolation");
  ric->add_option("--source", rc.source, "model, conjugate or gmm")->capture_default_str();
  ric->add_option("--model", rc.model);
  ric->add_option("--eps1", rc.eps1)->capture_default_str();
  ric->add_option("--eps2", rc.eps2)->capture_default_str();
  ric->add_option("--grid", rc.grid)->capture_default_str();
  ric->add_option("--lo", rc.lo)->capture_default_str();
  ric->add_option("--hi", rc.hi)->capture_default_str();
  ric->add_option("--draws", rc.draws)->capture_default_str();
  ric->add_option("--seed", rc.seed)->capture_default_str();
  ric->add_option("--out", rc.out)->required();

  EstimateOpts en;
  auto* est = app.add_subcommand("estimate-noise", "Fit noise parameters to a noisy dataset");
  est->add_option("--noisy-data", en.noisy_data)->required();
  est->add_option("--prior-data", en.prior_data, "Clean particles for the importance-sampled posterior");
  est->add_option("--particles", en.particles)->capture_default_str();
  est->add_option("--ref-particles", en.ref_particles)->capture_default_str();
  est->add_option("--rows", en.rows, "Noisy points used (0 = all)")->capture_default_str();
  est->add_option("--draws", en.draws, "Posterior draws per point")->capture_default_str();
  est->add_option("--search", en.search, "grid or nelder_mead")->capture_default_str();
  est->add_option("--budget", en.budget)->capture_default_str();
  est->add_option("--posterior", en.posterior, "is or model")->capture_default_str();
  est->add_option("--reference", en.reference, "is or gaussian")->capture_default_str();
  est->add_option("--model", en.model);
  est->add_option("--oracle-beta", en.oracle_beta)->capture_default_str();
  est->add_option("--oracle-lambda", en.oracle_lambda)->capture_default_str();
  est->add_option("--oracle-s", en.oracle_s)->capture_default_str();
  est->add_option("--fix-s", en.fix_s, "Pin s instead of searching it");
  est->add_option("--seed", en.seed)->capture_default_str();
  est->add_option("--out", en.out)->required();

  PlotOpts pl;
  auto* plt = app.add_subcommand("plot", "Render a CSV as SVG");
  plt->add_option("--in", pl.inputs, "Input CSV (scatter accepts several)")->required();
  plt->add_option("--kind", pl.kind, "scatter, quiver or series")->capture_default_str();
  plt->add_option("--title", pl.title);
  plt->add_option("--out", pl.out)->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gd, args, out);
    if (*trn) return cmd_train(tr, args, out, err);
    if (*smp) return cmd_sample(sp, args, out, err);
    if (*scf) return cmd_score_field(sf, args, out);
    if (*ric) return cmd_richardson(rc, args, out);
    if (*est) return cmd_estimate_noise(en, args, out, err);
    if (*plt) return cmd_plot(pl, args, out);
  } catch (const std::ios_base::failure& e) {
    err << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const SingularityError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const nlohmann::json::exception& e) {
    err << "invalid json: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kNumeric;
  }
  return kUsage;
}

}  // namespace esd::cli
