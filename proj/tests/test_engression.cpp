#include "esd/engression.hpp"

#include "esd/escore.hpp"
#include "esd/oracle.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace esd;
using esd::testing::uniform;

namespace {

NoiseSchedule gaussian_schedule(Eigen::Index n = 2) {
  return make_schedule(ScheduleKind::sigma_only_geometric, 1.0, 0.01, 10, 2.0, 1.0, Mat::Identity(n, n));
}

MlpParams small_net(Eigen::Index n, std::vector<Eigen::Index> hidden, Activation act, OutputMode out,
                    const NoiseSchedule& sched, Rng& rng) {
  MlpArchitecture arch;
  arch.data_dim = n;
  arch.noise_dim = 3;
  arch.hidden = std::move(hidden);
  arch.activation = act;
  arch.output = out;
  MlpParams p = init_mlp(arch, sched, rng);
  // Non-zero biases so every parameter matters.
  for (auto& l : p.layers) l.bias = standard_normal(l.bias.size(), rng) * 0.1;
  return p;
}

std::vector<TrainingPair> random_pairs(Eigen::Index count, Eigen::Index n, Rng& rng) {
  std::vector<TrainingPair> out;
  for (Eigen::Index i = 0; i < count; ++i) {
    TrainingPair p;
    p.x = standard_normal(n, rng);
    p.y = p.x + 0.3 * standard_normal(n, rng);
    p.t = uniform(rng, 0.0, 1.0);
    out.push_back(p);
  }
  return out;
}

double& coordinate(MlpParams& p, std::size_t layer, bool bias, Eigen::Index r, Eigen::Index c) {
  return bias ? p.layers[layer].bias(r) : p.layers[layer].weight(r, c);
}

const std::string kData = ESD_DATA_DIR;

}  // namespace

TEST(Forward, ZeroNetworkOutputsZero) {
  Rng rng(1);
  const auto sched = gaussian_schedule();
  MlpArchitecture arch;
  arch.output = OutputMode::direct;
  MlpParams p = init_mlp(arch, sched, rng);
  for (auto& l : p.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(forward(p, standard_normal(2, rng), standard_normal(8, rng), uniform(rng, 0, 1)), Vec::Zero(2));
  }
}

TEST(Forward, CopyNetworkReturnsY) {
  MlpParams p;
  p.data_dim = 2;
  p.noise_dim = 8;
  Mat w = Mat::Zero(2, p.input_dim());
  w.leftCols(2) = Mat::Identity(2, 2);
  p.layers.push_back({w, Vec::Zero(2)});
  p.validate();
  Rng rng(2);
  const Vec y = Eigen::Vector2d(0.3, -1.7);
  EXPECT_EQ(forward(p, y, standard_normal(8, rng), 0.4), y);
}

TEST(Forward, DeterministicAndBatchedConsistent) {
  Rng rng(3);
  const auto sched = gaussian_schedule();
  const MlpParams p = init_mlp(MlpArchitecture{}, sched, rng);
  const Mat ys = Mat(esd::testing::random_batch(2, 50, rng));
  const Mat zs = esd::testing::random_batch(8, 50, rng);
  Vec ts(50);
  for (auto& t : ts) t = uniform(rng, 0, 1);
  const Mat a = forward_columns(p, ys, zs, ts);
  EXPECT_EQ(a, forward_columns(p, ys, zs, ts));
  for (Eigen::Index c = 0; c < 50; ++c) {
    EXPECT_LT((forward(p, ys.col(c), zs.col(c), ts(c)) - a.col(c)).norm(), 1e-13);
  }
}

TEST(Forward, ShapeErrors) {
  Rng rng(4);
  const MlpParams p = init_mlp(MlpArchitecture{}, gaussian_schedule(), rng);
  EXPECT_THROW(forward(p, Vec::Zero(3), Vec::Zero(8), 0.5), DimensionError);
  EXPECT_THROW(forward(p, Vec::Zero(2), Vec::Zero(7), 0.5), DimensionError);
  MlpParams broken = p;
  broken.layers[1].weight.conservativeResize(128, 100);
  EXPECT_THROW(broken.validate(), DimensionError);
}

TEST(Loss, ZeroNetworkAtOriginHasZeroLossAndGradient) {
  Rng rng(5);
  const auto sched = gaussian_schedule();
  MlpArchitecture arch;
  arch.output = OutputMode::direct;
  MlpParams p = init_mlp(arch, sched, rng);
  for (auto& l : p.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  std::vector<TrainingPair> batch(4, TrainingPair{Vec::Zero(2), Vec::Zero(2), 0.5});
  TrainConfig cfg;
  cfg.inner_samples = 4;
  const Mat zs = esd::testing::random_batch(8, 16, rng);
  const LossAndGrad lg = es_loss_and_grad_fixed(p, batch, zs, sched, cfg);
  EXPECT_EQ(lg.loss, 0.0);
  for (const auto& g : lg.grads) {
    EXPECT_EQ(g.weight.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(g.bias.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Loss, MatchesEnergyScoreOfForwardDraws) {
  Rng rng(6);
  for (double beta : {2.0, 1.4, 0.8}) {
    Mat base(2, 2);
    base << 1.0, 0.3, 0.3, 0.6;
    const auto sched = make_schedule(ScheduleKind::sigma_only_geometric, 1.0, 0.01, 10, beta, 1.7, base);
    const MlpParams p = small_net(2, {16, 16}, Activation::tanh, OutputMode::sigma_residual, sched, rng);
    const auto batch = random_pairs(5, 2, rng);
    TrainConfig cfg;
    cfg.inner_samples = 6;
    const Mat zs = esd::testing::random_batch(3, 30, rng);
    const double loss = es_loss_and_grad_fixed(p, batch, zs, sched, cfg).loss;
    double expect = 0.0;
    double decomposed = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Batch draws(6, 2);
      for (int j = 0; j < 6; ++j) {
        draws.row(j) = forward(p, batch[i].y, zs.col(static_cast<Eigen::Index>(i) * 6 + j), batch[i].t).transpose();
      }
      const double s = sched.sigma_at(batch[i].t);
      expect += energy_score_mc(draws, batch[i].x, EnergyScoreParams::mahalanobis(beta, base * (s * s)));
      if (beta == 2.0) {
        const Mat prec = (base * (s * s)).inverse();
        double first = 0.0, pair = 0.0;
        for (int j = 0; j < 6; ++j) {
          const Vec d = draws.row(j).transpose() - batch[i].x;
          first += d.dot(prec * d) / 6.0;
          for (int k = 0; k < 6; ++k) {
            if (k == j) continue;
            const Vec e = (draws.row(j) - draws.row(k)).transpose();
            pair += e.dot(prec * e) / 30.0;
          }
        }
        decomposed += first - 0.5 * pair;
      }
    }
    expect /= static_cast<double>(batch.size());
    EXPECT_NEAR(loss, expect, 1e-12 * std::max(1.0, std::abs(expect))) << "beta " << beta;
    if (beta == 2.0) EXPECT_NEAR(loss, decomposed / batch.size(), 1e-12 * std::max(1.0, std::abs(loss)));
  }
}

// Central differences on 50 random coordinates per configuration.
TEST(Loss, GradientMatchesFiniteDifferences) {
  struct Config {
    std::vector<Eigen::Index> hidden;
    Activation act;
    OutputMode out;
    double beta;
  };
  const std::vector<Config> configs{{{12}, Activation::tanh, OutputMode::direct, 2.0},
                                    {{10, 9}, Activation::tanh, OutputMode::sigma_residual, 1.4},
                                    {{8, 8, 8}, Activation::tanh, OutputMode::direct, 1.0},
                                    {{16, 16}, Activation::relu, OutputMode::sigma_residual, 1.6}};
  Rng rng(7);
  for (const auto& c : configs) {
    Mat base(2, 2);
    base << 1.0, -0.2, -0.2, 0.5;
    const auto sched = make_schedule(ScheduleKind::sigma_only_geometric, 1.0, 0.05, 10, c.beta, 1.3, base);
    MlpParams p = small_net(2, c.hidden, c.act, c.out, sched, rng);
    const auto batch = random_pairs(4, 2, rng);
    TrainConfig cfg;
    cfg.inner_samples = 5;
    const Mat zs = esd::testing::random_batch(3, 20, rng);
    const LossAndGrad lg = es_loss_and_grad_fixed(p, batch, zs, sched, cfg);
    int checked = 0;
    while (checked < 50) {
      const auto layer = static_cast<std::size_t>(rng() % p.layers.size());
      const bool bias = rng() % 4 == 0;
      const auto r = static_cast<Eigen::Index>(rng() % p.layers[layer].weight.rows());
      const auto col = static_cast<Eigen::Index>(rng() % p.layers[layer].weight.cols());
      const double analytic = bias ? lg.grads[layer].bias(r) : lg.grads[layer].weight(r, col);
      double& w = coordinate(p, layer, bias, r, col);
      const double keep = w;
      const double h = 1e-5;
      w = keep + h;
      const double up = es_loss_and_grad_fixed(p, batch, zs, sched, cfg).loss;
      w = keep - h;
      const double down = es_loss_and_grad_fixed(p, batch, zs, sched, cfg).loss;
      w = keep;
      const double fd = (up - down) / (2 * h);
      if (std::abs(fd) < 1e-7 && std::abs(analytic) < 1e-7) {
        ++checked;
        continue;
      }
      EXPECT_LT(std::abs(analytic - fd) / std::max(std::abs(fd), 1e-6), 1e-4)
          << "layer " << layer << (bias ? " bias " : " weight ") << r << "," << col;
      ++checked;
    }
  }
}

TEST(Loss, CoincidentDrawsRaiseThenRetry) {
  Rng rng(8);
  const auto sched = make_schedule(ScheduleKind::sigma_only_geometric, 1.0, 0.01, 10, 1.4, 1.8, Mat::Identity(2, 2));
  MlpParams p = small_net(2, {8}, Activation::tanh, OutputMode::direct, sched, rng);
  // Make the output ignore z: identical draws within a pair.
  p.layers[0].weight.middleCols(2, 3).setZero();
  const auto batch = random_pairs(3, 2, rng);
  TrainConfig cfg;
  cfg.inner_samples = 4;
  const Mat zs = esd::testing::random_batch(3, 12, rng);
  try {
    es_loss_and_grad_fixed(p, batch, zs, sched, cfg);
    FAIL() << "expected SingularityError";
  } catch (const SingularityError& e) {
    EXPECT_EQ(e.index(), 0);
  }
  EXPECT_THROW(es_loss_and_grad(p, batch, sched, cfg, rng), SingularityError);
  cfg.inner_samples = 1;
  EXPECT_THROW(es_loss_and_grad(p, batch, sched, cfg, rng), std::invalid_argument);
}

TEST(Adam, FirstStepMovesBySignedLearningRate) {
  Rng rng(9);
  const auto sched = gaussian_schedule();
  MlpParams p = small_net(2, {4}, Activation::tanh, OutputMode::direct, sched, rng);
  const MlpParams before = p;
  std::vector<DenseLayer> grads;
  for (const auto& l : p.layers) {
    grads.push_back({esd::testing::random_batch(l.weight.rows(), l.weight.cols(), rng), standard_normal(l.bias.size(), rng)});
  }
  AdamOptimizer adam(p);
  adam.step(p, grads, 0.01);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const Mat delta = p.layers[l].weight - before.layers[l].weight;
    const Mat expect = -0.01 * grads[l].weight.array().sign().matrix();
    EXPECT_LT((delta - expect).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  Rng rng(10);
  const Batch data = eight_gaussians({}, 64, rng);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 5;
  const auto sched = gaussian_schedule();
  const TrainResult res = train(data, sched, cfg);
  Rng init_rng = make_stream(5, 0);
  const MlpParams init = init_mlp(cfg.arch, sched, init_rng);
  ASSERT_EQ(res.params.layers.size(), init.layers.size());
  for (std::size_t l = 0; l < init.layers.size(); ++l) EXPECT_EQ(res.params.layers[l].weight, init.layers[l].weight);
  EXPECT_TRUE(res.trace.empty());
}

TEST(Train, ReproducibleForFixedSeed) {
  Rng rng(11);
  const Batch data = eight_gaussians({}, 256, rng);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 64;
  cfg.arch.hidden = {16, 16};
  cfg.seed = 3;
  const auto sched = gaussian_schedule();
  const TrainResult a = train(data, sched, cfg);
  const TrainResult b = train(data, sched, cfg);
  for (std::size_t l = 0; l < a.params.layers.size(); ++l) EXPECT_EQ(a.params.layers[l].weight, b.params.layers[l].weight);
  ASSERT_EQ(a.trace.size(), 2u);
  EXPECT_EQ(a.trace[1].loss, b.trace[1].loss);
}

TEST(Train, PointMassPriorPosteriorMeanNearZero) {
  const Batch data = Batch::Zero(512, 1);
  const auto sched = gaussian_schedule(1);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 64;
  cfg.inner_samples = 8;
  cfg.arch.data_dim = 1;
  cfg.arch.hidden = {32, 32};
  cfg.arch.output = OutputMode::direct;
  cfg.seed = 1;
  const TrainResult res = train(data, sched, cfg);
  ASSERT_TRUE(res.completed) << res.message;
  Rng rng(12);
  Vec y(1);
  y << 0.5;
  const Batch draws = posterior_sample(res.params, y, 0.05, 2000, rng);
  EXPECT_LT(std::abs(draws.col(0).mean()), 0.1);
}

TEST(Train, HeldOutEnergyScoreDrops) {
  Rng rng(13);
  const Batch data = eight_gaussians({}, 2048, rng);
  const auto sched = gaussian_schedule();
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.arch.hidden = {64, 64, 64};
  cfg.seed = 2;
  cfg.arch.output = OutputMode::direct;
  Rng init_rng = make_stream(cfg.seed, 0);
  const MlpParams init = init_mlp(cfg.arch, sched, init_rng);
  const TrainResult res = train(data, sched, cfg);
  // Held-out pairs with frozen noise.
  const Batch held = eight_gaussians({}, 256, rng);
  std::vector<TrainingPair> pairs;
  for (Eigen::Index i = 0; i < held.rows(); ++i) {
    TrainingPair p;
    p.x = held.row(i).transpose();
    p.t = uniform(rng, 0.0, 1.0);
    p.y = p.x + sched.sigma_at(p.t) * standard_normal(2, rng);
    pairs.push_back(p);
  }
  const Mat zs = esd::testing::random_batch(8, 256 * cfg.inner_samples, rng);
  const double before = es_loss_and_grad_fixed(init, pairs, zs, sched, cfg).loss;
  const double after = es_loss_and_grad_fixed(res.params, pairs, zs, sched, cfg).loss;
  EXPECT_LT(after, 0.5 * before) << "before " << before << " after " << after;
}

TEST(Train, ConjugateGaussianPosteriorMean) {
  Rng rng(14);
  const Batch data = esd::testing::random_batch(4096, 1, rng);
  const auto sched = gaussian_schedule(1);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 128;
  cfg.arch.data_dim = 1;
  cfg.arch.hidden = {64, 64};
  cfg.lr_final_fraction = 0.1;
  cfg.seed = 4;
  const TrainResult res = train(data, sched, cfg);
  ASSERT_TRUE(res.completed);
  const double t = 0.85;
  const double s2 = std::pow(sched.sigma_at(t), 2);
  double mse = 0.0;
  for (int i = 0; i < 50; ++i) {
    Vec y(1);
    y << -2.0 + 4.0 * i / 49.0;
    const Batch draws = posterior_sample(res.params, y, t, 4000, rng);
    const double exact = y(0) / (1.0 + s2);
    mse += std::pow(draws.col(0).mean() - exact, 2) / 50.0;
  }
  EXPECT_LT(mse, 5e-3);
}

TEST(Train, FixedBetaPolicyGivesUsableSampler) {
  Rng rng(15);
  const Batch data = eight_gaussians({}, 1024, rng);
  const auto sched = make_schedule(ScheduleKind::sigma_only_geometric, 1.0, 0.01, 10, 1.4, 1.8, Mat::Identity(2, 2));
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.arch.hidden = {32, 32};
  cfg.loss_beta = {false, 1.0};
  const TrainResult res = train(data, sched, cfg);
  ASSERT_TRUE(res.completed);
  const EngressionSampler s(res.params);
  const Batch draws = s.sample(Eigen::Vector2d(1.0, 1.0), sched.at(0.5), 100, rng);
  EXPECT_TRUE(draws.allFinite());
}

TEST(Sampler, SampleManyMatchesSample) {
  Rng rng(16);
  const EngressionSampler s(init_mlp(MlpArchitecture{}, gaussian_schedule(), rng));
  Batch ys(3, 2);
  ys << 0, 1, 2, -1, 0.5, 0.5;
  std::vector<Rng> streams{Rng(1), Rng(2), Rng(3)};
  const NoiseLevel level{0.3, 0.1, 2.0, 1.0};
  const Batch many = s.sample_many(ys, level, 7, streams);
  for (int i = 0; i < 3; ++i) {
    Rng r(static_cast<std::uint64_t>(i + 1));
    const Batch one = s.sample(ys.row(i).transpose(), level, 7, r);
    EXPECT_LT((many.middleRows(i * 7, 7) - one).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Sampler, MomentsStableAcrossSeeds) {
  Rng rng(17);
  const MlpParams p = init_mlp(MlpArchitecture{}, gaussian_schedule(), rng);
  const Vec y = Eigen::Vector2d(0.5, -0.5);
  Rng a(1), b(2);
  const Batch da = posterior_sample(p, y, 0.7, 1000, a);
  const Batch db = posterior_sample(p, y, 0.7, 1000, b);
  ASSERT_TRUE(da.allFinite() && db.allFinite());
  for (int k = 0; k < 2; ++k) {
    const double sa = std::sqrt((da.col(k).array() - da.col(k).mean()).square().mean());
    const double sb = std::sqrt((db.col(k).array() - db.col(k).mean()).square().mean());
    const double se = std::sqrt((sa * sa + sb * sb) / 1000.0);
    EXPECT_NEAR(da.col(k).mean(), db.col(k).mean(), 3 * se + 1e-12);
  }
}

TEST(Checkpoint, JsonRoundTripIsExact) {
  Rng rng(18);
  const auto sched = gaussian_schedule();
  TrainConfig cfg;
  cfg.seed = 99;
  const Checkpoint ck{init_mlp(cfg.arch, sched, rng), sched, cfg};
  const auto path = (std::filesystem::temp_directory_path() / "esd_ck_roundtrip.json").string();
  ck.save(path);
  const Checkpoint back = Checkpoint::load(path);
  for (std::size_t l = 0; l < ck.params.layers.size(); ++l) {
    EXPECT_EQ(back.params.layers[l].weight, ck.params.layers[l].weight);
    EXPECT_EQ(back.params.layers[l].bias, ck.params.layers[l].bias);
  }
  EXPECT_EQ(back.schedule.hash(), sched.hash());
  EXPECT_EQ(back.config.seed, 99u);
  EXPECT_EQ(ck.to_json().at("schedule_hash"), sched.hash());
  std::filesystem::remove(path);
}

TEST(Trained, SmallNoiseSamplesConcentrateOnNearestMode) {
  const Checkpoint ck = Checkpoint::load(kData + "/checkpoints/gaussian.json");
  const EngressionSampler s(ck.params);
  const auto mixture = eight_gaussians_mixture();
  Rng rng(19);
  for (int k = 0; k < 8; ++k) {
    const Vec y = mixture.means[static_cast<std::size_t>(k)] + 0.05 * standard_normal(2, rng);
    const Batch draws = s.sample(y, ck.schedule.at(0.0), 500, rng);
    int near = 0;
    for (Eigen::Index i = 0; i < draws.rows(); ++i) {
      if ((draws.row(i).transpose() - mixture.means[static_cast<std::size_t>(k)]).norm() < 3 * mixture.component_std) ++near;
    }
    EXPECT_GE(near, 450) << "mode " << k;
  }
}
