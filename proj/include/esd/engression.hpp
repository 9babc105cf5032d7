#pragma once

// Conditional generator P_theta(X | Y, t): a noise-fed MLP trained with the matched
// Mahalanobis energy score, with hand-written reverse-mode gradients and an Adam update.

#include "esd/identity.hpp"
#include "esd/schedule.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace esd {

enum class Activation { relu, tanh };

/// direct: output = net(y, z, t).
/// sigma_residual: output = y + sigma_t * net(y, z, t), so the learned correction is
/// measured in units of the current noise scale.
enum class OutputMode { direct, sigma_residual };

struct DenseLayer {
  Mat weight;  // out x in
  Vec bias;
};

struct MlpArchitecture {
  Eigen::Index data_dim = 2;
  Eigen::Index noise_dim = 8;
  std::vector<Eigen::Index> hidden{128, 128, 128};
  Activation activation = Activation::tanh;
  OutputMode output = OutputMode::sigma_residual;
};

/// Network weights. Input layout: concat(y, z, t, log(sigma_t + 1e-3)).
struct MlpParams {
  static constexpr Eigen::Index kTimeDim = 2;

  std::vector<DenseLayer> layers;
  Activation activation = Activation::tanh;
  OutputMode output = OutputMode::direct;
  Eigen::Index data_dim = 2;
  Eigen::Index noise_dim = 8;
  /// Time map sigma_t = sigma_min (sigma_max / sigma_min)^t used by the embedding.
  double sigma_min = 0.01;
  double sigma_max = 1.0;

  Eigen::Index input_dim() const { return data_dim + noise_dim + kTimeDim; }
  double sigma_at(double t) const;
  double t_for_sigma(double sigma) const;
  /// Throws DimensionError when layer shapes do not chain from input_dim() to data_dim,
  /// NumericError on non-finite entries.
  void validate() const;
  std::size_t parameter_count() const;

  nlohmann::json to_json() const;
  static MlpParams from_json(const nlohmann::json& j);
};

/// Glorot-uniform weights (He for relu), zero biases; time map taken from the schedule.
MlpParams init_mlp(const MlpArchitecture& arch, const NoiseSchedule& schedule, Rng& rng);

/// Deterministic forward pass for one (y, z, t).
Vec forward(const MlpParams& params, const Vec& y, const Vec& z, double t);

/// Column-batched forward pass: ys is n x B, zs is d_z x B, one t per column.
Mat forward_columns(const MlpParams& params, const Mat& ys, const Mat& zs, const Vec& ts);

struct LossBeta {
  bool matched = true;
  /// Used when not matched.
  double beta = 1.0;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 128;
  /// Posterior draws per data pair (m >= 2).
  int inner_samples = 16;
  double learning_rate = 1e-3;
  /// Cosine decay of the step size down to learning_rate * lr_final_fraction.
  double lr_final_fraction = 1.0;
  LossBeta loss_beta;
  std::uint64_t seed = 0;
  MlpArchitecture arch;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Clean target x, its noisy version y and the time t at which it was noised.
struct TrainingPair {
  Vec x;
  Vec y;
  double t = 0.0;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<DenseLayer> grads;
};

/// Batch mean of ES_{Sigma_t^-1, beta_t}({forward(y, z_j, t)}_j, x) with the U-statistic
/// estimator, and its exact gradient, for fixed noise inputs: column i*m + j of `zs`
/// feeds draw j of pair i. Throws SingularityError (index = pair) on coincident
/// points when beta < 2.
LossAndGrad es_loss_and_grad_fixed(const MlpParams& params, const std::vector<TrainingPair>& batch, const Mat& zs,
                                   const NoiseSchedule& schedule, const TrainConfig& cfg);

/// As above with z ~ N(0, I) drawn from rng. A pair hitting a coincidence is redrawn once
/// before the error propagates.
LossAndGrad es_loss_and_grad(const MlpParams& params, const std::vector<TrainingPair>& batch,
                             const NoiseSchedule& schedule, const TrainConfig& cfg, Rng& rng);

struct TraceRow {
  int epoch = 0;
  double loss = 0.0;
};

struct TrainResult {
  MlpParams params;
  std::vector<TraceRow> trace;
  /// False when a non-finite loss stopped training; params then hold the last finite state.
  bool completed = true;
  std::string message;
};

/// Adam with bias-corrected first and second moments.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const MlpParams& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(MlpParams& params, const std::vector<DenseLayer>& grads, double learning_rate);

 private:
  double beta1_, beta2_, eps_;
  long steps_ = 0;
  std::vector<DenseLayer> m_, v_;
};

/// Minimizes the matched energy score over pairs y = x + eps_t, t ~ U[0, 1],
/// eps_t ~ q(beta_t, lambda_t, sigma_t^2 Sigma_0). Starts from `init` when given.
TrainResult train(const Batch& data, const NoiseSchedule& schedule, const TrainConfig& cfg,
                  std::optional<MlpParams> init = std::nullopt);

/// `count` independent forward passes with fresh z ~ N(0, I).
Batch posterior_sample(const MlpParams& params, const Vec& y, double t, Eigen::Index count, Rng& rng);

/// PosteriorSampler over a trained network; uses level.t.
class EngressionSampler : public PosteriorSampler {
 public:
  explicit EngressionSampler(MlpParams params);
  Eigen::Index dim() const override { return params_.data_dim; }
  double t_for_sigma(double sigma) const override { return params_.t_for_sigma(sigma); }
  Batch sample(const Vec& y, const NoiseLevel& level, Eigen::Index count, Rng& rng) const override;
  Batch sample_many(const Batch& ys, const NoiseLevel& level, Eigen::Index count,
                    std::vector<Rng>& rngs) const override;
  const MlpParams& params() const { return params_; }

 private:
  MlpParams params_;
};

/// Trained network plus the schedule and configuration it was trained with.
struct Checkpoint {
  MlpParams params;
  NoiseSchedule schedule;
  TrainConfig config;

  nlohmann::json to_json() const;
  static Checkpoint from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace esd
