#include "esd/engression.hpp"
#include "esd/escore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace esd {

namespace {

constexpr double kEmbedOffset = 1e-3;
constexpr Eigen::Index kColumnChunk = 8192;

const char* activation_name(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }
Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation: " + s);
}
const char* output_name(OutputMode o) { return o == OutputMode::direct ? "direct" : "sigma_residual"; }
OutputMode parse_output(const std::string& s) {
  if (s == "direct") return OutputMode::direct;
  if (s == "sigma_residual") return OutputMode::sigma_residual;
  throw std::invalid_argument("unknown output mode: " + s);
}

void activate(Mat& a, Activation act) {
  if (act == Activation::tanh) {
    // Eigen's double tanh is scalar; this form vectorizes through exp.
    a = (1.0 - 2.0 / ((2.0 * a.array()).exp() + 1.0)).matrix();
  } else {
    a = a.cwiseMax(0.0);
  }
}

struct ForwardCache {
  std::vector<Mat> post;  // post[0] = input, post[l] = output of layer l (activated for hidden layers)
  Vec sigmas;
};

Mat build_input(const MlpParams& p, const Mat& ys, const Mat& zs, const Vec& ts, Vec& sigmas) {
  const auto cols = ys.cols();
  require_dim(ys.rows(), p.data_dim, "forward y");
  require_dim(zs.rows(), p.noise_dim, "forward z");
  require_dim(zs.cols(), cols, "forward z columns");
  require_dim(ts.size(), cols, "forward t");
  Mat in(p.input_dim(), cols);
  in.topRows(p.data_dim) = ys;
  in.middleRows(p.data_dim, p.noise_dim) = zs;
  sigmas.resize(cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    sigmas(c) = p.sigma_at(ts(c));
    in(p.data_dim + p.noise_dim, c) = ts(c);
    in(p.data_dim + p.noise_dim + 1, c) = std::log(sigmas(c) + kEmbedOffset);
  }
  return in;
}

Mat run_forward(const MlpParams& p, const Mat& ys, const Mat& zs, const Vec& ts, ForwardCache* cache) {
  Vec sigmas;
  Mat h = build_input(p, ys, zs, ts, sigmas);
  if (cache) {
    cache->post.clear();
    cache->post.push_back(h);
  }
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    Mat a = p.layers[l].weight * h;
    a.colwise() += p.layers[l].bias;
    if (l + 1 < p.layers.size()) activate(a, p.activation);
    h = std::move(a);
    if (cache) cache->post.push_back(h);
  }
  if (p.output == OutputMode::sigma_residual) {
    h = ys + (h.array().rowwise() * sigmas.transpose().array()).matrix();
  }
  if (cache) cache->sigmas = std::move(sigmas);
  return h;
}

std::vector<DenseLayer> run_backward(const MlpParams& p, const ForwardCache& cache, Mat delta) {
  if (p.output == OutputMode::sigma_residual) {
    delta = (delta.array().rowwise() * cache.sigmas.transpose().array()).matrix();
  }
  std::vector<DenseLayer> grads(p.layers.size());
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const Mat& input = cache.post[l];
    grads[l].weight = delta * input.transpose();
    grads[l].bias = delta.rowwise().sum();
    if (l == 0) break;
    Mat back = p.layers[l].weight.transpose() * delta;
    const Mat& act = cache.post[l];
    if (p.activation == Activation::tanh) {
      back.array() *= 1.0 - act.array().square();
    } else {
      back.array() *= (act.array() > 0.0).cast<double>();
    }
    delta = std::move(back);
  }
  return grads;
}

Mat draw_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat z(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) z(r, c) = normal(rng);
  return z;
}

nlohmann::json matrix_json(const Mat& m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) flat.push_back(m(i, j));
  return flat;
}

Mat matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  const auto flat = j.get<std::vector<double>>();
  if (static_cast<Eigen::Index>(flat.size()) != rows * cols) throw DimensionError("checkpoint: weight size mismatch");
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = flat[static_cast<std::size_t>(i * cols + k)];
  return m;
}

}  // namespace

double MlpParams::sigma_at(double t) const { return sigma_min * std::pow(sigma_max / sigma_min, t); }

double MlpParams::t_for_sigma(double sigma) const {
  return std::log(sigma / sigma_min) / std::log(sigma_max / sigma_min);
}

void MlpParams::validate() const {
  if (layers.empty()) throw DimensionError("MlpParams: no layers");
  Eigen::Index width = input_dim();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.weight.cols() != width || layer.bias.size() != layer.weight.rows()) {
      throw DimensionError("MlpParams: layer " + std::to_string(l) + " shape does not chain");
    }
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
      throw NumericError("MlpParams: layer " + std::to_string(l) + " has non-finite entries");
    }
    width = layer.weight.rows();
  }
  if (width != data_dim) throw DimensionError("MlpParams: output width must equal data_dim");
  if (!(sigma_max > sigma_min) || !(sigma_min > 0.0)) throw std::invalid_argument("MlpParams: bad time map");
}

std::size_t MlpParams::parameter_count() const {
  std::size_t total = 0;
  for (const auto& l : layers) total += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return total;
}

nlohmann::json MlpParams::to_json() const {
  nlohmann::json layer_array = nlohmann::json::array();
  for (const auto& l : layers) {
    layer_array.push_back(
        {{"rows", l.weight.rows()}, {"cols", l.weight.cols()}, {"weight", matrix_json(l.weight)}, {"bias", matrix_json(l.bias)}});
  }
  return {{"activation", activation_name(activation)},
          {"output", output_name(output)},
          {"data_dim", data_dim},
          {"noise_dim", noise_dim},
          {"sigma_min", sigma_min},
          {"sigma_max", sigma_max},
          {"layers", layer_array}};
}

MlpParams MlpParams::from_json(const nlohmann::json& j) {
  MlpParams p;
  p.activation = parse_activation(j.at("activation").get<std::string>());
  p.output = parse_output(j.at("output").get<std::string>());
  p.data_dim = j.at("data_dim").get<Eigen::Index>();
  p.noise_dim = j.at("noise_dim").get<Eigen::Index>();
  p.sigma_min = j.at("sigma_min").get<double>();
  p.sigma_max = j.at("sigma_max").get<double>();
  for (const auto& l : j.at("layers")) {
    const auto rows = l.at("rows").get<Eigen::Index>();
    const auto cols = l.at("cols").get<Eigen::Index>();
    DenseLayer layer;
    layer.weight = matrix_from_json(l.at("weight"), rows, cols);
    layer.bias = matrix_from_json(l.at("bias"), rows, 1);
    p.layers.push_back(std::move(layer));
  }
  p.validate();
  return p;
}

MlpParams init_mlp(const MlpArchitecture& arch, const NoiseSchedule& schedule, Rng& rng) {
  MlpParams p;
  p.activation = arch.activation;
  p.output = arch.output;
  p.data_dim = arch.data_dim;
  p.noise_dim = arch.noise_dim;
  p.sigma_min = schedule.sigma_min();
  p.sigma_max = schedule.sigma_max();
  std::vector<Eigen::Index> widths{p.input_dim()};
  widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
  widths.push_back(arch.data_dim);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto fan_in = widths[l];
    const auto fan_out = widths[l + 1];
    const double limit = arch.activation == Activation::relu && l + 2 < widths.size()
                             ? std::sqrt(6.0 / static_cast<double>(fan_in))
                             : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> uni(-limit, limit);
    DenseLayer layer{Mat(fan_out, fan_in), Vec::Zero(fan_out)};
    for (Eigen::Index r = 0; r < fan_out; ++r)
      for (Eigen::Index c = 0; c < fan_in; ++c) layer.weight(r, c) = uni(rng);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

Vec forward(const MlpParams& params, const Vec& y, const Vec& z, double t) {
  Vec ts(1);
  ts(0) = t;
  return run_forward(params, y, z, ts, nullptr).col(0);
}

Mat forward_columns(const MlpParams& params, const Mat& ys, const Mat& zs, const Vec& ts) {
  return run_forward(params, ys, zs, ts, nullptr);
}

void TrainConfig::validate() const {
  if (inner_samples < 2) throw std::invalid_argument("TrainConfig: inner_samples must be >= 2");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be positive");
  if (!loss_beta.matched && !(loss_beta.beta > 0.0)) throw std::invalid_argument("TrainConfig: fixed beta must be > 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"inner_samples", inner_samples},
          {"learning_rate", learning_rate},
          {"lr_final_fraction", lr_final_fraction},
          {"loss_beta", loss_beta.matched ? nlohmann::json("matched") : nlohmann::json(loss_beta.beta)},
          {"seed", seed},
          {"arch",
           {{"data_dim", arch.data_dim},
            {"noise_dim", arch.noise_dim},
            {"hidden", arch.hidden},
            {"activation", activation_name(arch.activation)},
            {"output", output_name(arch.output)}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.inner_samples = j.at("inner_samples").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.lr_final_fraction = j.value("lr_final_fraction", 1.0);
  const auto& lb = j.at("loss_beta");
  if (lb.is_string()) {
    c.loss_beta = {true, 1.0};
  } else {
    c.loss_beta = {false, lb.get<double>()};
  }
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& a = j.at("arch");
  c.arch.data_dim = a.at("data_dim").get<Eigen::Index>();
  c.arch.noise_dim = a.at("noise_dim").get<Eigen::Index>();
  c.arch.hidden = a.at("hidden").get<std::vector<Eigen::Index>>();
  c.arch.activation = parse_activation(a.at("activation").get<std::string>());
  c.arch.output = parse_output(a.at("output").get<std::string>());
  return c;
}

LossAndGrad es_loss_and_grad_fixed(const MlpParams& params, const std::vector<TrainingPair>& batch, const Mat& zs,
                                   const NoiseSchedule& schedule, const TrainConfig& cfg) {
  cfg.validate();
  const auto pairs = static_cast<Eigen::Index>(batch.size());
  if (pairs == 0) throw std::invalid_argument("es_loss_and_grad: empty batch");
  const Eigen::Index m = cfg.inner_samples;
  const Eigen::Index cols = pairs * m;
  const auto n = params.data_dim;
  require_dim(zs.cols(), cols, "es_loss_and_grad noise columns");
  require_dim(schedule.dim(), n, "es_loss_and_grad schedule");

  Mat ys(n, cols);
  Vec ts(cols);
  for (Eigen::Index i = 0; i < pairs; ++i) {
    const auto& pr = batch[static_cast<std::size_t>(i)];
    require_dim(pr.x.size(), n, "es_loss_and_grad x");
    require_dim(pr.y.size(), n, "es_loss_and_grad y");
    for (Eigen::Index j = 0; j < m; ++j) {
      ys.col(i * m + j) = pr.y;
      ts(i * m + j) = pr.t;
    }
  }
  ForwardCache cache;
  const Mat out = run_forward(params, ys, zs, ts, &cache);

  // Distances in whitened coordinates w = L0 v / sigma_t, so |d|_{Sigma_t^-1} = |w_d|_2.
  const Mat l0 = GenGaussParams(2.0, 1.0, schedule.base_sigma()).whitening();
  const double inv_pairs = 1.0 / static_cast<double>(pairs);
  const double first_w = 1.0 / static_cast<double>(m);
  const double pair_w = 1.0 / (static_cast<double>(m) * static_cast<double>(m - 1));

  Mat grad_out = Mat::Zero(n, cols);
  double loss = 0.0;
  Mat w(n, m);
  Mat gw(n, m);
  for (Eigen::Index i = 0; i < pairs; ++i) {
    const auto& pr = batch[static_cast<std::size_t>(i)];
    const NoiseLevel level = schedule.at(pr.t);
    const double beta = cfg.loss_beta.matched ? level.beta : cfg.loss_beta.beta;
    const double inv_sigma = 1.0 / level.sigma;
    w = l0 * out.middleCols(i * m, m) * inv_sigma;
    const Vec wx = l0 * pr.x * inv_sigma;
    gw.setZero();
    double first = 0.0;
    double pair_sum = 0.0;
    auto coefficient = [&](double r) {
      if (r < kCoincidenceTolerance) {
        if (beta < 2.0) throw SingularityError("es_loss_and_grad: coincident points in pair " + std::to_string(i), i);
        return beta == 2.0 ? 2.0 : 0.0;
      }
      return beta * std::pow(r, beta - 2.0);
    };
    for (Eigen::Index j = 0; j < m; ++j) {
      const Vec d = w.col(j) - wx;
      const double r = d.norm();
      first += r < kCoincidenceTolerance ? 0.0 : std::pow(r, beta);
      gw.col(j) += first_w * coefficient(r) * d;
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index k = j + 1; k < m; ++k) {
        const Vec d = w.col(j) - w.col(k);
        const double r = d.norm();
        pair_sum += r < kCoincidenceTolerance ? 0.0 : std::pow(r, beta);
        const Vec g = pair_w * coefficient(r) * d;
        gw.col(j) -= g;
        gw.col(k) += g;
      }
    }
    // (1/m) sum_j r_j^beta - 1/2 * (1/(m(m-1))) * 2 sum_{j<k} r_jk^beta
    loss += inv_pairs * (first_w * first - pair_w * pair_sum);
    // d/dX = L0^T gw / sigma
    grad_out.middleCols(i * m, m) = (l0.transpose() * gw) * (inv_sigma * inv_pairs);
  }
  return {loss, run_backward(params, cache, std::move(grad_out))};
}

LossAndGrad es_loss_and_grad(const MlpParams& params, const std::vector<TrainingPair>& batch,
                             const NoiseSchedule& schedule, const TrainConfig& cfg, Rng& rng) {
  const Eigen::Index m = cfg.inner_samples;
  Mat zs = draw_noise(params.noise_dim, static_cast<Eigen::Index>(batch.size()) * m, rng);
  try {
    return es_loss_and_grad_fixed(params, batch, zs, schedule, cfg);
  } catch (const SingularityError& e) {
    const auto pair = e.index();
    if (pair < 0) throw;
    zs.middleCols(pair * m, m) = draw_noise(params.noise_dim, m, rng);
    return es_loss_and_grad_fixed(params, batch, zs, schedule, cfg);
  }
}

AdamOptimizer::AdamOptimizer(const MlpParams& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& l : params.layers) {
    m_.push_back({Mat::Zero(l.weight.rows(), l.weight.cols()), Vec::Zero(l.bias.size())});
    v_.push_back({Mat::Zero(l.weight.rows(), l.weight.cols()), Vec::Zero(l.bias.size())});
  }
}

void AdamOptimizer::step(MlpParams& params, const std::vector<DenseLayer>& grads, double learning_rate) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  const double step = learning_rate * std::sqrt(c2) / c1;
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
    param.array() -= step * m.array() / (v.array().sqrt() + eps_ * std::sqrt(c2));
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    update(params.layers[l].weight, m_[l].weight, v_[l].weight, grads[l].weight);
    update(params.layers[l].bias, m_[l].bias, v_[l].bias, grads[l].bias);
  }
}

TrainResult train(const Batch& data, const NoiseSchedule& schedule, const TrainConfig& cfg,
                  std::optional<MlpParams> init) {
  cfg.validate();
  if (data.rows() == 0) throw std::invalid_argument("train: empty data");
  require_dim(data.cols(), schedule.dim(), "train data");
  Rng rng = make_stream(cfg.seed, 0);
  TrainResult result{init ? std::move(*init) : init_mlp(cfg.arch, schedule, rng), {}, true, {}};
  MlpParams& params = result.params;
  params.validate();
  require_dim(params.data_dim, data.cols(), "train params");
  if (params.sigma_min != schedule.sigma_min() || params.sigma_max != schedule.sigma_max()) {
    throw std::invalid_argument("train: network time map differs from the schedule");
  }

  AdamOptimizer adam(params);
  const auto n = data.cols();
  const auto rows = data.rows();
  const Mat c0 = GenGaussParams(2.0, 1.0, schedule.base_sigma()).sqrt_sigma();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(rows));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const auto steps_per_epoch = (rows + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch) * cfg.epochs;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  long step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (Eigen::Index start = 0; start < rows; start += cfg.batch_size) {
      const auto stop = std::min<Eigen::Index>(rows, start + cfg.batch_size);
      std::vector<TrainingPair> batch;
      batch.reserve(static_cast<std::size_t>(stop - start));
      for (Eigen::Index k = start; k < stop; ++k) {
        TrainingPair pr;
        pr.x = data.row(order[static_cast<std::size_t>(k)]).transpose();
        pr.t = unit(rng);
        const NoiseLevel level = schedule.at(pr.t);
        pr.y = pr.x + level.sigma * (c0 * gg_sample_whitened(level.beta, level.lambda, n, rng));
        batch.push_back(std::move(pr));
      }
      const LossAndGrad lg = es_loss_and_grad(params, batch, schedule, cfg, rng);
      bool finite = std::isfinite(lg.loss);
      for (const auto& g : lg.grads) finite = finite && g.weight.allFinite() && g.bias.allFinite();
      if (!finite) {
        result.completed = false;
        result.message = "non-finite loss at epoch " + std::to_string(epoch + 1) + "; returning last finite parameters";
        return result;
      }
      const double progress = total_steps > 0 ? static_cast<double>(step) / total_steps : 0.0;
      const double decay =
          cfg.lr_final_fraction + (1.0 - cfg.lr_final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      adam.step(params, lg.grads, cfg.learning_rate * decay);
      epoch_loss += lg.loss * static_cast<double>(stop - start);
      ++step;
    }
    result.trace.push_back({epoch + 1, epoch_loss / static_cast<double>(rows)});
  }
  return result;
}

Batch posterior_sample(const MlpParams& params, const Vec& y, double t, Eigen::Index count, Rng& rng) {
  if (count < 1) throw std::invalid_argument("posterior_sample: count must be >= 1");
  const Mat zs = draw_noise(params.noise_dim, count, rng);
  const Mat ys = y.replicate(1, count);
  return forward_columns(params, ys, zs, Vec::Constant(count, t)).transpose();
}

EngressionSampler::EngressionSampler(MlpParams params) : params_(std::move(params)) { params_.validate(); }

Batch EngressionSampler::sample(const Vec& y, const NoiseLevel& level, Eigen::Index count, Rng& rng) const {
  return posterior_sample(params_, y, level.t, count, rng);
}

Batch EngressionSampler::sample_many(const Batch& ys, const NoiseLevel& level, Eigen::Index count,
                                     std::vector<Rng>& rngs) const {
  if (static_cast<Eigen::Index>(rngs.size()) != ys.rows()) {
    throw DimensionError("sample_many: one rng per conditioning point required");
  }
  const auto n = params_.data_dim;
  const Eigen::Index total = ys.rows() * count;
  Mat zs(params_.noise_dim, total);
  Mat yc(n, total);
  for (Eigen::Index i = 0; i < ys.rows(); ++i) {
    zs.middleCols(i * count, count) = draw_noise(params_.noise_dim, count, rngs[static_cast<std::size_t>(i)]);
    yc.middleCols(i * count, count) = ys.row(i).transpose().replicate(1, count);
  }
  Batch out(total, n);
  for (Eigen::Index start = 0; start < total; start += kColumnChunk) {
    const auto width = std::min(kColumnChunk, total - start);
    out.middleRows(start, width) =
        forward_columns(params_, yc.middleCols(start, width), zs.middleCols(start, width),
                        Vec::Constant(width, level.t))
            .transpose();
  }
  return out;
}

nlohmann::json Checkpoint::to_json() const {
  return {{"format", "esd-engression-checkpoint-v1"},
          {"network", params.to_json()},
          {"schedule", schedule.to_json()},
          {"schedule_hash", schedule.hash()},
          {"train_config", config.to_json()}};
}

Checkpoint Checkpoint::from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "esd-engression-checkpoint-v1") {
    throw std::invalid_argument("checkpoint: unknown format");
  }
  return {MlpParams::from_json(j.at("network")), NoiseSchedule::from_json(j.at("schedule")),
          TrainConfig::from_json(j.at("train_config"))};
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::ios_base::failure("cannot write checkpoint " + path);
  os << to_json().dump() << '\n';
  if (!os) throw std::ios_base::failure("failed writing checkpoint " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::ios_base::failure("cannot read checkpoint " + path);
  return from_json(nlohmann::json::parse(is));
}

}  // namespace esd
