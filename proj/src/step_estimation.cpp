#include "rad/step_estimation.hpp"

#include "rad/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rad {

std::vector<StepTrainingPair> sample_step_pairs(const OfflineDataset& dataset, std::size_t horizon, std::size_t count,
                                                std::uint64_t seed) {
  if (horizon < 2) throw std::invalid_argument("step pairs need a horizon of at least 2");
  // Cumulative count of valid start positions per trajectory.
  std::vector<std::size_t> cumulative;
  std::size_t total = 0;
  for (const auto& traj : dataset.trajectories()) {
    total += traj.length() - 1;
    cumulative.push_back(total);
  }
  if (total == 0) throw std::invalid_argument("sample_step_pairs: every trajectory has length 1");

  Rng rng(seed);
  std::vector<StepTrainingPair> pairs;
  pairs.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const auto pos = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
    const auto k = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), pos) - cumulative.begin());
    const std::size_t before = k == 0 ? 0 : cumulative[k - 1];
    const auto& traj = dataset.trajectories()[k];
    const std::size_t t = pos - before;
    const std::size_t max_offset = std::min(horizon - 1, traj.length() - 1 - t);
    const auto offset = static_cast<int>(rng.uniform_int(1, static_cast<std::int64_t>(max_offset)));
    pairs.push_back({traj.state(t), traj.state(t + static_cast<std::size_t>(offset)), offset});
  }
  return pairs;
}

int round_and_clamp_step(double raw, std::size_t horizon) {
  const int upper = static_cast<int>(horizon) - 1;
  if (std::isnan(raw)) return 1;
  // std::round rounds halfway cases away from zero.
  const double rounded = std::round(std::clamp(raw, -1e9, 1e9));
  return std::clamp(static_cast<int>(rounded), 1, std::max(1, upper));
}

StepEstimator::StepEstimator(Mlp net, std::size_t horizon, std::optional<Normalizer> input_normalizer)
    : net_(std::move(net)), horizon_(horizon), normalizer_(std::move(input_normalizer)) {
  if (horizon_ < 2) throw std::invalid_argument("step estimator horizon must be at least 2");
  if (net_.spec().output_dim != 1) throw std::invalid_argument("step estimator must have a scalar output");
}

StepEstimator StepEstimator::initialize(std::size_t state_dim, std::size_t horizon, std::uint64_t seed,
                                        const StepEstimatorOptions& options) {
  NetSpec spec{2 * state_dim, options.hidden, 1, options.activation, 0};
  return StepEstimator(Mlp::initialize(spec, seed), horizon, options.input_normalizer);
}

Eigen::VectorXd StepEstimator::features(const StateVec& from, const StateVec& to) const {
  Eigen::VectorXd x(from.size() + to.size());
  if (normalizer_) {
    x << normalizer_->normalize(from), normalizer_->normalize(to);
  } else {
    x << from, to;
  }
  return x;
}

double StepEstimator::raw_output(const StateVec& from, const StateVec& to) const {
  return net_.forward(features(from, to))[0];
}

StepTrainingResult train_step_estimator(const std::vector<StepTrainingPair>& pairs, std::size_t horizon,
                                        std::size_t epochs, double learning_rate, std::uint64_t seed,
                                        const StepEstimatorOptions& options) {
  if (pairs.empty()) throw std::invalid_argument("train_step_estimator: no training pairs");
  const auto ds = static_cast<std::size_t>(pairs.front().from.size());
  StepTrainingResult result{StepEstimator::initialize(ds, horizon, seed, options), {}};
  StepEstimator& est = result.estimator;
  OptimizerState opt = OptimizerState::for_params(est.net().params(), AdamConfig{learning_rate});

  Rng rng(Rng::derive(seed, 1));
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  NetParams grads = est.net().params().zeros_like();
  ForwardTape tape;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    // Fisher-Yates with the platform-independent stream.
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t n = std::min(batch, order.size() - start);
      Eigen::MatrixXd x(static_cast<Eigen::Index>(2 * ds), static_cast<Eigen::Index>(n));
      Eigen::RowVectorXd target(static_cast<Eigen::Index>(n));
      for (std::size_t b = 0; b < n; ++b) {
        const auto& p = pairs[order[start + b]];
        x.col(static_cast<Eigen::Index>(b)) = est.features(p.from, p.to);
        target[static_cast<Eigen::Index>(b)] = p.offset;
      }
      const Eigen::MatrixXd pred = est.net().forward_batch(x, {}, &tape);
      const Eigen::RowVectorXd err = pred.row(0) - target;
      loss_sum += err.squaredNorm();
      grads.set_zero();
      est.net().backward_batch(tape, (2.0 / static_cast<double>(n)) * err, grads);
      clip_grad_norm(grads, options.grad_clip);
      adam_step(est.mutable_net().mutable_params(), grads, opt);
    }
    const double epoch_loss = loss_sum / static_cast<double>(pairs.size());
    if (!std::isfinite(epoch_loss)) {
      throw TrainingError("step estimator diverged at epoch " + std::to_string(epoch));
    }
    result.loss_curve.push_back(epoch_loss);
  }
  return result;
}

void save_step_estimator(const StepEstimator& est, const std::string& config_hash,
                         const std::filesystem::path& path) {
  Checkpoint ckpt{"step_estimator", est.net(), std::nullopt, config_hash, nlohmann::json::object()};
  ckpt.extra["horizon"] = est.horizon();
  if (est.input_normalizer()) {
    const auto& n = *est.input_normalizer();
    ckpt.extra["input_min"] = std::vector<double>(n.min().data(), n.min().data() + n.min().size());
    ckpt.extra["input_max"] = std::vector<double>(n.max().data(), n.max().data() + n.max().size());
  }
  save_checkpoint(ckpt, path);
}

StepEstimator load_step_estimator(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path, "step_estimator");
  std::optional<Normalizer> norm;
  if (ckpt.extra.contains("input_min")) {
    const auto lo = ckpt.extra.at("input_min").get<std::vector<double>>();
    const auto hi = ckpt.extra.at("input_max").get<std::vector<double>>();
    norm = Normalizer(Eigen::Map<const Eigen::VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size())),
                      Eigen::Map<const Eigen::VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size())));
  }
  return StepEstimator(std::move(ckpt.net), ckpt.extra.at("horizon").get<std::size_t>(), std::move(norm));
}

}  // namespace rad
