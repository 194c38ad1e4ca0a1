#pragma once

#include "rad/mlp.hpp"
#include "rad/trajectory.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

namespace rad {

// Two states of one trajectory, `offset` steps apart.
struct StepTrainingPair {
  StateVec from;
  StateVec to;
  int offset = 1;
};

// Uniform over every (trajectory, t) with t < T-1, then offset uniform on
// [1, min(H-1, T-1-t)]. Throws if no trajectory has two or more states.
std::vector<StepTrainingPair> sample_step_pairs(const OfflineDataset& dataset, std::size_t horizon, std::size_t count,
                                                std::uint64_t seed);

// round half away from zero, clamped to [1, H-1].
int round_and_clamp_step(double raw, std::size_t horizon);

struct StepEstimatorOptions {
  std::vector<std::size_t> hidden = {128, 128, 128};
  Activation activation = Activation::kRelu;
  std::size_t batch_size = 64;
  double grad_clip = 10.0;
  // Feed states through the dataset normaliser instead of raw.
  std::optional<Normalizer> input_normalizer;
};

// Predicts how many steps separate a state from a target state.
class StepEstimator {
 public:
  StepEstimator() = default;
  StepEstimator(Mlp net, std::size_t horizon, std::optional<Normalizer> input_normalizer = std::nullopt);

  static StepEstimator initialize(std::size_t state_dim, std::size_t horizon, std::uint64_t seed,
                                  const StepEstimatorOptions& options = {});

  double raw_output(const StateVec& from, const StateVec& to) const;
  int estimate(const StateVec& from, const StateVec& to) const {
    return round_and_clamp_step(raw_output(from, to), horizon_);
  }

  Eigen::VectorXd features(const StateVec& from, const StateVec& to) const;
  const Mlp& net() const { return net_; }
  Mlp& mutable_net() { return net_; }
  std::size_t horizon() const { return horizon_; }
  const std::optional<Normalizer>& input_normalizer() const { return normalizer_; }

 private:
  Mlp net_;
  std::size_t horizon_ = 32;
  std::optional<Normalizer> normalizer_;
};

struct StepTrainingResult {
  StepEstimator estimator;
  std::vector<double> loss_curve;  // mean squared error per epoch
};

// Minibatch Adam on (predicted - offset)^2.
StepTrainingResult train_step_estimator(const std::vector<StepTrainingPair>& pairs, std::size_t horizon,
                                        std::size_t epochs, double learning_rate, std::uint64_t seed,
                                        const StepEstimatorOptions& options = {});

void save_step_estimator(const StepEstimator& est, const std::string& config_hash, const std::filesystem::path& path);
StepEstimator load_step_estimator(const std::filesystem::path& path);

}  // namespace rad
