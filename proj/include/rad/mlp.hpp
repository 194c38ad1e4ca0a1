#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rad {

enum class Activation { kRelu, kTanh, kMish };

std::string to_string(Activation act);
Activation activation_from_string(const std::string& name);

// Raised when optimisation produces non-finite values.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::optional<std::size_t> layer = std::nullopt)
      : std::runtime_error(what), layer_(layer) {}
  std::optional<std::size_t> layer() const { return layer_; }

 private:
  std::optional<std::size_t> layer_;
};

// Fully-connected topology: input -> hidden... -> output, activation after
// every hidden layer, linear output. When step_embed_dim > 0 the first layer
// also receives a sinusoidal embedding of the diffusion step.
struct NetSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 0;
  Activation activation = Activation::kMish;
  std::size_t step_embed_dim = 0;

  std::size_t layer_count() const { return hidden.size() + 1; }
  bool operator==(const NetSpec&) const = default;
};

nlohmann::json to_json(const NetSpec& spec);
NetSpec net_spec_from_json(const nlohmann::json& j);

struct LinearLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

// Weights and biases of every layer; also used as the gradient container.
struct NetParams {
  std::vector<LinearLayer> layers;

  std::size_t count() const;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
  NetParams zeros_like() const;
  void set_zero();
  double squared_norm() const;
  void scale(double factor);
  NetParams& operator+=(const NetParams& other);
};

// Layout: [sin(i w_0), cos(i w_0), sin(i w_1), cos(i w_1), ...], w_k = 10000^(-2k/dim).
Eigen::VectorXd sinusoidal_step_embedding(int step, std::size_t dim);

// Activations cached by forward_batch for a later backward_batch.
struct ForwardTape {
  std::vector<Eigen::MatrixXd> inputs;       // input to layer l (column per sample)
  std::vector<Eigen::MatrixXd> pre_activations;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(NetSpec spec, NetParams params);

  // Fan-in scaled uniform initialisation: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static Mlp initialize(const NetSpec& spec, std::uint64_t seed);

  const NetSpec& spec() const { return spec_; }
  const NetParams& params() const { return params_; }
  NetParams& mutable_params() { return params_; }

  Eigen::VectorXd forward(const Eigen::VectorXd& input, std::optional<int> step = std::nullopt) const;

  struct Gradients {
    NetParams params;
    Eigen::VectorXd input;
  };
  // Gradients of upstream . output with respect to parameters and input.
  Gradients backward(const Eigen::VectorXd& input, std::optional<int> step, const Eigen::VectorXd& upstream) const;

  // Column-per-sample batch versions. `steps` is empty when the net has no
  // step embedding, otherwise one entry per column.
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs, std::span<const int> steps,
                                ForwardTape* tape = nullptr) const;
  // Accumulates parameter gradients into `param_grads`; writes input
  // gradients (without the embedding rows) when `input_grads` is non-null.
  void backward_batch(const ForwardTape& tape, const Eigen::MatrixXd& upstream, NetParams& param_grads,
                      Eigen::MatrixXd* input_grads = nullptr) const;

 private:
  Eigen::MatrixXd assemble_input(const Eigen::MatrixXd& inputs, std::span<const int> steps) const;

  NetSpec spec_;
  NetParams params_;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  NetParams first_moment;
  NetParams second_moment;
  std::uint64_t step = 0;

  static OptimizerState for_params(const NetParams& params, AdamConfig config);
};

// Bias-corrected Adam update. Throws TrainingError naming the first layer
// whose gradient is not finite; parameters are untouched in that case.
void adam_step(NetParams& params, const NetParams& grads, OptimizerState& state);

// Rescales grads so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(NetParams& grads, double max_norm);

// Versioned CBOR container for a trained network.
struct Checkpoint {
  std::string role;
  Mlp net;
  std::optional<OptimizerState> optimizer;
  std::string config_hash;
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// Rejects files with a different role, or a different NetSpec when one is given.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_role,
                           const std::optional<NetSpec>& expected_spec = std::nullopt);

}  // namespace rad
