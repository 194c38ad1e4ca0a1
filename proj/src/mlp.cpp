#include "rad/mlp.hpp"

#include "rad/rng.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

namespace rad {

namespace {

double softplus(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }

double activate(Activation act, double x) {
  switch (act) {
    case Activation::kRelu:
      return x > 0.0 ? x : 0.0;
    case Activation::kTanh:
      return std::tanh(x);
    case Activation::kMish:
      return x * std::tanh(softplus(x));
  }
  return x;
}

double activate_derivative(Activation act, double x) {
  switch (act) {
    case Activation::kRelu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::kTanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::kMish: {
      const double t = std::tanh(softplus(x));
      const double sigmoid = 1.0 / (1.0 + std::exp(-x));
      return t + x * (1.0 - t * t) * sigmoid;
    }
  }
  return 1.0;
}

constexpr int kCheckpointVersion = 1;

}  // namespace

std::string to_string(Activation act) {
  switch (act) {
    case Activation::kRelu:
      return "relu";
    case Activation::kTanh:
      return "tanh";
    case Activation::kMish:
      return "mish";
  }
  return "unknown";
}

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  if (name == "mish") return Activation::kMish;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

nlohmann::json to_json(const NetSpec& spec) {
  return {{"input_dim", spec.input_dim},
          {"hidden", spec.hidden},
          {"output_dim", spec.output_dim},
          {"activation", to_string(spec.activation)},
          {"step_embed_dim", spec.step_embed_dim}};
}

NetSpec net_spec_from_json(const nlohmann::json& j) {
  NetSpec spec;
  spec.input_dim = j.at("input_dim").get<std::size_t>();
  spec.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  spec.output_dim = j.at("output_dim").get<std::size_t>();
  spec.activation = activation_from_string(j.at("activation").get<std::string>());
  spec.step_embed_dim = j.at("step_embed_dim").get<std::size_t>();
  return spec;
}

// ---------------------------------------------------------------------------
// NetParams

std::size_t NetParams::count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

std::vector<double> NetParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(count());
  for (const auto& l : layers) {
    // Row-major weights, then bias.
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) flat.push_back(l.weight(r, c));
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) flat.push_back(l.bias[r]);
  }
  return flat;
}

void NetParams::unflatten(std::span<const double> flat) {
  if (flat.size() != count()) throw std::invalid_argument("unflatten: parameter count mismatch");
  std::size_t k = 0;
  for (auto& l : layers) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = flat[k++];
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = flat[k++];
  }
}

NetParams NetParams::zeros_like() const {
  NetParams z;
  z.layers.reserve(layers.size());
  for (const auto& l : layers) {
    z.layers.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()), Eigen::VectorXd::Zero(l.bias.size())});
  }
  return z;
}

void NetParams::set_zero() {
  for (auto& l : layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

double NetParams::squared_norm() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.weight.squaredNorm() + l.bias.squaredNorm();
  return s;
}

void NetParams::scale(double factor) {
  for (auto& l : layers) {
    l.weight *= factor;
    l.bias *= factor;
  }
}

NetParams& NetParams::operator+=(const NetParams& other) {
  if (other.layers.size() != layers.size()) throw std::invalid_argument("NetParams: layer count mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weight += other.layers[i].weight;
    layers[i].bias += other.layers[i].bias;
  }
  return *this;
}

// ---------------------------------------------------------------------------
// Embedding

Eigen::VectorXd sinusoidal_step_embedding(int step, std::size_t dim) {
  if (dim % 2 != 0) throw std::invalid_argument("step embedding dimension must be even");
  Eigen::VectorXd emb(static_cast<Eigen::Index>(dim));
  const std::size_t half = dim / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
    emb[static_cast<Eigen::Index>(2 * k)] = std::sin(step * freq);
    emb[static_cast<Eigen::Index>(2 * k + 1)] = std::cos(step * freq);
  }
  return emb;
}

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(NetSpec spec, NetParams params) : spec_(std::move(spec)), params_(std::move(params)) {
  if (spec_.input_dim == 0 || spec_.output_dim == 0) throw std::invalid_argument("NetSpec: zero input/output dim");
  if (spec_.step_embed_dim % 2 != 0) throw std::invalid_argument("NetSpec: step embedding dim must be even");
  if (params_.layers.size() != spec_.layer_count()) throw std::invalid_argument("NetParams: wrong layer count");
  std::size_t fan_in = spec_.input_dim + spec_.step_embed_dim;
  for (std::size_t l = 0; l < params_.layers.size(); ++l) {
    const std::size_t fan_out = l < spec_.hidden.size() ? spec_.hidden[l] : spec_.output_dim;
    const auto& layer = params_.layers[l];
    if (static_cast<std::size_t>(layer.weight.rows()) != fan_out ||
        static_cast<std::size_t>(layer.weight.cols()) != fan_in ||
        static_cast<std::size_t>(layer.bias.size()) != fan_out) {
      throw std::invalid_argument("NetParams: layer " + std::to_string(l) + " shape does not match NetSpec");
    }
    fan_in = fan_out;
  }
}

Mlp Mlp::initialize(const NetSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  NetParams params;
  std::size_t fan_in = spec.input_dim + spec.step_embed_dim;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t fan_out = l < spec.hidden.size() ? spec.hidden[l] : spec.output_dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    LinearLayer layer{Eigen::MatrixXd(fan_out, fan_in), Eigen::VectorXd(fan_out)};
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = rng.uniform(-bound, bound);
    }
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = rng.uniform(-bound, bound);
    params.layers.push_back(std::move(layer));
    fan_in = fan_out;
  }
  return Mlp(spec, std::move(params));
}

Eigen::MatrixXd Mlp::assemble_input(const Eigen::MatrixXd& inputs, std::span<const int> steps) const {
  if (static_cast<std::size_t>(inputs.rows()) != spec_.input_dim) {
    throw std::invalid_argument("Mlp: expected input of dimension " + std::to_string(spec_.input_dim) + ", got " +
                                std::to_string(inputs.rows()));
  }
  if (spec_.step_embed_dim == 0) return inputs;
  if (steps.size() != static_cast<std::size_t>(inputs.cols())) {
    throw std::invalid_argument("Mlp: one diffusion step per sample is required");
  }
  const auto d = static_cast<Eigen::Index>(spec_.input_dim);
  const auto e = static_cast<Eigen::Index>(spec_.step_embed_dim);
  Eigen::MatrixXd full(d + e, inputs.cols());
  full.topRows(d) = inputs;
  for (Eigen::Index c = 0; c < inputs.cols(); ++c) {
    full.col(c).tail(e) = sinusoidal_step_embedding(steps[static_cast<std::size_t>(c)], spec_.step_embed_dim);
  }
  return full;
}

Eigen::MatrixXd Mlp::forward_batch(const Eigen::MatrixXd& inputs, std::span<const int> steps,
                                   ForwardTape* tape) const {
  Eigen::MatrixXd x = assemble_input(inputs, steps);
  if (tape) {
    tape->inputs.clear();
    tape->pre_activations.clear();
  }
  const std::size_t n_layers = params_.layers.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& layer = params_.layers[l];
    Eigen::MatrixXd z = layer.weight * x;
    z.colwise() += layer.bias;
    if (tape) tape->inputs.push_back(std::move(x));
    if (l + 1 == n_layers) return z;
    x = z.unaryExpr([act = spec_.activation](double v) { return activate(act, v); });
    if (tape) tape->pre_activations.push_back(std::move(z));
  }
  return x;
}

void Mlp::backward_batch(const ForwardTape& tape, const Eigen::MatrixXd& upstream, NetParams& param_grads,
                         Eigen::MatrixXd* input_grads) const {
  const std::size_t n_layers = params_.layers.size();
  if (tape.inputs.size() != n_layers) throw std::invalid_argument("backward: tape does not match network");
  if (static_cast<std::size_t>(upstream.rows()) != spec_.output_dim) {
    throw std::invalid_argument("backward: upstream gradient dimension mismatch");
  }
  Eigen::MatrixXd delta = upstream;
  for (std::size_t l = n_layers; l-- > 0;) {
    const auto& layer = params_.layers[l];
    param_grads.layers[l].weight.noalias() += delta * tape.inputs[l].transpose();
    param_grads.layers[l].bias += delta.rowwise().sum();
    if (l == 0 && !input_grads) break;
    Eigen::MatrixXd back = layer.weight.transpose() * delta;
    if (l == 0) {
      *input_grads = back.topRows(static_cast<Eigen::Index>(spec_.input_dim));
      break;
    }
    const auto& z = tape.pre_activations[l - 1];
    delta = back.cwiseProduct(z.unaryExpr([act = spec_.activation](double v) { return activate_derivative(act, v); }));
  }
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& input, std::optional<int> step) const {
  std::vector<int> steps;
  if (spec_.step_embed_dim > 0) {
    if (!step) throw std::invalid_argument("Mlp: network requires a diffusion step");
    steps.push_back(*step);
  }
  return forward_batch(input, steps);
}

Mlp::Gradients Mlp::backward(const Eigen::VectorXd& input, std::optional<int> step,
                             const Eigen::VectorXd& upstream) const {
  std::vector<int> steps;
  if (spec_.step_embed_dim > 0) {
    if (!step) throw std::invalid_argument("Mlp: network requires a diffusion step");
    steps.push_back(*step);
  }
  ForwardTape tape;
  forward_batch(input, steps, &tape);
  Gradients g{params_.zeros_like(), {}};
  Eigen::MatrixXd input_grad;
  backward_batch(tape, upstream, g.params, &input_grad);
  g.input = input_grad.col(0);
  return g;
}

// ---------------------------------------------------------------------------
// Optimiser

OptimizerState OptimizerState::for_params(const NetParams& params, AdamConfig config) {
  return OptimizerState{config, params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(NetParams& params, const NetParams& grads, OptimizerState& state) {
  if (grads.layers.size() != params.layers.size() || state.first_moment.layers.size() != params.layers.size()) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  for (std::size_t l = 0; l < grads.layers.size(); ++l) {
    if (!grads.layers[l].weight.allFinite() || !grads.layers[l].bias.allFinite()) {
      throw TrainingError("non-finite gradient in layer " + std::to_string(l), l);
    }
  }
  const auto& cfg = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);
  const double step_size = cfg.learning_rate / correction1;
  const double sqrt_c2 = std::sqrt(correction2);

  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p.array() -= step_size * m.array() / (v.array().sqrt() / sqrt_c2 + cfg.epsilon);
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    update(params.layers[l].weight, grads.layers[l].weight, state.first_moment.layers[l].weight,
           state.second_moment.layers[l].weight);
    update(params.layers[l].bias, grads.layers[l].bias, state.first_moment.layers[l].bias,
           state.second_moment.layers[l].bias);
  }
}

double clip_grad_norm(NetParams& grads, double max_norm) {
  const double norm = std::sqrt(grads.squared_norm());
  if (norm > max_norm && norm > 0.0) grads.scale(max_norm / norm);
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  // CBOR keeps every double bit-exact.
  auto pack = [](const NetParams& p) { return nlohmann::json(p.flatten()); };
  nlohmann::json j;
  j["format"] = "rad-checkpoint";
  j["version"] = kCheckpointVersion;
  j["role"] = ckpt.role;
  j["spec"] = to_json(ckpt.net.spec());
  j["params"] = pack(ckpt.net.params());
  j["config_hash"] = ckpt.config_hash;
  j["extra"] = ckpt.extra;
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    j["optimizer"] = {{"learning_rate", o.config.learning_rate},
                      {"beta1", o.config.beta1},
                      {"beta2", o.config.beta2},
                      {"epsilon", o.config.epsilon},
                      {"step", o.step},
                      {"first_moment", pack(o.first_moment)},
                      {"second_moment", pack(o.second_moment)}};
  }
  const std::vector<std::uint8_t> bytes = nlohmann::json::to_cbor(j);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_role,
                           const std::optional<NetSpec>& expected_spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::from_cbor(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "rad-checkpoint") throw std::runtime_error(path.string() + " is not a checkpoint");
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version in " + path.string());
  }
  const std::string role = j.at("role").get<std::string>();
  if (role != expected_role) {
    throw std::runtime_error("checkpoint " + path.string() + " has role '" + role + "', expected '" + expected_role +
                             "'");
  }
  const NetSpec spec = net_spec_from_json(j.at("spec"));
  if (expected_spec && !(spec == *expected_spec)) {
    throw std::runtime_error("checkpoint " + path.string() + " network spec does not match configuration");
  }

  Mlp skeleton = Mlp::initialize(spec, 0);
  auto unpack = [&](const nlohmann::json& arr) {
    NetParams p = skeleton.params().zeros_like();
    p.unflatten(arr.get<std::vector<double>>());
    return p;
  };

  Checkpoint ckpt;
  ckpt.role = role;
  ckpt.net = Mlp(spec, unpack(j.at("params")));
  ckpt.config_hash = j.at("config_hash").get<std::string>();
  ckpt.extra = j.value("extra", nlohmann::json::object());
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    OptimizerState state;
    state.config = {o.at("learning_rate").get<double>(), o.at("beta1").get<double>(), o.at("beta2").get<double>(),
                    o.at("epsilon").get<double>()};
    state.step = o.at("step").get<std::uint64_t>();
    state.first_moment = unpack(o.at("first_moment"));
    state.second_moment = unpack(o.at("second_moment"));
    ckpt.optimizer = std::move(state);
  }
  return ckpt;
}

}  // namespace rad
