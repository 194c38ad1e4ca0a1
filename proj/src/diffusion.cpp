#include "rad/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rad {

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::kLinear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "linear") return ScheduleKind::kLinear;
  if (name == "cosine") return ScheduleKind::kCosine;
  throw std::invalid_argument("unknown schedule kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// Schedule

NoiseSchedule::NoiseSchedule(ScheduleKind kind, std::vector<double> betas) : kind_(kind), betas_(std::move(betas)) {
  if (betas_.empty()) throw std::invalid_argument("noise schedule needs at least one step");
  double product = 1.0;
  for (double b : betas_) {
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("noise schedule betas must lie in (0, 1)");
    product *= 1.0 - b;
    alpha_bars_.push_back(product);
  }
}

std::size_t NoiseSchedule::index(int i) const {
  if (i < 1 || i > steps()) throw std::out_of_range("diffusion step " + std::to_string(i) + " outside [1, N]");
  return static_cast<std::size_t>(i - 1);
}

double NoiseSchedule::posterior_variance(int i) const {
  return beta(i) * (1.0 - alpha_bar(i - 1)) / (1.0 - alpha_bar(i));
}

nlohmann::json NoiseSchedule::to_json() const { return {{"kind", to_string(kind_)}, {"betas", betas_}}; }

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  return NoiseSchedule(schedule_kind_from_string(j.at("kind").get<std::string>()),
                       j.at("betas").get<std::vector<double>>());
}

NoiseSchedule make_schedule(int steps, ScheduleKind kind) {
  if (steps < 1) throw std::invalid_argument("make_schedule: N must be at least 1");
  constexpr double kMaxBeta = 0.999;
  std::vector<double> betas(static_cast<std::size_t>(steps));
  const double n = static_cast<double>(steps);
  if (kind == ScheduleKind::kLinear) {
    // The classic 1e-4..0.02 range over 1000 steps, rescaled to N steps.
    const double scale = 1000.0 / n;
    const double lo = std::min(1e-4 * scale, kMaxBeta);
    const double hi = std::min(0.02 * scale, kMaxBeta);
    for (int i = 1; i <= steps; ++i) {
      const double frac = steps == 1 ? 1.0 : static_cast<double>(i - 1) / (n - 1.0);
      betas[static_cast<std::size_t>(i - 1)] = lo + (hi - lo) * frac;
    }
  } else {
    constexpr double s = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / n + s) / (1.0 + s) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int i = 1; i <= steps; ++i) {
      const double beta = 1.0 - f(i) / f(i - 1);
      betas[static_cast<std::size_t>(i - 1)] = std::clamp(beta, 1e-8, kMaxBeta);
    }
  }
  return NoiseSchedule(kind, std::move(betas));
}

// ---------------------------------------------------------------------------
// Plans

Eigen::VectorXd flatten(const PlanMatrix& plan) {
  return Eigen::Map<const Eigen::VectorXd>(plan.data(), plan.size());
}

PlanMatrix unflatten(const Eigen::VectorXd& flat, const PlanLayout& layout) {
  if (static_cast<std::size_t>(flat.size()) != layout.flat_size()) throw std::invalid_argument("unflatten: size mismatch");
  return Eigen::Map<const PlanMatrix>(flat.data(), static_cast<Eigen::Index>(layout.horizon),
                                      static_cast<Eigen::Index>(layout.width()));
}

void apply_anchors(PlanMatrix& plan, const AnchorSet& anchors) {
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const auto& anchor = anchors[a];
    if (anchor.position >= static_cast<std::size_t>(plan.rows())) {
      throw std::out_of_range("anchor position " + std::to_string(anchor.position) + " outside plan of " +
                              std::to_string(plan.rows()) + " rows");
    }
    if (anchor.state.size() > plan.cols()) throw std::invalid_argument("anchor state wider than the plan");
    for (std::size_t b = 0; b < a; ++b) {
      if (anchors[b].position == anchor.position) throw std::invalid_argument("duplicate anchor position");
    }
    plan.row(static_cast<Eigen::Index>(anchor.position)).head(anchor.state.size()) = anchor.state.transpose();
  }
}

PlanMatrix anchored(PlanMatrix plan, const AnchorSet& anchors) {
  apply_anchors(plan, anchors);
  return plan;
}

PlanMatrix forward_noise(const PlanMatrix& tau0, int i, const PlanMatrix& eps, const NoiseSchedule& schedule) {
  if (tau0.rows() != eps.rows() || tau0.cols() != eps.cols()) throw std::invalid_argument("forward_noise: shape mismatch");
  return schedule.alpha(i) * tau0 + schedule.sigma(i) * eps;
}

PlanMatrix standard_normal_plan(const PlanLayout& layout, Rng& rng) {
  PlanMatrix plan(static_cast<Eigen::Index>(layout.horizon), static_cast<Eigen::Index>(layout.width()));
  for (Eigen::Index r = 0; r < plan.rows(); ++r) {
    for (Eigen::Index c = 0; c < plan.cols(); ++c) plan(r, c) = rng.normal();
  }
  return plan;
}

PlanMatrix extract_window(const OfflineDataset& dataset, const Trajectory& traj, std::size_t start,
                          std::size_t horizon) {
  const auto ds = static_cast<Eigen::Index>(dataset.state_dim());
  const auto da = static_cast<Eigen::Index>(dataset.action_dim());
  PlanMatrix plan(static_cast<Eigen::Index>(horizon), ds + da);
  for (std::size_t h = 0; h < horizon; ++h) {
    // Rows past the trajectory end repeat its last transition.
    const std::size_t t = std::min(start + h, traj.length() - 1);
    const auto row = static_cast<Eigen::Index>(h);
    plan.row(row).head(ds) = dataset.state_norm().normalize(traj.state(t)).transpose();
    plan.row(row).tail(da) = dataset.action_norm().normalize(traj.action(t)).transpose();
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Window {
  const Trajectory* traj;
  std::size_t start;
};

std::vector<Window> collect_windows(const OfflineDataset& dataset, std::size_t horizon, bool pad_windows) {
  if (horizon < 2) throw std::invalid_argument("plan horizon must be at least 2");
  std::vector<Window> windows;
  for (const auto& traj : dataset.trajectories()) {
    if (pad_windows) {
      for (std::size_t t = 0; t < traj.length(); ++t) windows.push_back({&traj, t});
    } else {
      for (std::size_t t = 0; t + horizon <= traj.length(); ++t) windows.push_back({&traj, t});
    }
  }
  if (windows.empty()) {
    throw SchemaError("no trajectory of length >= " + std::to_string(horizon) + " available for diffusion training");
  }
  return windows;
}

std::size_t updates_per_epoch(const DiffusionTrainingOptions& options, std::size_t windows) {
  if (options.steps_per_epoch > 0) return options.steps_per_epoch;
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  return (windows + batch - 1) / batch;
}

NetSpec plan_net_spec(const DiffusionTrainingOptions& options, std::size_t flat, std::size_t output) {
  return NetSpec{flat, options.hidden, output, options.activation, options.step_embed_dim};
}

}  // namespace

double denoiser_loss(const Mlp& denoiser, const NoiseSchedule& schedule, std::span<const DenoiserSample> batch,
                     NetParams* grads) {
  if (batch.empty()) return 0.0;
  const Eigen::Index flat = batch.front().clean.size();
  const auto n = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXd inputs(flat, n);
  Eigen::MatrixXd targets(flat, n);
  Eigen::MatrixXd mask = Eigen::MatrixXd::Ones(flat, n);
  std::vector<int> steps(batch.size());

  for (Eigen::Index b = 0; b < n; ++b) {
    const auto& sample = batch[static_cast<std::size_t>(b)];
    PlanMatrix noisy = forward_noise(sample.clean, sample.step, sample.noise, schedule);
    apply_anchors(noisy, sample.anchors);
    PlanMatrix sample_mask = PlanMatrix::Ones(noisy.rows(), noisy.cols());
    for (const auto& a : sample.anchors) {
      sample_mask.row(static_cast<Eigen::Index>(a.position)).head(a.state.size()).setZero();
    }
    inputs.col(b) = flatten(noisy);
    targets.col(b) = flatten(sample.noise);
    mask.col(b) = flatten(sample_mask);
    steps[static_cast<std::size_t>(b)] = sample.step;
  }

  ForwardTape tape;
  const Eigen::MatrixXd pred = denoiser.forward_batch(inputs, steps, grads ? &tape : nullptr);
  const Eigen::MatrixXd residual = (pred - targets).cwiseProduct(mask);
  const double count = std::max(1.0, mask.sum());
  const double loss = residual.squaredNorm() / count;
  if (grads) denoiser.backward_batch(tape, (2.0 / count) * residual, *grads);
  return loss;
}

DenoiserTrainingResult train_denoiser(const OfflineDataset& dataset, std::size_t horizon,
                                      const NoiseSchedule& schedule, std::size_t epochs, std::uint64_t seed,
                                      const DiffusionTrainingOptions& options) {
  const std::vector<Window> windows = collect_windows(dataset, horizon, options.pad_windows);
  const PlanLayout layout{horizon, dataset.state_dim(), dataset.action_dim()};
  DenoiserTrainingResult result{
      Mlp::initialize(plan_net_spec(options, layout.flat_size(), layout.flat_size()), seed), {}};
  OptimizerState opt = OptimizerState::for_params(result.denoiser.params(), AdamConfig{options.learning_rate});
  NetParams grads = result.denoiser.params().zeros_like();
  Rng rng(Rng::derive(seed, 2));

  const std::size_t batch_size = std::max<std::size_t>(1, options.batch_size);
  const std::size_t updates = updates_per_epoch(options, windows.size());
  std::vector<DenoiserSample> batch(batch_size);

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t u = 0; u < updates; ++u) {
      // Per sample: window, pseudo-target offset, diffusion step, noise.
      for (auto& sample : batch) {
        const auto& w = windows[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(windows.size()) - 1))];
        sample.clean = extract_window(dataset, *w.traj, w.start, horizon);
        const auto offset = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(horizon) - 1));
        const auto ds = static_cast<Eigen::Index>(layout.state_dim);
        sample.anchors = {{0, sample.clean.row(0).head(ds).transpose()},
                          {offset, sample.clean.row(static_cast<Eigen::Index>(offset)).head(ds).transpose()}};
        sample.step = static_cast<int>(rng.uniform_int(1, schedule.steps()));
        sample.noise = standard_normal_plan(layout, rng);
      }
      grads.set_zero();
      const double loss = denoiser_loss(result.denoiser, schedule, batch, &grads);
      if (!std::isfinite(loss)) throw TrainingError("denoiser loss diverged at epoch " + std::to_string(epoch));
      clip_grad_norm(grads, options.grad_clip);
      adam_step(result.denoiser.mutable_params(), grads, opt);
      loss_sum += loss;
    }
    result.loss_curve.push_back(loss_sum / static_cast<double>(updates));
    if (options.on_epoch) options.on_epoch(epoch, result.denoiser);
  }
  return result;
}

double ReturnGuide::predict(const PlanMatrix& plan, int step) const { return net.forward(flatten(plan), step)[0]; }

PlanMatrix ReturnGuide::gradient(const PlanMatrix& plan, int step) const {
  const auto g = net.backward(flatten(plan), step, Eigen::VectorXd::Ones(1));
  return Eigen::Map<const PlanMatrix>(g.input.data(), plan.rows(), plan.cols());
}

DiffusionTrainingOptions default_guide_options() {
  DiffusionTrainingOptions options;
  options.hidden = {256, 256};
  return options;
}

ReturnGuideTrainingResult train_return_guide(const OfflineDataset& dataset, std::size_t horizon,
                                             const NoiseSchedule& schedule, double gamma, std::size_t epochs,
                                             std::uint64_t seed, const DiffusionTrainingOptions& options) {
  const std::vector<Window> windows = collect_windows(dataset, horizon, options.pad_windows);
  const PlanLayout layout{horizon, dataset.state_dim(), dataset.action_dim()};

  std::vector<double> returns;
  returns.reserve(windows.size());
  for (const auto& w : windows) {
    returns.push_back(discounted_suffix_return(*w.traj, w.start, gamma, horizon));
  }
  const auto [lo, hi] = std::minmax_element(returns.begin(), returns.end());
  ReturnGuideTrainingResult result{
      ReturnGuide{Mlp::initialize(plan_net_spec(options, layout.flat_size(), 1), seed), *lo, *hi}, {}};
  ReturnGuide& guide = result.guide;
  auto scaled = [&](double r) { return guide.return_max > guide.return_min ? (r - guide.return_min) / (guide.return_max - guide.return_min) : 0.0; };

  OptimizerState opt = OptimizerState::for_params(guide.net.params(), AdamConfig{options.learning_rate});
  NetParams grads = guide.net.params().zeros_like();
  Rng rng(Rng::derive(seed, 3));
  const std::size_t batch_size = std::max<std::size_t>(1, options.batch_size);
  const std::size_t updates = updates_per_epoch(options, windows.size());
  ForwardTape tape;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t u = 0; u < updates; ++u) {
      Eigen::MatrixXd inputs(static_cast<Eigen::Index>(layout.flat_size()), static_cast<Eigen::Index>(batch_size));
      Eigen::RowVectorXd targets(static_cast<Eigen::Index>(batch_size));
      std::vector<int> steps(batch_size);
      for (std::size_t b = 0; b < batch_size; ++b) {
        const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(windows.size()) - 1));
        const PlanMatrix clean = extract_window(dataset, *windows[k].traj, windows[k].start, horizon);
        steps[b] = static_cast<int>(rng.uniform_int(1, schedule.steps()));
        const PlanMatrix noise = standard_normal_plan(layout, rng);
        inputs.col(static_cast<Eigen::Index>(b)) = flatten(forward_noise(clean, steps[b], noise, schedule));
        targets[static_cast<Eigen::Index>(b)] = scaled(returns[k]);
      }
      const Eigen::MatrixXd pred = guide.net.forward_batch(inputs, steps, &tape);
      const Eigen::RowVectorXd err = pred.row(0) - targets;
      const double loss = err.squaredNorm() / static_cast<double>(batch_size);
      if (!std::isfinite(loss)) throw TrainingError("return guide loss diverged at epoch " + std::to_string(epoch));
      grads.set_zero();
      guide.net.backward_batch(tape, (2.0 / static_cast<double>(batch_size)) * err, grads);
      clip_grad_norm(grads, options.grad_clip);
      adam_step(guide.net.mutable_params(), grads, opt);
      loss_sum += loss;
    }
    result.loss_curve.push_back(loss_sum / static_cast<double>(updates));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Sampling

PlanMatrix guidance_gradient(const ReturnGuide& guide, const PlanMatrix& tau, int step, const AnchorSet& anchors) {
  PlanMatrix g = guide.gradient(tau, step);
  for (const auto& a : anchors) g.row(static_cast<Eigen::Index>(a.position)).head(a.state.size()).setZero();
  return g;
}

PlanMatrix posterior_mean(const Mlp& denoiser, const NoiseSchedule& schedule, const PlanMatrix& tau, int step,
                          const SamplerOptions& options) {
  const Eigen::VectorXd eps_flat = denoiser.forward(flatten(tau), step);
  const Eigen::Map<const PlanMatrix> eps(eps_flat.data(), tau.rows(), tau.cols());
  const double abar = schedule.alpha_bar(step);
  const double abar_prev = schedule.alpha_bar(step - 1);
  const double beta = schedule.beta(step);

  PlanMatrix clean = (tau - std::sqrt(1.0 - abar) * eps) / std::sqrt(abar);
  if (options.clip_denoised) clean = clean.cwiseMax(-1.0).cwiseMin(1.0);
  const double coef_clean = beta * std::sqrt(abar_prev) / (1.0 - abar);
  const double coef_noisy = (1.0 - abar_prev) * std::sqrt(1.0 - beta) / (1.0 - abar);
  return coef_clean * clean + coef_noisy * tau;
}

PlanMatrix denoise_step(const PlanMatrix& tau, int step, const Mlp& denoiser, const ReturnGuide* guide,
                        const GuidanceConfig& guidance, const AnchorSet& anchors, const NoiseSchedule& schedule,
                        Rng& rng, const SamplerOptions& options) {
  PlanMatrix next = posterior_mean(denoiser, schedule, tau, step, options);
  if (guide && guidance.rho != 0.0) {
    PlanMatrix g = guidance_gradient(*guide, tau, step, anchors);
    const double norm = g.norm();
    if (norm > guidance.gradient_clip && norm > 0.0) g *= guidance.gradient_clip / norm;
    next += guidance.rho * g;
  }
  if (step > 1) {
    const double variance =
        options.variance == ReverseVariance::kBeta ? schedule.beta(step) : schedule.posterior_variance(step);
    const double scale = std::sqrt(variance);
    for (Eigen::Index r = 0; r < next.rows(); ++r) {
      for (Eigen::Index c = 0; c < next.cols(); ++c) next(r, c) += scale * rng.normal();
    }
  }
  if (!next.allFinite()) throw SamplingError(step, "non-finite plan at diffusion step " + std::to_string(step));
  apply_anchors(next, anchors);
  return next;
}

PlanMatrix sample_plan(const AnchorSet& anchors, const PlanLayout& layout, const Mlp& denoiser,
                       const ReturnGuide* guide, const GuidanceConfig& guidance, const NoiseSchedule& schedule,
                       Rng& rng, const SamplerOptions& options, const StepObserver& observer) {
  if (denoiser.spec().input_dim != layout.flat_size()) {
    throw std::invalid_argument("sample_plan: denoiser input does not match the plan layout");
  }
  PlanMatrix tau = standard_normal_plan(layout, rng);
  apply_anchors(tau, anchors);
  if (observer) observer(schedule.steps(), tau);
  for (int i = schedule.steps(); i >= 1; --i) {
    tau = denoise_step(tau, i, denoiser, guide, guidance, anchors, schedule, rng, options);
    if (observer) observer(i - 1, tau);
  }
  return tau;
}

PlanMatrix sample_plan(const StateVec& current, const StateVec& target, int target_step, const PlanLayout& layout,
                       const Mlp& denoiser, const ReturnGuide* guide, const GuidanceConfig& guidance,
                       const NoiseSchedule& schedule, Rng& rng, const SamplerOptions& options,
                       const StepObserver& observer) {
  if (target_step < 1 || static_cast<std::size_t>(target_step) >= layout.horizon) {
    throw std::out_of_range("target step must lie in [1, H-1]");
  }
  const AnchorSet anchors{{0, current}, {static_cast<std::size_t>(target_step), target}};
  return sample_plan(anchors, layout, denoiser, guide, guidance, schedule, rng, options, observer);
}

// ---------------------------------------------------------------------------
// Persistence

void save_denoiser(const Mlp& denoiser, const NoiseSchedule& schedule, const PlanLayout& layout,
                   const std::string& config_hash, const std::filesystem::path& path) {
  Checkpoint ckpt{"denoiser", denoiser, std::nullopt, config_hash, nlohmann::json::object()};
  ckpt.extra["schedule"] = schedule.to_json();
  ckpt.extra["horizon"] = layout.horizon;
  ckpt.extra["state_dim"] = layout.state_dim;
  ckpt.extra["action_dim"] = layout.action_dim;
  save_checkpoint(ckpt, path);
}

LoadedDenoiser load_denoiser(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path, "denoiser");
  PlanLayout layout{ckpt.extra.at("horizon").get<std::size_t>(), ckpt.extra.at("state_dim").get<std::size_t>(),
                    ckpt.extra.at("action_dim").get<std::size_t>()};
  if (ckpt.net.spec().input_dim != layout.flat_size()) {
    throw std::runtime_error("denoiser checkpoint " + path.string() + " layout does not match its network");
  }
  return {std::move(ckpt.net), NoiseSchedule::from_json(ckpt.extra.at("schedule")), layout, ckpt.config_hash};
}

void save_return_guide(const ReturnGuide& guide, const std::string& config_hash, const std::filesystem::path& path) {
  Checkpoint ckpt{"return_guide", guide.net, std::nullopt, config_hash, nlohmann::json::object()};
  ckpt.extra["return_min"] = guide.return_min;
  ckpt.extra["return_max"] = guide.return_max;
  save_checkpoint(ckpt, path);
}

ReturnGuide load_return_guide(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path, "return_guide");
  return ReturnGuide{std::move(ckpt.net), ckpt.extra.at("return_min").get<double>(),
                     ckpt.extra.at("return_max").get<double>()};
}

}  // namespace rad
