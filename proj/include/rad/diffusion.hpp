#pragma once

#include "rad/mlp.hpp"
#include "rad/rng.hpp"
#include "rad/trajectory.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rad {

enum class ScheduleKind { kLinear, kCosine };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

// Variance-preserving schedule over diffusion steps 1..N.
// alpha(i)^2 + sigma(i)^2 == 1; step 0 is the clean sample.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(ScheduleKind kind, std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()); }
  ScheduleKind kind() const { return kind_; }

  double beta(int i) const { return betas_.at(index(i)); }
  double alpha_bar(int i) const { return i == 0 ? 1.0 : alpha_bars_.at(index(i)); }
  double alpha(int i) const { return std::sqrt(alpha_bar(i)); }
  double sigma(int i) const { return std::sqrt(1.0 - alpha_bar(i)); }
  // Variance of q(x_{i-1} | x_i, x_0).
  double posterior_variance(int i) const;

  const std::vector<double>& betas() const { return betas_; }
  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);

 private:
  std::size_t index(int i) const;

  ScheduleKind kind_ = ScheduleKind::kCosine;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

NoiseSchedule make_schedule(int steps, ScheduleKind kind = ScheduleKind::kCosine);

// H rows of (state, action) in normalised units, stored row-major so a plan
// flattens to the network input without copying order around.
using PlanMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct PlanLayout {
  std::size_t horizon = 32;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;

  std::size_t width() const { return state_dim + action_dim; }
  std::size_t flat_size() const { return horizon * width(); }
};

Eigen::VectorXd flatten(const PlanMatrix& plan);
PlanMatrix unflatten(const Eigen::VectorXd& flat, const PlanLayout& layout);

struct Anchor {
  std::size_t position = 0;
  StateVec state;  // normalised
};
using AnchorSet = std::vector<Anchor>;

// Overwrites the state block of each anchored row. Throws on an out-of-range
// or repeated position.
void apply_anchors(PlanMatrix& plan, const AnchorSet& anchors);
PlanMatrix anchored(PlanMatrix plan, const AnchorSet& anchors);

// alpha_i * tau0 + sigma_i * eps, elementwise. i == 0 returns tau0.
PlanMatrix forward_noise(const PlanMatrix& tau0, int i, const PlanMatrix& eps, const NoiseSchedule& schedule);

PlanMatrix standard_normal_plan(const PlanLayout& layout, Rng& rng);

// Normalised window of H consecutive (state, action) rows starting at t.
PlanMatrix extract_window(const OfflineDataset& dataset, const Trajectory& traj, std::size_t start,
                          std::size_t horizon);

// ---------------------------------------------------------------------------
// Training

struct DiffusionTrainingOptions {
  std::vector<std::size_t> hidden = {512, 512, 512};
  Activation activation = Activation::kMish;
  std::size_t step_embed_dim = 32;
  double learning_rate = 2e-4;
  std::size_t batch_size = 32;
  double grad_clip = 10.0;
  // Minibatch updates per epoch; 0 means one pass over the windows.
  std::size_t steps_per_epoch = 0;
  // Let windows start anywhere and run past the trajectory end, repeating its
  // last row. Otherwise trajectories shorter than H are skipped.
  bool pad_windows = false;
  // Called after every denoiser epoch (0-based) with the current network.
  std::function<void(std::size_t epoch, const Mlp& net)> on_epoch;
};

// One denoiser regression example.
struct DenoiserSample {
  PlanMatrix clean;
  int step = 1;
  PlanMatrix noise;
  AnchorSet anchors;
};

// Mean squared noise-prediction error over non-anchored entries. Anchored
// state entries are clamped before the network sees the plan and excluded
// from the loss. Accumulates gradients into `grads` when non-null.
double denoiser_loss(const Mlp& denoiser, const NoiseSchedule& schedule, std::span<const DenoiserSample> batch,
                     NetParams* grads = nullptr);

struct DenoiserTrainingResult {
  Mlp denoiser;
  std::vector<double> loss_curve;
};

DenoiserTrainingResult train_denoiser(const OfflineDataset& dataset, std::size_t horizon,
                                      const NoiseSchedule& schedule, std::size_t epochs, std::uint64_t seed,
                                      const DiffusionTrainingOptions& options = {});

// Predicts the normalised window return of a (noisy) plan.
struct ReturnGuide {
  Mlp net;
  double return_min = 0.0;  // raw returns mapped to [0, 1]
  double return_max = 1.0;

  double predict(const PlanMatrix& plan, int step) const;
  // d predict / d plan, same shape as the plan.
  PlanMatrix gradient(const PlanMatrix& plan, int step) const;
};

struct ReturnGuideTrainingResult {
  ReturnGuide guide;
  std::vector<double> loss_curve;
};

DiffusionTrainingOptions default_guide_options();

ReturnGuideTrainingResult train_return_guide(const OfflineDataset& dataset, std::size_t horizon,
                                             const NoiseSchedule& schedule, double gamma, std::size_t epochs,
                                             std::uint64_t seed,
                                             const DiffusionTrainingOptions& options = default_guide_options());

// ---------------------------------------------------------------------------
// Sampling

struct GuidanceConfig {
  double rho = 0.1;
  double gradient_clip = 1.0;  // L2 bound on the guide gradient before scaling
};

enum class ReverseVariance { kBeta, kPosterior };

struct SamplerOptions {
  ReverseVariance variance = ReverseVariance::kBeta;
  bool clip_denoised = true;  // clamp the implied clean plan to [-1, 1]
};

// Guide gradient at tau with anchored state entries zeroed (unclipped).
PlanMatrix guidance_gradient(const ReturnGuide& guide, const PlanMatrix& tau, int step, const AnchorSet& anchors);

// Mean of p(tau^{i-1} | tau^i) from the noise prediction.
PlanMatrix posterior_mean(const Mlp& denoiser, const NoiseSchedule& schedule, const PlanMatrix& tau, int step,
                          const SamplerOptions& options = {});

class SamplingError : public std::runtime_error {
 public:
  SamplingError(int step, const std::string& what) : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

// One guided reverse step i -> i-1. Draws H*(ds+da) normals (row-major) from
// `rng` unless i == 1, then re-applies the anchors.
PlanMatrix denoise_step(const PlanMatrix& tau, int step, const Mlp& denoiser, const ReturnGuide* guide,
                        const GuidanceConfig& guidance, const AnchorSet& anchors, const NoiseSchedule& schedule,
                        Rng& rng, const SamplerOptions& options = {});

using StepObserver = std::function<void(int step, const PlanMatrix& plan)>;

// Noise stream order: the initial plan (H*(ds+da) normals, row-major), then
// one block per reverse step N..2. The observer sees the anchored initial
// plan as step N and every subsequent tau^{i-1}.
PlanMatrix sample_plan(const AnchorSet& anchors, const PlanLayout& layout, const Mlp& denoiser,
                       const ReturnGuide* guide, const GuidanceConfig& guidance, const NoiseSchedule& schedule,
                       Rng& rng, const SamplerOptions& options = {}, const StepObserver& observer = {});

// Anchors {(0, current), (target_step, target)}.
PlanMatrix sample_plan(const StateVec& current, const StateVec& target, int target_step, const PlanLayout& layout,
                       const Mlp& denoiser, const ReturnGuide* guide, const GuidanceConfig& guidance,
                       const NoiseSchedule& schedule, Rng& rng, const SamplerOptions& options = {},
                       const StepObserver& observer = {});

// ---------------------------------------------------------------------------
// Persistence

void save_denoiser(const Mlp& denoiser, const NoiseSchedule& schedule, const PlanLayout& layout,
                   const std::string& config_hash, const std::filesystem::path& path);
struct LoadedDenoiser {
  Mlp net;
  NoiseSchedule schedule;
  PlanLayout layout;
  std::string config_hash;
};
LoadedDenoiser load_denoiser(const std::filesystem::path& path);

void save_return_guide(const ReturnGuide& guide, const std::string& config_hash, const std::filesystem::path& path);
ReturnGuide load_return_guide(const std::filesystem::path& path);

}  // namespace rad
