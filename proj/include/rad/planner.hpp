#pragma once

#include "rad/diffusion.hpp"
#include "rad/envs.hpp"
#include "rad/retrieval.hpp"
#include "rad/rng.hpp"
#include "rad/step_estimation.hpp"

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rad {

class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FallbackMode { kUnconditional, kLastTarget };

enum class AblationKind {
  kNone,
  kNoRetrievalRandomTarget,  // target drawn uniformly from the database
  kFixedAnchorPosition,      // target step fixed at 5
  kRandomStepCount,          // target step uniform on [1, H-1]
};

std::string to_string(AblationKind kind);
AblationKind ablation_from_string(const std::string& name);

struct PlannerConfig {
  RetrievalConfig retrieval;
  GuidanceConfig guidance;
  SamplerOptions sampler;
  std::size_t replan_interval = 1;
  FallbackMode fallback = FallbackMode::kUnconditional;
  AblationKind ablation = AblationKind::kNone;
  int fixed_anchor_position = 5;
};

// Trained components shared read-only by any number of planners.
struct PlannerModels {
  std::optional<Mlp> denoiser;
  NoiseSchedule schedule;
  PlanLayout layout;
  std::optional<ReturnGuide> guide;
  std::optional<StepEstimator> step_estimator;
};

// What produced an action: the plan's anchors and retrieval outcome.
struct ActDiagnostics {
  bool replanned = false;
  bool retrieval_miss = false;
  std::optional<StateVec> target;  // raw units
  int target_step = 0;             // 0 when the plan had no target anchor
  double similarity = 0.0;
  double segment_return = 0.0;
  std::optional<std::int64_t> target_traj;
  std::optional<std::size_t> target_timestep;
  std::size_t plan_row = 0;
};

struct ActResult {
  ActionVec action;
  ActDiagnostics diagnostics;
};

class RadPlanner {
 public:
  RadPlanner(std::shared_ptr<const PlannerModels> models, std::shared_ptr<const StateDatabase> db,
             PlannerConfig config, std::uint64_t seed);

  ActResult act(const StateVec& state);

  // Drops the current plan and reseeds the noise stream.
  void reset(std::uint64_t seed);
  void set_action_bounds(Eigen::VectorXd low, Eigen::VectorXd high);

  const PlannerConfig& config() const { return config_; }
  PlannerConfig& mutable_config() { return config_; }
  const std::optional<PlanMatrix>& current_plan() const { return plan_; }
  std::size_t cursor() const { return cursor_; }
  const std::shared_ptr<const PlannerModels>& models() const { return models_; }
  const std::shared_ptr<const StateDatabase>& database() const { return db_; }

 private:
  void replan(const StateVec& state);
  int target_step_for(const StateVec& state, const StateVec& target);

  std::shared_ptr<const PlannerModels> models_;
  std::shared_ptr<const StateDatabase> db_;
  PlannerConfig config_;
  Rng rng_;
  std::optional<PlanMatrix> plan_;
  std::size_t cursor_ = 0;
  std::size_t steps_since_replan_ = 0;
  ActDiagnostics plan_diag_;
  std::optional<RetrievalResult> last_target_;
  std::optional<Eigen::VectorXd> action_low_;
  std::optional<Eigen::VectorXd> action_high_;
};

// Copy of `planner` with one component replaced as described by `kind`.
RadPlanner ablation_variant(AblationKind kind, const RadPlanner& planner);

struct EpisodeRecord {
  std::vector<StateVec> states;  // state before each action
  std::vector<ActionVec> actions;
  std::vector<double> rewards;
  std::vector<ActDiagnostics> diagnostics;
  bool success = false;
  double discounted_return = 0.0;
};

class EpisodeError : public std::runtime_error {
 public:
  EpisodeError(std::size_t step, const std::string& what)
      : std::runtime_error("episode failed at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Closed loop until the env reports terminal or max_steps is reached.
EpisodeRecord run_episode(RadPlanner& planner, Env& env, std::size_t max_steps, std::uint64_t seed,
                          double gamma = 0.99);

nlohmann::json to_json(const EpisodeRecord& record);

}  // namespace rad
