#include "rad/planner.hpp"

#include <algorithm>

namespace rad {

std::string to_string(AblationKind kind) {
  switch (kind) {
    case AblationKind::kNone:
      return "rad";
    case AblationKind::kNoRetrievalRandomTarget:
      return "no_retrieval_random_target";
    case AblationKind::kFixedAnchorPosition:
      return "fixed_anchor_position";
    case AblationKind::kRandomStepCount:
      return "random_step_count";
  }
  return "unknown";
}

AblationKind ablation_from_string(const std::string& name) {
  for (auto kind : {AblationKind::kNone, AblationKind::kNoRetrievalRandomTarget, AblationKind::kFixedAnchorPosition,
                    AblationKind::kRandomStepCount}) {
    if (to_string(kind) == name) return kind;
  }
  throw std::invalid_argument("unknown ablation '" + name + "'");
}

RadPlanner::RadPlanner(std::shared_ptr<const PlannerModels> models, std::shared_ptr<const StateDatabase> db,
                       PlannerConfig config, std::uint64_t seed)
    : models_(std::move(models)), db_(std::move(db)), config_(config), rng_(seed) {
  if (!models_ || !models_->denoiser) throw ConfigurationError("planner requires a trained denoiser");
  if (!db_) throw ConfigurationError("planner requires a state database");
  if (config_.replan_interval == 0) throw ConfigurationError("replan interval must be at least 1");
  if (models_->layout.horizon < 2) throw ConfigurationError("plan horizon must be at least 2");
  if (models_->layout.state_dim != db_->dataset().state_dim() ||
      models_->layout.action_dim != db_->dataset().action_dim()) {
    throw ConfigurationError("model plan layout does not match the database dataset");
  }
}

void RadPlanner::reset(std::uint64_t seed) {
  rng_ = Rng(seed);
  plan_.reset();
  cursor_ = 0;
  steps_since_replan_ = 0;
  last_target_.reset();
  plan_diag_ = {};
}

void RadPlanner::set_action_bounds(Eigen::VectorXd low, Eigen::VectorXd high) {
  action_low_ = std::move(low);
  action_high_ = std::move(high);
}

int RadPlanner::target_step_for(const StateVec& state, const StateVec& target) {
  const auto horizon = models_->layout.horizon;
  switch (config_.ablation) {
    case AblationKind::kFixedAnchorPosition:
      return std::clamp(config_.fixed_anchor_position, 1, static_cast<int>(horizon) - 1);
    case AblationKind::kRandomStepCount:
      return static_cast<int>(rng_.uniform_int(1, static_cast<std::int64_t>(horizon) - 1));
    default:
      break;
  }
  if (!models_->step_estimator) throw ConfigurationError("planner requires a step estimator");
  return round_and_clamp_step(models_->step_estimator->raw_output(state, target), horizon);
}

void RadPlanner::replan(const StateVec& state) {
  const auto& dataset = db_->dataset();
  ActDiagnostics diag;
  diag.replanned = true;

  std::optional<RetrievalResult> target;
  if (config_.ablation == AblationKind::kNoRetrievalRandomTarget) {
    const auto k = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(db_->size()) - 1));
    const auto& e = db_->entries()[k];
    RetrievalResult r;
    r.target = e.state;
    r.entry = k;
    r.traj_id = e.traj_id;
    r.timestep = e.timestep;
    r.similarity = cosine_similarity(db_->key_for(state), db_->keys().col(static_cast<Eigen::Index>(k))).value;
    r.segment_return = candidate_segment_return(*db_, k, models_->layout.horizon);
    r.suffix_return = e.suffix_return;
    r.remaining_length = dataset.by_id(e.traj_id).length() - e.timestep;
    target = r;
  } else {
    RetrievalConfig rc = config_.retrieval;
    rc.horizon = models_->layout.horizon;
    target = retrieve_target(*db_, state, rc);
    if (!target) {
      diag.retrieval_miss = true;
      if (config_.fallback == FallbackMode::kLastTarget && last_target_) target = last_target_;
    }
  }

  AnchorSet anchors{{0, dataset.state_norm().normalize(state)}};
  if (target) {
    const int step = target_step_for(state, target->target);
    anchors.push_back({static_cast<std::size_t>(step), dataset.state_norm().normalize(target->target)});
    diag.target = target->target;
    diag.target_step = step;
    diag.similarity = target->similarity;
    diag.segment_return = target->segment_return;
    diag.target_traj = target->traj_id;
    diag.target_timestep = target->timestep;
    last_target_ = target;
  }

  const ReturnGuide* guide = models_->guide ? &*models_->guide : nullptr;
  plan_ = sample_plan(anchors, models_->layout, *models_->denoiser, guide, config_.guidance, models_->schedule, rng_,
                      config_.sampler);
  cursor_ = 0;
  steps_since_replan_ = 0;
  plan_diag_ = diag;
}

ActResult RadPlanner::act(const StateVec& state) {
  const bool due = !plan_ || steps_since_replan_ >= config_.replan_interval ||
                   cursor_ >= models_->layout.horizon;
  if (due) replan(state);

  const auto ds = static_cast<Eigen::Index>(models_->layout.state_dim);
  const auto da = static_cast<Eigen::Index>(models_->layout.action_dim);
  const Eigen::VectorXd normalized = plan_->row(static_cast<Eigen::Index>(cursor_)).segment(ds, da).transpose();
  ActionVec action = db_->dataset().action_norm().denormalize(normalized);
  if (action_low_) action = action.cwiseMax(*action_low_).cwiseMin(*action_high_);

  ActResult result{std::move(action), plan_diag_};
  result.diagnostics.replanned = due;
  result.diagnostics.plan_row = cursor_;
  ++cursor_;
  ++steps_since_replan_;
  return result;
}

RadPlanner ablation_variant(AblationKind kind, const RadPlanner& planner) {
  PlannerConfig config = planner.config();
  config.ablation = kind;
  return RadPlanner(planner.models(), planner.database(), config, 0);
}

EpisodeRecord run_episode(RadPlanner& planner, Env& env, std::size_t max_steps, std::uint64_t seed, double gamma) {
  EpisodeRecord record;
  if (max_steps == 0) return record;
  planner.reset(Rng::derive(seed, 7));
  planner.set_action_bounds(env.action_low(), env.action_high());
  StateVec state = env.reset(seed);
  for (std::size_t t = 0; t < max_steps; ++t) {
    ActResult act;
    StepResult step;
    try {
      act = planner.act(state);
      step = env.step(act.action);
    } catch (const std::exception& e) {
      throw EpisodeError(t, e.what());
    }
    record.states.push_back(state);
    record.actions.push_back(act.action);
    record.rewards.push_back(step.reward);
    record.diagnostics.push_back(std::move(act.diagnostics));
    state = step.state;
    if (step.terminal) {
      record.success = env.in_goal(state);
      break;
    }
  }
  double weight = 1.0;
  for (double r : record.rewards) {
    record.discounted_return += weight * r;
    weight *= gamma;
  }
  return record;
}

nlohmann::json to_json(const EpisodeRecord& record) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json steps = nlohmann::json::array();
  for (std::size_t t = 0; t < record.states.size(); ++t) {
    const auto& d = record.diagnostics[t];
    nlohmann::json step = {{"t", t},
                           {"state", vec(record.states[t])},
                           {"action", vec(record.actions[t])},
                           {"reward", record.rewards[t]},
                           {"replanned", d.replanned},
                           {"retrieval_miss", d.retrieval_miss},
                           {"target_step", d.target_step},
                           {"plan_row", d.plan_row}};
    if (d.target) {
      step["target"] = vec(*d.target);
      step["similarity"] = d.similarity;
      step["segment_return"] = d.segment_return;
      step["target_traj"] = *d.target_traj;
      step["target_timestep"] = *d.target_timestep;
    }
    steps.push_back(std::move(step));
  }
  return {{"success", record.success}, {"return", record.discounted_return}, {"length", record.states.size()},
          {"steps", std::move(steps)}};
}

}  // namespace rad
