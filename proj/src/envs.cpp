#include "rad/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rad {

namespace {

Eigen::Vector2d sample_annulus(const StartRegion& region, Rng& rng) {
  const double r2_lo = region.inner_radius * region.inner_radius;
  const double r2_hi = region.outer_radius * region.outer_radius;
  const double radius = std::sqrt(rng.uniform(r2_lo, r2_hi));
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return region.center + radius * Eigen::Vector2d(std::cos(angle), std::sin(angle));
}

bool inside_arena(const Nav2dParams& p, const Eigen::Vector2d& x) {
  return (x.array() >= p.arena_min.array()).all() && (x.array() <= p.arena_max.array()).all();
}

}  // namespace

// ---------------------------------------------------------------------------
// Nav2dEnv

Nav2dEnv::Nav2dEnv(Nav2dParams params) : params_(std::move(params)) {
  if (!(params_.step_size > 0.0)) throw SpecError("nav2d step size must be positive");
  if (!(params_.arena_max.array() > params_.arena_min.array()).all()) throw SpecError("nav2d arena is empty");
  if (params_.goal_radius <= 0.0) throw SpecError("nav2d goal radius must be positive");
  state_ = params_.start.center;
}

bool Nav2dEnv::blocked(const Eigen::Vector2d& p) const {
  return std::any_of(params_.walls.begin(), params_.walls.end(), [&](const Box2& w) { return w.contains(p); });
}

bool Nav2dEnv::in_goal(const StateVec& state) const {
  return (state.head<2>() - params_.goal_center).norm() <= params_.goal_radius;
}

StateVec Nav2dEnv::reset(std::uint64_t seed) {
  rng_ = Rng(seed);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const Eigen::Vector2d p = sample_annulus(params_.start, rng_);
    if (inside_arena(params_, p) && !blocked(p) && !in_goal(p)) {
      state_ = p;
      return state_;
    }
  }
  throw SpecError("nav2d start region has no free space inside the arena");
}

void Nav2dEnv::set_state(const StateVec& state) {
  if (state.size() != 2) throw std::invalid_argument("nav2d state must be 2-dimensional");
  state_ = state;
}

StepResult Nav2dEnv::step(const ActionVec& action) {
  if (action.size() != 2) throw std::invalid_argument("nav2d action must be 2-dimensional");
  if (!action.allFinite()) throw std::invalid_argument("nav2d action is not finite");
  const Eigen::Vector2d a = action.cwiseMax(-params_.step_size).cwiseMin(params_.step_size);
  Eigen::Vector2d next = state_.head<2>() + a;
  if (params_.noise > 0.0) {
    next += params_.noise * params_.step_size * Eigen::Vector2d(rng_.normal(), rng_.normal());
  }
  next = next.cwiseMax(params_.arena_min).cwiseMin(params_.arena_max);
  if (!blocked(next)) state_ = next;

  if (in_goal(state_)) return {state_, params_.goal_reward, true};
  return {state_, -params_.step_cost, false};
}

// ---------------------------------------------------------------------------
// Stitching scenario

StitchingSpec default_stitching_spec() { return StitchingSpec{}; }

Nav2dEnv stitching_eval_env(const StitchingSpec& spec) {
  Nav2dParams params = spec.env;
  params.start = StartRegion{spec.start, spec.ood_inner, spec.ood_outer};
  return Nav2dEnv(params);
}

namespace {

// Drives `env` toward `waypoint` at the given speed, recording transitions,
// until within reach of it (the final step lands exactly on it).
bool walk_to(Nav2dEnv& env, const Eigen::Vector2d& waypoint, double speed, double wobble, Rng& rng,
             std::vector<Transition>& out, std::size_t max_length) {
  while (out.size() < max_length) {
    const Eigen::Vector2d here = env.state().head<2>();
    const Eigen::Vector2d delta = waypoint - here;
    const double dist = delta.norm();
    if (dist < 1e-12) return false;
    Eigen::Vector2d action;
    bool arrives = false;
    if (dist <= speed) {
      action = delta;
      arrives = true;
    } else {
      const Eigen::Vector2d dir = delta / dist;
      const Eigen::Vector2d perp(-dir.y(), dir.x());
      action = speed * dir + wobble * rng.uniform(-1.0, 1.0) * perp;
    }
    action = action.cwiseMax(-env.params().step_size).cwiseMin(env.params().step_size);
    const StateVec state = env.state();
    const StepResult r = env.step(action);
    out.push_back({state, action, r.reward});
    if (r.terminal) return true;
    if (arrives && (env.state().head<2>() - waypoint).norm() < 1e-9) return false;
  }
  return false;
}

// Halfway between `from` and `to`, shifted sideways by U(-spread, spread).
Eigen::Vector2d via_point(const Eigen::Vector2d& from, const Eigen::Vector2d& to, double spread, Rng& rng) {
  const Eigen::Vector2d d = to - from;
  const Eigen::Vector2d perp = Eigen::Vector2d(-d.y(), d.x()).normalized();
  return 0.5 * (from + to) + rng.uniform(-spread, spread) * perp;
}

}  // namespace

StitchingDataset gen_stitching_dataset(const StitchingSpec& spec, std::uint64_t seed, double gamma) {
  const Nav2dParams& p = spec.env;
  const Eigen::Vector2d to_goal = p.goal_center - spec.midpoint;
  const Eigen::Vector2d perp = Eigen::Vector2d(-to_goal.y(), to_goal.x()).normalized();
  const Eigen::Vector2d b_pass = spec.midpoint + spec.gap * perp;
  if (spec.gap < 0.0 || !inside_arena(p, b_pass)) throw SpecError("stitching gap places family B outside the arena");
  for (const auto& pt : {spec.start, spec.midpoint, spec.b_start}) {
    if (!inside_arena(p, pt)) throw SpecError("stitching waypoint outside the arena");
  }
  if ((spec.midpoint - p.goal_center).norm() <= p.goal_radius + p.step_size) {
    throw SpecError("midpoint too close to the goal: family A would reach it");
  }
  if (spec.speed_min <= 0.0 || spec.speed_max < spec.speed_min || spec.dwell_max < spec.dwell_min) {
    throw SpecError("invalid stitching behaviour parameters");
  }

  Rng rng(seed);
  Nav2dEnv env(p);
  std::vector<Trajectory> trajectories;
  std::vector<std::int64_t> family_a;
  std::vector<std::int64_t> family_b;
  std::int64_t next_id = 0;

  for (std::size_t n = 0; n < spec.a_count; ++n) {
    const Eigen::Vector2d s0 = sample_annulus(StartRegion{spec.start, 0.0, spec.start_radius}, rng);
    env.set_state(s0);
    const double speed = p.step_size * rng.uniform(spec.speed_min, spec.speed_max);
    std::vector<Transition> tr;
    walk_to(env, via_point(s0, spec.midpoint, spec.lane_spread, rng), speed, spec.wobble * p.step_size, rng, tr,
            spec.max_length);
    walk_to(env, spec.midpoint, speed, spec.wobble * p.step_size, rng, tr, spec.max_length);
    const auto dwell = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec.dwell_min), static_cast<std::int64_t>(spec.dwell_max)));
    for (std::size_t d = 0; d < dwell && tr.size() < spec.max_length; ++d) {
      const StateVec state = env.state();
      const StepResult r = env.step(Eigen::Vector2d::Zero());
      tr.push_back({state, Eigen::Vector2d::Zero(), r.reward});
    }
    family_a.push_back(next_id);
    trajectories.push_back({next_id++, std::move(tr)});
  }

  for (std::size_t n = 0; n < spec.b_count; ++n) {
    const Eigen::Vector2d s0 = sample_annulus(StartRegion{spec.b_start, 0.0, spec.b_start_radius}, rng);
    env.set_state(s0);
    const double speed = p.step_size * rng.uniform(spec.speed_min, spec.speed_max);
    std::vector<Transition> tr;
    bool done = walk_to(env, b_pass, speed, spec.wobble * p.step_size, rng, tr, spec.max_length);
    const Eigen::Vector2d via = via_point(b_pass, p.goal_center, spec.lane_spread, rng);
    if (!done) done = walk_to(env, via, speed, spec.wobble * p.step_size, rng, tr, spec.max_length);
    if (!done) done = walk_to(env, p.goal_center, speed, spec.wobble * p.step_size, rng, tr, spec.max_length);
    if (!done) throw SpecError("family B trajectory failed to reach the goal within max_length");
    family_b.push_back(next_id);
    trajectories.push_back({next_id++, std::move(tr)});
  }

  return StitchingDataset{OfflineDataset(2, 2, gamma, std::move(trajectories)), std::move(family_a),
                          std::move(family_b)};
}

// ---------------------------------------------------------------------------
// Line walk

OfflineDataset gen_linewalk_dataset(const LineWalkSpec& spec, std::uint64_t seed, double gamma) {
  if (spec.count == 0 || spec.length == 0 || !(spec.step_size > 0.0)) throw SpecError("invalid line-walk spec");
  Rng rng(seed);
  std::vector<Trajectory> trajectories;
  for (std::size_t n = 0; n < spec.count; ++n) {
    // Starts on the step grid so consecutive deltas are exact multiples.
    const auto cells = static_cast<std::int64_t>(std::floor((spec.start_max - spec.start_min) / spec.step_size));
    const auto start_cell = rng.uniform_int(0, std::max<std::int64_t>(0, cells));
    Trajectory traj{static_cast<std::int64_t>(n), {}};
    for (std::size_t t = 0; t < spec.length; ++t) {
      Eigen::VectorXd s(1);
      s[0] = spec.start_min + static_cast<double>(start_cell + static_cast<std::int64_t>(t)) * spec.step_size;
      Eigen::VectorXd a(1);
      a[0] = spec.step_size;
      traj.transitions.push_back({s, a, -spec.step_cost});
    }
    trajectories.push_back(std::move(traj));
  }
  return OfflineDataset(1, 1, gamma, std::move(trajectories));
}

// ---------------------------------------------------------------------------
// Scripted policies

ActionVec greedy_goal_action(const Nav2dEnv& env, const StateVec& state) {
  const Eigen::Vector2d delta = env.params().goal_center - state.head<2>();
  const double reach = env.params().step_size;
  const double scale = delta.cwiseAbs().maxCoeff();
  if (scale <= reach) return delta;
  return delta * (reach / scale);
}

ActionVec random_action(const Env& env, Rng& rng) {
  const Eigen::VectorXd lo = env.action_low();
  const Eigen::VectorXd hi = env.action_high();
  Eigen::VectorXd a(lo.size());
  for (Eigen::Index d = 0; d < a.size(); ++d) a[d] = rng.uniform(lo[d], hi[d]);
  return a;
}

std::unique_ptr<Env> make_env(const std::string& name, const StitchingSpec& spec) {
  if (name == "stitching" || name == "nav2d") return std::make_unique<Nav2dEnv>(stitching_eval_env(spec));
  throw std::invalid_argument("unknown environment '" + name + "'");
}

}  // namespace rad
