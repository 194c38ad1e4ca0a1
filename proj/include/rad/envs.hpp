#pragma once

#include "rad/rng.hpp"
#include "rad/trajectory.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace rad {

struct StepResult {
  StateVec state;
  double reward = 0.0;
  bool terminal = false;
};

class Env {
 public:
  virtual ~Env() = default;

  virtual std::string name() const = 0;
  virtual std::size_t state_dim() const = 0;
  virtual std::size_t action_dim() const = 0;
  virtual Eigen::VectorXd action_low() const = 0;
  virtual Eigen::VectorXd action_high() const = 0;

  virtual StateVec reset(std::uint64_t seed) = 0;
  // Places the agent at `state` without consuming randomness.
  virtual void set_state(const StateVec& state) = 0;
  virtual StepResult step(const ActionVec& action) = 0;
  virtual bool in_goal(const StateVec& state) const = 0;
  virtual std::unique_ptr<Env> clone() const = 0;
};

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Box2 {
  Eigen::Vector2d min;
  Eigen::Vector2d max;
  bool contains(const Eigen::Vector2d& p) const { return (p.array() >= min.array()).all() && (p.array() <= max.array()).all(); }
};

// Start states drawn uniformly (by area) from an annulus around `center`.
struct StartRegion {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double inner_radius = 0.0;
  double outer_radius = 0.1;
};

struct Nav2dParams {
  Eigen::Vector2d arena_min{0.0, 0.0};
  Eigen::Vector2d arena_max{2.2, 2.2};
  double step_size = 0.05;  // per-axis bound on the displacement action
  Eigen::Vector2d goal_center{1.45, 0.39};
  double goal_radius = 0.1;
  double goal_reward = 1.0;
  double step_cost = 0.01;
  std::vector<Box2> walls;
  double noise = 0.0;  // transition noise std, in units of step_size
  StartRegion start;
};

// Planar point mass: state = position, action = displacement.
class Nav2dEnv : public Env {
 public:
  explicit Nav2dEnv(Nav2dParams params);

  std::string name() const override { return "nav2d"; }
  std::size_t state_dim() const override { return 2; }
  std::size_t action_dim() const override { return 2; }
  Eigen::VectorXd action_low() const override { return Eigen::Vector2d::Constant(-params_.step_size); }
  Eigen::VectorXd action_high() const override { return Eigen::Vector2d::Constant(params_.step_size); }

  StateVec reset(std::uint64_t seed) override;
  void set_state(const StateVec& state) override;
  StepResult step(const ActionVec& action) override;
  bool in_goal(const StateVec& state) const override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<Nav2dEnv>(*this); }

  const Nav2dParams& params() const { return params_; }
  const StateVec& state() const { return state_; }
  bool blocked(const Eigen::Vector2d& p) const;

 private:
  Nav2dParams params_;
  StateVec state_ = Eigen::Vector2d::Zero();
  Rng rng_;
};

// Figure-1 style layout: family A runs from S toward M and stops there;
// family B starts elsewhere, passes M (offset by `gap`) and enters G.
struct StitchingSpec {
  Nav2dParams env;
  Eigen::Vector2d start{0.39, 1.45};      // S
  Eigen::Vector2d midpoint{1.06, 1.06};   // M
  Eigen::Vector2d b_start{1.41, 1.41};    // origin of family B
  std::size_t a_count = 24;
  std::size_t b_count = 24;
  double start_radius = 0.1;              // spread of A starts around S
  double b_start_radius = 0.1;
  double gap = 0.0;                       // lateral offset of B's pass near M
  double speed_min = 0.8;                 // fraction of step_size
  double speed_max = 1.0;
  double wobble = 0.15;                   // lateral action noise, fraction of step_size
  double lane_spread = 0.0;               // lateral offset of a via point halfway along A and B's last leg
  std::size_t dwell_min = 0;              // zero-action steps A spends at M
  std::size_t dwell_max = 0;
  double ood_inner = 0.15;                // evaluation starts: annulus around S
  double ood_outer = 0.3;
  std::size_t max_length = 200;
};

struct StitchingDataset {
  OfflineDataset dataset;
  std::vector<std::int64_t> family_a;
  std::vector<std::int64_t> family_b;
};

StitchingSpec default_stitching_spec();
StitchingDataset gen_stitching_dataset(const StitchingSpec& spec, std::uint64_t seed, double gamma = 0.99);
// Environment whose reset() draws out-of-distribution starts around S.
Nav2dEnv stitching_eval_env(const StitchingSpec& spec);

struct LineWalkSpec {
  std::size_t count = 40;
  std::size_t length = 60;
  double step_size = 0.1;
  double start_min = 0.0;
  double start_max = 4.0;
  double step_cost = 0.01;
};

// 1D constant-velocity walks in +x. States t steps apart differ by exactly
// t * step_size, so |dx| / step_size recovers the offset.
OfflineDataset gen_linewalk_dataset(const LineWalkSpec& spec, std::uint64_t seed, double gamma = 0.99);

// Scripted policies used for score normalisation.
ActionVec greedy_goal_action(const Nav2dEnv& env, const StateVec& state);
ActionVec random_action(const Env& env, Rng& rng);

std::unique_ptr<Env> make_env(const std::string& name, const StitchingSpec& spec);

}  // namespace rad
