#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace rad {

using StateVec = Eigen::VectorXd;
using ActionVec = Eigen::VectorXd;

// Malformed dataset content (wrong dimensions, empty, non-finite values).
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unparseable dataset file; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct Transition {
  StateVec state;
  ActionVec action;
  double reward = 0.0;
};

struct Trajectory {
  std::int64_t id = 0;
  std::vector<Transition> transitions;

  std::size_t length() const { return transitions.size(); }
  const StateVec& state(std::size_t t) const { return transitions.at(t).state; }
  const ActionVec& action(std::size_t t) const { return transitions.at(t).action; }
  double reward(std::size_t t) const { return transitions.at(t).reward; }
};

// Which power of gamma weights reward r_j in the return from t.
enum class DiscountConvention {
  kTimeShifted,  // gamma^(j - t)
  kAbsolute,     // gamma^j
};

// Per-dimension affine map between raw values and [-1, 1].
// Dimensions whose min equals max are constant: they map to 0 and back to min.
class Normalizer {
 public:
  Normalizer() = default;
  Normalizer(Eigen::VectorXd min, Eigen::VectorXd max);

  // Builds bounds covering every column vector in `samples`.
  static Normalizer fit(const std::vector<const Eigen::VectorXd*>& samples, std::size_t dim);

  Eigen::VectorXd normalize(const Eigen::VectorXd& raw) const;
  Eigen::VectorXd denormalize(const Eigen::VectorXd& normalized) const;

  std::size_t dim() const { return static_cast<std::size_t>(min_.size()); }
  bool is_constant(std::size_t d) const { return !(max_[d] > min_[d]); }
  const Eigen::VectorXd& min() const { return min_; }
  const Eigen::VectorXd& max() const { return max_; }

 private:
  Eigen::VectorXd min_;
  Eigen::VectorXd max_;
};

// Immutable collection of trajectories with shared dimensions.
class OfflineDataset {
 public:
  OfflineDataset(std::size_t ds, std::size_t da, double gamma, std::vector<Trajectory> trajectories);

  std::size_t state_dim() const { return ds_; }
  std::size_t action_dim() const { return da_; }
  double gamma() const { return gamma_; }
  const std::vector<Trajectory>& trajectories() const { return trajectories_; }
  std::size_t size() const { return trajectories_.size(); }
  std::size_t total_steps() const { return total_steps_; }

  const Trajectory& by_id(std::int64_t id) const;
  const Normalizer& state_norm() const { return state_norm_; }
  const Normalizer& action_norm() const { return action_norm_; }

  // FNV-1a over dimensions, gamma and every stored value's bit pattern.
  std::uint64_t content_hash() const;

 private:
  std::size_t ds_;
  std::size_t da_;
  double gamma_;
  std::vector<Trajectory> trajectories_;
  std::unordered_map<std::int64_t, std::size_t> index_;
  std::size_t total_steps_ = 0;
  Normalizer state_norm_;
  Normalizer action_norm_;
};

// Sum over j in [t, min(T-1, t+horizon-1)] of gamma^(j-t) r_j (or gamma^j).
double discounted_suffix_return(const Trajectory& traj, std::size_t t, double gamma,
                                std::optional<std::size_t> horizon = std::nullopt,
                                DiscountConvention convention = DiscountConvention::kTimeShifted);

double trajectory_return(const Trajectory& traj, double gamma);

// JSON-lines: header {"ds","da","gamma"} then one trajectory per line.
OfflineDataset load_dataset(const std::filesystem::path& path);
void save_dataset(const OfflineDataset& dataset, const std::filesystem::path& path);

// Shared helper for %.17g decimal output.
std::string format_double(double value);

}  // namespace rad
