#include "rad/trajectory.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace rad {

namespace {

void check_gamma(double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in (0, 1)");
}

bool all_finite(const Eigen::VectorXd& v) { return v.allFinite(); }

class Fnv1a {
 public:
  void add(std::uint64_t word) {
    for (int b = 0; b < 8; ++b) {
      hash_ ^= (word >> (8 * b)) & 0xFFu;
      hash_ *= 0x100000001B3ULL;
    }
  }
  void add(double value) { add(std::bit_cast<std::uint64_t>(value)); }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

}  // namespace

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

// ---------------------------------------------------------------------------
// Normalizer

Normalizer::Normalizer(Eigen::VectorXd min, Eigen::VectorXd max) : min_(std::move(min)), max_(std::move(max)) {
  if (min_.size() != max_.size()) throw std::invalid_argument("Normalizer: bound size mismatch");
  for (Eigen::Index d = 0; d < min_.size(); ++d) {
    if (max_[d] < min_[d]) throw std::invalid_argument("Normalizer: max below min");
  }
}

Normalizer Normalizer::fit(const std::vector<const Eigen::VectorXd*>& samples, std::size_t dim) {
  Eigen::VectorXd lo = Eigen::VectorXd::Constant(dim, std::numeric_limits<double>::infinity());
  Eigen::VectorXd hi = Eigen::VectorXd::Constant(dim, -std::numeric_limits<double>::infinity());
  for (const auto* x : samples) {
    lo = lo.cwiseMin(*x);
    hi = hi.cwiseMax(*x);
  }
  if (samples.empty()) {
    lo.setZero();
    hi.setZero();
  }
  return Normalizer(std::move(lo), std::move(hi));
}

Eigen::VectorXd Normalizer::normalize(const Eigen::VectorXd& raw) const {
  if (static_cast<std::size_t>(raw.size()) != dim()) throw std::invalid_argument("normalize: dimension mismatch");
  Eigen::VectorXd out(raw.size());
  for (Eigen::Index d = 0; d < raw.size(); ++d) {
    const double span = max_[d] - min_[d];
    out[d] = span > 0.0 ? 2.0 * (raw[d] - min_[d]) / span - 1.0 : 0.0;
  }
  return out;
}

Eigen::VectorXd Normalizer::denormalize(const Eigen::VectorXd& normalized) const {
  if (static_cast<std::size_t>(normalized.size()) != dim()) {
    throw std::invalid_argument("denormalize: dimension mismatch");
  }
  Eigen::VectorXd out(normalized.size());
  for (Eigen::Index d = 0; d < normalized.size(); ++d) {
    const double span = max_[d] - min_[d];
    out[d] = span > 0.0 ? min_[d] + 0.5 * (normalized[d] + 1.0) * span : min_[d];
  }
  return out;
}

// ---------------------------------------------------------------------------
// OfflineDataset

OfflineDataset::OfflineDataset(std::size_t ds, std::size_t da, double gamma, std::vector<Trajectory> trajectories)
    : ds_(ds), da_(da), gamma_(gamma), trajectories_(std::move(trajectories)) {
  if (ds_ == 0 || da_ == 0) throw SchemaError("state and action dimensions must be positive");
  if (!(gamma_ > 0.0 && gamma_ < 1.0)) throw SchemaError("gamma must lie in (0, 1)");
  if (trajectories_.empty()) throw SchemaError("dataset must contain at least one trajectory");

  std::vector<const Eigen::VectorXd*> states;
  std::vector<const Eigen::VectorXd*> actions;
  for (std::size_t k = 0; k < trajectories_.size(); ++k) {
    const auto& traj = trajectories_[k];
    if (traj.length() == 0) throw SchemaError("trajectory " + std::to_string(traj.id) + " is empty");
    if (!index_.emplace(traj.id, k).second) {
      throw SchemaError("duplicate trajectory id " + std::to_string(traj.id));
    }
    for (const auto& tr : traj.transitions) {
      if (static_cast<std::size_t>(tr.state.size()) != ds_ || static_cast<std::size_t>(tr.action.size()) != da_) {
        throw SchemaError("trajectory " + std::to_string(traj.id) + " has inconsistent dimensions");
      }
      if (!all_finite(tr.state) || !all_finite(tr.action) || !std::isfinite(tr.reward)) {
        throw SchemaError("trajectory " + std::to_string(traj.id) + " has non-finite values");
      }
      states.push_back(&tr.state);
      actions.push_back(&tr.action);
    }
    total_steps_ += traj.length();
  }
  state_norm_ = Normalizer::fit(states, ds_);
  action_norm_ = Normalizer::fit(actions, da_);
}

const Trajectory& OfflineDataset::by_id(std::int64_t id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::out_of_range("no trajectory with id " + std::to_string(id));
  return trajectories_[it->second];
}

std::uint64_t OfflineDataset::content_hash() const {
  Fnv1a h;
  h.add(static_cast<std::uint64_t>(ds_));
  h.add(static_cast<std::uint64_t>(da_));
  h.add(gamma_);
  for (const auto& traj : trajectories_) {
    h.add(static_cast<std::uint64_t>(traj.id));
    h.add(static_cast<std::uint64_t>(traj.length()));
    for (const auto& tr : traj.transitions) {
      for (double v : tr.state) h.add(v);
      for (double v : tr.action) h.add(v);
      h.add(tr.reward);
    }
  }
  return h.value();
}

// ---------------------------------------------------------------------------
// Returns

double discounted_suffix_return(const Trajectory& traj, std::size_t t, double gamma,
                                std::optional<std::size_t> horizon, DiscountConvention convention) {
  check_gamma(gamma);
  if (t >= traj.length()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside trajectory of length " +
                            std::to_string(traj.length()));
  }
  if (horizon && *horizon == 0) throw std::invalid_argument("horizon must be at least 1");
  std::size_t end = traj.length();
  if (horizon) end = std::min(end, t + *horizon);

  double weight = convention == DiscountConvention::kTimeShifted ? 1.0 : std::pow(gamma, static_cast<double>(t));
  double total = 0.0;
  for (std::size_t j = t; j < end; ++j) {
    total += weight * traj.transitions[j].reward;
    weight *= gamma;
  }
  return total;
}

double trajectory_return(const Trajectory& traj, double gamma) { return discounted_suffix_return(traj, 0, gamma); }

// ---------------------------------------------------------------------------
// Persistence

namespace {

Eigen::VectorXd to_vector(const nlohmann::json& arr, std::size_t line) {
  if (!arr.is_array()) throw ParseError(line, "expected a numeric array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t d = 0; d < arr.size(); ++d) {
    if (!arr[d].is_number()) throw ParseError(line, "expected a number");
    v[static_cast<Eigen::Index>(d)] = arr[d].get<double>();
  }
  return v;
}

void write_vector(std::ostream& out, const Eigen::VectorXd& v) {
  out << '[';
  for (Eigen::Index d = 0; d < v.size(); ++d) {
    if (d) out << ',';
    out << format_double(v[d]);
  }
  out << ']';
}

}  // namespace

OfflineDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());

  std::string text;
  std::size_t line_no = 0;
  std::optional<std::size_t> ds, da;
  double gamma = 0.0;
  std::vector<Trajectory> trajectories;

  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, e.what());
    }
    if (!rec.is_object()) throw ParseError(line_no, "expected a JSON object");

    try {
      if (!ds) {
        if (!rec.contains("ds") || !rec.contains("da") || !rec.contains("gamma")) {
          throw ParseError(line_no, "missing header {ds, da, gamma}");
        }
        ds = rec.at("ds").get<std::size_t>();
        da = rec.at("da").get<std::size_t>();
        gamma = rec.at("gamma").get<double>();
        continue;
      }
      const auto& states = rec.at("states");
      const auto& actions = rec.at("actions");
      const auto& rewards = rec.at("rewards");
      if (!states.is_array() || !actions.is_array() || !rewards.is_array()) {
        throw ParseError(line_no, "states, actions and rewards must be arrays");
      }
      if (states.size() != actions.size() || states.size() != rewards.size()) {
        throw SchemaError("line " + std::to_string(line_no) + ": states/actions/rewards lengths differ");
      }
      Trajectory traj;
      traj.id = rec.at("id").get<std::int64_t>();
      traj.transitions.reserve(states.size());
      for (std::size_t t = 0; t < states.size(); ++t) {
        Transition tr{to_vector(states[t], line_no), to_vector(actions[t], line_no), 0.0};
        if (!rewards[t].is_number()) throw ParseError(line_no, "reward must be a number");
        tr.reward = rewards[t].get<double>();
        if (static_cast<std::size_t>(tr.state.size()) != *ds || static_cast<std::size_t>(tr.action.size()) != *da) {
          throw SchemaError("line " + std::to_string(line_no) + ": vector dimension differs from header");
        }
        traj.transitions.push_back(std::move(tr));
      }
      trajectories.push_back(std::move(traj));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
  }
  if (!ds) throw SchemaError("dataset file has no header");
  return OfflineDataset(*ds, *da, gamma, std::move(trajectories));
}

void save_dataset(const OfflineDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  out << "{\"ds\":" << dataset.state_dim() << ",\"da\":" << dataset.action_dim()
      << ",\"gamma\":" << format_double(dataset.gamma()) << "}\n";
  for (const auto& traj : dataset.trajectories()) {
    out << "{\"id\":" << traj.id << ",\"states\":[";
    for (std::size_t t = 0; t < traj.length(); ++t) {
      if (t) out << ',';
      write_vector(out, traj.state(t));
    }
    out << "],\"actions\":[";
    for (std::size_t t = 0; t < traj.length(); ++t) {
      if (t) out << ',';
      write_vector(out, traj.action(t));
    }
    out << "],\"rewards\":[";
    for (std::size_t t = 0; t < traj.length(); ++t) {
      if (t) out << ',';
      out << format_double(traj.reward(t));
    }
    out << "]}\n";
  }
  if (!out) throw std::runtime_error("failed writing dataset " + path.string());
}

}  // namespace rad
