#include "rad/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rad {

namespace {

constexpr char kMagic[8] = {'R', 'A', 'D', 'D', 'B', '0', '0', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("database file truncated");
  return value;
}

bool ranks_before(const StateDatabase& db, const Candidate& a, const Candidate& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  const auto& ea = db.entries()[a.entry];
  const auto& eb = db.entries()[b.entry];
  if (ea.traj_id != eb.traj_id) return ea.traj_id < eb.traj_id;
  return ea.timestep < eb.timestep;
}

}  // namespace

StateDatabase StateDatabase::build(std::shared_ptr<const OfflineDataset> dataset, double gamma, SimilaritySpace space,
                                   DiscountConvention convention) {
  if (!dataset) throw std::invalid_argument("build_database: null dataset");
  StateDatabase db;
  db.dataset_ = std::move(dataset);
  db.gamma_ = gamma;
  db.space_ = space;
  db.convention_ = convention;
  db.entries_.reserve(db.dataset_->total_steps());
  for (const auto& traj : db.dataset_->trajectories()) {
    // Backward recursion v_t = r_t + gamma v_{t+1}; the absolute convention
    // scales every suffix by gamma^t.
    std::vector<double> suffix(traj.length());
    double running = 0.0;
    for (std::size_t t = traj.length(); t-- > 0;) {
      running = traj.reward(t) + gamma * running;
      suffix[t] = running;
    }
    double offset_weight = 1.0;
    for (std::size_t t = 0; t < traj.length(); ++t) {
      const double v = convention == DiscountConvention::kAbsolute ? offset_weight * suffix[t] : suffix[t];
      db.entries_.push_back({traj.state(t), traj.id, t, v});
      offset_weight *= gamma;
    }
  }
  db.index_keys();
  return db;
}

void StateDatabase::index_keys() {
  const auto ds = static_cast<Eigen::Index>(dataset_->state_dim());
  keys_.resize(ds, static_cast<Eigen::Index>(entries_.size()));
  key_norms_.resize(static_cast<Eigen::Index>(entries_.size()));
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    keys_.col(col) = key_for(entries_[i].state);
    key_norms_[col] = std::sqrt(keys_.col(col).squaredNorm());
  }
}

Eigen::VectorXd StateDatabase::key_for(const StateVec& state) const {
  if (static_cast<std::size_t>(state.size()) != dataset_->state_dim()) {
    throw std::invalid_argument("query state dimension does not match the database");
  }
  return space_ == SimilaritySpace::kNormalized ? dataset_->state_norm().normalize(state) : state;
}

void StateDatabase::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write database " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, dataset_->content_hash());
  write_pod(out, static_cast<std::uint64_t>(entries_.size()));
  write_pod(out, static_cast<std::uint64_t>(dataset_->state_dim()));
  write_pod(out, gamma_);
  write_pod(out, static_cast<std::uint8_t>(space_));
  write_pod(out, static_cast<std::uint8_t>(convention_));
  for (const auto& e : entries_) {
    write_pod(out, e.traj_id);
    write_pod(out, static_cast<std::uint64_t>(e.timestep));
    write_pod(out, e.suffix_return);
    out.write(reinterpret_cast<const char*>(e.state.data()), static_cast<std::streamsize>(e.state.size() * 8));
  }
  if (!out) throw std::runtime_error("failed writing database " + path.string());
}

StateDatabase StateDatabase::load(const std::filesystem::path& path, std::shared_ptr<const OfflineDataset> dataset) {
  if (!dataset) throw std::invalid_argument("load_database: null dataset");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open database " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(path.string() + " is not a state database");
  }
  const auto hash = read_pod<std::uint64_t>(in);
  if (hash != dataset->content_hash()) {
    throw std::runtime_error("database " + path.string() + " was built from a different dataset");
  }
  StateDatabase db;
  db.dataset_ = std::move(dataset);
  const auto n = read_pod<std::uint64_t>(in);
  const auto ds = read_pod<std::uint64_t>(in);
  if (ds != db.dataset_->state_dim() || n != db.dataset_->total_steps()) {
    throw std::runtime_error("database " + path.string() + " shape does not match the dataset");
  }
  db.gamma_ = read_pod<double>(in);
  db.space_ = static_cast<SimilaritySpace>(read_pod<std::uint8_t>(in));
  db.convention_ = static_cast<DiscountConvention>(read_pod<std::uint8_t>(in));
  db.entries_.resize(n);
  for (auto& e : db.entries_) {
    e.traj_id = read_pod<std::int64_t>(in);
    e.timestep = read_pod<std::uint64_t>(in);
    e.suffix_return = read_pod<double>(in);
    e.state.resize(static_cast<Eigen::Index>(ds));
    in.read(reinterpret_cast<char*>(e.state.data()), static_cast<std::streamsize>(ds * 8));
    if (!in) throw std::runtime_error("database file truncated");
  }
  db.index_keys();
  return db;
}

Similarity cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: dimension mismatch");
  const double na = std::sqrt(a.squaredNorm());
  const double nb = std::sqrt(b.squaredNorm());
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  const double s = a.dot(b) / (na * nb);
  return {std::clamp(s, -1.0, 1.0), false};
}

std::vector<Candidate> retrieve_candidates(const StateDatabase& db, const RetrievalQuery& query) {
  const auto& cfg = query.config;
  if (cfg.k == 0) throw std::invalid_argument("retrieval k must be at least 1");
  const Eigen::VectorXd key = db.key_for(query.state);
  const double qn = std::sqrt(key.squaredNorm());

  std::vector<Candidate> passing;
  if (db.size() == 0) return passing;
  Eigen::VectorXd dots = db.keys().transpose() * key;
  const auto& entries = db.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (cfg.exclude_traj && entries[i].traj_id == *cfg.exclude_traj) continue;
    const double en = db.key_norms()[static_cast<Eigen::Index>(i)];
    const double sim = (qn == 0.0 || en == 0.0) ? 0.0 : std::clamp(dots[static_cast<Eigen::Index>(i)] / (qn * en), -1.0, 1.0);
    if (sim >= cfg.delta) passing.push_back({i, sim});
  }
  const std::size_t keep = std::min(cfg.k, passing.size());
  std::partial_sort(passing.begin(), passing.begin() + static_cast<std::ptrdiff_t>(keep), passing.end(),
                    [&](const Candidate& a, const Candidate& b) { return ranks_before(db, a, b); });
  passing.resize(keep);
  return passing;
}

double candidate_segment_return(const StateDatabase& db, std::size_t entry, std::size_t horizon) {
  const auto& e = db.entries().at(entry);
  const auto& traj = db.dataset().by_id(e.traj_id);
  const std::size_t segment = horizon > 1 ? horizon - 1 : 1;
  return discounted_suffix_return(traj, e.timestep, db.gamma(), segment, db.convention());
}

RetrievalResult select_target(const StateDatabase& db, std::span<const Candidate> candidates,
                              const RetrievalQuery& query) {
  if (candidates.empty()) throw std::invalid_argument("select_target: no candidates");
  struct Scored {
    const Candidate* cand;
    double segment_return;
    std::size_t remaining;
  };
  std::vector<Scored> scored;
  scored.reserve(candidates.size());
  double best_return = -std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) {
    const auto& e = db.entries().at(c.entry);
    const double v = candidate_segment_return(db, c.entry, query.config.horizon);
    const std::size_t remaining = db.dataset().by_id(e.traj_id).length() - e.timestep;
    scored.push_back({&c, v, remaining});
    best_return = std::max(best_return, v);
  }

  const Scored* chosen = nullptr;
  for (const auto& s : scored) {
    if (std::abs(s.segment_return - best_return) > query.config.eta) continue;
    if (!chosen) {
      chosen = &s;
      continue;
    }
    const auto& e = db.entries()[s.cand->entry];
    const auto& ce = db.entries()[chosen->cand->entry];
    bool better = false;
    if (s.remaining != chosen->remaining) {
      better = s.remaining > chosen->remaining;
    } else if (s.segment_return != chosen->segment_return) {
      better = s.segment_return > chosen->segment_return;
    } else if (e.traj_id != ce.traj_id) {
      better = e.traj_id < ce.traj_id;
    } else {
      better = e.timestep < ce.timestep;
    }
    if (better) chosen = &s;
  }

  const auto& e = db.entries()[chosen->cand->entry];
  return RetrievalResult{e.state,       chosen->cand->entry,     e.traj_id,          e.timestep,
                         chosen->cand->similarity, chosen->segment_return, e.suffix_return, chosen->remaining};
}

std::optional<RetrievalResult> retrieve_target(const StateDatabase& db, const StateVec& state,
                                               const RetrievalConfig& config) {
  const RetrievalQuery query{state, config};
  const auto candidates = retrieve_candidates(db, query);
  if (candidates.empty()) return std::nullopt;
  return select_target(db, candidates, query);
}

}  // namespace rad
