#pragma once

#include "rad/trajectory.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace rad {

// One indexed dataset state.
struct DbEntry {
  StateVec state;  // raw units
  std::int64_t traj_id = 0;
  std::size_t timestep = 0;
  double suffix_return = 0.0;  // full-suffix discounted return from timestep
};

// Vectors compared by cosine similarity: raw states, or states mapped
// through the dataset's normaliser.
enum class SimilaritySpace { kRaw, kNormalized };

// Exact-scan index over every state of an offline dataset.
class StateDatabase {
 public:
  static StateDatabase build(std::shared_ptr<const OfflineDataset> dataset, double gamma,
                             SimilaritySpace space = SimilaritySpace::kRaw,
                             DiscountConvention convention = DiscountConvention::kTimeShifted);

  // Reads a sidecar written by save(); throws if it was built from a
  // different dataset (content hash mismatch).
  static StateDatabase load(const std::filesystem::path& path, std::shared_ptr<const OfflineDataset> dataset);
  void save(const std::filesystem::path& path) const;

  const std::vector<DbEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  const OfflineDataset& dataset() const { return *dataset_; }
  double gamma() const { return gamma_; }
  SimilaritySpace space() const { return space_; }
  DiscountConvention convention() const { return convention_; }

  // Query vector in the database's similarity space.
  Eigen::VectorXd key_for(const StateVec& state) const;
  // Column i is entry i's key; key_norms_[i] its L2 norm.
  const Eigen::MatrixXd& keys() const { return keys_; }
  const Eigen::VectorXd& key_norms() const { return key_norms_; }

 private:
  StateDatabase() = default;
  void index_keys();

  std::shared_ptr<const OfflineDataset> dataset_;
  double gamma_ = 0.99;
  SimilaritySpace space_ = SimilaritySpace::kRaw;
  DiscountConvention convention_ = DiscountConvention::kTimeShifted;
  std::vector<DbEntry> entries_;
  Eigen::MatrixXd keys_;
  Eigen::VectorXd key_norms_;
};

struct Similarity {
  double value = 0.0;
  bool zero_norm = false;  // one side had zero norm; value forced to 0
};

Similarity cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

struct RetrievalConfig {
  std::size_t k = 6;
  double delta = 0.9;  // minimum cosine similarity
  double eta = 0.2;    // return tolerance around the best candidate
  std::size_t horizon = 32;
  std::optional<std::int64_t> exclude_traj;
};

struct RetrievalQuery {
  StateVec state;
  RetrievalConfig config;
};

struct Candidate {
  std::size_t entry = 0;  // index into StateDatabase::entries()
  double similarity = 0.0;
};

struct RetrievalResult {
  StateVec target;
  std::size_t entry = 0;
  std::int64_t traj_id = 0;
  std::size_t timestep = 0;
  double similarity = 0.0;
  double segment_return = 0.0;  // return over the H-1 steps starting at the candidate
  double suffix_return = 0.0;
  std::size_t remaining_length = 0;
};

// Top-k entries with similarity >= delta, sorted by similarity descending,
// ties by (traj_id, timestep) ascending. Empty means a retrieval miss.
std::vector<Candidate> retrieve_candidates(const StateDatabase& db, const RetrievalQuery& query);

// Keeps candidates whose segment return is within eta of the best one and
// returns the survivor with the longest remaining trajectory (ties: higher
// segment return, lower traj_id, lower timestep).
RetrievalResult select_target(const StateDatabase& db, std::span<const Candidate> candidates,
                              const RetrievalQuery& query);

// retrieve_candidates followed by select_target; nullopt on a retrieval miss.
std::optional<RetrievalResult> retrieve_target(const StateDatabase& db, const StateVec& state,
                                               const RetrievalConfig& config);

// Segment return used by select_target for a given entry.
double candidate_segment_return(const StateDatabase& db, std::size_t entry, std::size_t horizon);

}  // namespace rad
