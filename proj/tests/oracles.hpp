#pragma once

// Brute-force reference implementations used to check the library.

#include "rad/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace rad::oracle {

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  long double dot = 0, na = 0, nb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    dot += static_cast<long double>(a[i]) * b[i];
    na += static_cast<long double>(a[i]) * a[i];
    nb += static_cast<long double>(b[i]) * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return static_cast<double>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

inline double segment_return(const Trajectory& traj, std::size_t t, double gamma, std::size_t horizon) {
  const std::size_t end = std::min(traj.length(), t + horizon - 1);
  double total = 0.0, w = 1.0;
  for (std::size_t j = t; j < end; ++j) {
    total += w * traj.reward(j);
    w *= gamma;
  }
  return total;
}

struct Ranked {
  std::size_t entry;
  double similarity;
};

// Full scan: similarity >= delta, sorted by similarity then (traj, t), top k.
inline std::vector<Ranked> top_k(const StateDatabase& db, const Eigen::VectorXd& query, std::size_t k, double delta,
                                 std::optional<std::int64_t> exclude = std::nullopt) {
  std::vector<Ranked> all;
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto& e = db.entries()[i];
    if (exclude && e.traj_id == *exclude) continue;
    const double s = cosine(query, e.state);
    if (s >= delta) all.push_back({i, s});
  }
  std::sort(all.begin(), all.end(), [&](const Ranked& a, const Ranked& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    const auto& ea = db.entries()[a.entry];
    const auto& eb = db.entries()[b.entry];
    if (ea.traj_id != eb.traj_id) return ea.traj_id < eb.traj_id;
    return ea.timestep < eb.timestep;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

// Exhaustive filter then argmax of remaining length with the documented tie-breaks.
inline std::size_t select(const StateDatabase& db, const std::vector<std::size_t>& entries, double eta,
                          std::size_t horizon) {
  const auto& data = db.dataset();
  std::vector<double> v;
  for (auto i : entries) {
    const auto& e = db.entries()[i];
    v.push_back(segment_return(data.by_id(e.traj_id), e.timestep, db.gamma(), horizon));
  }
  const double best = *std::max_element(v.begin(), v.end());
  std::optional<std::size_t> chosen;
  std::size_t chosen_pos = 0;
  for (std::size_t n = 0; n < entries.size(); ++n) {
    if (std::abs(v[n] - best) > eta) continue;
    const auto& e = db.entries()[entries[n]];
    const std::size_t len = data.by_id(e.traj_id).length() - e.timestep;
    if (!chosen) {
      chosen = entries[n];
      chosen_pos = n;
      continue;
    }
    const auto& c = db.entries()[*chosen];
    const std::size_t clen = data.by_id(c.traj_id).length() - c.timestep;
    bool better = false;
    if (len != clen) {
      better = len > clen;
    } else if (v[n] != v[chosen_pos]) {
      better = v[n] > v[chosen_pos];
    } else if (e.traj_id != c.traj_id) {
      better = e.traj_id < c.traj_id;
    } else {
      better = e.timestep < c.timestep;
    }
    if (better) {
      chosen = entries[n];
      chosen_pos = n;
    }
  }
  return *chosen;
}

}  // namespace rad::oracle
