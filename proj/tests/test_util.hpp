#pragma once

#include "rad/rng.hpp"
#include "rad/trajectory.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace rad::test {

inline Trajectory make_trajectory(std::int64_t id, const std::vector<double>& rewards, std::size_t ds = 2,
                                  std::size_t da = 2, std::uint64_t seed = 1) {
  Rng rng(seed);
  Trajectory traj{id, {}};
  for (double r : rewards) {
    StateVec s(ds);
    ActionVec a(da);
    for (std::size_t d = 0; d < ds; ++d) s[d] = rng.uniform(-2.0, 2.0);
    for (std::size_t d = 0; d < da; ++d) a[d] = rng.uniform(-1.0, 1.0);
    traj.transitions.push_back({s, a, r});
  }
  return traj;
}

inline OfflineDataset random_dataset(std::size_t count, std::size_t min_len, std::size_t max_len, std::uint64_t seed,
                                     std::size_t ds = 2, std::size_t da = 2) {
  Rng rng(seed);
  std::vector<Trajectory> trajs;
  for (std::size_t n = 0; n < count; ++n) {
    const auto len = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(max_len)));
    std::vector<double> rewards(len);
    for (auto& r : rewards) r = rng.uniform(-1.0, 1.0);
    trajs.push_back(make_trajectory(static_cast<std::int64_t>(n), rewards, ds, da, rng.next_u64()));
  }
  return OfflineDataset(ds, da, 0.99, std::move(trajs));
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rad_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace rad::test
