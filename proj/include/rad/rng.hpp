#pragma once

#include <cstdint>
#include <random>

namespace rad {

// Seeded random stream with platform-independent draws.
//
// std::normal_distribution and friends are implementation-defined, so every
// draw here is derived directly from mt19937_64 output. Two streams built
// from the same seed produce the same numbers on any conforming platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer on the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  // Standard normal via Box-Muller; caches the second variate.
  double normal();

  // Derives an independent child seed (splitmix64 of the pair).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace rad
