#include "rad/envs.hpp"
#include "rad/step_estimation.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <map>

using namespace rad;

TEST_CASE("rounding and clamping") {
  CHECK(round_and_clamp_step(0.2, 32) == 1);
  CHECK(round_and_clamp_step(-7.0, 32) == 1);
  CHECK(round_and_clamp_step(32 + 5.0, 32) == 31);
  CHECK(round_and_clamp_step(4.5, 32) == 5);
  CHECK(round_and_clamp_step(4.49, 32) == 4);
  CHECK(round_and_clamp_step(2.5, 32) == 3);
  CHECK(round_and_clamp_step(std::nan(""), 32) == 1);
}

TEST_CASE("horizon two gives offsets of one") {
  const auto data = test::random_dataset(10, 2, 20, 3);
  for (const auto& p : sample_step_pairs(data, 2, 500, 1)) CHECK(p.offset == 1);
}

TEST_CASE("sampled pairs are exactly offset apart in their trajectory") {
  const auto data = test::random_dataset(20, 2, 30, 7);
  const auto pairs = sample_step_pairs(data, 16, 3000, 2);
  for (const auto& p : pairs) {
    REQUIRE(p.offset >= 1);
    REQUIRE(p.offset <= 15);
    bool found = false;
    for (const auto& traj : data.trajectories()) {
      for (std::size_t t = 0; t + static_cast<std::size_t>(p.offset) < traj.length() && !found; ++t) {
        found = traj.state(t) == p.from && traj.state(t + static_cast<std::size_t>(p.offset)) == p.to;
      }
      if (found) break;
    }
    CHECK(found);
  }
}

TEST_CASE("offset histogram is uniform on long trajectories") {
  // Long trajectories make the min(H-1, T-1-t) cap rare; only interior t are kept.
  const std::size_t H = 8;
  const auto data = test::random_dataset(4, 5000, 5000, 11, 1, 1);
  const auto pairs = sample_step_pairs(data, H, 100000, 5);
  std::map<int, int> counts;
  for (const auto& p : pairs) ++counts[p.offset];
  const double n = 100000.0;
  const double p_bin = 1.0 / (H - 1);
  const double sigma = std::sqrt(n * p_bin * (1 - p_bin));
  for (int o = 1; o < static_cast<int>(H); ++o) CHECK(std::abs(counts[o] - n * p_bin) <= 3.0 * sigma);
}

TEST_CASE("sampling is reproducible and rejects single-step data") {
  const auto data = test::random_dataset(10, 2, 20, 3);
  const auto a = sample_step_pairs(data, 8, 100, 9);
  const auto b = sample_step_pairs(data, 8, 100, 9);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].from == b[i].from);
    CHECK(a[i].offset == b[i].offset);
  }
  const auto singles = test::random_dataset(5, 1, 1, 3);
  CHECK_THROWS(sample_step_pairs(singles, 8, 10, 1));
}

TEST_CASE("constant offset regression converges to the constant") {
  const auto data = test::random_dataset(10, 10, 20, 3);
  auto pairs = sample_step_pairs(data, 16, 2000, 4);
  for (auto& p : pairs) p.offset = 3;
  StepEstimatorOptions opt;
  opt.hidden = {32, 32, 32};
  const auto result = train_step_estimator(pairs, 16, 40, 1e-3, 1, opt);
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(rng.uniform_int(0, 1999))];
    CHECK(std::abs(result.estimator.raw_output(p.from, p.to) - 3.0) <= 0.1);
  }
  // epoch means decrease apart from minibatch noise
  int rises = 0;
  for (std::size_t e = 1; e < result.loss_curve.size(); ++e) rises += result.loss_curve[e] > result.loss_curve[e - 1];
  CHECK(rises <= static_cast<int>(0.05 * static_cast<double>(result.loss_curve.size())) + 1);
}

TEST_CASE("zero epochs returns the initial estimator") {
  const auto data = test::random_dataset(5, 10, 20, 3);
  const auto pairs = sample_step_pairs(data, 8, 100, 4);
  StepEstimatorOptions opt;
  opt.hidden = {8, 8, 8};
  const auto result = train_step_estimator(pairs, 8, 0, 1e-3, 12, opt);
  CHECK(result.loss_curve.empty());
  const auto init = StepEstimator::initialize(2, 8, 12, opt);
  CHECK(result.estimator.net().params().flatten() == init.net().params().flatten());
  CHECK_THROWS(train_step_estimator({}, 8, 1, 1e-3, 1, opt));
}

TEST_CASE("estimates stay inside the horizon") {
  StepEstimatorOptions opt;
  opt.hidden = {8, 8, 8};
  auto est = StepEstimator::initialize(2, 10, 3, opt);
  est.mutable_net().mutable_params().layers.back().bias[0] = 1000.0;
  CHECK(est.estimate(StateVec::Zero(2), StateVec::Ones(2)) == 9);
  est.mutable_net().mutable_params().layers.back().bias[0] = -1000.0;
  CHECK(est.estimate(StateVec::Zero(2), StateVec::Ones(2)) == 1);
}

TEST_CASE("line-walk offsets equal distance over step size") {
  LineWalkSpec spec;
  const auto data = gen_linewalk_dataset(spec, 1);
  for (const auto& traj : data.trajectories()) {
    for (std::size_t t = 0; t + 1 < traj.length(); ++t) {
      CHECK(std::abs(traj.state(t + 1)[0] - traj.state(t)[0] - spec.step_size) < 1e-12);
    }
  }
  for (const auto& p : sample_step_pairs(data, 16, 500, 3)) {
    CHECK(std::lround((p.to[0] - p.from[0]) / spec.step_size) == p.offset);
  }
}

TEST_CASE("normalised inputs are fed through the normaliser") {
  const auto data = test::random_dataset(5, 10, 20, 3);
  StepEstimatorOptions opt;
  opt.hidden = {8, 8, 8};
  opt.input_normalizer = data.state_norm();
  const auto est = StepEstimator::initialize(2, 8, 3, opt);
  const auto& s = data.trajectories()[0].state(0);
  const auto f = est.features(s, s);
  CHECK((f.head(2) - data.state_norm().normalize(s)).norm() == 0.0);
}

TEST_CASE("step estimator checkpoints round-trip") {
  const auto dir = test::scratch_dir("step_ckpt");
  const auto data = test::random_dataset(5, 10, 20, 3);
  StepEstimatorOptions opt;
  opt.hidden = {8, 8, 8};
  opt.input_normalizer = data.state_norm();
  const auto est = StepEstimator::initialize(2, 12, 3, opt);
  save_step_estimator(est, "h", dir / "s.ckpt");
  const auto loaded = load_step_estimator(dir / "s.ckpt");
  CHECK(loaded.horizon() == 12);
  CHECK(loaded.net().params().flatten() == est.net().params().flatten());
  REQUIRE(loaded.input_normalizer().has_value());
  const auto& s = data.trajectories()[1].state(3);
  CHECK(loaded.raw_output(s, s) == est.raw_output(s, s));
}
