#include "rad/experiment.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

using namespace rad;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.seeds = {0, 1, 2};
  c.horizon = 8;
  c.diffusion_steps = 5;
  c.denoiser_hidden = {32, 32};
  c.guide_hidden = {16};
  c.step_hidden = {16, 16, 16};
  c.step_embed_dim = 8;
  c.denoiser_epochs = 2;
  c.guide_epochs = 1;
  c.step_epochs = 1;
  c.steps_per_epoch = 5;
  c.step_pairs = 200;
  c.traj_count = 4;
  c.episodes = 2;
  c.max_steps = 12;
  c.curve_epochs = {1, 2};
  c.curve_episodes = 1;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

}  // namespace

TEST_CASE("config validation") {
  ExperimentConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.seeds.clear();
  CHECK_THROWS(c.validate());
  c = tiny_config();
  c.horizon = 1;
  CHECK_THROWS(c.validate());
  c = tiny_config();
  c.env = "hopper";
  CHECK_THROWS(c.validate());
}

TEST_CASE("config JSON round trip and unknown keys") {
  const ExperimentConfig c = tiny_config();
  const auto back = experiment_config_from_json(to_json(c));
  CHECK(to_json(back).dump() == to_json(c).dump());
  CHECK(config_hash(back) == config_hash(c));
  auto j = to_json(c);
  j["not_a_key"] = 1;
  CHECK_THROWS(experiment_config_from_json(j));
}

TEST_CASE("hashes: evaluation-only keys leave the model hash alone") {
  ExperimentConfig a = tiny_config();
  ExperimentConfig b = a;
  b.k = 30;
  b.delta = 0.5;
  b.episodes = 9;
  CHECK(model_hash(a) == model_hash(b));
  CHECK(config_hash(a) != config_hash(b));
  b.denoiser_lr = 1e-3;
  CHECK(model_hash(a) != model_hash(b));
  CHECK(model_hash(a).size() == 16);
  ExperimentConfig c = a;
  c.step_normalize = true;
  CHECK(model_hash(a) != model_hash(c));
  CHECK(experiment_config_from_json(to_json(c)).step_normalize);
}

TEST_CASE("environment overrides") {
  ::setenv("RAD_K", "30", 1);
  ::setenv("RAD_SEEDS", "[4, 5]", 1);
  ::setenv("RAD_FALLBACK", "last_target", 1);
  const auto c = apply_env_overrides(tiny_config());
  ::unsetenv("RAD_K");
  ::unsetenv("RAD_SEEDS");
  ::unsetenv("RAD_FALLBACK");
  CHECK(c.k == 30);
  CHECK(c.seeds == std::vector<std::uint64_t>{4, 5});
  CHECK(c.fallback == FallbackMode::kLastTarget);
  CHECK(c.horizon == 8);
}

TEST_CASE("planner config mirrors the experiment config") {
  ExperimentConfig c = tiny_config();
  c.k = 30;
  c.delta = 0.5;
  c.rho = 0.2;
  auto p = planner_config_for(c);
  CHECK(p.retrieval.k == 30);
  CHECK(p.retrieval.delta == 0.5);
  CHECK(p.guidance.rho == 0.2);
  c.use_guide = false;
  CHECK(planner_config_for(c).guidance.rho == 0.0);
}

TEST_CASE("aggregate rows are recomputable from the per-seed rows") {
  std::vector<MetricsRow> rows(3);
  const double returns[] = {0.1, -0.3, 0.45};
  for (int s = 0; s < 3; ++s) {
    rows[s].seed = std::to_string(s);
    rows[s].variant = "rad";
    rows[s].mean_return = returns[s];
    rows[s].success_rate = 0.2 * s;
  }
  const auto agg = aggregate_rows(rows);
  const double mean = (0.1 - 0.3 + 0.45) / 3.0;
  double ss = 0.0;
  for (double r : returns) ss += (r - mean) * (r - mean);
  CHECK(agg.seed == "aggregate");
  CHECK(std::abs(agg.mean_return - mean) <= 1e-12);
  CHECK(std::abs(agg.std_return - std::sqrt(ss / 2.0)) <= 1e-12);
  CHECK(std::abs(agg.success_rate - 0.2) <= 1e-12);
}

TEST_CASE("pipeline: rows, caching, reproducibility, curves") {
  const auto dir = test::scratch_dir("experiment_pipeline");
  std::vector<MetricsRow> first;
  {
    Experiment exp(tiny_config(), dir / "a");
    first = exp.run_pipeline();
  }
  REQUIRE(first.size() == 4);
  CHECK(first[0].seed == "0");
  CHECK(first[3].seed == "aggregate");
  for (const auto& r : first) CHECK(r.config_hash == config_hash(tiny_config()));

  const auto read = read_metrics_csv(dir / "a" / "metrics.csv");
  REQUIRE(read.size() == 4);
  const std::vector<MetricsRow> per_seed(read.begin(), read.begin() + 3);
  const auto agg = aggregate_rows(per_seed);
  CHECK(std::abs(agg.mean_return - read[3].mean_return) <= 1e-12);
  CHECK(std::abs(agg.std_return - read[3].std_return) <= 1e-12);

  const std::string metrics = slurp(dir / "a" / "metrics.csv");
  {
    Experiment again(tiny_config(), dir / "a");
    again.run_pipeline();
  }
  const std::string log = slurp(dir / "a" / "run.log");
  CHECK(log.find("cache hit: seed 0 fully trained, no retraining") != std::string::npos);
  CHECK(slurp(dir / "a" / "metrics.csv") == metrics);

  // A fresh directory retrains from scratch and still matches bit for bit.
  {
    Experiment fresh(tiny_config(), dir / "b");
    fresh.run_pipeline();
  }
  CHECK(slurp(dir / "b" / "metrics.csv") == metrics);
  CHECK(slurp(dir / "b" / "episodes.jsonl") == slurp(dir / "a" / "episodes.jsonl"));

  const auto curves = read_curve_csv(dir / "a" / "curve_points.csv");
  CHECK(curves.size() == 2 * 2 * 3);  // epochs x variants x seeds
  std::set<std::tuple<std::size_t, std::string, std::uint64_t>> keys;
  for (const auto& c : curves) keys.insert({c.epoch, c.variant, c.seed});
  CHECK(keys.size() == curves.size());
  for (const auto& c : curves) {
    if (c.variant == "rad") CHECK(keys.count({c.epoch, "no_retrieval_random_target", c.seed}) == 1);
  }
}

TEST_CASE("ablations: four rows under shared evaluation seeds") {
  const auto dir = test::scratch_dir("experiment_ablation");
  ExperimentConfig c = tiny_config();
  c.seeds = {0};
  std::ostringstream echo;
  Experiment exp(c, dir, &echo);
  const auto rows = exp.run_ablations();
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].variant == "rad");
  const std::string table = slurp(dir / "ablation.csv");
  CHECK(count_lines(table) == 5);
  CHECK(table.substr(0, table.find('\n')) == "variant,stitching_mean_return,stitching_std_return,stitching_success_rate");

  std::set<std::string> hashes;
  std::istringstream log(slurp(dir / "run.log"));
  std::string line;
  int seen = 0;
  while (std::getline(log, line)) {
    const auto at = line.find("ablation seeds variant=");
    if (at == std::string::npos) continue;
    ++seen;
    hashes.insert(line.substr(line.find("seed_hash=")));
  }
  CHECK(seen == 4);
  CHECK(hashes.size() == 1);
}

TEST_CASE("sweep: two panels, reproducible") {
  const auto dir = test::scratch_dir("experiment_sweep");
  ExperimentConfig c = tiny_config();
  c.seeds = {0};
  std::vector<Experiment::SweepCell> cells;
  {
    Experiment exp(c, dir / "a");
    cells = exp.run_sweep({6, 30, 60, 120}, {0.0, 0.5, 0.8, 0.9});
  }
  REQUIRE(cells.size() == 8);
  for (int i = 0; i < 4; ++i) {
    CHECK(cells[i].panel == "k");
    CHECK(cells[i].delta == c.delta);
    CHECK(cells[4 + i].panel == "delta");
    CHECK(cells[4 + i].k == c.k);
  }
  {
    Experiment exp(c, dir / "b");
    exp.run_sweep({6, 30, 60, 120}, {0.0, 0.5, 0.8, 0.9});
  }
  CHECK(slurp(dir / "a" / "sweep.csv") == slurp(dir / "b" / "sweep.csv"));
  CHECK(count_lines(slurp(dir / "a" / "sweep.csv")) == 1 + 8 * 2);  // per seed and aggregate rows

  // A threshold nothing can reach misses every time.
  Experiment exp(c, dir / "a");
  const auto strict = exp.run_sweep({6}, {1.5});
  CHECK(strict.back().aggregate.miss_rate == 1.0);
}

TEST_CASE("plot data: header only when empty") {
  const auto dir = test::scratch_dir("experiment_plot");
  emit_plot_data({}, {}, dir);
  CHECK(slurp(dir / "plot_curves.csv") == curve_csv_header() + "\n");
  CHECK(slurp(dir / "plot_ablation_bars.csv") == metrics_csv_header() + "\n");
}

TEST_CASE("stage failures name the stage") {
  const auto dir = test::scratch_dir("experiment_fail");
  ExperimentConfig c = tiny_config();
  c.dataset_path = (dir / "missing.jsonl").string();
  Experiment exp(c, dir);
  try {
    exp.prepare_seed(0);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "gen-data");
  }
}
