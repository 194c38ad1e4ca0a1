#pragma once

#include "rad/diffusion.hpp"
#include "rad/envs.hpp"
#include "rad/planner.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace rad {

// Everything a run depends on. Serialised as JSON; any top-level key can be
// overridden with an environment variable RAD_<KEY> holding a JSON value.
struct ExperimentConfig {
  std::string env = "stitching";
  std::vector<std::uint64_t> seeds = {0, 1, 2};

  // Planning and retrieval.
  std::size_t horizon = 32;
  int diffusion_steps = 20;
  ScheduleKind schedule = ScheduleKind::kCosine;
  std::size_t k = 6;
  double delta = 0.9;
  double eta = 0.2;
  double rho = 0.1;
  double guide_clip = 1.0;
  double gamma = 0.99;
  std::size_t replan_interval = 1;
  FallbackMode fallback = FallbackMode::kUnconditional;
  ReverseVariance reverse_variance = ReverseVariance::kBeta;
  bool use_guide = true;

  // Training.
  std::vector<std::size_t> denoiser_hidden = {512, 512, 512};
  std::vector<std::size_t> guide_hidden = {256, 256};
  std::vector<std::size_t> step_hidden = {128, 128, 128};
  std::size_t step_embed_dim = 32;
  std::size_t denoiser_epochs = 40;
  std::size_t guide_epochs = 20;
  std::size_t step_epochs = 30;
  std::size_t batch_size = 32;
  std::size_t steps_per_epoch = 50;
  double denoiser_lr = 2e-4;
  double guide_lr = 2e-4;
  double step_lr = 1e-3;
  std::size_t step_pairs = 20000;
  bool step_normalize = false;  // step estimator sees normalised states
  bool pad_windows = false;  // windows may overrun trajectory ends (last row repeated)

  // Data.
  std::optional<std::string> dataset_path;  // generated per seed when absent
  double gap = 0.0;
  std::size_t traj_count = 24;  // per family
  double noise = 0.0;
  double lane_spread = StitchingSpec{}.lane_spread;

  // Evaluation.
  std::size_t episodes = 50;
  std::size_t max_steps = 300;
  std::vector<AblationKind> ablations = {AblationKind::kNoRetrievalRandomTarget, AblationKind::kFixedAnchorPosition,
                                         AblationKind::kRandomStepCount};
  std::vector<std::size_t> curve_epochs;  // denoiser snapshots evaluated for learning curves
  std::size_t curve_episodes = 10;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Applies RAD_<KEY> environment overrides on top of `config`.
ExperimentConfig apply_env_overrides(const ExperimentConfig& config);

// Hash of the fields that affect trained models / of the whole config.
std::string model_hash(const ExperimentConfig& config);
std::string config_hash(const ExperimentConfig& config);

StitchingSpec stitching_spec_for(const ExperimentConfig& config);
PlannerConfig planner_config_for(const ExperimentConfig& config);

struct MetricsRow {
  std::string config_hash;
  std::string model_hash;
  std::string env;
  std::string variant;
  std::string seed;  // decimal seed, or "aggregate"
  std::size_t k = 0;
  double delta = 0.0;
  std::size_t episodes = 0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double success_rate = 0.0;
  double normalized_score = 0.0;
  double miss_rate = 0.0;
  double mean_similarity = 0.0;
  double mean_target_step = 0.0;
};

std::string metrics_csv_header();
std::string to_csv(const MetricsRow& row);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

// Mean and sample standard deviation of the per-seed rows.
MetricsRow aggregate_rows(const std::vector<MetricsRow>& per_seed);

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, std::string artifact, const std::string& what)
      : std::runtime_error("stage '" + stage + "' failed (" + artifact + "): " + what),
        stage_(std::move(stage)),
        artifact_(std::move(artifact)) {}
  const std::string& stage() const { return stage_; }
  const std::string& artifact() const { return artifact_; }

 private:
  std::string stage_;
  std::string artifact_;
};

// One learning-curve point: a denoiser snapshot evaluated with and without retrieval.
struct CurvePoint {
  std::size_t epoch = 0;
  std::string variant;
  std::string env;
  std::uint64_t seed = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
};

// Artefacts of one seed, trained or loaded from the cache.
struct SeedArtifacts {
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  std::shared_ptr<const OfflineDataset> dataset;
  std::shared_ptr<const StateDatabase> db;
  std::shared_ptr<const PlannerModels> models;
  bool cache_hit = false;
};

struct EvalSummary {
  MetricsRow row;
  std::vector<EpisodeRecord> episodes;
  std::uint64_t seed_hash = 0;  // hash of the episode seeds used
};

// Run directory layout:
//   <out>/run.log, metrics.csv, episodes.jsonl, ablation.csv, sweep.csv, ...
//   <out>/models/<model_hash>/seed_<n>/{dataset.jsonl, db.bin, *.ckpt, losses.csv}
class Experiment {
 public:
  Experiment(ExperimentConfig config, std::filesystem::path out_dir, std::ostream* log = nullptr);

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& out_dir() const { return out_dir_; }

  // Generates data, builds the database and trains all models for one seed,
  // skipping any stage whose artefacts already exist for this model hash.
  SeedArtifacts prepare_seed(std::uint64_t seed);

  EvalSummary evaluate(const SeedArtifacts& artifacts, const PlannerConfig& planner, const std::string& variant,
                       bool keep_episodes = false);

  // Full pipeline: per-seed rows plus an aggregate row; writes metrics.csv
  // and episodes.jsonl.
  std::vector<MetricsRow> run_pipeline();
  // RAD plus each configured ablation under identical evaluation seeds;
  // writes ablation.csv and ablation_bars.csv.
  std::vector<MetricsRow> run_ablations();
  // k varied at the configured delta, delta varied at the configured k;
  // writes sweep.csv.
  struct SweepCell {
    std::string panel;  // "k" or "delta"
    std::size_t k = 0;
    double delta = 0.0;
    MetricsRow aggregate;
    std::vector<MetricsRow> per_seed;
  };
  std::vector<SweepCell> run_sweep(const std::vector<std::size_t>& k_values, const std::vector<double>& delta_values);

  std::vector<CurvePoint> curve_points() const;

  // Reference returns for normalisation (random policy / scripted oracle).
  std::pair<double, double> reference_returns(std::uint64_t seed);

 private:
  void log(const std::string& message);
  std::filesystem::path seed_dir(std::uint64_t seed) const;
  std::uint64_t episode_seed(std::uint64_t seed, std::size_t episode) const;

  ExperimentConfig config_;
  std::filesystem::path out_dir_;
  std::ostream* echo_;
};

// Writes learning-curve and ablation-bar CSVs (header-only when empty).
void emit_plot_data(const std::vector<CurvePoint>& curves, const std::vector<MetricsRow>& ablation_rows,
                    const std::filesystem::path& out_dir);

std::string curve_csv_header();
std::vector<CurvePoint> read_curve_csv(const std::filesystem::path& path);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace rad
