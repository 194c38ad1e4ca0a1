#include "rad/diffusion.hpp"
#include "rad/envs.hpp"
#include "rad/experiment.hpp"
#include "rad/planner.hpp"
#include "rad/retrieval.hpp"
#include "rad/step_estimation.hpp"
#include "rad/trajectory.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

rad::ExperimentConfig read_config(const std::string& path) {
  rad::ExperimentConfig config = path.empty() ? rad::ExperimentConfig{} : rad::load_experiment_config(path);
  return rad::apply_env_overrides(config);
}

int fail(const std::string& stage, const std::string& what) {
  std::cerr << "error: stage '" << stage << "': " << what << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-augmented diffusion planning"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate an offline dataset (JSONL)");
  std::string scenario = "stitching";
  std::uint64_t seed = 0;
  std::string out;
  double gap = 0.0;
  std::size_t traj_count = 24;
  double gamma = 0.99;
  gen->add_option("--scenario", scenario)->check(CLI::IsMember({"stitching", "linewalk"}));
  gen->add_option("--seed", seed);
  gen->add_option("--out", out)->required();
  gen->add_option("--gap", gap);
  gen->add_option("--traj-count", traj_count);
  gen->add_option("--gamma", gamma);

  // build-db
  auto* build = app.add_subcommand("build-db", "Index every dataset state for retrieval");
  std::string dataset_path;
  build->add_option("--dataset", dataset_path)->required();
  build->add_option("--out", out)->required();
  build->add_option("--gamma", gamma);

  // train
  auto* train = app.add_subcommand("train", "Train one model component");
  std::string component;
  std::size_t horizon = 32;
  int nsteps = 20;
  std::size_t epochs = 10;
  std::size_t steps_per_epoch = 0;
  std::vector<std::size_t> hidden;
  train->add_option("--component", component)->required()->check(CLI::IsMember({"diffusion", "guide", "step"}));
  train->add_option("--dataset", dataset_path)->required();
  train->add_option("--horizon", horizon);
  train->add_option("--nsteps", nsteps);
  train->add_option("--epochs", epochs);
  train->add_option("--seed", seed);
  train->add_option("--steps-per-epoch", steps_per_epoch);
  train->add_option("--hidden", hidden, "hidden layer widths");
  train->add_option("--gamma", gamma);
  train->add_option("--out", out, "checkpoint path (default: <component>.ckpt)");

  // plan
  auto* plan = app.add_subcommand("plan", "Roll out the planner and log episodes");
  std::string models_dir;
  std::string db_path;
  std::string env_name = "stitching";
  std::size_t episodes = 10;
  std::size_t max_steps = 300;
  std::size_t k = 6;
  double delta = 0.9;
  double rho = 0.1;
  std::string ablation = "rad";
  std::size_t replan_interval = 1;
  plan->add_option("--models", models_dir)->required();
  plan->add_option("--db", db_path)->required();
  plan->add_option("--dataset", dataset_path, "dataset the database was built from (default: <models>/dataset.jsonl)");
  plan->add_option("--env", env_name);
  plan->add_option("--episodes", episodes);
  plan->add_option("--seed", seed);
  plan->add_option("--max-steps", max_steps);
  plan->add_option("--k", k);
  plan->add_option("--delta", delta);
  plan->add_option("--rho", rho);
  plan->add_option("--variant", ablation);
  plan->add_option("--replan-interval", replan_interval);
  plan->add_option("--gamma", gamma);
  plan->add_option("--out", out)->required();

  // eval / ablate / sweep
  std::string config_path;
  auto* eval = app.add_subcommand("eval", "Full pipeline over all seeds; writes metrics.csv");
  eval->add_option("--config", config_path);
  eval->add_option("--out", out)->required();

  auto* ablate = app.add_subcommand("ablate", "Evaluate RAD and its ablations under shared seeds");
  ablate->add_option("--config", config_path);
  ablate->add_option("--out", out)->required();

  auto* sweep = app.add_subcommand("sweep", "Vary k at the configured delta and delta at the configured k");
  std::vector<std::size_t> k_grid = {6, 30, 60, 120};
  std::vector<double> delta_grid = {0.0, 0.5, 0.8, 0.9};
  sweep->add_option("--config", config_path);
  sweep->add_option("--out", out)->required();
  sweep->add_option("--k", k_grid)->delimiter(',');
  sweep->add_option("--delta", delta_grid)->delimiter(',');

  auto* plot = app.add_subcommand("plot-data", "Write learning-curve and ablation-bar CSVs");
  std::string run_dir;
  plot->add_option("--run", run_dir)->required();
  plot->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (*gen) {
      if (scenario == "stitching") {
        rad::StitchingSpec spec = rad::default_stitching_spec();
        spec.gap = gap;
        spec.a_count = traj_count;
        spec.b_count = traj_count;
        rad::save_dataset(rad::gen_stitching_dataset(spec, seed, gamma).dataset, out);
      } else {
        rad::LineWalkSpec spec;
        spec.count = traj_count;
        rad::save_dataset(rad::gen_linewalk_dataset(spec, seed, gamma), out);
      }
      std::cout << "wrote " << out << '\n';
    } else if (*build) {
      auto data = std::make_shared<const rad::OfflineDataset>(rad::load_dataset(dataset_path));
      const auto db = rad::StateDatabase::build(data, gamma);
      db.save(out);
      std::cout << "indexed " << db.size() << " states into " << out << '\n';
    } else if (*train) {
      const auto data = rad::load_dataset(dataset_path);
      const std::string hash = "cli";
      if (component == "step") {
        stage = "train-step";
        rad::StepEstimatorOptions opt;
        if (!hidden.empty()) opt.hidden = hidden;
        const auto pairs = rad::sample_step_pairs(data, horizon, 20000, rad::Rng::derive(seed, 23));
        const auto result = rad::train_step_estimator(pairs, horizon, epochs, 1e-3, rad::Rng::derive(seed, 24), opt);
        rad::save_step_estimator(result.estimator, hash, out.empty() ? "step_estimator.ckpt" : out);
        std::cout << "final loss " << result.loss_curve.back() << '\n';
      } else {
        const auto schedule = rad::make_schedule(nsteps);
        const rad::PlanLayout layout{horizon, data.state_dim(), data.action_dim()};
        if (component == "diffusion") {
          stage = "train-denoiser";
          rad::DiffusionTrainingOptions opt;
          if (!hidden.empty()) opt.hidden = hidden;
          opt.steps_per_epoch = steps_per_epoch;
          const auto result = rad::train_denoiser(data, horizon, schedule, epochs, rad::Rng::derive(seed, 21), opt);
          rad::save_denoiser(result.denoiser, schedule, layout, hash, out.empty() ? "denoiser.ckpt" : out);
          std::cout << "final loss " << result.loss_curve.back() << '\n';
        } else {
          stage = "train-guide";
          rad::DiffusionTrainingOptions opt = rad::default_guide_options();
          if (!hidden.empty()) opt.hidden = hidden;
          opt.steps_per_epoch = steps_per_epoch;
          const auto result =
              rad::train_return_guide(data, horizon, schedule, gamma, epochs, rad::Rng::derive(seed, 22), opt);
          rad::save_return_guide(result.guide, hash, out.empty() ? "return_guide.ckpt" : out);
          std::cout << "final loss " << result.loss_curve.back() << '\n';
        }
      }
    } else if (*plan) {
      const fs::path dir = models_dir;
      auto data = std::make_shared<const rad::OfflineDataset>(
          rad::load_dataset(dataset_path.empty() ? dir / "dataset.jsonl" : fs::path(dataset_path)));
      auto db = std::make_shared<const rad::StateDatabase>(rad::StateDatabase::load(db_path, data));
      auto models = std::make_shared<rad::PlannerModels>();
      auto loaded = rad::load_denoiser(dir / "denoiser.ckpt");
      models->denoiser = std::move(loaded.net);
      models->schedule = loaded.schedule;
      models->layout = loaded.layout;
      if (fs::exists(dir / "return_guide.ckpt")) models->guide = rad::load_return_guide(dir / "return_guide.ckpt");
      if (fs::exists(dir / "step_estimator.ckpt")) {
        models->step_estimator = rad::load_step_estimator(dir / "step_estimator.ckpt");
      }
      rad::PlannerConfig pc;
      pc.retrieval.k = k;
      pc.retrieval.delta = delta;
      pc.retrieval.horizon = models->layout.horizon;
      pc.guidance.rho = rho;
      pc.replan_interval = replan_interval;
      pc.ablation = rad::ablation_from_string(ablation);
      auto env = rad::make_env(env_name, rad::default_stitching_spec());
      rad::RadPlanner planner(models, db, pc, seed);
      std::ofstream log(out);
      if (!log) throw std::runtime_error("cannot write " + out);
      std::size_t successes = 0;
      for (std::size_t ep = 0; ep < episodes; ++ep) {
        const auto rec = rad::run_episode(planner, *env, max_steps, rad::Rng::derive(seed, 100000 + ep), gamma);
        nlohmann::json line = rad::to_json(rec);
        line["episode"] = ep;
        log << line.dump() << '\n';
        successes += rec.success ? 1 : 0;
      }
      std::cout << successes << "/" << episodes << " episodes reached the goal\n";
    } else if (*eval) {
      rad::Experiment exp(read_config(config_path), out, &std::cout);
      for (const auto& row : exp.run_pipeline()) std::cout << rad::to_csv(row) << '\n';
    } else if (*ablate) {
      rad::Experiment exp(read_config(config_path), out, &std::cout);
      for (const auto& row : exp.run_ablations()) std::cout << rad::to_csv(row) << '\n';
    } else if (*sweep) {
      rad::Experiment exp(read_config(config_path), out, &std::cout);
      for (const auto& cell : exp.run_sweep(k_grid, delta_grid)) std::cout << rad::to_csv(cell.aggregate) << '\n';
    } else if (*plot) {
      const fs::path run = run_dir;
      std::vector<rad::CurvePoint> curves;
      std::vector<rad::MetricsRow> bars;
      if (fs::exists(run / "curve_points.csv")) curves = rad::read_curve_csv(run / "curve_points.csv");
      if (fs::exists(run / "ablation_bars.csv")) bars = rad::read_metrics_csv(run / "ablation_bars.csv");
      rad::emit_plot_data(curves, bars, out);
      std::cout << "wrote plot data to " << out << '\n';
    }
  } catch (const rad::StageError& e) {
    return fail(e.stage(), e.what());
  } catch (const std::exception& e) {
    return fail(stage, e.what());
  }
  return 0;
}
