#include "rad/experiment.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace rad {

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::string to_string(FallbackMode mode) { return mode == FallbackMode::kLastTarget ? "last_target" : "unconditional"; }

FallbackMode fallback_from_string(const std::string& s) {
  if (s == "unconditional") return FallbackMode::kUnconditional;
  if (s == "last_target") return FallbackMode::kLastTarget;
  throw std::invalid_argument("unknown fallback mode '" + s + "'");
}

std::string to_string(ReverseVariance v) { return v == ReverseVariance::kBeta ? "beta" : "posterior"; }

ReverseVariance variance_from_string(const std::string& s) {
  if (s == "beta") return ReverseVariance::kBeta;
  if (s == "posterior") return ReverseVariance::kPosterior;
  throw std::invalid_argument("unknown reverse variance '" + s + "'");
}

// Keys that change trained artefacts.
const std::vector<std::string> kModelKeys = {
    "env",           "horizon",         "diffusion_steps", "schedule",     "gamma",       "denoiser_hidden",
    "guide_hidden",  "step_hidden",     "step_embed_dim",  "denoiser_epochs", "guide_epochs", "step_epochs",
    "batch_size",    "steps_per_epoch", "denoiser_lr",     "guide_lr",     "step_lr",     "step_pairs",
    "step_normalize",
    "pad_windows",     "dataset_path",  "gap",             "traj_count",      "noise",        "curve_epochs",
    "lane_spread"};

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw std::invalid_argument("config: at least one seed is required");
  if (horizon < 2) throw std::invalid_argument("config: horizon must be at least 2");
  if (diffusion_steps < 1) throw std::invalid_argument("config: diffusion_steps must be at least 1");
  if (k == 0) throw std::invalid_argument("config: k must be at least 1");
  if (delta < -1.0 || delta > 1.0) throw std::invalid_argument("config: delta must lie in [-1, 1]");
  if (eta < 0.0) throw std::invalid_argument("config: eta must be non-negative");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("config: gamma must lie in (0, 1)");
  if (!std::isfinite(rho)) throw std::invalid_argument("config: rho must be finite");
  if (replan_interval == 0) throw std::invalid_argument("config: replan_interval must be at least 1");
  if (step_embed_dim % 2 != 0) throw std::invalid_argument("config: step_embed_dim must be even");
  if (batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
  if (env != "stitching") throw std::invalid_argument("config: unsupported env '" + env + "'");
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json ablations = nlohmann::json::array();
  for (auto a : c.ablations) ablations.push_back(to_string(a));
  return {{"env", c.env},
          {"seeds", c.seeds},
          {"horizon", c.horizon},
          {"diffusion_steps", c.diffusion_steps},
          {"schedule", to_string(c.schedule)},
          {"k", c.k},
          {"delta", c.delta},
          {"eta", c.eta},
          {"rho", c.rho},
          {"guide_clip", c.guide_clip},
          {"gamma", c.gamma},
          {"replan_interval", c.replan_interval},
          {"fallback", to_string(c.fallback)},
          {"reverse_variance", to_string(c.reverse_variance)},
          {"use_guide", c.use_guide},
          {"denoiser_hidden", c.denoiser_hidden},
          {"guide_hidden", c.guide_hidden},
          {"step_hidden", c.step_hidden},
          {"step_embed_dim", c.step_embed_dim},
          {"denoiser_epochs", c.denoiser_epochs},
          {"guide_epochs", c.guide_epochs},
          {"step_epochs", c.step_epochs},
          {"batch_size", c.batch_size},
          {"steps_per_epoch", c.steps_per_epoch},
          {"denoiser_lr", c.denoiser_lr},
          {"guide_lr", c.guide_lr},
          {"step_lr", c.step_lr},
          {"step_pairs", c.step_pairs},
          {"step_normalize", c.step_normalize},
          {"pad_windows", c.pad_windows},
          {"dataset_path", c.dataset_path ? nlohmann::json(*c.dataset_path) : nlohmann::json(nullptr)},
          {"gap", c.gap},
          {"traj_count", c.traj_count},
          {"noise", c.noise},
          {"lane_spread", c.lane_spread},
          {"episodes", c.episodes},
          {"max_steps", c.max_steps},
          {"ablations", ablations},
          {"curve_epochs", c.curve_epochs},
          {"curve_episodes", c.curve_episodes}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  const nlohmann::json known = to_json(ExperimentConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  ExperimentConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("env", c.env);
  get("seeds", c.seeds);
  get("horizon", c.horizon);
  get("diffusion_steps", c.diffusion_steps);
  if (j.contains("schedule")) c.schedule = schedule_kind_from_string(j.at("schedule").get<std::string>());
  get("k", c.k);
  get("delta", c.delta);
  get("eta", c.eta);
  get("rho", c.rho);
  get("guide_clip", c.guide_clip);
  get("gamma", c.gamma);
  get("replan_interval", c.replan_interval);
  if (j.contains("fallback")) c.fallback = fallback_from_string(j.at("fallback").get<std::string>());
  if (j.contains("reverse_variance")) {
    c.reverse_variance = variance_from_string(j.at("reverse_variance").get<std::string>());
  }
  get("use_guide", c.use_guide);
  get("denoiser_hidden", c.denoiser_hidden);
  get("guide_hidden", c.guide_hidden);
  get("step_hidden", c.step_hidden);
  get("step_embed_dim", c.step_embed_dim);
  get("denoiser_epochs", c.denoiser_epochs);
  get("guide_epochs", c.guide_epochs);
  get("step_epochs", c.step_epochs);
  get("batch_size", c.batch_size);
  get("steps_per_epoch", c.steps_per_epoch);
  get("denoiser_lr", c.denoiser_lr);
  get("guide_lr", c.guide_lr);
  get("step_lr", c.step_lr);
  get("step_pairs", c.step_pairs);
  get("step_normalize", c.step_normalize);
  get("pad_windows", c.pad_windows);
  if (j.contains("dataset_path") && !j.at("dataset_path").is_null()) {
    c.dataset_path = j.at("dataset_path").get<std::string>();
  }
  get("gap", c.gap);
  get("traj_count", c.traj_count);
  get("noise", c.noise);
  get("lane_spread", c.lane_spread);
  get("episodes", c.episodes);
  get("max_steps", c.max_steps);
  if (j.contains("ablations")) {
    c.ablations.clear();
    for (const auto& a : j.at("ablations")) c.ablations.push_back(ablation_from_string(a.get<std::string>()));
  }
  get("curve_epochs", c.curve_epochs);
  get("curve_episodes", c.curve_episodes);
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

ExperimentConfig apply_env_overrides(const ExperimentConfig& config) {
  nlohmann::json j = to_json(config);
  bool changed = false;
  for (auto& [key, value] : j.items()) {
    std::string var = "RAD_";
    for (char ch : key) var.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    const char* raw = std::getenv(var.c_str());
    if (!raw) continue;
    nlohmann::json parsed = nlohmann::json::parse(raw, nullptr, false);
    value = parsed.is_discarded() ? nlohmann::json(std::string(raw)) : parsed;
    changed = true;
  }
  return changed ? experiment_config_from_json(j) : config;
}

std::string model_hash(const ExperimentConfig& config) {
  const nlohmann::json full = to_json(config);
  nlohmann::json subset = nlohmann::json::object();
  for (const auto& key : kModelKeys) subset[key] = full.at(key);
  return hex64(fnv1a(subset.dump()));
}

std::string config_hash(const ExperimentConfig& config) { return hex64(fnv1a(to_json(config).dump())); }

StitchingSpec stitching_spec_for(const ExperimentConfig& config) {
  StitchingSpec spec = default_stitching_spec();
  spec.gap = config.gap;
  spec.a_count = config.traj_count;
  spec.b_count = config.traj_count;
  spec.env.noise = config.noise;
  spec.lane_spread = config.lane_spread;
  return spec;
}

PlannerConfig planner_config_for(const ExperimentConfig& config) {
  PlannerConfig p;
  p.retrieval.k = config.k;
  p.retrieval.delta = config.delta;
  p.retrieval.eta = config.eta;
  p.retrieval.horizon = config.horizon;
  p.guidance.rho = config.use_guide ? config.rho : 0.0;
  p.guidance.gradient_clip = config.guide_clip;
  p.sampler.variance = config.reverse_variance;
  p.replan_interval = config.replan_interval;
  p.fallback = config.fallback;
  return p;
}

// ---------------------------------------------------------------------------
// Metrics

std::string metrics_csv_header() {
  return "config_hash,model_hash,env,variant,seed,k,delta,episodes,mean_return,std_return,success_rate,"
         "normalized_score,miss_rate,mean_similarity,mean_target_step";
}

std::string to_csv(const MetricsRow& r) {
  std::ostringstream out;
  out << r.config_hash << ',' << r.model_hash << ',' << r.env << ',' << r.variant << ',' << r.seed << ',' << r.k << ','
      << format_double(r.delta) << ',' << r.episodes << ',' << format_double(r.mean_return) << ','
      << format_double(r.std_return) << ',' << format_double(r.success_rate) << ','
      << format_double(r.normalized_score) << ',' << format_double(r.miss_rate) << ','
      << format_double(r.mean_similarity) << ',' << format_double(r.mean_target_step);
  return out.str();
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << metrics_csv_header() << '\n';
  for (const auto& r : rows) out << to_csv(r) << '\n';
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != metrics_csv_header()) throw std::runtime_error(path.string() + " is not a metrics file");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 15) throw std::runtime_error(path.string() + ": malformed metrics row");
    MetricsRow r{f[0], f[1], f[2], f[3], f[4], std::stoul(f[5]), std::stod(f[6]), std::stoul(f[7]),
                 std::stod(f[8]), std::stod(f[9]), std::stod(f[10]), std::stod(f[11]), std::stod(f[12]),
                 std::stod(f[13]), std::stod(f[14])};
    rows.push_back(std::move(r));
  }
  return rows;
}

MetricsRow aggregate_rows(const std::vector<MetricsRow>& per_seed) {
  if (per_seed.empty()) throw std::invalid_argument("aggregate_rows: no rows");
  MetricsRow agg = per_seed.front();
  agg.seed = "aggregate";
  std::vector<double> means, success, score, miss, sim, step;
  std::size_t episodes = 0;
  for (const auto& r : per_seed) {
    means.push_back(r.mean_return);
    success.push_back(r.success_rate);
    score.push_back(r.normalized_score);
    miss.push_back(r.miss_rate);
    sim.push_back(r.mean_similarity);
    step.push_back(r.mean_target_step);
    episodes += r.episodes;
  }
  agg.episodes = episodes;
  agg.mean_return = mean_of(means);
  agg.std_return = sample_std(means);
  agg.success_rate = mean_of(success);
  agg.normalized_score = mean_of(score);
  agg.miss_rate = mean_of(miss);
  agg.mean_similarity = mean_of(sim);
  agg.mean_target_step = mean_of(step);
  return agg;
}

std::string curve_csv_header() { return "epoch,variant,env,seed,mean_return,success_rate"; }

std::vector<CurvePoint> read_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != curve_csv_header()) throw std::runtime_error(path.string() + " is not a curve file");
  std::vector<CurvePoint> points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 6) throw std::runtime_error(path.string() + ": malformed curve row");
    points.push_back({std::stoul(f[0]), f[1], f[2], std::stoull(f[3]), std::stod(f[4]), std::stod(f[5])});
  }
  return points;
}

void emit_plot_data(const std::vector<CurvePoint>& curves, const std::vector<MetricsRow>& ablation_rows,
                    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream curve_out(out_dir / "plot_curves.csv");
  curve_out << curve_csv_header() << '\n';
  std::vector<CurvePoint> sorted = curves;
  std::sort(sorted.begin(), sorted.end(), [](const CurvePoint& a, const CurvePoint& b) {
    return std::tie(a.env, a.variant, a.seed, a.epoch) < std::tie(b.env, b.variant, b.seed, b.epoch);
  });
  for (const auto& p : sorted) {
    curve_out << p.epoch << ',' << p.variant << ',' << p.env << ',' << p.seed << ',' << format_double(p.mean_return)
              << ',' << format_double(p.success_rate) << '\n';
  }
  write_metrics_csv(ablation_rows, out_dir / "plot_ablation_bars.csv");
}

// ---------------------------------------------------------------------------
// Experiment

Experiment::Experiment(ExperimentConfig config, std::filesystem::path out_dir, std::ostream* log)
    : config_(std::move(config)), out_dir_(std::move(out_dir)), echo_(log) {
  config_.validate();
  std::filesystem::create_directories(out_dir_);
  this->log("config_hash=" + config_hash(config_) + " model_hash=" + model_hash(config_));
}

void Experiment::log(const std::string& message) {
  std::ofstream out(out_dir_ / "run.log", std::ios::app);
  out << message << '\n';
  if (echo_) *echo_ << message << '\n';
}

std::filesystem::path Experiment::seed_dir(std::uint64_t seed) const {
  return out_dir_ / "models" / model_hash(config_) / ("seed_" + std::to_string(seed));
}

std::uint64_t Experiment::episode_seed(std::uint64_t seed, std::size_t episode) const {
  return Rng::derive(seed, 100000 + episode);
}

SeedArtifacts Experiment::prepare_seed(std::uint64_t seed) {
  const std::string hash = model_hash(config_);
  SeedArtifacts art;
  art.seed = seed;
  art.dir = seed_dir(seed);
  std::filesystem::create_directories(art.dir);
  bool all_cached = true;

  auto stage = [&](const std::string& name, const std::filesystem::path& artifact, auto&& body) {
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      log("stage " + name + " failed: " + e.what());
      throw StageError(name, artifact.string(), e.what());
    }
  };

  const auto dataset_file = art.dir / "dataset.jsonl";
  stage("gen-data", dataset_file, [&] {
    if (std::filesystem::exists(dataset_file)) {
      art.dataset = std::make_shared<const OfflineDataset>(load_dataset(dataset_file));
      log("cache hit: dataset " + dataset_file.string());
      return;
    }
    all_cached = false;
    OfflineDataset data = config_.dataset_path
                              ? load_dataset(*config_.dataset_path)
                              : gen_stitching_dataset(stitching_spec_for(config_), Rng::derive(seed, 11), config_.gamma).dataset;
    save_dataset(data, dataset_file);
    art.dataset = std::make_shared<const OfflineDataset>(std::move(data));
    log("generated dataset " + dataset_file.string());
  });

  const auto db_file = art.dir / "db.bin";
  stage("build-db", db_file, [&] {
    if (std::filesystem::exists(db_file)) {
      art.db = std::make_shared<const StateDatabase>(StateDatabase::load(db_file, art.dataset));
      log("cache hit: database " + db_file.string());
      return;
    }
    all_cached = false;
    StateDatabase db = StateDatabase::build(art.dataset, config_.gamma);
    db.save(db_file);
    art.db = std::make_shared<const StateDatabase>(std::move(db));
    log("built database " + db_file.string());
  });

  auto models = std::make_shared<PlannerModels>();
  models->layout = PlanLayout{config_.horizon, art.dataset->state_dim(), art.dataset->action_dim()};
  std::ofstream losses;
  auto loss_log = [&](const std::string& component, const std::vector<double>& curve) {
    if (!losses.is_open()) {
      const bool fresh = !std::filesystem::exists(art.dir / "losses.csv");
      losses.open(art.dir / "losses.csv", std::ios::app);
      if (fresh) losses << "component,epoch,loss\n";
    }
    for (std::size_t e = 0; e < curve.size(); ++e) losses << component << ',' << e << ',' << format_double(curve[e]) << '\n';
  };
  auto cached = [&](const std::filesystem::path& file, const std::string& role) {
    if (!std::filesystem::exists(file)) return false;
    return load_checkpoint(file, role).config_hash == hash;
  };

  const auto denoiser_file = art.dir / "denoiser.ckpt";
  stage("train-denoiser", denoiser_file, [&] {
    if (cached(denoiser_file, "denoiser")) {
      auto loaded = load_denoiser(denoiser_file);
      models->denoiser = std::move(loaded.net);
      models->schedule = std::move(loaded.schedule);
      log("cache hit: denoiser " + denoiser_file.string());
      return;
    }
    all_cached = false;
    models->schedule = make_schedule(config_.diffusion_steps, config_.schedule);
    DiffusionTrainingOptions opt;
    opt.hidden = config_.denoiser_hidden;
    opt.step_embed_dim = config_.step_embed_dim;
    opt.learning_rate = config_.denoiser_lr;
    opt.batch_size = config_.batch_size;
    opt.steps_per_epoch = config_.steps_per_epoch;
    opt.pad_windows = config_.pad_windows;
    opt.on_epoch = [&](std::size_t epoch, const Mlp& net) {
      if (std::find(config_.curve_epochs.begin(), config_.curve_epochs.end(), epoch + 1) == config_.curve_epochs.end()) return;
      save_denoiser(net, models->schedule, models->layout, hash,
                    art.dir / ("denoiser_epoch_" + std::to_string(epoch + 1) + ".ckpt"));
    };
    auto trained = train_denoiser(*art.dataset, config_.horizon, models->schedule, config_.denoiser_epochs,
                                  Rng::derive(seed, 21), opt);
    save_denoiser(trained.denoiser, models->schedule, models->layout, hash, denoiser_file);
    loss_log("denoiser", trained.loss_curve);
    models->denoiser = std::move(trained.denoiser);
    log("trained denoiser " + denoiser_file.string());
  });

  const auto guide_file = art.dir / "return_guide.ckpt";
  stage("train-guide", guide_file, [&] {
    if (cached(guide_file, "return_guide")) {
      models->guide = load_return_guide(guide_file);
      log("cache hit: return guide " + guide_file.string());
      return;
    }
    all_cached = false;
    DiffusionTrainingOptions opt = default_guide_options();
    opt.hidden = config_.guide_hidden;
    opt.step_embed_dim = config_.step_embed_dim;
    opt.learning_rate = config_.guide_lr;
    opt.batch_size = config_.batch_size;
    opt.steps_per_epoch = config_.steps_per_epoch;
    opt.pad_windows = config_.pad_windows;
    auto trained = train_return_guide(*art.dataset, config_.horizon, models->schedule, config_.gamma,
                                      config_.guide_epochs, Rng::derive(seed, 22), opt);
    save_return_guide(trained.guide, hash, guide_file);
    loss_log("return_guide", trained.loss_curve);
    models->guide = std::move(trained.guide);
    log("trained return guide " + guide_file.string());
  });

  const auto step_file = art.dir / "step_estimator.ckpt";
  stage("train-step", step_file, [&] {
    if (cached(step_file, "step_estimator")) {
      models->step_estimator = load_step_estimator(step_file);
      log("cache hit: step estimator " + step_file.string());
      return;
    }
    all_cached = false;
    StepEstimatorOptions opt;
    opt.hidden = config_.step_hidden;
    if (config_.step_normalize) opt.input_normalizer = art.dataset->state_norm();
    const auto pairs = sample_step_pairs(*art.dataset, config_.horizon, config_.step_pairs, Rng::derive(seed, 23));
    auto trained = train_step_estimator(pairs, config_.horizon, config_.step_epochs, config_.step_lr,
                                        Rng::derive(seed, 24), opt);
    save_step_estimator(trained.estimator, hash, step_file);
    loss_log("step_estimator", trained.loss_curve);
    models->step_estimator = std::move(trained.estimator);
    log("trained step estimator " + step_file.string());
  });

  art.models = std::move(models);
  art.cache_hit = all_cached;
  if (all_cached) log("cache hit: seed " + std::to_string(seed) + " fully trained, no retraining");
  return art;
}

std::pair<double, double> Experiment::reference_returns(std::uint64_t seed) {
  const StitchingSpec spec = stitching_spec_for(config_);
  Nav2dEnv env = stitching_eval_env(spec);
  std::vector<double> random_returns, oracle_returns;
  for (std::size_t ep = 0; ep < config_.episodes; ++ep) {
    const std::uint64_t s = episode_seed(seed, ep);
    for (int policy = 0; policy < 2; ++policy) {
      Rng rng(Rng::derive(s, 9));
      StateVec state = env.reset(s);
      double ret = 0.0, weight = 1.0;
      for (std::size_t t = 0; t < config_.max_steps; ++t) {
        const ActionVec a = policy == 0 ? random_action(env, rng) : greedy_goal_action(env, state);
        const StepResult r = env.step(a);
        ret += weight * r.reward;
        weight *= config_.gamma;
        state = r.state;
        if (r.terminal) break;
      }
      (policy == 0 ? random_returns : oracle_returns).push_back(ret);
    }
  }
  return {mean_of(random_returns), mean_of(oracle_returns)};
}

EvalSummary Experiment::evaluate(const SeedArtifacts& art, const PlannerConfig& planner_config,
                                 const std::string& variant, bool keep_episodes) {
  EvalSummary summary;
  std::uint64_t seed_hash = 0xCBF29CE484222325ULL;
  for (std::size_t ep = 0; ep < config_.episodes; ++ep) {
    seed_hash = (seed_hash ^ episode_seed(art.seed, ep)) * 0x100000001B3ULL;
  }
  summary.seed_hash = seed_hash;

  // Evaluations are cached by everything that determines their outcome.
  nlohmann::json key = {{"model_hash", model_hash(config_)},
                        {"seed", art.seed},
                        {"variant", variant},
                        {"k", planner_config.retrieval.k},
                        {"delta", planner_config.retrieval.delta},
                        {"eta", planner_config.retrieval.eta},
                        {"rho", planner_config.guidance.rho},
                        {"guide_clip", planner_config.guidance.gradient_clip},
                        {"variance", to_string(planner_config.sampler.variance)},
                        {"clip_denoised", planner_config.sampler.clip_denoised},
                        {"replan", planner_config.replan_interval},
                        {"fallback", to_string(planner_config.fallback)},
                        {"ablation", to_string(planner_config.ablation)},
                        {"fixed_anchor", planner_config.fixed_anchor_position},
                        {"episodes", config_.episodes},
                        {"max_steps", config_.max_steps},
                        {"gamma", config_.gamma},
                        {"gap", config_.gap},
                        {"noise", config_.noise}};
  const auto cache_file = out_dir_ / "eval_cache" / (hex64(fnv1a(key.dump())) + ".json");

  MetricsRow& row = summary.row;
  row.config_hash = config_hash(config_);
  row.model_hash = model_hash(config_);
  row.env = config_.env;
  row.variant = variant;
  row.seed = std::to_string(art.seed);
  row.k = planner_config.retrieval.k;
  row.delta = planner_config.retrieval.delta;
  row.episodes = config_.episodes;

  if (!keep_episodes && std::filesystem::exists(cache_file)) {
    std::ifstream in(cache_file);
    const auto j = nlohmann::json::parse(in);
    if (j.at("key") == key) {
      const auto& m = j.at("metrics");
      row.mean_return = m.at("mean_return").get<double>();
      row.std_return = m.at("std_return").get<double>();
      row.success_rate = m.at("success_rate").get<double>();
      row.normalized_score = m.at("normalized_score").get<double>();
      row.miss_rate = m.at("miss_rate").get<double>();
      row.mean_similarity = m.at("mean_similarity").get<double>();
      row.mean_target_step = m.at("mean_target_step").get<double>();
      log("cache hit: evaluation " + variant + " seed " + row.seed);
      return summary;
    }
  }

  const StitchingSpec spec = stitching_spec_for(config_);
  Nav2dEnv env = stitching_eval_env(spec);
  RadPlanner planner(art.models, art.db, planner_config, 0);
  std::vector<double> returns;
  std::size_t successes = 0, replans = 0, misses = 0, targeted = 0;
  double similarity_sum = 0.0, step_sum = 0.0;
  for (std::size_t ep = 0; ep < config_.episodes; ++ep) {
    EpisodeRecord rec = run_episode(planner, env, config_.max_steps, episode_seed(art.seed, ep), config_.gamma);
    returns.push_back(rec.discounted_return);
    successes += rec.success ? 1 : 0;
    for (const auto& d : rec.diagnostics) {
      if (!d.replanned) continue;
      ++replans;
      if (d.retrieval_miss) ++misses;
      if (d.target) {
        ++targeted;
        similarity_sum += d.similarity;
        step_sum += d.target_step;
      }
    }
    if (keep_episodes) summary.episodes.push_back(std::move(rec));
  }
  const auto [random_ref, oracle_ref] = reference_returns(art.seed);
  row.mean_return = mean_of(returns);
  row.std_return = sample_std(returns);
  row.success_rate = config_.episodes ? static_cast<double>(successes) / static_cast<double>(config_.episodes) : 0.0;
  row.normalized_score = oracle_ref != random_ref ? 100.0 * (row.mean_return - random_ref) / (oracle_ref - random_ref) : 0.0;
  row.miss_rate = replans ? static_cast<double>(misses) / static_cast<double>(replans) : 0.0;
  row.mean_similarity = targeted ? similarity_sum / static_cast<double>(targeted) : 0.0;
  row.mean_target_step = targeted ? step_sum / static_cast<double>(targeted) : 0.0;

  std::filesystem::create_directories(cache_file.parent_path());
  std::ofstream out(cache_file);
  out << nlohmann::json{{"key", key},
                        {"metrics",
                         {{"mean_return", row.mean_return},
                          {"std_return", row.std_return},
                          {"success_rate", row.success_rate},
                          {"normalized_score", row.normalized_score},
                          {"miss_rate", row.miss_rate},
                          {"mean_similarity", row.mean_similarity},
                          {"mean_target_step", row.mean_target_step}}}}
             .dump();
  log("evaluated " + variant + " seed " + row.seed + " k=" + std::to_string(row.k) + " delta=" +
      format_double(row.delta) + " success=" + format_double(row.success_rate) + " return=" +
      format_double(row.mean_return) + " seed_hash=" + hex64(seed_hash));
  return summary;
}

std::vector<MetricsRow> Experiment::run_pipeline() {
  std::vector<MetricsRow> rows;
  std::ofstream episodes_out(out_dir_ / "episodes.jsonl");
  std::vector<CurvePoint> curves;
  const PlannerConfig base = planner_config_for(config_);
  for (auto seed : config_.seeds) {
    SeedArtifacts art = prepare_seed(seed);
    EvalSummary summary;
    try {
      summary = evaluate(art, base, to_string(AblationKind::kNone), true);
    } catch (const std::exception& e) {
      throw StageError("eval", (out_dir_ / "episodes.jsonl").string(), e.what());
    }
    for (std::size_t ep = 0; ep < summary.episodes.size(); ++ep) {
      nlohmann::json line = to_json(summary.episodes[ep]);
      line["seed"] = seed;
      line["episode"] = ep;
      line["variant"] = summary.row.variant;
      episodes_out << line.dump() << '\n';
    }
    rows.push_back(summary.row);

    for (std::size_t epoch : config_.curve_epochs) {
      const auto snapshot = art.dir / ("denoiser_epoch_" + std::to_string(epoch) + ".ckpt");
      if (!std::filesystem::exists(snapshot)) continue;
      auto snap_models = std::make_shared<PlannerModels>(*art.models);
      snap_models->denoiser = load_denoiser(snapshot).net;
      SeedArtifacts snap = art;
      snap.models = snap_models;
      ExperimentConfig curve_config = config_;
      curve_config.episodes = config_.curve_episodes;
      Experiment curve_run(curve_config, out_dir_ / "curves");
      for (auto kind : {AblationKind::kNone, AblationKind::kNoRetrievalRandomTarget}) {
        PlannerConfig pc = base;
        pc.ablation = kind;
        const auto s = curve_run.evaluate(snap, pc, to_string(kind) + "@" + std::to_string(epoch));
        curves.push_back({epoch, to_string(kind), config_.env, seed, s.row.mean_return, s.row.success_rate});
      }
    }
  }
  rows.push_back(aggregate_rows(rows));
  write_metrics_csv(rows, out_dir_ / "metrics.csv");

  std::ofstream curve_out(out_dir_ / "curve_points.csv");
  curve_out << curve_csv_header() << '\n';
  for (const auto& p : curves) {
    curve_out << p.epoch << ',' << p.variant << ',' << p.env << ',' << p.seed << ',' << format_double(p.mean_return)
              << ',' << format_double(p.success_rate) << '\n';
  }
  log("pipeline complete: " + std::to_string(rows.size()) + " metrics rows");
  return rows;
}

std::vector<CurvePoint> Experiment::curve_points() const {
  const auto path = out_dir_ / "curve_points.csv";
  return std::filesystem::exists(path) ? read_curve_csv(path) : std::vector<CurvePoint>{};
}

std::vector<MetricsRow> Experiment::run_ablations() {
  std::vector<AblationKind> variants = {AblationKind::kNone};
  variants.insert(variants.end(), config_.ablations.begin(), config_.ablations.end());
  std::map<std::string, std::vector<MetricsRow>> per_variant;
  std::vector<MetricsRow> per_seed_rows;
  for (auto seed : config_.seeds) {
    SeedArtifacts art = prepare_seed(seed);
    for (auto kind : variants) {
      PlannerConfig pc = planner_config_for(config_);
      pc.ablation = kind;
      const auto summary = evaluate(art, pc, to_string(kind));
      log("ablation seeds variant=" + to_string(kind) + " seed=" + std::to_string(seed) +
          " seed_hash=" + hex64(summary.seed_hash));
      per_variant[to_string(kind)].push_back(summary.row);
      per_seed_rows.push_back(summary.row);
    }
  }
  std::vector<MetricsRow> aggregates;
  for (auto kind : variants) aggregates.push_back(aggregate_rows(per_variant.at(to_string(kind))));

  std::ofstream table(out_dir_ / "ablation.csv");
  table << "variant," << config_.env << "_mean_return," << config_.env << "_std_return," << config_.env
        << "_success_rate\n";
  for (const auto& a : aggregates) {
    table << a.variant << ',' << format_double(a.mean_return) << ',' << format_double(a.std_return) << ','
          << format_double(a.success_rate) << '\n';
  }
  write_metrics_csv(per_seed_rows, out_dir_ / "ablation_bars.csv");
  return aggregates;
}

std::vector<Experiment::SweepCell> Experiment::run_sweep(const std::vector<std::size_t>& k_values,
                                                         const std::vector<double>& delta_values) {
  std::vector<SweepCell> cells;
  for (std::size_t k : k_values) cells.push_back({"k", k, config_.delta, {}, {}});
  for (double d : delta_values) cells.push_back({"delta", config_.k, d, {}, {}});
  std::vector<SeedArtifacts> arts;
  for (auto seed : config_.seeds) arts.push_back(prepare_seed(seed));
  for (auto& cell : cells) {
    for (const auto& art : arts) {
      PlannerConfig pc = planner_config_for(config_);
      pc.retrieval.k = cell.k;
      pc.retrieval.delta = cell.delta;
      cell.per_seed.push_back(evaluate(art, pc, to_string(AblationKind::kNone)).row);
    }
    cell.aggregate = aggregate_rows(cell.per_seed);
  }

  std::ofstream out(out_dir_ / "sweep.csv");
  out << "panel,fixed,k,delta,seed,mean_return,std_return,success_rate,miss_rate\n";
  for (const auto& cell : cells) {
    const std::string fixed =
        cell.panel == "k" ? "delta=" + format_double(config_.delta) : "k=" + std::to_string(config_.k);
    auto emit = [&](const MetricsRow& r) {
      out << cell.panel << ',' << fixed << ',' << cell.k << ',' << format_double(cell.delta) << ',' << r.seed << ','
          << format_double(r.mean_return) << ',' << format_double(r.std_return) << ','
          << format_double(r.success_rate) << ',' << format_double(r.miss_rate) << '\n';
    };
    for (const auto& r : cell.per_seed) emit(r);
    emit(cell.aggregate);
  }
  return cells;
}

}  // namespace rad
