// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//
//   acceptance [--work-dir DIR] [--only N[,N...]]

#include "oracles.hpp"
#include "rad/diffusion.hpp"
#include "rad/envs.hpp"
#include "rad/experiment.hpp"
#include "rad/retrieval.hpp"
#include "rad/step_estimation.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

using namespace rad;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c, d);
  return buf;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

OfflineDataset random_dataset(std::size_t total_states, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Trajectory> trajs;
  std::size_t used = 0;
  while (used < total_states) {
    const auto len = std::min<std::size_t>(total_states - used, static_cast<std::size_t>(rng.uniform_int(5, 80)));
    Trajectory t{static_cast<std::int64_t>(trajs.size()), {}};
    for (std::size_t k = 0; k < len; ++k) {
      Eigen::Vector3d s(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      Eigen::Vector2d a(rng.uniform(-1, 1), rng.uniform(-1, 1));
      // Coarse rewards make exact return ties common.
      t.transitions.push_back({s, a, std::round(rng.uniform(-2, 2)) * 0.5});
    }
    used += len;
    trajs.push_back(std::move(t));
  }
  return OfflineDataset(3, 2, 0.99, std::move(trajs));
}

// 1. Retrieval against a brute-force scan.
Outcome retrieval_oracle() {
  std::size_t queries = 0, mismatches = 0;
  for (std::size_t size : {1000, 10000, 100000}) {
    auto data = std::make_shared<const OfflineDataset>(random_dataset(size, size));
    const auto db = StateDatabase::build(data, 0.99);
    Rng rng(size + 1);
    for (int q = 0; q < 100; ++q) {
      StateVec query(3);
      for (int d = 0; d < 3; ++d) query[d] = rng.uniform(-1, 1);
      // Some queries sit exactly on stored states.
      if (q % 4 == 0) query = db.entries()[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(db.size()) - 1))].state;
      RetrievalConfig cfg;
      const double deltas[] = {-1.0, 0.0, 0.5, 0.9, 0.99};
      cfg.delta = deltas[q % 5];
      cfg.k = static_cast<std::size_t>(rng.uniform_int(1, 150));
      cfg.eta = rng.uniform(0.0, 1.0);
      cfg.horizon = static_cast<std::size_t>(rng.uniform_int(2, 40));
      ++queries;

      const auto cands = retrieve_candidates(db, {query, cfg});
      const auto want = oracle::top_k(db, query, cfg.k, cfg.delta);
      bool same = cands.size() == want.size();
      for (std::size_t n = 0; same && n < cands.size(); ++n) same = cands[n].entry == want[n].entry;
      const auto got = retrieve_target(db, query, cfg);
      if (same && !want.empty()) {
        std::vector<std::size_t> entries;
        for (const auto& w : want) entries.push_back(w.entry);
        same = got && got->entry == oracle::select(db, entries, cfg.eta, cfg.horizon);
      } else if (same) {
        same = !got;
      }
      mismatches += !same;
    }
  }
  return {mismatches == 0, std::to_string(queries - mismatches) + "/" + std::to_string(queries) + " queries match"};
}

// 2. Return filter and remaining-length argmax over random candidate sets.
Outcome filter_soundness() {
  auto data = std::make_shared<const OfflineDataset>(random_dataset(5000, 77));
  const auto db = StateDatabase::build(data, 0.99);
  Rng rng(5);
  std::size_t bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 60));
    std::set<std::size_t> picked;
    while (picked.size() < n) picked.insert(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(db.size()) - 1)));
    std::vector<Candidate> cands;
    for (auto e : picked) cands.push_back({e, rng.uniform(0.9, 1.0)});
    RetrievalQuery query{db.entries()[*picked.begin()].state, {}};
    query.config.eta = trial % 10 == 0 ? 0.0 : rng.uniform(0.0, 1.5);
    query.config.horizon = static_cast<std::size_t>(rng.uniform_int(2, 40));
    const auto chosen = select_target(db, cands, query);

    // Independent check of the survivor set and the argmax.
    std::vector<double> v;
    for (const auto& c : cands) {
      const auto& e = db.entries()[c.entry];
      v.push_back(oracle::segment_return(data->by_id(e.traj_id), e.timestep, 0.99, query.config.horizon));
    }
    const double best = *std::max_element(v.begin(), v.end());
    std::size_t max_len = 0;
    bool chosen_survives = false;
    for (std::size_t k = 0; k < cands.size(); ++k) {
      if (std::abs(v[k] - best) > query.config.eta) continue;
      const auto& e = db.entries()[cands[k].entry];
      max_len = std::max(max_len, data->by_id(e.traj_id).length() - e.timestep);
      if (cands[k].entry == chosen.entry) chosen_survives = true;
    }
    const bool ok = chosen_survives && chosen.remaining_length == max_len &&
                    std::abs(chosen.segment_return - best) <= query.config.eta &&
                    chosen.entry == oracle::select(db, std::vector<std::size_t>(picked.begin(), picked.end()),
                                                   query.config.eta, query.config.horizon);
    bad += !ok;
  }
  return {bad == 0, std::to_string(1000 - bad) + "/1000 candidate sets sound"};
}

// 3. Forward-noise moments, pooled over plan entries that share the same clean value.
Outcome forward_noise_mc() {
  const PlanLayout layout{8, 2, 2};
  const auto s = make_schedule(20);
  const PlanMatrix tau0 = PlanMatrix::Constant(8, 4, 0.75);
  Rng rng(11);
  double worst_mean = 0.0, worst_var = 0.0;
  for (int i : {2, 10, 16}) {
    constexpr int kDraws = 100000;
    long double sum = 0.0L, sq = 0.0L;
    for (int d = 0; d < kDraws; ++d) {
      const PlanMatrix x = forward_noise(tau0, i, standard_normal_plan(layout, rng), s);
      sum += x.sum();
      sq += x.squaredNorm();
    }
    const long double n = static_cast<long double>(kDraws) * tau0.size();
    const double mean = static_cast<double>(sum / n);
    const double var = static_cast<double>(sq / n) - mean * mean;
    const double want_mean = s.alpha(i) * 0.75;
    const double want_var = s.sigma(i) * s.sigma(i);
    worst_mean = std::max(worst_mean, std::abs(mean - want_mean) / want_mean);
    worst_var = std::max(worst_var, std::abs(var - want_var) / want_var);
  }
  return {worst_mean <= 0.01 && worst_var <= 0.01,
          fmt("max rel err mean %.4f var %.4f", worst_mean, worst_var)};
}

// 4. Anchors survive every reverse step.
Outcome anchor_preservation() {
  const PlanLayout layout{32, 2, 2};
  const auto s = make_schedule(20);
  const Mlp net = Mlp::initialize(NetSpec{layout.flat_size(), {64, 64}, layout.flat_size(), Activation::kMish, 16}, 1);
  const ReturnGuide guide{Mlp::initialize(NetSpec{layout.flat_size(), {32}, 1, Activation::kMish, 16}, 2), 0, 1};
  std::size_t violations = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const StateVec cur = Eigen::Vector2d(rng.uniform(-1, 1), rng.uniform(-1, 1));
    const StateVec tgt = Eigen::Vector2d(rng.uniform(-1, 1), rng.uniform(-1, 1));
    const int k = static_cast<int>(rng.uniform_int(1, 31));
    auto held = [&](const PlanMatrix& p) {
      return p.row(0).head(2).transpose() == cur && p.row(k).head(2).transpose() == tgt;
    };
    const PlanMatrix plan = sample_plan(cur, tgt, k, layout, net, &guide, GuidanceConfig{0.1, 1.0}, s, rng, {},
                                        [&](int, const PlanMatrix& p) { violations += !held(p); });
    violations += !held(plan);
  }
  return {violations == 0, std::to_string(violations) + " violations over 100 plans x 21 steps"};
}

// 5. Guidance gradient and the rho = 0 sampler.
Outcome guidance() {
  const PlanLayout layout{32, 2, 2};
  const auto s = make_schedule(20);
  const ReturnGuide guide{Mlp::initialize(NetSpec{layout.flat_size(), {64, 64}, 1, Activation::kMish, 16}, 5), 0, 1};
  Rng rng(9);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const PlanMatrix tau = standard_normal_plan(layout, rng);
    const int step = static_cast<int>(rng.uniform_int(1, 20));
    const PlanMatrix g = guidance_gradient(guide, tau, step, {});
    PlanMatrix fd(tau.rows(), tau.cols());
    const double h = 1e-5;
    for (Eigen::Index k = 0; k < tau.size(); ++k) {
      PlanMatrix up = tau, down = tau;
      up(k) += h;
      down(k) -= h;
      fd(k) = (guide.predict(up, step) - guide.predict(down, step)) / (2.0 * h);
    }
    worst = std::max(worst, (g - fd).norm() / fd.norm());
  }
  const Mlp net = Mlp::initialize(NetSpec{layout.flat_size(), {64, 64}, layout.flat_size(), Activation::kMish, 16}, 6);
  bool bitwise = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng a(seed), b(seed);
    const StateVec cur = Eigen::Vector2d(0.2, -0.3), tgt = Eigen::Vector2d(-0.5, 0.6);
    bitwise &= sample_plan(cur, tgt, 7, layout, net, &guide, GuidanceConfig{0.0, 1.0}, s, a) ==
               sample_plan(cur, tgt, 7, layout, net, nullptr, GuidanceConfig{0.0, 1.0}, s, b);
  }
  return {worst <= 1e-4 && bitwise,
          fmt("max rel err %.2e over 100 pairs; rho=0 bitwise ", worst) + (bitwise ? "identical" : "DIFFERENT")};
}

// 6. Training sanity.
Outcome training_sanity() {
  // (a) One trajectory, repeated windows.
  Rng rng(4);
  Trajectory t{0, {}};
  Eigen::Vector2d p(0.2, 0.3);
  for (int k = 0; k < 40; ++k) {
    const Eigen::Vector2d a(0.03 + 0.01 * rng.uniform(-1, 1), 0.02 + 0.01 * rng.uniform(-1, 1));
    t.transitions.push_back({p, a, -0.01});
    p += a;
  }
  const OfflineDataset single(2, 2, 0.99, {t});
  const auto s = make_schedule(20);
  DiffusionTrainingOptions opt;
  opt.steps_per_epoch = 100;
  const auto untrained = train_denoiser(single, 32, s, 0, 1, opt);
  const auto trained = train_denoiser(single, 32, s, 20, 1, opt);  // 2000 updates

  const PlanLayout layout{32, 2, 2};
  Rng eval(12);
  std::vector<DenoiserSample> batch;
  for (int b = 0; b < 512; ++b) {
    DenoiserSample d;
    d.clean = extract_window(single, t, static_cast<std::size_t>(eval.uniform_int(0, 8)), 32);
    const auto off = static_cast<std::size_t>(eval.uniform_int(1, 31));
    d.anchors = {{0, d.clean.row(0).head(2).transpose()}, {off, d.clean.row(static_cast<Eigen::Index>(off)).head(2).transpose()}};
    d.step = static_cast<int>(eval.uniform_int(1, 20));
    d.noise = standard_normal_plan(layout, eval);
    batch.push_back(d);
  }
  const double initial = denoiser_loss(untrained.denoiser, s, batch);
  const double final_epoch = trained.loss_curve.back();
  const bool a_ok = final_epoch < 0.5 * initial;

  // (b) Line walk: the offset is exactly |dx| / step.
  LineWalkSpec lw;
  const auto train_data = gen_linewalk_dataset(lw, 1);
  const auto test_data = gen_linewalk_dataset(lw, 2);
  StepEstimatorOptions sopt;
  const auto est = train_step_estimator(sample_step_pairs(train_data, 32, 20000, 3), 32, 30, 1e-3, 4, sopt).estimator;
  double mae = 0.0;
  const auto held_out = sample_step_pairs(test_data, 32, 2000, 5);
  for (const auto& pair : held_out) {
    const double truth = std::round(std::abs(pair.to[0] - pair.from[0]) / lw.step_size);
    mae += std::abs(est.estimate(pair.from, pair.to) - truth);
  }
  mae /= static_cast<double>(held_out.size());
  return {a_ok && mae <= 1.0, fmt("(a) loss %.4f -> %.4f (ratio %.3f); (b) held-out MAE %.3f", initial, final_epoch,
                                  final_epoch / initial, mae)};
}

// Configuration used for the stitching, sweep and determinism criteria.
ExperimentConfig stitching_config() {
  ExperimentConfig c;
  c.seeds = {0, 1, 2};
  c.episodes = 50;
  c.horizon = 16;
  c.denoiser_hidden = {256, 256, 256};
  c.guide_hidden = {128, 128};
  c.step_hidden = {64, 64, 64};
  c.denoiser_epochs = 40;
  c.steps_per_epoch = 50;
  c.guide_epochs = 10;
  c.step_epochs = 10;
  c.denoiser_lr = 1e-3;
  c.guide_lr = 1e-3;
  c.pad_windows = true;
  return c;
}

const MetricsRow* find_row(const std::vector<MetricsRow>& rows, const std::string& variant) {
  for (const auto& r : rows) {
    if (r.variant == variant && r.seed == "aggregate") return &r;
  }
  return nullptr;
}

// 7. RAD against the random-target ablation.
Outcome stitching(const std::filesystem::path& work) {
  Experiment exp(stitching_config(), work / "stitching");
  const auto rows = exp.run_ablations();
  const auto* rad = find_row(rows, "rad");
  const auto* rnd = find_row(rows, "no_retrieval_random_target");
  if (!rad || !rnd || rows.size() != 4) return {false, "missing ablation rows"};
  std::ostringstream detail;
  for (const auto& r : rows) detail << r.variant << '=' << fmt("%.3f", r.success_rate) << ' ';
  const double gap = rad->success_rate - rnd->success_rate;
  detail << fmt("gap %+.1f pp", 100.0 * gap);
  return {gap >= 0.30, detail.str()};
}

// 8. k / delta sweep.
Outcome sweep(const std::filesystem::path& work) {
  Experiment exp(stitching_config(), work / "stitching");
  const auto cells = exp.run_sweep({6, 30, 60, 120}, {0.0, 0.5, 0.8, 0.9});
  std::size_t k_cells = 0, d_cells = 0;
  const MetricsRow* best = nullptr;
  const MetricsRow* loose = nullptr;
  for (const auto& c : cells) {
    if (c.panel == "k") ++k_cells;
    if (c.panel == "delta") {
      ++d_cells;
      if (c.k == 6 && c.delta == 0.9) best = &c.aggregate;
      if (c.k == 6 && c.delta == 0.0) loose = &c.aggregate;
    }
  }
  if (!best || !loose || k_cells != 4 || d_cells != 4) return {false, "incomplete grid"};
  return {best->mean_return >= loose->mean_return,
          fmt("return at delta=0.9: %.4f, at delta=0.0: %.4f (4 k cells, 4 delta cells)", best->mean_return,
              loose->mean_return)};
}

// 9. Reproducible metrics and lossless artefacts.
Outcome determinism(const std::filesystem::path& work) {
  ExperimentConfig c;
  c.seeds = {0, 1};
  c.horizon = 8;
  c.denoiser_hidden = {64, 64};
  c.guide_hidden = {32};
  c.step_hidden = {32, 32, 32};
  c.denoiser_epochs = 3;
  c.guide_epochs = 2;
  c.step_epochs = 2;
  c.steps_per_epoch = 20;
  c.step_pairs = 2000;
  c.episodes = 4;
  c.max_steps = 40;
  std::filesystem::remove_all(work / "determinism");
  {
    Experiment a(c, work / "determinism" / "a");
    a.run_pipeline();
    Experiment b(c, work / "determinism" / "b");
    b.run_pipeline();
  }
  const std::string ma = slurp(work / "determinism" / "a" / "metrics.csv");
  const bool metrics_same = !ma.empty() && ma == slurp(work / "determinism" / "b" / "metrics.csv");

  const auto dir = work / "determinism" / "roundtrip";
  std::filesystem::create_directories(dir);
  const auto data = gen_stitching_dataset(default_stitching_spec(), 9).dataset;
  save_dataset(data, dir / "d1.jsonl");
  const auto loaded = load_dataset(dir / "d1.jsonl");
  save_dataset(loaded, dir / "d2.jsonl");
  bool data_same = loaded.content_hash() == data.content_hash() && slurp(dir / "d1.jsonl") == slurp(dir / "d2.jsonl");
  for (std::size_t n = 0; data_same && n < data.size(); ++n) {
    const auto& x = data.trajectories()[n];
    const auto& y = loaded.trajectories()[n];
    data_same = x.length() == y.length();
    for (std::size_t t = 0; data_same && t < x.length(); ++t) {
      data_same = x.state(t) == y.state(t) && x.action(t) == y.action(t) && x.reward(t) == y.reward(t);
    }
  }

  const PlanLayout layout{8, 2, 2};
  const Mlp net = Mlp::initialize(NetSpec{layout.flat_size(), {32, 32}, layout.flat_size(), Activation::kMish, 8}, 3);
  save_denoiser(net, make_schedule(20), layout, "x", dir / "c1.ckpt");
  const auto back = load_denoiser(dir / "c1.ckpt");
  save_denoiser(back.net, back.schedule, back.layout, back.config_hash, dir / "c2.ckpt");
  const bool ckpt_same = back.net.params().flatten() == net.params().flatten() &&
                         slurp(dir / "c1.ckpt") == slurp(dir / "c2.ckpt");

  std::string detail = std::string("metrics ") + (metrics_same ? "identical" : "DIFFER") + ", dataset " +
                       (data_same ? "lossless" : "LOSSY") + ", checkpoint " + (ckpt_same ? "lossless" : "LOSSY");
  return {metrics_same && data_same && ckpt_same, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work_dir = (std::filesystem::temp_directory_path() / "rad_acceptance").string();
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "scratch directory for experiment runs");
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const std::filesystem::path work(work_dir);
  std::filesystem::create_directories(work);

  struct Criterion {
    int id;
    std::string name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "retrieval matches brute force", 60, retrieval_oracle},
      {2, "filter soundness", 0, filter_soundness},
      {3, "forward-noise Monte Carlo", 30, forward_noise_mc},
      {4, "anchor preservation", 0, anchor_preservation},
      {5, "guidance gradient and rho=0", 60, guidance},
      {6, "training sanity", 1200, training_sanity},
      {7, "stitching efficacy", 1800, [&] { return stitching(work); }},
      {8, "k/delta sweep", 2700, [&] { return sweep(work); }},
      {9, "determinism and round trips", 0, [&] { return determinism(work); }},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    bool pass = out.pass;
    std::string note;
    if (c.budget_s > 0 && secs > c.budget_s) {
      pass = false;
      note = fmt(" [over budget %.0f s]", c.budget_s);
    }
    failures += !pass;
    std::printf("%s criterion %d: %s: %s (%.1f s)%s\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                out.detail.c_str(), secs, note.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
