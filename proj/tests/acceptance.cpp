// Acceptance run: one PASS/FAIL line per criterion, exit status 1 when any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>

#include "bivo/pipeline.hpp"
#include "bivo/planner.hpp"
#include "commands.hpp"

namespace
{

namespace fs = std::filesystem;
using namespace bivo;
using plan::PlannerMode;
using Clock = std::chrono::steady_clock;

// Pinned thresholds.
constexpr int kVisibilityGrids = 100;
constexpr int kVisibilitySize = 50;
constexpr double kVisibilityBudgetS = 10.0;
constexpr double kGradientRelTol = 1e-4;
constexpr double kGradientBudgetS = 60.0;
constexpr int kDempsterCells = 10000;
constexpr double kDempsterTol = 1e-9;
constexpr double kDempsterHand = 0.9412;
constexpr double kDempsterHandTol = 1e-4;
constexpr int kFilterScenes = 20;
constexpr std::size_t kFilterSamples = 1000;
constexpr int kDegeneracyScenes = 50;
constexpr std::size_t kLowerBoundScenes = 200;
constexpr double kLowerBoundBudgetS = 600.0;
constexpr std::size_t kMinTrainingSamples = 2000;
constexpr std::size_t kMinCriticalScenes = 50;
constexpr std::size_t kMaxDirectionalScenes = 90;
constexpr double kDirectionalExistencePrior = 1.0;
constexpr double kDirectionalSeFactor = 2.0;
constexpr double kDirectionalBudgetS = 1800.0;
constexpr std::size_t kElboSeeds = 3;
constexpr std::size_t kElboEpochs = 40;
constexpr std::size_t kCriticalScenes = 200;
constexpr double kCriticalLow = 0.05;
constexpr double kCriticalHigh = 0.15;
constexpr std::size_t kLatencyCandidates = 64;
constexpr std::size_t kLatencySamples = 1000;
constexpr int kLatencyCycles = 40;
constexpr double kLatencyMedianMs = 50.0;

// Training setup shared by the model-based criteria.
constexpr std::size_t kTrainScenes = 330;
constexpr std::uint64_t kTrainSeed = 11;
constexpr std::size_t kGeneratorEpochs = 150;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome
{
  bool pass{false};
  std::string detail;
};

int failures = 0;

void report(int id, const std::string & name, const Outcome & o)
{
  std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  failures += !o.pass;
}

Outcome guarded(const std::function<Outcome()> & f)
{
  try {
    return f();
  } catch (const std::exception & e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

std::string fmt(const char * format, auto... args)
{
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

// Brute-force visibility: march each ray to a boundary cell centre in 0.1-cell steps, stop at the
// first occupied cell.
raster::VisibilityMask march_oracle(const raster::OccupancyGrid & g, raster::CellIndex viewer)
{
  const int H = g.height();
  const int W = g.width();
  raster::VisibilityMask m{H, W, std::vector<std::uint8_t>(static_cast<std::size_t>(H * W), 0)};
  m.visible[static_cast<std::size_t>(viewer.row * W + viewer.col)] = 1;
  auto ray = [&](int br, int bc) {
    const double dr = br - viewer.row;
    const double dc = bc - viewer.col;
    const double len = std::hypot(dr, dc);
    if (len == 0) return;
    const long n = static_cast<long>(std::floor(len / 0.1));
    for (long k = 1; k <= n; ++k) {
      const double s = static_cast<double>(k) * 0.1 / len;
      const int r = static_cast<int>(std::floor(viewer.row + 0.5 + dr * s));
      const int c = static_cast<int>(std::floor(viewer.col + 0.5 + dc * s));
      m.visible[static_cast<std::size_t>(r * W + c)] = 1;
      if (g.at(r, c) == raster::kOccupied) return;
    }
  };
  for (int c = 0; c < W; ++c) {
    ray(0, c);
    ray(H - 1, c);
  }
  for (int r = 1; r + 1 < H; ++r) {
    ray(r, 0);
    ray(r, W - 1);
  }
  return m;
}

Outcome visibility()
{
  const auto t0 = Clock::now();
  nn::Rng rng(101);
  std::uniform_real_distribution<double> density(0.02, 0.25);
  int bad_grids = 0;
  long bad_cells = 0;
  for (int trial = 0; trial < kVisibilityGrids; ++trial) {
    raster::OccupancyGrid g({0, 0, 0}, kVisibilitySize, kVisibilitySize);
    std::bernoulli_distribution occ(density(rng));
    for (int r = 0; r < kVisibilitySize; ++r) {
      for (int c = 0; c < kVisibilitySize; ++c) g.at(r, c) = occ(rng) ? raster::kOccupied : raster::kFree;
    }
    const auto viewer = g.viewer_cell();
    g.at(viewer.row, viewer.col) = raster::kFree;
    const auto got = raster::visibility_mask(g, viewer);
    const auto want = march_oracle(g, viewer);
    long diff = 0;
    for (std::size_t i = 0; i < got.visible.size(); ++i) diff += got.visible[i] != want.visible[i];
    bad_cells += diff;
    bad_grids += diff > 0;
  }
  const double dt = seconds_since(t0);
  return {bad_grids == 0 && dt < kVisibilityBudgetS,
          fmt("%d/%d grids differ (%ld cells), %.2f s (limit %.0f s)", bad_grids, kVisibilityGrids, bad_cells, dt,
              kVisibilityBudgetS)};
}

Outcome gradients()
{
  const auto t0 = Clock::now();
  double worst = 0.0;

  ds::DriverSensorConfig dc;
  dc.latent_classes = 5;
  dc.hidden = 8;
  dc.grid_size = 4;
  dc.history_steps = 1;
  nn::Rng rng(6);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<ds::DsExample> dex(4);
  for (auto & e : dex) {
    for (std::size_t i = 0; i < dc.history_width(); ++i) e.history.push_back(u(rng));
    for (std::size_t i = 0; i < dc.grid_cells(); ++i) e.grid.push_back(u(rng) > 0.3);
  }
  std::vector<const ds::DsExample *> dbatch;
  for (const auto & e : dex) dbatch.push_back(&e);
  ds::DriverSensorModel dm(dc);
  dm.initialize(3);
  auto dp = dm.params();
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (auto & v : dp) v += jitter(rng);
  for (double beta : {0.0, 0.4, 1.0}) {
    std::vector<double> g;
    nn::Rng r1(9);
    ds::ds_loss(dm, dp, dbatch, beta, 0.7, r1, &g);
    auto loss = [&](std::span<const double> p) {
      nn::Rng r2(9);
      return ds::ds_loss(dm, p, dbatch, beta, 0.7, r2).total;
    };
    worst = std::max(worst, nn::finite_difference_check(loss, dp, g));
  }

  gen::GenConfig gc;
  gc.grid_size = 8;
  gc.downsample = 2;
  gc.hidden = 16;
  gc.condition_features = 6;
  gc.latent_dim = 3;
  gc.horizon_steps = 4;
  gen::OcclusionGenModel gm(gc);
  gm.initialize(4);
  auto gp = gm.params();
  for (auto & v : gp) v += jitter(rng);
  std::vector<gen::GenExample> gex(3);
  for (auto & e : gex) {
    for (std::size_t i = 0; i < gc.condition_width(); ++i) e.condition.push_back(u(rng));
    for (std::size_t i = 0; i < gc.trajectory_width(); ++i) e.trajectory.push_back(3 * u(rng));
  }
  std::vector<const gen::GenExample *> gbatch;
  for (const auto & e : gex) gbatch.push_back(&e);
  std::vector<double> g;
  nn::Rng r1(9);
  gen::gen_elbo_loss(gm, gp, gbatch, r1, &g);
  auto loss = [&](std::span<const double> p) {
    nn::Rng r2(9);
    return gen::gen_elbo_loss(gm, p, gbatch, r2).total;
  };
  worst = std::max(worst, nn::finite_difference_check(loss, gp, g));
  const double dt = seconds_since(t0);
  return {worst < kGradientRelTol && dt < kGradientBudgetS,
          fmt("worst relative error %.2e (limit %.0e), %.2f s", worst, kGradientRelTol, dt)};
}

Outcome dempster()
{
  nn::Rng rng(23);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto cell = [&] {
    const double a = u(rng), b = u(rng), c = u(rng);
    const double s = a + b + c;
    return ds::BeliefCell{a / s, b / s, c / s};
  };
  auto dist = [](const ds::BeliefCell & a, const ds::BeliefCell & b) {
    return std::max({std::abs(a.occupied - b.occupied), std::abs(a.free - b.free), std::abs(a.unknown - b.unknown)});
  };
  double comm = 0.0, assoc = 0.0;
  for (int i = 0; i < kDempsterCells; ++i) {
    const auto a = cell(), b = cell(), c = cell();
    const auto ab = ds::dempster_combine(a, b).cell;
    comm = std::max(comm, dist(ab, ds::dempster_combine(b, a).cell));
    assoc = std::max(
      assoc, dist(ds::dempster_combine(ab, c).cell, ds::dempster_combine(a, ds::dempster_combine(b, c).cell).cell));
  }
  const double hand = ds::dempster_combine({0.8, 0.2, 0.0}, {0.8, 0.2, 0.0}).cell.occupied;
  return {comm <= kDempsterTol && assoc <= kDempsterTol && std::abs(hand - kDempsterHand) <= kDempsterHandTol,
          fmt("commutativity %.1e, associativity %.1e over %d cells; 0.8+0.8 -> %.5f", comm, assoc, kDempsterCells,
              hand)};
}

struct Trained
{
  ds::DsTrainState driver_sensor;
  gen::GenTrainState generator;
  gen::GenTrainState cvae;
  pipeline::GeneratorSplit fused_split;
  pipeline::GeneratorSplit blind_split;
  double seconds{0.0};

  plan::Models models() const { return {&driver_sensor.model, &generator.model, &cvae.model}; }
};

Trained train_models()
{
  const auto t0 = Clock::now();
  const auto scenes = pipeline::make_scenes({"train", kTrainScenes, kTrainSeed, false, 1.0});
  ds::DsTrainConfig dtc;
  dtc.seed = kTrainSeed;
  auto dst = ds::train_driver_sensor(pipeline::mine_dataset(scenes, {}), {}, dtc);
  std::printf("  driver-sensor trained: %zu steps, %zu active classes, %.0f s\n", dst.step,
              dst.history.back().active_classes, seconds_since(t0));

  gen::GenConfig fused;
  fused.conditioning = gen::Conditioning::kFused;
  gen::GenConfig observed = fused;
  observed.conditioning = gen::Conditioning::kObserved;
  gen::GenConfig blind = fused;
  blind.conditioning = gen::Conditioning::kNone;
  auto data = pipeline::generator_datasets(scenes, &dst.model, {fused, observed, blind});
  std::printf("  occluded samples: %zu train / %zu test\n", data[0].train.size(), data[0].test.size());

  gen::GenTrainConfig gtc;
  gtc.epochs = kGeneratorEpochs;
  gtc.seed = kTrainSeed;
  auto generator = gen::train_generator(data[0].train, fused, gtc);
  std::printf("  generator trained: %zu epochs, %.0f s\n", kGeneratorEpochs, seconds_since(t0));
  const double seconds = seconds_since(t0);
  auto cvae = gen::train_generator(data[1].train, observed, gtc);
  std::printf("  raw-occlusion cvae trained, %.0f s\n", seconds_since(t0));
  return {std::move(dst), std::move(generator), std::move(cvae), std::move(data[0]), std::move(data[2]), seconds};
}

Outcome filter_postcondition(const Trained & m)
{
  plan::PlannerConfig pc;
  const std::size_t per_scene = kFilterSamples / kFilterScenes;
  std::size_t drawn = 0, survivors = 0, bad_origin = 0, infeasible = 0;
  for (int i = 0; i < kFilterScenes; ++i) {
    sim::ScenarioTemplate t;
    t.kind = sim::kAllTemplates[1 + static_cast<std::size_t>(i) % 3];
    const auto scene = sim::generate_scene(t, 5000 + static_cast<std::uint64_t>(i), "filter");
    const int step = 2 * (i % 5);
    const auto obs = plan::observe(scene, step, world::state_at(scene.ego.trajectory, step), &m.driver_sensor.model, pc);
    gen::SampleRequest req;
    req.road = &obs.road;
    req.condition_grid = &obs.view.fused;
    req.observed = &obs.view.observed;
    req.ego_state = obs.ego_state;
    req.step = step;
    req.count = per_scene;
    req.limits = pc.limits;
    nn::Rng rng(static_cast<std::uint64_t>(i) + 1);
    const auto res = gen::sample_trajectories(m.generator.model, req, rng);
    drawn += res.drawn;
    for (const auto & s : res.survivors) {
      ++survivors;
      const auto & first = s.trajectory.states().front();
      bad_origin += !raster::is_occluded(obs.view.observed, first.x, first.y);
      infeasible += !world::kinematically_feasible(s.trajectory, pc.limits);
    }
  }
  return {drawn == kFilterSamples && survivors > 0 && bad_origin == 0 && infeasible == 0,
          fmt("%zu drawn, %zu survivors, %zu outside occlusion, %zu infeasible", drawn, survivors, bad_origin,
              infeasible)};
}

Outcome degeneracy(const Trained & m)
{
  plan::PlannerConfig pc;
  pc.existence_prior = 0.0;
  sim::ReplayConfig rc;
  rc.modes = {PlannerMode::kBiVO, PlannerMode::kNoReasoning};
  const auto scenes = pipeline::make_scenes({"degenerate", static_cast<std::size_t>(kDegeneracyScenes), 21, true, 1.0});
  std::size_t compared = 0, differ = 0;
  for (const auto & scene : scenes) {
    const auto records = sim::run_open_loop(scene, m.models(), pc, rc);
    for (std::size_t i = 0; i + 1 < records.size(); i += 2) {
      ++compared;
      differ += records[i].chosen_index != records[i + 1].chosen_index ||
                records[i].planned.total != records[i + 1].planned.total ||
                records[i].emergency != records[i + 1].emergency;
    }
  }
  return {compared > 0 && differ == 0,
          fmt("%zu planning steps over %d scenes, %zu differ", compared, kDegeneracyScenes, differ)};
}

Outcome oracle_lower_bound(const Trained & m)
{
  const auto t0 = Clock::now();
  plan::PlannerConfig pc;
  sim::ReplayConfig rc;
  const auto scenes = pipeline::make_scenes({"lower", kLowerBoundScenes, 31, true, 1.0});
  std::vector<sim::EvalRecord> records;
  std::size_t hash_mismatch = 0, step_violations = 0;
  for (const auto & scene : scenes) {
    const auto rs = sim::run_open_loop(scene, m.models(), pc, rc);
    std::map<int, std::vector<const sim::EvalRecord *>> by_step;
    for (const auto & r : rs) by_step[r.step].push_back(&r);
    for (const auto & [step, group] : by_step) {
      double oracle = 0.0;
      for (const auto * r : group) {
        hash_mismatch += r->candidate_hash != group.front()->candidate_hash;
        if (r->mode == PlannerMode::kOracle) oracle = r->hindsight.total;
      }
      for (const auto * r : group) step_violations += r->hindsight.total < oracle;
    }
    records.insert(records.end(), rs.begin(), rs.end());
  }
  const auto rep = sim::aggregate_report(records);
  double oracle_mean = 0.0;
  for (const auto & row : rep.modes) {
    if (row.mode == PlannerMode::kOracle) oracle_mean = *row.open_all;
  }
  bool ordered = true;
  std::string means;
  for (const auto & row : rep.modes) {
    ordered = ordered && oracle_mean <= *row.open_all;
    means += fmt(" %s %.4f", plan::to_string(row.mode).c_str(), *row.open_all);
  }
  const double dt = seconds_since(t0);
  return {ordered && hash_mismatch == 0 && dt < kLowerBoundBudgetS,
          fmt("%zu scenes, means:%s; per-step violations %zu, candidate mismatches %zu, %.0f s", rep.scenes,
              means.c_str(), step_violations, hash_mismatch, dt)};
}

Outcome directional_critical(const Trained & m)
{
  const auto t0 = Clock::now();
  plan::PlannerConfig pc;
  pc.existence_prior = kDirectionalExistencePrior;
  sim::ReplayConfig rc;
  rc.modes = {PlannerMode::kBiVO, PlannerMode::kNoReasoning, PlannerMode::kOracle};
  std::vector<double> bivo, none, oracle;
  std::size_t scenes = 0;
  for (; scenes < kMaxDirectionalScenes && bivo.size() < kMinCriticalScenes + 10; ++scenes) {
    sim::ScenarioTemplate t;
    t.kind = sim::kAllTemplates[1 + scenes % 3];
    const auto scene = sim::generate_scene(t, 777000 + scenes, "crit" + std::to_string(scenes));
    const auto rs = sim::run_open_loop(scene, m.models(), pc, rc);
    if (rs.empty() || !rs.front().critical) continue;
    std::map<PlannerMode, std::pair<double, int>> acc;
    for (const auto & r : rs) {
      acc[r.mode].first += r.hindsight.total;
      acc[r.mode].second += 1;
    }
    auto mean = [&](PlannerMode mode) { return acc[mode].first / acc[mode].second; };
    bivo.push_back(mean(PlannerMode::kBiVO));
    none.push_back(mean(PlannerMode::kNoReasoning));
    oracle.push_back(mean(PlannerMode::kOracle));
  }
  const std::size_t n = bivo.size();
  auto avg = [](const std::vector<double> & v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  std::vector<double> gap(n);
  for (std::size_t i = 0; i < n; ++i) gap[i] = none[i] - bivo[i];
  const double g = n ? avg(gap) : 0.0;
  double var = 0.0;
  for (double d : gap) var += (d - g) * (d - g);
  const double se = n > 1 ? std::sqrt(var / static_cast<double>(n - 1) / static_cast<double>(n)) : 0.0;
  const double total = m.seconds + seconds_since(t0);
  const double o = n ? avg(oracle) : 1.0;
  return {n >= kMinCriticalScenes && g > 0.0 && g > kDirectionalSeFactor * se && total < kDirectionalBudgetS,
          fmt("%zu critical of %zu scenes (pi_e %.1f): BiVO %.4f (%+.2f%% vs Oracle), NoReasoning %.4f (%+.2f%%), "
              "gap %.4f, SE %.4f, %.0f s with training",
              n, scenes, kDirectionalExistencePrior, n ? avg(bivo) : 0.0, n ? 100 * (avg(bivo) - o) / o : 0.0,
              n ? avg(none) : 0.0, n ? 100 * (avg(none) - o) / o : 0.0, g, se, total)};
}

Outcome elbo_ordering(const Trained & m)
{
  gen::GenConfig fused;
  fused.conditioning = gen::Conditioning::kFused;
  gen::GenConfig blind = fused;
  blind.conditioning = gen::Conditioning::kNone;
  double sum_fused = 0.0, sum_blind = 0.0;
  std::string per_seed;
  for (std::size_t seed = 1; seed <= kElboSeeds; ++seed) {
    gen::GenTrainConfig gtc;
    gtc.epochs = kElboEpochs;
    gtc.seed = seed;
    const auto a = gen::train_generator(m.fused_split.train, fused, gtc);
    const auto b = gen::train_generator(m.blind_split.train, blind, gtc);
    const double ea = gen::evaluate_elbo(a.model, m.fused_split.test, seed);
    const double eb = gen::evaluate_elbo(b.model, m.blind_split.test, seed);
    sum_fused += ea;
    sum_blind += eb;
    per_seed += fmt(" [%.3f vs %.3f]", ea, eb);
  }
  const double mf = sum_fused / kElboSeeds, mb = sum_blind / kElboSeeds;
  return {m.fused_split.test.size() == m.blind_split.test.size() && mf <= mb,
          fmt("test ELBO loss conditioned %.3f <= unconditioned %.3f over %zu seeds of %zu epochs;%s", mf, mb, kElboSeeds,
              kElboEpochs, per_seed.c_str())};
}

Outcome critical_frequency()
{
  plan::PlannerConfig pc;
  sim::ReplayConfig rc;
  const auto scenes = pipeline::make_scenes({"mix", kCriticalScenes, 41, true, 1.0});
  std::size_t critical = 0;
  for (const auto & s : scenes) critical += sim::detect_critical(s, pc, rc);
  const double rate = static_cast<double>(critical) / static_cast<double>(scenes.size());
  return {rate >= kCriticalLow && rate <= kCriticalHigh,
          fmt("%zu of %zu scenes critical (%.1f%%, band %.0f-%.0f%%)", critical, scenes.size(), 100 * rate,
              100 * kCriticalLow, 100 * kCriticalHigh)};
}

Outcome latency(const Trained & m)
{
  plan::PlannerConfig pc;
  pc.candidates = kLatencyCandidates;
  pc.samples = kLatencySamples;
  sim::ScenarioTemplate t;
  t.kind = sim::TemplateKind::kOccludingTruckCrossing;
  const auto scene = sim::generate_scene(t, 61, "latency");
  std::vector<double> ms;
  std::size_t candidates = 0;
  for (int k = 0; k < kLatencyCycles; ++k) {
    const int step = k % 20;
    nn::Rng rng(static_cast<std::uint64_t>(k));
    const auto t0 = Clock::now();
    const auto r = plan::plan(scene, step, PlannerMode::kBiVO, m.models(), pc, rng);
    ms.push_back(1000.0 * seconds_since(t0));
    candidates = std::max(candidates, r.costs.size());
  }
  std::sort(ms.begin(), ms.end());
  const double median = ms[ms.size() / 2];
  return {median < kLatencyMedianMs,
          fmt("BiVO plan() with observation, J=%zu (%zu feasible), K=%zu: median %.1f ms, p95 %.1f ms over %d cycles",
              kLatencyCandidates, candidates, kLatencySamples, median, ms[ms.size() * 95 / 100], kLatencyCycles)};
}

std::string read_file(const fs::path & p)
{
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism()
{
  const auto root = fs::temp_directory_path() / "bivo_acceptance_determinism";
  fs::remove_all(root);
  std::vector<std::string> logs;
  std::vector<std::string> checkpoints;
  for (int run = 0; run < 2; ++run) {
    const auto dir = root / std::to_string(run);
    const auto cfg = config::load(
      "", {{"paths.data", (dir / "data").string()},
           {"paths.checkpoints", (dir / "ckpt").string()},
           {"paths.logs", (dir / "logs").string()},
           {"paths.reports", (dir / "reports").string()},
           {"data.train_scenes", "24"},
           {"data.eval_scenes", "10"},
           {"ds.steps", "100"},
           {"gen.epochs", "3"}});
    std::ostringstream sink;
    cli::cmd_gen_data(cfg, cli::Split::kBoth, sink);
    cli::cmd_train(cfg, cli::Stage::kDriverSensor, false, sink);
    cli::cmd_train(cfg, cli::Stage::kGenerator, false, sink);
    cli::cmd_eval(cfg, cli::Loop::kOpen, std::nullopt, sink);
    logs.push_back(read_file(dir / "logs" / "run_open.ndjson"));
    checkpoints.push_back(read_file(dir / "ckpt" / "generator.ckpt"));
  }
  fs::remove_all(root);
  const bool same = !logs[0].empty() && logs[0] == logs[1] && checkpoints[0] == checkpoints[1];
  return {same, fmt("run-logs %s (%zu bytes), generator checkpoints %s", logs[0] == logs[1] ? "identical" : "differ",
                    logs[0].size(), checkpoints[0] == checkpoints[1] ? "identical" : "differ")};
}

}  // namespace

int main()
{
  const auto t0 = Clock::now();
  report(1, "visibility oracle equivalence", guarded(visibility));
  report(2, "gradient correctness", guarded(gradients));
  report(3, "Dempster algebra", guarded(dempster));

  std::printf("  training models on %zu scenes\n", kTrainScenes);
  std::fflush(stdout);
  std::optional<Trained> trained;
  std::string train_error;
  try {
    trained = train_models();
  } catch (const std::exception & e) {
    train_error = e.what();
  }
  auto with_models = [&](const std::function<Outcome(const Trained &)> & f) {
    if (!trained) return Outcome{false, "training failed: " + train_error};
    return guarded([&] { return f(*trained); });
  };

  report(4, "filter postcondition", with_models(filter_postcondition));
  report(5, "baseline degeneracy", with_models(degeneracy));
  report(6, "oracle lower bound", with_models(oracle_lower_bound));
  report(7, "directional critical-scene ordering", with_models([](const Trained & m) {
           if (m.fused_split.train.size() < kMinTrainingSamples) {
             return Outcome{false, fmt("only %zu training samples", m.fused_split.train.size())};
           }
           return directional_critical(m);
         }));
  report(8, "conditioned ELBO ordering", with_models(elbo_ordering));
  report(9, "critical-scene frequency", guarded(critical_frequency));
  report(10, "planning latency", with_models(latency));
  report(11, "pipeline determinism", guarded(determinism));
  std::printf("%d of 11 criteria failed, %.0f s\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
