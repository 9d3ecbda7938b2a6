#include "commands.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "bivo/pipeline.hpp"

namespace bivo::cli
{

namespace fs = std::filesystem;
using nlohmann::json;

namespace
{

void ensure_dir(const std::string & dir)
{
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory '" + dir + "'");
}

void write_text(const std::string & path, const std::string & text)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
  if (!out) throw DataError("cannot write '" + path + "'");
}

std::string read_text(const std::string & path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

pipeline::SceneSet scene_set(const config::RunConfig & config, const std::string & split)
{
  pipeline::SceneSet set;
  set.prefix = split;
  set.evaluation = split == "eval";
  set.count = set.evaluation ? config.eval_scenes : config.train_scenes;
  set.seed = config.seed * 2 + (set.evaluation ? 1 : 0);
  set.hidden_presence = config.hidden_presence;
  return set;
}

void gen_split(const config::RunConfig & config, const std::string & split, std::ostream & log)
{
  const auto dir = split_dir(config, split);
  ensure_dir(dir);
  const auto set = scene_set(config, split);
  json manifest;
  manifest["split"] = split;
  manifest["seed"] = config.seed;
  manifest["count"] = set.count;
  manifest["hidden_presence"] = set.hidden_presence;
  manifest["files"] = json::array();
  for (std::size_t i = 0; i < set.count; ++i) {
    const auto scene = pipeline::make_scene(set, i);
    const auto file = scene.id + ".json";
    try {
      sim::save_scene((fs::path(dir) / file).string(), scene);
    } catch (const std::exception & e) {
      throw DataError(e.what());
    }
    const auto kind = set.evaluation ? sim::mixed_template(i) : pipeline::training_template(i);
    manifest["files"].push_back({{"file", file}, {"id", scene.id}, {"template", sim::to_string(kind)}});
  }
  write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  log << "wrote " << set.count << " " << split << " scenes to " << dir << "\n";
}

template <typename State, typename Decode>
State load_state(const std::string & path, Decode decode)
{
  try {
    return decode(nn::load_checkpoint(path), nullptr);
  } catch (const std::exception & e) {
    throw DataError("cannot load checkpoint '" + path + "': " + e.what());
  }
}

ds::DsTrainState load_driver_sensor(const config::RunConfig & config)
{
  const auto path = checkpoint_path(config, "driversensor");
  if (!fs::exists(path)) throw OrderingError("driver-sensor checkpoint '" + path + "' not found; run 'train driversensor' first");
  try {
    return ds::from_checkpoint(nn::load_checkpoint(path));
  } catch (const std::exception & e) {
    throw DataError("cannot load checkpoint '" + path + "': " + e.what());
  }
}

std::optional<gen::GenTrainState> load_generator(const config::RunConfig & config, const std::string & name)
{
  const auto path = checkpoint_path(config, name);
  if (!fs::exists(path)) return std::nullopt;
  try {
    return gen::from_checkpoint(nn::load_checkpoint(path));
  } catch (const std::exception & e) {
    throw DataError("cannot load checkpoint '" + path + "': " + e.what());
  }
}

/// Keeps the header and the rows of steps before `step`, so resumed runs append.
std::vector<std::string> csv_prefix(const std::string & path, std::uint64_t step)
{
  std::vector<std::string> rows;
  std::ifstream in(path);
  std::string line;
  if (!in || !std::getline(in, line)) return rows;
  while (rows.size() < step && std::getline(in, line)) rows.push_back(line);
  return rows;
}

void write_csv(const std::string & path, const std::string & header, const std::vector<std::string> & rows)
{
  std::string text = header + "\n";
  for (const auto & r : rows) text += r + "\n";
  write_text(path, text);
}

std::string num(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void train_driver_sensor(const config::RunConfig & config, bool resume, std::ostream & log)
{
  const auto scenes = load_split(config, "train");
  const auto examples = pipeline::mine_dataset(scenes, config.ds);
  if (examples.empty()) throw DataError("training scenes yield no driver-sensor examples");
  const auto path = checkpoint_path(config, "driversensor");
  const auto csv = (fs::path(config.log_dir) / "driversensor_loss.csv").string();
  ensure_dir(config.checkpoint_dir);
  ensure_dir(config.log_dir);

  auto train = config.ds_train;
  train.seed = config.seed;
  ds::DsTrainState state = resume && fs::exists(path) ? load_state<ds::DsTrainState>(path, ds::from_checkpoint)
                                                      : ds::make_train_state(config.ds, train);
  if (state.model.config().grid_cells() != config.ds.grid_cells() ||
      state.model.config().history_width() != config.ds.history_width()) {
    throw DataError("resumed driver-sensor checkpoint does not match the configuration");
  }
  auto rows = resume ? csv_prefix(csv, state.step) : std::vector<std::string>{};
  const auto start = state.step;
  log << "driver-sensor: " << examples.size() << " examples, steps " << start << " -> " << train.steps << "\n";
  ds::train_driver_sensor(state, examples, train);
  for (std::size_t k = 0; k < state.history.size(); ++k) {
    const auto & h = state.history[k];
    rows.push_back(
      std::to_string(start + k) + "," + num(h.total) + "," + num(h.reconstruction_nll) + "," + num(h.kl) + "," +
      num(h.mutual_information) + "," + num(h.batch_entropy) + "," + num(h.beta) + "," +
      std::to_string(h.active_classes));
  }
  write_csv(csv, "step,total,reconstruction_nll,kl,mutual_information,batch_entropy,beta,active_classes", rows);
  nn::save_checkpoint(path, ds::to_checkpoint(state, train));
  if (!state.history.empty()) {
    const auto & h = state.history.back();
    log << "driver-sensor: final loss " << h.total << ", active classes " << h.active_classes << "\n";
  }
}

json train_one_generator(
  const config::RunConfig & config, const std::string & name, const gen::GenConfig & gen_config,
  const pipeline::GeneratorSplit & data, bool resume, std::ostream & log)
{
  const auto path = checkpoint_path(config, name);
  const auto csv = (fs::path(config.log_dir) / (name + "_loss.csv")).string();
  auto train = config.gen_train;
  train.seed = config.seed;
  auto state = gen::make_train_state(gen_config, train);
  if (resume && fs::exists(path)) {
    state = load_state<gen::GenTrainState>(path, gen::from_checkpoint);
    if (state.model.descriptor() != gen::OcclusionGenModel(gen_config).descriptor()) {
      throw DataError("resumed " + name + " checkpoint does not match the configuration");
    }
  }
  auto rows = resume ? csv_prefix(csv, state.step) : std::vector<std::string>{};
  const auto start = state.step;
  log << name << ": " << data.train.size() << " train / " << data.test.size() << " test samples, "
      << train.epochs << " epochs\n";
  gen::train_generator(state, data.train, train);
  const std::size_t batch = std::max<std::size_t>(1, std::min(train.batch_size, data.train.size()));
  const std::size_t per_epoch = (data.train.size() + batch - 1) / batch;
  for (std::size_t k = 0; k < state.step_history.size(); ++k) {
    const auto & h = state.step_history[k];
    const auto step = start + k;
    rows.push_back(
      std::to_string(step) + "," + std::to_string(step / per_epoch) + "," + num(h.total) + "," +
      num(h.reconstruction) + "," + num(h.kl) + "," + num(h.mse));
  }
  write_csv(csv, "step,epoch,total,reconstruction,kl,mse", rows);
  nn::save_checkpoint(path, gen::to_checkpoint(state, train));
  json out;
  out["train_samples"] = data.train.size();
  out["test_samples"] = data.test.size();
  out["steps"] = state.step;
  out["epoch_elbo"] = state.epoch_elbo;
  if (!data.test.empty()) {
    out["test_elbo"] = gen::evaluate_elbo(state.model, data.test, config.seed);
    log << name << ": test ELBO loss " << out["test_elbo"].get<double>() << "\n";
  }
  return out;
}

void train_generators(const config::RunConfig & config, bool resume, std::ostream & log)
{
  const auto ds_state = load_driver_sensor(config);
  const auto scenes = load_split(config, "train");
  ensure_dir(config.checkpoint_dir);
  ensure_dir(config.log_dir);
  ensure_dir(config.report_dir);
  std::vector<gen::GenConfig> configs{config.gen};
  configs[0].conditioning = gen::Conditioning::kFused;
  if (config.train_cvae) {
    configs.push_back(config.gen);
    configs[1].conditioning = gen::Conditioning::kObserved;
  }
  auto data = pipeline::generator_datasets(scenes, &ds_state.model, configs, config.workers);
  if (data[0].train.empty()) throw DataError("training scenes yield no occluded samples");
  json summary;
  summary["generator"] = train_one_generator(config, "generator", configs[0], data[0], resume, log);
  if (config.train_cvae) summary["cvae"] = train_one_generator(config, "cvae", configs[1], data[1], resume, log);
  write_text((fs::path(config.report_dir) / "generator_elbo.json").string(), summary.dump(2) + "\n");
}

bool needs_driver_sensor(plan::PlannerMode m)
{
  return m == plan::PlannerMode::kBiVO || m == plan::PlannerMode::kDriverSensorHeuristic;
}

struct LoadedModels
{
  std::optional<ds::DsTrainState> driver_sensor;
  std::optional<gen::GenTrainState> generator;
  std::optional<gen::GenTrainState> cvae;

  plan::Models view() const
  {
    return {driver_sensor ? &driver_sensor->model : nullptr, generator ? &generator->model : nullptr,
            cvae ? &cvae->model : nullptr};
  }
};

LoadedModels load_models(const config::RunConfig & config, const std::vector<plan::PlannerMode> & modes)
{
  LoadedModels out;
  const bool ds_needed = std::any_of(modes.begin(), modes.end(), needs_driver_sensor);
  if (ds_needed) out.driver_sensor = load_driver_sensor(config);
  if (std::find(modes.begin(), modes.end(), plan::PlannerMode::kBiVO) != modes.end()) {
    out.generator = load_generator(config, "generator");
    if (!out.generator) throw OrderingError("generator checkpoint missing; run 'train generator' first");
  }
  if (std::find(modes.begin(), modes.end(), plan::PlannerMode::kCvaeOnly) != modes.end()) {
    out.cvae = load_generator(config, "cvae");
    if (!out.cvae) throw OrderingError("cvae checkpoint missing; run 'train generator' with gen.train_cvae = true");
  }
  return out;
}

struct Rgb
{
  std::uint8_t r, g, b;
};

class Canvas
{
public:
  Canvas(const raster::OccupancyGrid & background, int scale)
      : grid_(background), scale_(scale), w_(background.width() * scale), h_(background.height() * scale),
        pixels_(static_cast<std::size_t>(w_ * h_))
  {
    for (int y = 0; y < h_; ++y) {
      for (int x = 0; x < w_; ++x) {
        const auto v = raster::pixel_value(background.at(y / scale_, x / scale_));
        pixels_[static_cast<std::size_t>(y * w_ + x)] = {v, v, v};
      }
    }
  }

  /// Draws the trajectory's world positions; returns false when no point falls on the grid.
  bool polyline(const world::Trajectory & traj, Rgb color)
  {
    bool any = false;
    std::optional<std::pair<double, double>> prev;
    for (const auto & s : traj.states()) {
      const auto local = world::to_frame(s, grid_.center_pose());
      const double px = (local.x + grid_.width() / 2.0) * scale_;
      const double py = (local.y + grid_.height() / 2.0) * scale_;
      if (px >= 0 && px < w_ && py >= 0 && py < h_) any = true;
      if (prev) line(prev->first, prev->second, px, py, color);
      prev = {px, py};
    }
    return any;
  }

  std::string encode() const
  {
    std::string out = "P6\n" + std::to_string(w_) + " " + std::to_string(h_) + "\n255\n";
    for (const auto & p : pixels_) {
      out.push_back(static_cast<char>(p.r));
      out.push_back(static_cast<char>(p.g));
      out.push_back(static_cast<char>(p.b));
    }
    return out;
  }

private:
  void line(double x0, double y0, double x1, double y1, Rgb color)
  {
    const int n = std::max(1, static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))));
    for (int i = 0; i <= n; ++i) {
      const double t = static_cast<double>(i) / n;
      const int x = static_cast<int>(std::floor(x0 + (x1 - x0) * t));
      const int y = static_cast<int>(std::floor(y0 + (y1 - y0) * t));
      if (x >= 0 && x < w_ && y >= 0 && y < h_) pixels_[static_cast<std::size_t>(y * w_ + x)] = color;
    }
  }

  const raster::OccupancyGrid & grid_;
  int scale_;
  int w_;
  int h_;
  std::vector<Rgb> pixels_;
};

constexpr int kRenderScale = 4;

}  // namespace

std::string split_dir(const config::RunConfig & config, const std::string & split)
{
  return (fs::path(config.data_dir) / split).string();
}

std::string checkpoint_path(const config::RunConfig & config, const std::string & name)
{
  return (fs::path(config.checkpoint_dir) / (name + ".ckpt")).string();
}

void cmd_gen_data(const config::RunConfig & config, Split split, std::ostream & log)
{
  if (split != Split::kEval) gen_split(config, "train", log);
  if (split != Split::kTrain) gen_split(config, "eval", log);
}

std::vector<world::Scene> load_split(const config::RunConfig & config, const std::string & split)
{
  const auto dir = split_dir(config, split);
  const auto manifest_path = (fs::path(dir) / "manifest.json").string();
  if (!fs::exists(manifest_path)) throw DataError("no manifest at '" + manifest_path + "'; run gen-data first");
  std::vector<world::Scene> scenes;
  try {
    const auto manifest = json::parse(read_text(manifest_path));
    for (const auto & f : manifest.at("files")) {
      scenes.push_back(sim::load_scene((fs::path(dir) / f.at("file").get<std::string>()).string()));
    }
    if (scenes.size() != manifest.at("count").get<std::size_t>()) throw DataError("manifest count does not match its files");
  } catch (const DataError &) {
    throw;
  } catch (const std::exception & e) {
    throw DataError("bad " + split + " data: " + e.what());
  }
  return scenes;
}

void cmd_train(const config::RunConfig & config, Stage stage, bool resume, std::ostream & log)
{
  if (stage == Stage::kDriverSensor) {
    train_driver_sensor(config, resume, log);
  } else {
    train_generators(config, resume, log);
  }
}

sim::Report cmd_eval(
  const config::RunConfig & config, Loop loop, const std::optional<std::string> & from_log, std::ostream & log)
{
  const std::string tag = loop == Loop::kOpen ? "open" : "closed";
  std::vector<sim::EvalRecord> records;
  if (from_log) {
    try {
      records = sim::read_run_log(*from_log);
    } catch (const std::exception & e) {
      throw DataError("cannot read run-log '" + *from_log + "': " + e.what());
    }
  } else {
    const auto models = load_models(config, config.replay.modes);
    const auto scenes = load_split(config, "eval");
    if (scenes.empty()) throw DataError("eval split is empty");
    auto replay = config.replay;
    replay.seed = config.seed;
    std::vector<std::vector<sim::EvalRecord>> per_scene(scenes.size());
    sim::parallel_for(scenes.size(), config.workers, [&](std::size_t i) {
      if (loop == Loop::kOpen) {
        per_scene[i] = sim::run_open_loop(scenes[i], models.view(), config.planner, replay);
      } else {
        for (const auto mode : replay.modes) {
          auto result = sim::run_closed_loop(scenes[i], mode, models.view(), config.planner, replay);
          per_scene[i].insert(per_scene[i].end(), result.records.begin(), result.records.end());
        }
      }
    });
    for (auto & v : per_scene) records.insert(records.end(), v.begin(), v.end());
    ensure_dir(config.log_dir);
    const auto log_path = (fs::path(config.log_dir) / ("run_" + tag + ".ndjson")).string();
    sim::write_run_log(log_path, records);
    log << "wrote " << records.size() << " records to " << log_path << "\n";
  }
  if (records.empty()) throw DataError("no records to report");
  const auto report = sim::aggregate_report(records);
  ensure_dir(config.report_dir);
  write_text((fs::path(config.report_dir) / ("report_" + tag + ".json")).string(), sim::report_to_json(report).dump(2) + "\n");
  const auto table = sim::report_table(report);
  write_text((fs::path(config.report_dir) / ("report_" + tag + ".txt")).string(), table);
  log << table;
  return report;
}

std::vector<std::string> cmd_render(const config::RunConfig & config, const RenderRequest & request, std::ostream & log)
{
  for (const auto & o : request.overlays) {
    if (o != "ogm" && o != "fused" && o != "samples" && o != "plan") {
      throw config::ConfigError("unknown overlay '" + o + "' (ogm, fused, samples, plan)");
    }
  }
  world::Scene scene;
  try {
    scene = sim::load_scene(request.scene_path);
  } catch (const std::exception & e) {
    throw DataError(e.what());
  }
  if (!scene.ego.trajectory.covers(request.step) ||
      !scene.ego.trajectory.covers(request.step + config.planner.horizon_steps)) {
    throw DataError("step " + std::to_string(request.step) + " leaves no planning horizon in the scene");
  }
  auto has = [&](const std::string & o) {
    return std::find(request.overlays.begin(), request.overlays.end(), o) != request.overlays.end();
  };
  LoadedModels models;
  if (has("fused") || has("samples") || (has("plan") && needs_driver_sensor(request.mode))) {
    models.driver_sensor = load_driver_sensor(config);
  }
  if (has("samples") || (has("plan") && request.mode == plan::PlannerMode::kBiVO)) {
    models.generator = load_generator(config, "generator");
    if (!models.generator) throw OrderingError("generator checkpoint missing; run 'train generator' first");
  }
  if (has("plan") && request.mode == plan::PlannerMode::kCvaeOnly) {
    models.cvae = load_generator(config, "cvae");
    if (!models.cvae) throw OrderingError("cvae checkpoint missing");
  }
  const auto view = models.view();
  const auto obs = plan::observe(
    scene, request.step, world::state_at(scene.ego.trajectory, request.step), view.driver_sensor, config.planner);
  std::vector<std::string> written;
  auto out_path = [&](const std::string & o, const std::string & ext) {
    return request.out_prefix + "_" + o + ext;
  };
  if (has("ogm")) {
    raster::write_pgm(out_path("ogm", ".pgm"), obs.view.observed);
    written.push_back(out_path("ogm", ".pgm"));
  }
  if (has("fused")) {
    raster::write_pgm(out_path("fused", ".pgm"), obs.view.fused);
    written.push_back(out_path("fused", ".pgm"));
  }
  if (has("samples")) {
    nn::Rng rng(sim::plan_seed(config.seed, scene.id, request.step, plan::PlannerMode::kBiVO, 0));
    const auto predicted = plan::predicted_set(obs, scene, plan::PlannerMode::kBiVO, view, config.planner, rng);
    Canvas canvas(obs.view.observed, kRenderScale);
    for (const auto & p : predicted) canvas.polyline(p.trajectory, {40, 90, 255});
    write_text(out_path("samples", ".ppm"), canvas.encode());
    written.push_back(out_path("samples", ".ppm"));
    log << "samples: " << predicted.size() << " trajectories drawn\n";
  }
  if (has("plan")) {
    nn::Rng rng(sim::plan_seed(config.seed, scene.id, request.step, request.mode, 0));
    const auto result = plan::plan(obs, scene, request.mode, view, config.planner, rng);
    Canvas canvas(has("fused") ? obs.view.fused : obs.view.observed, kRenderScale);
    for (const auto & c : obs.candidates) canvas.polyline(c, {60, 200, 60});
    for (const auto & f : obs.all_futures) canvas.polyline(f, {255, 160, 0});
    canvas.polyline(result.chosen, {230, 30, 30});
    write_text(out_path("plan", ".ppm"), canvas.encode());
    written.push_back(out_path("plan", ".ppm"));
    log << "plan (" << plan::to_string(request.mode) << "): candidate " << result.chosen_index << " of "
        << obs.candidates.size() << ", cost " << result.costs[result.chosen_index].total << "\n";
  }
  for (const auto & w : written) log << "wrote " << w << "\n";
  return written;
}

BenchResult cmd_bench(const config::RunConfig & config, std::ostream & log)
{
  LoadedModels models;
  const auto ds_path = checkpoint_path(config, "driversensor");
  if (fs::exists(ds_path)) {
    models.driver_sensor = load_driver_sensor(config);
  } else {
    models.driver_sensor = ds::make_train_state(config.ds, config.ds_train);
  }
  models.generator = load_generator(config, "generator");
  if (!models.generator) {
    auto g = config.gen;
    g.conditioning = gen::Conditioning::kFused;
    models.generator = gen::make_train_state(g, config.gen_train);
  }
  sim::ScenarioTemplate tmpl;
  tmpl.kind = sim::TemplateKind::kOccludingTruckCrossing;
  const auto scene = sim::generate_scene(tmpl, config.seed, "bench");
  const auto steps = sim::replan_steps(scene, config.replay, config.planner);
  BenchResult out;
  out.cycles = config.bench_cycles;
  out.candidates = config.planner.candidates;
  out.samples = config.planner.samples;
  log << "bench: plan() in BiVO mode, J = " << out.candidates << ", K = " << out.samples << ", " << out.cycles
      << " cycles\n";
  for (std::size_t c = 0; c < out.cycles; ++c) {
    const int step = steps[c % steps.size()];
    nn::Rng rng(sim::plan_seed(config.seed, scene.id, step, plan::PlannerMode::kBiVO, 0));
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = plan::plan(scene, step, plan::PlannerMode::kBiVO, models.view(), config.planner, rng);
    const auto t1 = std::chrono::steady_clock::now();
    (void)result;
    out.cycle_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  auto sorted = out.cycle_ms;
  std::sort(sorted.begin(), sorted.end());
  out.median_ms = sorted[sorted.size() / 2];
  out.p95_ms = sorted[std::min(sorted.size() - 1, static_cast<std::size_t>(std::ceil(0.95 * sorted.size())) - 1)];
  log << "bench: median " << out.median_ms << " ms, p95 " << out.p95_ms << " ms\n";
  return out;
}

}  // namespace bivo::cli
