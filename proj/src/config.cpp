#include "bivo/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace bivo::config
{

namespace
{

struct Entry
{
  std::string key;
  std::function<void(RunConfig &, const std::string &)> set;
  std::function<std::string(const RunConfig &)> get;
};

std::string trim(const std::string & s)
{
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string & key, const std::string & v)
{
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string & key, const std::string & v)
{
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (v.empty() || used != v.size() || !std::isfinite(out)) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string & key, const std::string & v)
{
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

std::string fmt_double(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename T>
Entry uint_entry(std::string key, T RunConfig::*group, std::size_t T::*field)
{
  return {key, [=](RunConfig & c, const std::string & v) { (c.*group).*field = parse_u64(key, v); },
          [=](const RunConfig & c) { return std::to_string((c.*group).*field); }};
}

template <typename T>
Entry double_entry(std::string key, T RunConfig::*group, double T::*field)
{
  return {key, [=](RunConfig & c, const std::string & v) { (c.*group).*field = parse_double(key, v); },
          [=](const RunConfig & c) { return fmt_double((c.*group).*field); }};
}

template <typename T>
Entry int_entry(std::string key, T RunConfig::*group, int T::*field)
{
  return {key,
          [=](RunConfig & c, const std::string & v) {
            const auto n = parse_u64(key, v);
            if (n > 1000000) throw ConfigError("'" + key + "' is out of range");
            (c.*group).*field = static_cast<int>(n);
          },
          [=](const RunConfig & c) { return std::to_string((c.*group).*field); }};
}

Entry string_entry(std::string key, std::string RunConfig::*field)
{
  return {key, [=](RunConfig & c, const std::string & v) { c.*field = v; },
          [=](const RunConfig & c) { return c.*field; }};
}

std::string join_modes(const std::vector<plan::PlannerMode> & modes)
{
  std::string out;
  for (std::size_t i = 0; i < modes.size(); ++i) out += (i ? "," : "") + plan::to_string(modes[i]);
  return out;
}

std::vector<plan::PlannerMode> split_modes(const std::string & key, const std::string & v)
{
  std::vector<plan::PlannerMode> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(plan::mode_from_string(trim(item)));
    } catch (const std::invalid_argument & e) {
      throw ConfigError("'" + key + "': " + e.what());
    }
  }
  if (out.empty()) throw ConfigError("'" + key + "' needs at least one mode");
  return out;
}

const std::vector<Entry> & table()
{
  static const std::vector<Entry> entries = [] {
    using R = RunConfig;
    std::vector<Entry> t;
    t.push_back({"seed", [](R & c, const std::string & v) { c.seed = parse_u64("seed", v); },
                 [](const R & c) { return std::to_string(c.seed); }});
    t.push_back({"workers", [](R & c, const std::string & v) { c.workers = parse_u64("workers", v); },
                 [](const R & c) { return std::to_string(c.workers); }});
    t.push_back(string_entry("paths.data", &R::data_dir));
    t.push_back(string_entry("paths.checkpoints", &R::checkpoint_dir));
    t.push_back(string_entry("paths.logs", &R::log_dir));
    t.push_back(string_entry("paths.reports", &R::report_dir));
    t.push_back({"data.train_scenes", [](R & c, const std::string & v) { c.train_scenes = parse_u64("data.train_scenes", v); },
                 [](const R & c) { return std::to_string(c.train_scenes); }});
    t.push_back({"data.eval_scenes", [](R & c, const std::string & v) { c.eval_scenes = parse_u64("data.eval_scenes", v); },
                 [](const R & c) { return std::to_string(c.eval_scenes); }});
    t.push_back({"data.hidden_presence",
                 [](R & c, const std::string & v) { c.hidden_presence = parse_double("data.hidden_presence", v); },
                 [](const R & c) { return fmt_double(c.hidden_presence); }});

    t.push_back(uint_entry("ds.latent_classes", &R::ds, &ds::DriverSensorConfig::latent_classes));
    t.push_back(uint_entry("ds.hidden", &R::ds, &ds::DriverSensorConfig::hidden));
    t.push_back(int_entry("ds.history_steps", &R::ds, &ds::DriverSensorConfig::history_steps));
    t.push_back(uint_entry("ds.steps", &R::ds_train, &ds::DsTrainConfig::steps));
    t.push_back(uint_entry("ds.batch_size", &R::ds_train, &ds::DsTrainConfig::batch_size));
    t.push_back(double_entry("ds.learning_rate", &R::ds_train, &ds::DsTrainConfig::learning_rate));
    t.push_back(double_entry("ds.temperature_start", &R::ds_train, &ds::DsTrainConfig::temperature_start));
    t.push_back(double_entry("ds.temperature_end", &R::ds_train, &ds::DsTrainConfig::temperature_end));
    t.push_back(double_entry("ds.beta_anneal_fraction", &R::ds_train, &ds::DsTrainConfig::beta_anneal_fraction));

    t.push_back(uint_entry("gen.latent_dim", &R::gen, &gen::GenConfig::latent_dim));
    t.push_back(uint_entry("gen.hidden", &R::gen, &gen::GenConfig::hidden));
    t.push_back(uint_entry("gen.condition_features", &R::gen, &gen::GenConfig::condition_features));
    t.push_back(uint_entry("gen.control_points", &R::gen, &gen::GenConfig::control_points));
    t.push_back(int_entry("gen.downsample", &R::gen, &gen::GenConfig::downsample));
    t.push_back(uint_entry("gen.epochs", &R::gen_train, &gen::GenTrainConfig::epochs));
    t.push_back(uint_entry("gen.batch_size", &R::gen_train, &gen::GenTrainConfig::batch_size));
    t.push_back(double_entry("gen.learning_rate", &R::gen_train, &gen::GenTrainConfig::learning_rate));
    t.push_back({"gen.train_cvae", [](R & c, const std::string & v) { c.train_cvae = parse_bool("gen.train_cvae", v); },
                 [](const R & c) { return std::string(c.train_cvae ? "true" : "false"); }});

    t.push_back(uint_entry("planner.candidates", &R::planner, &plan::PlannerConfig::candidates));
    t.push_back(uint_entry("planner.samples", &R::planner, &plan::PlannerConfig::samples));
    t.push_back(double_entry("planner.existence_prior", &R::planner, &plan::PlannerConfig::existence_prior));
    t.push_back({"planner.latent",
                 [](R & c, const std::string & v) {
                   if (v == "prior") {
                     c.planner.latent = gen::LatentSource::kLearnedPrior;
                   } else if (v == "standard") {
                     c.planner.latent = gen::LatentSource::kStandardNormal;
                   } else {
                     throw ConfigError("'planner.latent' expects prior or standard, got '" + v + "'");
                   }
                 },
                 [](const R & c) {
                   return std::string(c.planner.latent == gen::LatentSource::kLearnedPrior ? "prior" : "standard");
                 }});
    t.push_back(uint_entry("planner.heuristic_count", &R::planner, &plan::PlannerConfig::heuristic_count));
    t.push_back(double_entry("planner.heuristic_threshold", &R::planner, &plan::PlannerConfig::heuristic_threshold));
    t.push_back(double_entry("planner.heuristic_speed", &R::planner, &plan::PlannerConfig::heuristic_speed));
    auto weight = [&t](std::string key, double plan::CostWeights::*field) {
      t.push_back({key, [=](R & c, const std::string & v) { c.planner.weights.*field = parse_double(key, v); },
                   [=](const R & c) { return fmt_double(c.planner.weights.*field); }});
    };
    weight("weights.heading", &plan::CostWeights::w_hd);
    weight("weights.lane", &plan::CostWeights::w_vd);
    weight("weights.effort", &plan::CostWeights::w_ef);
    weight("weights.collision", &plan::CostWeights::w_col);
    weight("weights.goal", &plan::CostWeights::w_goal);
    weight("weights.rbf_sigma", &plan::CostWeights::rbf_sigma);
    auto limit = [&t](std::string key, double world::ControlLimits::*field) {
      t.push_back({key, [=](R & c, const std::string & v) { c.planner.limits.*field = parse_double(key, v); },
                   [=](const R & c) { return fmt_double(c.planner.limits.*field); }});
    };
    limit("limits.max_accel", &world::ControlLimits::max_accel);
    limit("limits.min_accel", &world::ControlLimits::min_accel);
    limit("limits.max_speed", &world::ControlLimits::max_speed);
    limit("limits.max_curvature", &world::ControlLimits::max_curvature);

    t.push_back(double_entry("replay.horizon_s", &R::replay, &sim::ReplayConfig::horizon_s));
    t.push_back(double_entry("replay.replan_period_s", &R::replay, &sim::ReplayConfig::replan_period_s));
    t.push_back(double_entry("replay.max_scene_s", &R::replay, &sim::ReplayConfig::max_scene_s));
    t.push_back({"replay.modes", [](R & c, const std::string & v) { c.replay.modes = split_modes("replay.modes", v); },
                 [](const R & c) { return join_modes(c.replay.modes); }});
    t.push_back({"bench.cycles", [](R & c, const std::string & v) { c.bench_cycles = parse_u64("bench.cycles", v); },
                 [](const R & c) { return std::to_string(c.bench_cycles); }});
    return t;
  }();
  return entries;
}

const Entry & find(const std::string & key)
{
  for (const auto & e : table()) {
    if (e.key == key) return e;
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

}  // namespace

bool RunConfig::operator==(const RunConfig & other) const
{
  for (const auto & e : table()) {
    if (e.get(*this) != e.get(other)) return false;
  }
  return true;
}

std::vector<std::string> keys()
{
  std::vector<std::string> out;
  for (const auto & e : table()) out.push_back(e.key);
  return out;
}

void set(RunConfig & config, const std::string & key, const std::string & value)
{
  find(key).set(config, trim(value));
}

std::string get(const RunConfig & config, const std::string & key) { return find(key).get(config); }

KeyValues parse_text(const std::string & text)
{
  KeyValues out;
  std::stringstream ss(text);
  std::string line;
  int number = 0;
  while (std::getline(ss, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key = value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

std::string to_text(const RunConfig & config)
{
  std::string out;
  for (const auto & e : table()) out += e.key + " = " + e.get(config) + "\n";
  return out;
}

void validate(const RunConfig & c)
{
  auto require = [](bool ok, const std::string & what) {
    if (!ok) throw ConfigError(what);
  };
  require(c.workers >= 1 && c.workers <= 256, "workers must lie in [1, 256]");
  require(c.hidden_presence >= 0.0 && c.hidden_presence <= 1.0, "data.hidden_presence must lie in [0, 1]");
  require(c.ds.latent_classes >= 2, "ds.latent_classes must be at least 2");
  require(c.ds.hidden >= 1 && c.gen.hidden >= 1, "hidden widths must be positive");
  require(c.ds_train.batch_size >= 2, "ds.batch_size must be at least 2");
  require(c.ds_train.learning_rate > 0.0 && c.gen_train.learning_rate > 0.0, "learning rates must be positive");
  require(c.ds_train.temperature_end > 0.0 && c.ds_train.temperature_start > 0.0, "temperatures must be positive");
  require(c.ds_train.beta_anneal_fraction > 0.0 && c.ds_train.beta_anneal_fraction <= 1.0,
          "ds.beta_anneal_fraction must lie in (0, 1]");
  require(c.gen.latent_dim >= 1 && c.gen.condition_features >= 1, "generator widths must be positive");
  require(c.gen.control_points >= 2, "gen.control_points must be at least 2");
  require(c.gen.downsample >= 1 && c.gen.grid_size % c.gen.downsample == 0,
          "gen.downsample must divide the grid size");
  require(c.gen_train.batch_size >= 1, "gen.batch_size must be positive");
  require(c.planner.candidates >= 1, "planner.candidates must be positive");
  require(c.planner.samples >= 1, "planner.samples must be positive");
  require(c.planner.existence_prior >= 0.0 && c.planner.existence_prior <= 1.0,
          "planner.existence_prior must lie in [0, 1]");
  require(c.planner.limits.min_accel < 0.0 && c.planner.limits.max_accel > 0.0, "limits need min_accel < 0 < max_accel");
  require(c.planner.limits.max_speed > 0.0 && c.planner.limits.max_curvature > 0.0, "limits must be positive");
  require(c.bench_cycles >= 1, "bench.cycles must be positive");
  try {
    c.planner.weights.validate();
    c.replay.validate(c.planner.dt);
  } catch (const std::invalid_argument & e) {
    throw ConfigError(e.what());
  }
  const double steps = c.replay.horizon_s / c.planner.dt;
  require(std::abs(steps - std::round(steps)) < 1e-9, "replay.horizon_s must be a multiple of the step");
}

RunConfig load(const std::string & path, const KeyValues & overrides)
{
  RunConfig config;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    for (const auto & [k, v] : parse_text(ss.str())) set(config, k, v);
  }
  for (const auto & [k, v] : overrides) set(config, k, v);
  config.planner.horizon_steps = static_cast<int>(std::lround(config.replay.horizon_s / config.planner.dt));
  config.gen.horizon_steps = config.planner.horizon_steps;
  validate(config);
  return config;
}

}  // namespace bivo::config
