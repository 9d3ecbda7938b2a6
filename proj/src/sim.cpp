#include "bivo/sim.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "bivo/raster.hpp"

namespace bivo::sim
{

using nlohmann::json;
using world::Agent;
using world::AgentClass;
using world::AgentState;
using world::Trajectory;

namespace
{

constexpr double kDt = world::kDefaultDt;
constexpr double kLaneWidth = 3.5;
constexpr double kRoadStart = -40.0;
constexpr double kRoadEnd = 340.0;
constexpr int kEvalSteps = 30;

double uniform(std::mt19937_64 & rng, double lo, double hi)
{
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

world::Lane straight_lane(std::int64_t id, double y, bool forward)
{
  world::Lane lane;
  lane.id = id;
  const int n = static_cast<int>((kRoadEnd - kRoadStart) / 2.0);
  for (int i = 0; i <= n; ++i) {
    const double x = forward ? kRoadStart + 2.0 * i : kRoadEnd - 2.0 * i;
    lane.centerline.push_back({x, y, forward ? 0.0 : -world::kPi});
  }
  return lane;
}

world::Scene base_scene(const std::string & id, double ego_speed)
{
  world::Scene scene;
  scene.id = id;
  scene.lane_graph = world::LaneGraph({straight_lane(1, 0.0, true), straight_lane(2, kLaneWidth, false)});
  scene.drivable_polygons = {{{kRoadStart, -5.5}, {kRoadEnd, -5.5}, {kRoadEnd, 5.25}, {kRoadStart, 5.25}}};
  scene.duration_steps = kSceneSteps;
  std::vector<AgentState> states;
  for (int k = 0; k < kSceneSteps; ++k) states.push_back({ego_speed * k * kDt, 0.0, 0.0, ego_speed, 0.0});
  scene.ego = Agent{kEgoId, AgentClass::kVehicle, 4.5, 2.0, Trajectory(kEgoId, 0, kDt, std::move(states))};
  return scene;
}

Agent parked(world::AgentId id, double x, double y, double heading, double length, double width)
{
  std::vector<AgentState> states(kSceneSteps, world::make_state(x, y, heading, 0.0));
  return Agent{id, AgentClass::kVehicle, length, width, Trajectory(id, 0, kDt, std::move(states))};
}

// Distance covered `t` seconds after starting from rest with acceleration `a` up to speed `v`.
double ramp_distance(double t, double a, double v)
{
  if (t <= 0.0) return 0.0;
  const double t_ramp = v / a;
  if (t <= t_ramp) return 0.5 * a * t * t;
  return 0.5 * v * t_ramp + v * (t - t_ramp);
}

double ramp_speed(double t, double a, double v)
{
  if (t <= 0.0) return 0.0;
  return std::min(v, a * t);
}

// Time to cover `d` metres from rest.
double ramp_time(double d, double a, double v)
{
  const double d_ramp = 0.5 * v * v / a;
  if (d <= d_ramp) return std::sqrt(2.0 * d / a);
  return v / a + (d - d_ramp) / v;
}

// Waits at (x, y) facing `heading`, then accelerates along it from `t_start`.
Trajectory waiting_mover(world::AgentId id, double x, double y, double heading, double a, double v, double t_start)
{
  std::vector<AgentState> states;
  double prev_speed = 0.0;
  for (int k = 0; k < kSceneSteps; ++k) {
    const double t = k * kDt - t_start;
    const double d = ramp_distance(t, a, v);
    const double speed = ramp_speed(t, a, v);
    states.push_back(world::make_state(
      x + d * std::cos(heading), y + d * std::sin(heading), heading, speed, k == 0 ? 0.0 : (speed - prev_speed) / kDt));
    prev_speed = speed;
  }
  return Trajectory(id, 0, kDt, std::move(states));
}

double smoothstep(double u)
{
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

double smoothstep_slope(double u)
{
  if (u <= 0.0 || u >= 1.0) return 0.0;
  return 6.0 * u * (1.0 - u);
}

double conflict_offset(const ScenarioTemplate & tmpl, std::mt19937_64 & rng)
{
  const double drawn = uniform(rng, -0.6, 0.6);
  return tmpl.conflict_offset.value_or(drawn);
}

void add_truck_crossing(world::Scene & scene, const ScenarioTemplate & tmpl, std::mt19937_64 & rng, double v_ego)
{
  const double x_truck = uniform(rng, 35.0, 50.0);
  const double v_bike = uniform(rng, 3.0, 5.0);
  const double offset = conflict_offset(tmpl, rng);
  const bool present = uniform(rng, 0.0, 1.0) < tmpl.hidden_presence;
  scene.agents.push_back(parked(1, x_truck, -kLaneWidth, 0.0, 10.0, 2.5));
  if (!present) return;
  const double x_bike = x_truck + 6.5;
  constexpr double accel = 2.5;
  const double t_start = x_bike / v_ego + offset - ramp_time(kLaneWidth, accel, v_bike);
  scene.agents.push_back(Agent{
    2, AgentClass::kCyclist, 1.8, 0.6,
    waiting_mover(2, x_bike, -kLaneWidth, 0.5 * world::kPi, accel, v_bike, std::max(0.0, t_start))});
}

void add_oncoming_overtake(world::Scene & scene, const ScenarioTemplate & tmpl, std::mt19937_64 & rng, double v_ego)
{
  const double x_bus = uniform(rng, 35.0, 48.0);
  const double v_car = uniform(rng, 6.0, 9.0);
  const double offset = conflict_offset(tmpl, rng);
  const bool present = uniform(rng, 0.0, 1.0) < tmpl.hidden_presence;
  scene.agents.push_back(parked(1, x_bus, kLaneWidth, -world::kPi, 12.0, 2.6));
  if (!present) return;
  const double x_start = x_bus + 10.5;
  constexpr double accel = 2.0;
  constexpr double y_pass = 0.8;
  constexpr double shift_len = 10.0;
  const double return_at = 10.5 + 6.0 + 4.0;
  // The car's tail-to-nose pass of the bus centre meets the ego near x_bus.
  const double t_start = x_bus / v_ego + offset - ramp_time(10.5, accel, v_car);
  const double t0 = std::max(0.0, t_start);
  std::vector<AgentState> states;
  double prev_speed = 0.0;
  for (int k = 0; k < kSceneSteps; ++k) {
    const double t = k * kDt - t0;
    const double s = ramp_distance(t, accel, v_car);
    const double speed = ramp_speed(t, accel, v_car);
    const double out_u = s / shift_len;
    const double back_u = (s - return_at) / shift_len;
    const double y = kLaneWidth - (kLaneWidth - y_pass) * (smoothstep(out_u) - smoothstep(back_u));
    const double dy = -(kLaneWidth - y_pass) * (smoothstep_slope(out_u) - smoothstep_slope(back_u)) / shift_len;
    states.push_back(world::make_state(
      x_start - s, y, std::atan2(dy, -1.0), speed, k == 0 ? 0.0 : (speed - prev_speed) / kDt));
    prev_speed = speed;
  }
  scene.agents.push_back(Agent{2, AgentClass::kVehicle, 4.5, 2.0, Trajectory(2, 0, kDt, std::move(states))});
}

void add_parked_row(world::Scene & scene, const ScenarioTemplate & tmpl, std::mt19937_64 & rng, double v_ego)
{
  constexpr double y_row = -3.2;
  constexpr double spacing = 7.0;
  const double x0 = uniform(rng, 25.0, 35.0);
  const int gap = std::uniform_int_distribution<int>(1, 3)(rng);
  const double v_ped = uniform(rng, 1.2, 1.8);
  const double offset = conflict_offset(tmpl, rng);
  const bool present = uniform(rng, 0.0, 1.0) < tmpl.hidden_presence;
  for (int i = 0; i < 4; ++i) scene.agents.push_back(parked(1 + i, x0 + spacing * i, y_row, 0.0, 4.5, 1.9));
  if (!present) return;
  const double x_ped = x0 + spacing * (gap - 1) + 3.5;
  constexpr double accel = 1.0;
  const double t_start = x_ped / v_ego + offset - ramp_time(-y_row, accel, v_ped);
  scene.agents.push_back(Agent{
    5, AgentClass::kPedestrian, 0.6, 0.6,
    waiting_mover(5, x_ped, y_row, 0.5 * world::kPi, accel, v_ped, std::max(0.0, t_start))});
}

bool any_hidden(const world::Scene & scene)
{
  for (int t = 0; t < kEvalSteps; ++t) {
    const auto observed = raster::build_observed_ogm(scene, t, scene.ego, raster::kEgoGridSize, raster::kEgoGridSize);
    for (const auto & a : scene.agents) {
      if (raster::agent_hidden(observed, a, t)) return true;
    }
  }
  return false;
}

void add_random_traffic(world::Scene & scene, std::mt19937_64 & rng, double v_ego)
{
  const int wanted = std::uniform_int_distribution<int>(1, 4)(rng);
  for (int count = wanted; count > 0; --count) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      scene.agents.clear();
      for (int i = 0; i < count; ++i) {
        const world::AgentId id = i + 1;
        std::vector<AgentState> states;
        if (i == 0 && uniform(rng, 0.0, 1.0) < 0.5) {
          const double x = uniform(rng, 25.0, 60.0);
          const double v = v_ego + uniform(rng, 1.0, 4.0);
          for (int k = 0; k < kSceneSteps; ++k) states.push_back({x + v * k * kDt, 0.0, 0.0, v, 0.0});
        } else {
          const double x = uniform(rng, 20.0, 220.0);
          const double v = uniform(rng, 6.0, 12.0);
          for (int k = 0; k < kSceneSteps; ++k) {
            states.push_back({x - v * k * kDt, kLaneWidth, -world::kPi, v, 0.0});
          }
        }
        scene.agents.push_back(Agent{id, AgentClass::kVehicle, 4.5, 2.0, Trajectory(id, 0, kDt, std::move(states))});
      }
      if (!any_hidden(scene)) return;
    }
  }
  scene.agents.clear();
}

json breakdown_json(const plan::CostBreakdown & c)
{
  return {{"heading", c.heading}, {"lane_dev", c.lane_dev}, {"effort", c.effort},
          {"collision", c.collision}, {"goal", c.goal}, {"total", c.total}};
}

plan::CostBreakdown breakdown_from(const json & j)
{
  plan::CostBreakdown c;
  c.heading = j.at("heading").get<double>();
  c.lane_dev = j.at("lane_dev").get<double>();
  c.effort = j.at("effort").get<double>();
  c.collision = j.at("collision").get<double>();
  c.goal = j.at("goal").get<double>();
  c.total = j.at("total").get<double>();
  return c;
}

std::uint64_t fnv1a(const void * data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL)
{
  const auto * p = static_cast<const unsigned char *>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix(std::uint64_t x)
{
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::string to_string(TemplateKind kind)
{
  switch (kind) {
    case TemplateKind::kStraightEmpty:
      return "straight_empty";
    case TemplateKind::kOccludingTruckCrossing:
      return "occluding_truck_crossing";
    case TemplateKind::kOncomingBehindOccluder:
      return "oncoming_behind_occluder";
    case TemplateKind::kParkedRowPedestrian:
      return "parked_row_pedestrian";
    case TemplateKind::kRandomTraffic:
      return "random_traffic";
  }
  return "straight_empty";
}

TemplateKind template_from_string(const std::string & s)
{
  for (const auto k : kAllTemplates) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown scenario template '" + s + "'");
}

bool has_hidden_agent(TemplateKind kind)
{
  return kind == TemplateKind::kOccludingTruckCrossing || kind == TemplateKind::kOncomingBehindOccluder ||
         kind == TemplateKind::kParkedRowPedestrian;
}

world::Scene generate_scene(const ScenarioTemplate & tmpl, std::uint64_t seed, const std::string & id)
{
  if (!(tmpl.hidden_presence >= 0.0 && tmpl.hidden_presence <= 1.0)) {
    throw std::invalid_argument("hidden presence must lie in [0, 1]");
  }
  std::mt19937_64 rng(splitmix(seed));
  const double v_ego = uniform(rng, 7.0, 11.0);
  auto scene = base_scene(id, v_ego);
  switch (tmpl.kind) {
    case TemplateKind::kStraightEmpty:
      break;
    case TemplateKind::kOccludingTruckCrossing:
      add_truck_crossing(scene, tmpl, rng, v_ego);
      break;
    case TemplateKind::kOncomingBehindOccluder:
      add_oncoming_overtake(scene, tmpl, rng, v_ego);
      break;
    case TemplateKind::kParkedRowPedestrian:
      add_parked_row(scene, tmpl, rng, v_ego);
      break;
    case TemplateKind::kRandomTraffic:
      add_random_traffic(scene, rng, v_ego);
      break;
  }
  scene.validate();
  return scene;
}

TemplateKind mixed_template(std::size_t index)
{
  static constexpr std::array<TemplateKind, 3> occluded{
    TemplateKind::kOccludingTruckCrossing, TemplateKind::kOncomingBehindOccluder, TemplateKind::kParkedRowPedestrian};
  if (index % 10 == 9) return occluded[(index / 10) % occluded.size()];
  return index % 2 == 0 ? TemplateKind::kStraightEmpty : TemplateKind::kRandomTraffic;
}

// ---------------------------------------------------------------------------
// Scene files

json scene_to_json(const world::Scene & scene)
{
  json lanes = json::array();
  for (const auto & lane : scene.lane_graph.lanes()) {
    json pts = json::array();
    for (const auto & p : lane.centerline) pts.push_back({p.x, p.y, p.heading});
    lanes.push_back({{"id", lane.id}, {"centerline", pts}, {"successors", lane.successors}});
  }
  json polys = json::array();
  for (const auto & poly : scene.drivable_polygons) {
    json pts = json::array();
    for (const auto & p : poly) pts.push_back({p[0], p[1]});
    polys.push_back(pts);
  }
  json agents = json::array();
  auto agent_json = [](const Agent & a) {
    json states = json::array();
    for (const auto & s : a.trajectory.states()) states.push_back({s.x, s.y, s.heading, s.speed, s.accel});
    return json{{"id", a.id}, {"class", world::to_string(a.agent_class)}, {"length", a.length},
                {"width", a.width}, {"dt", a.trajectory.dt()}, {"start_step", a.trajectory.start_step()},
                {"states", states}};
  };
  agents.push_back(agent_json(scene.ego));
  for (const auto & a : scene.agents) agents.push_back(agent_json(a));
  return {{"id", scene.id}, {"lanes", lanes}, {"drivable_polygons", polys}, {"agents", agents},
          {"ego_id", scene.ego.id}, {"duration_steps", scene.duration_steps}};
}

world::Scene scene_from_json(const json & j)
{
  try {
    world::Scene scene;
    scene.id = j.at("id").get<std::string>();
    std::vector<world::Lane> lanes;
    for (const auto & l : j.at("lanes")) {
      world::Lane lane;
      lane.id = l.at("id").get<std::int64_t>();
      for (const auto & p : l.at("centerline")) {
        lane.centerline.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
      }
      lane.successors = l.at("successors").get<std::vector<std::int64_t>>();
      lanes.push_back(std::move(lane));
    }
    scene.lane_graph = world::LaneGraph(std::move(lanes));
    for (const auto & poly : j.at("drivable_polygons")) {
      world::Polygon p;
      for (const auto & pt : poly) p.push_back({pt.at(0).get<double>(), pt.at(1).get<double>()});
      scene.drivable_polygons.push_back(std::move(p));
    }
    const auto ego_id = j.at("ego_id").get<world::AgentId>();
    bool found_ego = false;
    for (const auto & a : j.at("agents")) {
      std::vector<AgentState> states;
      for (const auto & s : a.at("states")) {
        states.push_back({s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>(), s.at(3).get<double>(),
                          s.at(4).get<double>()});
      }
      const auto id = a.at("id").get<world::AgentId>();
      Agent agent{
        id, world::agent_class_from_string(a.at("class").get<std::string>()), a.at("length").get<double>(),
        a.at("width").get<double>(),
        Trajectory(id, a.at("start_step").get<int>(), a.at("dt").get<double>(), std::move(states))};
      if (id == ego_id && !found_ego) {
        scene.ego = std::move(agent);
        found_ego = true;
      } else {
        scene.agents.push_back(std::move(agent));
      }
    }
    if (!found_ego) throw std::invalid_argument("scene has no agent with the ego id");
    scene.duration_steps = j.at("duration_steps").get<int>();
    scene.validate();
    return scene;
  } catch (const json::exception & e) {
    throw std::invalid_argument(std::string("malformed scene: ") + e.what());
  }
}

void save_scene(const std::string & path, const world::Scene & scene)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << scene_to_json(scene).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

world::Scene load_scene(const std::string & path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception & e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  return scene_from_json(j);
}

// ---------------------------------------------------------------------------
// Replay

void ReplayConfig::validate(double dt) const
{
  if (!(horizon_s > 0.0 && replan_period_s > 0.0 && max_scene_s > 0.0)) {
    throw std::invalid_argument("replay periods must be positive");
  }
  if (replan_period_s > horizon_s) throw std::invalid_argument("replan period exceeds the horizon");
  if (std::abs(replan_period_s - dt) > 1e-9) throw std::invalid_argument("replan period must equal the scene dt");
  if (modes.empty()) throw std::invalid_argument("no planner modes requested");
}

std::vector<int> replan_steps(const world::Scene & scene, const ReplayConfig & replay, const plan::PlannerConfig & config)
{
  std::vector<int> out;
  const auto & ego = scene.ego.trajectory;
  const double cap = std::min(replay.max_scene_s, scene.duration_steps * ego.dt());
  for (int t = ego.start_step(); t + config.horizon_steps < ego.end_step(); ++t) {
    if ((t - ego.start_step()) * ego.dt() >= cap - 1e-9) break;
    out.push_back(t);
  }
  return out;
}

json record_to_json(const EvalRecord & r)
{
  return {{"scene", r.scene_id}, {"loop", r.loop}, {"step", r.step}, {"mode", plan::to_string(r.mode)},
          {"chosen_index", r.chosen_index}, {"planned", breakdown_json(r.planned)},
          {"hindsight", breakdown_json(r.hindsight)}, {"critical", r.critical}, {"emergency", r.emergency},
          {"occluded_samples", r.occluded_samples}, {"candidate_hash", r.candidate_hash}};
}

EvalRecord record_from_json(const json & j)
{
  EvalRecord r;
  r.scene_id = j.at("scene").get<std::string>();
  r.loop = j.at("loop").get<std::string>();
  r.step = j.at("step").get<int>();
  r.mode = plan::mode_from_string(j.at("mode").get<std::string>());
  r.chosen_index = j.at("chosen_index").get<std::size_t>();
  r.planned = breakdown_from(j.at("planned"));
  r.hindsight = breakdown_from(j.at("hindsight"));
  r.critical = j.at("critical").get<bool>();
  r.emergency = j.at("emergency").get<bool>();
  r.occluded_samples = j.at("occluded_samples").get<std::size_t>();
  r.candidate_hash = j.at("candidate_hash").get<std::uint64_t>();
  return r;
}

plan::CostBreakdown hindsight_cost(
  const Trajectory & chosen, const world::Scene & scene, int step, const plan::CostWeights & weights, int horizon_steps)
{
  const auto goal = world::state_at(scene.ego.trajectory, step + horizon_steps);
  auto c = plan::cost_components(chosen, scene.lane_graph, goal, weights);
  const auto all = plan::agent_futures(scene, step, horizon_steps, nullptr);
  c.collision = plan::collision_cost(chosen, all, {}, weights);
  c.sum();
  return c;
}

std::uint64_t candidate_hash(const std::vector<Trajectory> & candidates)
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto & c : candidates) {
    const int start = c.start_step();
    h = fnv1a(&start, sizeof start, h);
    for (const auto & s : c.states()) {
      const double v[5] = {s.x, s.y, s.heading, s.speed, s.accel};
      h = fnv1a(v, sizeof v, h);
    }
  }
  return h;
}

std::uint64_t plan_seed(std::uint64_t seed, const std::string & scene_id, int step, plan::PlannerMode mode, int loop)
{
  std::uint64_t h = fnv1a(scene_id.data(), scene_id.size());
  h = splitmix(h ^ splitmix(seed));
  h = splitmix(h ^ static_cast<std::uint64_t>(step));
  h = splitmix(h ^ static_cast<std::uint64_t>(mode));
  return splitmix(h ^ static_cast<std::uint64_t>(loop));
}

namespace
{

EvalRecord make_record(
  const world::Scene & scene, const plan::PlanResult & res, int step, const plan::PlannerConfig & config,
  std::uint64_t hash, const char * loop)
{
  EvalRecord r;
  r.scene_id = scene.id;
  r.loop = loop;
  r.step = step;
  r.mode = res.mode;
  r.chosen_index = res.chosen_index;
  r.planned = res.costs.at(res.emergency ? 0 : res.chosen_index);
  r.hindsight = hindsight_cost(res.chosen, scene, step, config.weights, config.horizon_steps);
  r.emergency = res.emergency;
  r.occluded_samples = res.occluded_samples_used;
  r.candidate_hash = hash;
  return r;
}

}  // namespace

std::vector<EvalRecord> run_open_loop(
  const world::Scene & scene, const plan::Models & models, const plan::PlannerConfig & config,
  const ReplayConfig & replay)
{
  replay.validate(config.dt);
  std::vector<EvalRecord> out;
  bool critical = false;
  for (const int t : replan_steps(scene, replay, config)) {
    const auto & ego_state = world::state_at(scene.ego.trajectory, t);
    const auto obs = plan::observe(scene, t, ego_state, models.driver_sensor, config);
    const auto hash = candidate_hash(obs.candidates);
    std::optional<std::size_t> no_reasoning, oracle;
    for (const auto mode : replay.modes) {
      nn::Rng rng(plan_seed(replay.seed, scene.id, t, mode, 0));
      const auto res = plan::plan(obs, scene, mode, models, config, rng);
      if (mode == plan::PlannerMode::kNoReasoning) no_reasoning = res.chosen_index;
      if (mode == plan::PlannerMode::kOracle) oracle = res.chosen_index;
      out.push_back(make_record(scene, res, t, config, hash, "open"));
    }
    for (auto * slot : {&no_reasoning, &oracle}) {
      if (slot->has_value()) continue;
      const auto mode = slot == &oracle ? plan::PlannerMode::kOracle : plan::PlannerMode::kNoReasoning;
      nn::Rng rng(plan_seed(replay.seed, scene.id, t, mode, 0));
      *slot = plan::plan(obs, scene, mode, models, config, rng).chosen_index;
    }
    if (*no_reasoning != *oracle) critical = true;
  }
  for (auto & r : out) r.critical = critical;
  return out;
}

bool detect_critical(const world::Scene & scene, const plan::PlannerConfig & config, const ReplayConfig & replay)
{
  const plan::Models none;
  for (const int t : replan_steps(scene, replay, config)) {
    const auto obs = plan::observe(scene, t, world::state_at(scene.ego.trajectory, t), nullptr, config);
    nn::Rng rng(0);
    const auto a = plan::plan(obs, scene, plan::PlannerMode::kNoReasoning, none, config, rng);
    const auto b = plan::plan(obs, scene, plan::PlannerMode::kOracle, none, config, rng);
    if (a.chosen_index != b.chosen_index || a.emergency != b.emergency) return true;
  }
  return false;
}

ClosedLoopResult run_closed_loop(
  const world::Scene & scene, plan::PlannerMode mode, const plan::Models & models, const plan::PlannerConfig & config,
  const ReplayConfig & replay)
{
  replay.validate(config.dt);
  ClosedLoopResult result;
  const auto steps = replan_steps(scene, replay, config);
  if (steps.empty()) throw std::invalid_argument("scene too short for closed-loop replay");
  auto ego_state = world::state_at(scene.ego.trajectory, steps.front());
  std::vector<AgentState> executed{ego_state};
  for (const int t : steps) {
    const auto obs = plan::observe(scene, t, ego_state, models.driver_sensor, config);
    nn::Rng rng(plan_seed(replay.seed, scene.id, t, mode, 1));
    const auto res = plan::plan(obs, scene, mode, models, config, rng);
    result.records.push_back(make_record(scene, res, t, config, candidate_hash(obs.candidates), "closed"));
    if (res.emergency) ++result.emergencies;
    ego_state = res.chosen[1];
    executed.push_back(ego_state);
  }
  result.executed = Trajectory(scene.ego.id, steps.front(), config.dt, std::move(executed));

  const int last = result.executed.end_step() - 1;
  const auto goal = world::state_at(scene.ego.trajectory, last);
  result.executed_cost = plan::cost_components(result.executed, scene.lane_graph, goal, config.weights);
  const int span = static_cast<int>(result.executed.size()) - 1;
  const auto all = plan::agent_futures(scene, result.executed.start_step(), span, nullptr);
  result.executed_cost.collision = plan::collision_cost(result.executed, all, {}, config.weights);
  result.executed_cost.sum();
  return result;
}

// ---------------------------------------------------------------------------
// Reporting

Report aggregate_report(const std::vector<EvalRecord> & records)
{
  if (records.empty()) throw std::invalid_argument("no records to aggregate");
  struct Acc
  {
    double open{0}, critical{0}, closed{0};
    std::size_t n_open{0}, n_critical{0}, n_closed{0};
  };
  std::map<plan::PlannerMode, Acc> acc;
  std::set<std::string> scenes, critical_scenes;
  for (const auto & r : records) {
    auto & a = acc[r.mode];
    scenes.insert(r.scene_id);
    if (r.loop == "closed") {
      a.closed += r.hindsight.total;
      ++a.n_closed;
      continue;
    }
    a.open += r.hindsight.total;
    ++a.n_open;
    if (r.critical) {
      critical_scenes.insert(r.scene_id);
      a.critical += r.hindsight.total;
      ++a.n_critical;
    }
  }
  auto mean = [](double sum, std::size_t n) -> std::optional<double> {
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  };
  Report report;
  report.scenes = scenes.size();
  report.critical_scenes = critical_scenes.size();
  for (const auto & [mode, a] : acc) {
    ModeSummary m;
    m.mode = mode;
    m.open_all = mean(a.open, a.n_open);
    m.open_critical = mean(a.critical, a.n_critical);
    m.closed = mean(a.closed, a.n_closed);
    m.open_records = a.n_open;
    m.critical_records = a.n_critical;
    m.closed_records = a.n_closed;
    report.modes.push_back(m);
  }
  const auto oracle = std::find_if(report.modes.begin(), report.modes.end(), [](const ModeSummary & m) {
    return m.mode == plan::PlannerMode::kOracle;
  });
  if (oracle != report.modes.end()) {
    const ModeSummary ref = *oracle;
    auto delta = [](const std::optional<double> & v, const std::optional<double> & base) -> std::optional<double> {
      if (!v || !base || *base == 0.0) return std::nullopt;
      return (*v - *base) / std::abs(*base) * 100.0;
    };
    for (auto & m : report.modes) {
      m.open_all_delta = delta(m.open_all, ref.open_all);
      m.open_critical_delta = delta(m.open_critical, ref.open_critical);
      m.closed_delta = delta(m.closed, ref.closed);
    }
  }
  return report;
}

json report_to_json(const Report & report)
{
  auto opt = [](const std::optional<double> & v) { return v ? json(*v) : json(nullptr); };
  json modes = json::array();
  for (const auto & m : report.modes) {
    modes.push_back({{"mode", plan::to_string(m.mode)}, {"open_all", opt(m.open_all)},
                     {"open_critical", opt(m.open_critical)}, {"closed", opt(m.closed)},
                     {"open_all_delta_pct", opt(m.open_all_delta)},
                     {"open_critical_delta_pct", opt(m.open_critical_delta)},
                     {"closed_delta_pct", opt(m.closed_delta)}, {"open_records", m.open_records},
                     {"critical_records", m.critical_records}, {"closed_records", m.closed_records}});
  }
  return {{"scenes", report.scenes}, {"critical_scenes", report.critical_scenes}, {"modes", modes}};
}

std::string report_table(const Report & report)
{
  auto cell = [](const std::optional<double> & v, const std::optional<double> & d) {
    if (!v) return std::string("-");
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << *v;
    if (d) os << " (" << std::showpos << std::setprecision(2) << *d << "%)";
    return os.str();
  };
  std::ostringstream os;
  os << "scenes: " << report.scenes << ", critical: " << report.critical_scenes << "\n";
  os << std::left << std::setw(24) << "mode" << std::setw(24) << "open (all)" << std::setw(24) << "open (critical)"
     << "closed\n";
  for (const auto & m : report.modes) {
    os << std::left << std::setw(24) << plan::to_string(m.mode) << std::setw(24) << cell(m.open_all, m.open_all_delta)
       << std::setw(24) << cell(m.open_critical, m.open_critical_delta) << cell(m.closed, m.closed_delta) << "\n";
  }
  return os.str();
}

void write_run_log(const std::string & path, const std::vector<EvalRecord> & records)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto & r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

std::vector<EvalRecord> read_run_log(const std::string & path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<EvalRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const std::exception & e) {
      throw std::invalid_argument(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)> & task)
{
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto & t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace bivo::sim
