#include "bivo/planner.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bivo::plan
{

using world::AgentState;
using world::Trajectory;

namespace
{

constexpr double kLaneSearchRadius = 10.0;
constexpr std::array<double, 5> kSpeedFractions{0.0, 0.25, 0.5, 0.75, 1.0};
constexpr double kOffsetSpacing = 0.5;
constexpr int kOffsetsPerSide = 6;

struct Branch
{
  std::vector<std::size_t> lanes;
};

// Lane sequences starting at `first` that reach `reach` metres of arc or stop at a dead end.
std::vector<Branch> reachable_branches(const world::LaneGraph & graph, std::size_t first, double start_arc, double reach)
{
  std::vector<Branch> out;
  std::vector<std::pair<Branch, double>> stack{{Branch{{first}}, graph.lane_length(first) - start_arc}};
  while (!stack.empty()) {
    auto [branch, covered] = std::move(stack.back());
    stack.pop_back();
    const auto & lane = graph.lanes()[branch.lanes.back()];
    if (covered >= reach || lane.successors.empty() || branch.lanes.size() > 32) {
      out.push_back(std::move(branch));
      continue;
    }
    // Reverse so the first successor is expanded first.
    for (auto it = lane.successors.rbegin(); it != lane.successors.rend(); ++it) {
      const auto next = *graph.index_of(*it);
      Branch b = branch;
      b.lanes.push_back(next);
      stack.emplace_back(std::move(b), covered + graph.lane_length(next));
    }
  }
  return out;
}

world::LanePoint point_on_branch(const world::LaneGraph & graph, const Branch & branch, double start_arc, double s)
{
  double arc = start_arc + s;
  for (std::size_t i = 0; i < branch.lanes.size(); ++i) {
    const double len = graph.lane_length(branch.lanes[i]);
    if (arc <= len || i + 1 == branch.lanes.size()) {
      if (arc <= len) return graph.point_at(branch.lanes[i], arc);
      auto end = graph.point_at(branch.lanes[i], len);
      const double extra = arc - len;
      end.x += extra * std::cos(end.heading);
      end.y += extra * std::sin(end.heading);
      return end;
    }
    arc -= len;
  }
  return graph.point_at(branch.lanes.back(), arc);
}

std::vector<double> lateral_offsets()
{
  std::vector<double> out{0.0};
  for (int k = 1; k <= kOffsetsPerSide; ++k) {
    out.push_back(k * kOffsetSpacing);
    out.push_back(-k * kOffsetSpacing);
  }
  return out;
}

}  // namespace

std::string to_string(PlannerMode mode)
{
  switch (mode) {
    case PlannerMode::kBiVO:
      return "BiVO";
    case PlannerMode::kNoReasoning:
      return "NoReasoning";
    case PlannerMode::kCvaeOnly:
      return "CvaeOnly";
    case PlannerMode::kDriverSensorHeuristic:
      return "DriverSensorHeuristic";
    case PlannerMode::kOracle:
      return "Oracle";
  }
  return "NoReasoning";
}

PlannerMode mode_from_string(const std::string & s)
{
  for (const auto m : kAllModes) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown planner mode '" + s + "'");
}

void CostWeights::validate() const
{
  for (const double w : {w_hd, w_vd, w_ef, w_col, w_goal}) {
    if (!(w >= 0.0)) throw std::invalid_argument("cost weights must be nonnegative");
  }
  if (!(rbf_sigma > 0.0)) throw std::invalid_argument("rbf sigma must be positive");
}

std::vector<AgentState> sample_terminals(
  const world::LaneGraph & lanes, const AgentState & ego, std::size_t J, double horizon_s,
  const world::ControlLimits & limits)
{
  if (J == 0) throw std::invalid_argument("at least one terminal is required");
  const double reach = horizon_s * limits.max_speed;
  const double top = std::min(limits.max_speed, std::max(1.5 * ego.speed, 5.0));
  const auto offsets = lateral_offsets();

  // strata[speed][offset][branch]
  std::vector<std::vector<AgentState>> strata(kSpeedFractions.size());
  const auto projection = lanes.nearest_aligned(ego.x, ego.y, ego.heading);
  const bool on_lane = projection && projection->distance <= kLaneSearchRadius;
  std::vector<Branch> branches;
  if (on_lane) branches = reachable_branches(lanes, projection->lane_index, projection->arc_length, reach);

  for (std::size_t si = 0; si < kSpeedFractions.size(); ++si) {
    const double v_end = kSpeedFractions[si] * top;
    const double arc = std::min(reach, 0.5 * (ego.speed + v_end) * horizon_s);
    for (const double offset : offsets) {
      if (on_lane) {
        for (const auto & branch : branches) {
          const auto p = point_on_branch(lanes, branch, projection->arc_length, arc);
          strata[si].push_back(world::make_state(
            p.x - offset * std::sin(p.heading), p.y + offset * std::cos(p.heading), p.heading, v_end));
        }
      } else {
        const double c = std::cos(ego.heading);
        const double s = std::sin(ego.heading);
        strata[si].push_back(world::make_state(
          ego.x + arc * c - offset * s, ego.y + arc * s + offset * c, ego.heading, v_end));
      }
    }
  }

  std::vector<AgentState> out;
  std::size_t depth = 0;
  bool any = true;
  while (out.size() < J && any) {
    any = false;
    for (const auto & stratum : strata) {
      if (depth < stratum.size()) {
        any = true;
        if (out.size() < J) out.push_back(stratum[depth]);
      }
    }
    ++depth;
  }
  return out;
}

Trajectory spline_connect(
  const AgentState & start, const AgentState & terminal, int steps, double dt, world::AgentId id, int start_step)
{
  if (steps < 2) throw std::invalid_argument("spline needs at least two steps");
  const double T = steps * dt;
  const double m0x = start.speed * T * std::cos(start.heading);
  const double m0y = start.speed * T * std::sin(start.heading);
  const double m1x = terminal.speed * T * std::cos(terminal.heading);
  const double m1y = terminal.speed * T * std::sin(terminal.heading);

  std::vector<AgentState> states(static_cast<std::size_t>(steps + 1));
  double heading = start.heading;
  for (int k = 0; k <= steps; ++k) {
    const double u = static_cast<double>(k) / steps;
    const double u2 = u * u;
    const double u3 = u2 * u;
    const double h00 = 2 * u3 - 3 * u2 + 1;
    const double h10 = u3 - 2 * u2 + u;
    const double h01 = -2 * u3 + 3 * u2;
    const double h11 = u3 - u2;
    const double d00 = 6 * u2 - 6 * u;
    const double d10 = 3 * u2 - 4 * u + 1;
    const double d01 = -6 * u2 + 6 * u;
    const double d11 = 3 * u2 - 2 * u;
    auto & s = states[static_cast<std::size_t>(k)];
    s.x = h00 * start.x + h10 * m0x + h01 * terminal.x + h11 * m1x;
    s.y = h00 * start.y + h10 * m0y + h01 * terminal.y + h11 * m1y;
    const double dx = d00 * start.x + d10 * m0x + d01 * terminal.x + d11 * m1x;
    const double dy = d00 * start.y + d10 * m0y + d01 * terminal.y + d11 * m1y;
    if (std::hypot(dx, dy) > 1e-9) heading = std::atan2(dy, dx);
    s.heading = world::normalize_angle(heading);
  }
  states[0].speed = start.speed;
  states[0].accel = start.accel;
  for (std::size_t k = 1; k < states.size(); ++k) {
    states[k].speed = std::hypot(states[k].x - states[k - 1].x, states[k].y - states[k - 1].y) / dt;
    states[k].accel = (states[k].speed - states[k - 1].speed) / dt;
  }
  return Trajectory(id, start_step, dt, std::move(states));
}

std::vector<Trajectory> generate_candidates(
  const world::LaneGraph & lanes, const AgentState & ego, world::AgentId ego_id, int step, const PlannerConfig & config)
{
  std::vector<Trajectory> out;
  for (const auto & terminal : sample_terminals(lanes, ego, config.candidates, config.horizon_s(), config.limits)) {
    auto traj = spline_connect(ego, terminal, config.horizon_steps, config.dt, ego_id, step);
    if (world::kinematically_feasible(traj, config.limits)) out.push_back(std::move(traj));
  }
  return out;
}

CostBreakdown cost_components(
  const Trajectory & candidate, const world::LaneGraph & lanes, const AgentState & goal, const CostWeights & weights)
{
  CostBreakdown c;
  for (const auto & s : candidate.states()) {
    c.effort += s.accel * s.accel;
    const auto lane = lanes.nearest_aligned(s.x, s.y, s.heading);
    if (!lane) continue;
    const double dh = world::normalize_angle(s.heading - lane->heading);
    c.heading += dh * dh;
    c.lane_dev += lane->lateral * lane->lateral;
  }
  c.heading *= weights.w_hd;
  c.lane_dev *= weights.w_vd;
  c.effort *= weights.w_ef;
  if (!candidate.empty()) {
    c.goal = weights.w_goal * std::hypot(candidate.back().x - goal.x, candidate.back().y - goal.y);
  }
  c.sum();
  return c;
}

double rbf(double dx, double dy, double sigma)
{
  return std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
}

double collision_cost(
  const Trajectory & candidate, std::span<const Trajectory> visible, std::span<const gen::WeightedTrajectory> predicted,
  const CostWeights & weights)
{
  const auto & ego = candidate.states();
  const std::size_t n = ego.size();
  const double inv = 1.0 / (2.0 * weights.rbf_sigma * weights.rbf_sigma);
  auto check = [&](const Trajectory & t) {
    if (t.size() != n || t.start_step() != candidate.start_step()) {
      throw std::invalid_argument("trajectory is not aligned with the candidate");
    }
  };
  auto along = [&](const Trajectory & t) {
    double sum = 0.0;
    const auto & st = t.states();
    for (std::size_t k = 0; k < n; ++k) {
      const double dx = st[k].x - ego[k].x;
      const double dy = st[k].y - ego[k].y;
      sum += std::exp(-(dx * dx + dy * dy) * inv);
    }
    return sum;
  };
  double total = 0.0;
  for (const auto & t : visible) {
    check(t);
    total += along(t);
  }
  for (const auto & p : predicted) {
    check(p.trajectory);
    total += p.weight * along(p.trajectory);
  }
  return weights.w_col * total;
}

std::vector<Trajectory> agent_futures(
  const world::Scene & scene, int step, int horizon_steps, const std::vector<world::AgentId> * ids)
{
  std::vector<Trajectory> out;
  for (const auto & agent : scene.agents) {
    if (ids && std::find(ids->begin(), ids->end(), agent.id) == ids->end()) continue;
    const auto & t = agent.trajectory;
    if (!t.covers(step) || !t.covers(step + horizon_steps)) continue;
    out.push_back(t.slice(step, horizon_steps + 1));
  }
  return out;
}

Observation observe(
  const world::Scene & scene, int step, const AgentState & ego_state, const ds::DriverSensorModel * ds_model,
  const PlannerConfig & config)
{
  const auto & ego_traj = scene.ego.trajectory;
  if (!ego_traj.covers(step + config.horizon_steps)) {
    throw std::invalid_argument("planning horizon runs past the logged ego trajectory");
  }
  Observation obs;
  obs.step = step;
  obs.ego_state = ego_state;
  obs.goal = world::state_at(ego_traj, step + config.horizon_steps);
  obs.view = ds::observe_and_fuse(scene, step, ego_state, scene.ego.id, ds_model);
  obs.road = world::rasterize_road(
    scene.drivable_polygons, world::pose_of(ego_state), raster::kEgoGridSize, raster::kEgoGridSize);
  obs.candidates = generate_candidates(scene.lane_graph, ego_state, scene.ego.id, step, config);
  for (const auto & cand : obs.candidates) {
    obs.base_costs.push_back(cost_components(cand, scene.lane_graph, obs.goal, config.weights));
  }
  obs.visible_futures = agent_futures(scene, step, config.horizon_steps, &obs.view.visible_agents);
  obs.all_futures = agent_futures(scene, step, config.horizon_steps, nullptr);
  return obs;
}

std::vector<gen::WeightedTrajectory> heuristic_predictions(
  const Observation & obs, const world::LaneGraph & lanes, const PlannerConfig & config)
{
  const auto & observed = obs.view.observed;
  const auto & fused = obs.view.fused;
  std::vector<std::pair<double, std::size_t>> cells;
  for (std::size_t i = 0; i < observed.cell_count(); ++i) {
    if (observed.values()[i] == raster::kOccluded && fused.values()[i] > config.heuristic_threshold) {
      cells.emplace_back(fused.values()[i], i);
    }
  }
  std::stable_sort(cells.begin(), cells.end(), [](const auto & a, const auto & b) { return a.first > b.first; });
  if (cells.size() > config.heuristic_count) cells.resize(config.heuristic_count);
  std::vector<gen::WeightedTrajectory> out;
  if (cells.empty()) return out;
  const double weight = config.existence_prior / static_cast<double>(cells.size());
  for (const auto & [p, index] : cells) {
    const int row = static_cast<int>(index) / observed.width();
    const int col = static_cast<int>(index) % observed.width();
    const auto [x, y] = observed.world_center(row, col);
    const auto lane = lanes.nearest(x, y);
    const double heading = lane ? lane->heading : obs.ego_state.heading;
    std::vector<AgentState> states;
    for (int k = 0; k <= config.horizon_steps; ++k) {
      const double d = config.heuristic_speed * k * config.dt;
      states.push_back(world::make_state(x + d * std::cos(heading), y + d * std::sin(heading), heading,
                                         config.heuristic_speed));
    }
    out.push_back({Trajectory(-1, obs.step, config.dt, std::move(states)), weight});
  }
  return out;
}

std::vector<gen::WeightedTrajectory> predicted_set(
  const Observation & obs, const world::Scene & scene, PlannerMode mode, const Models & models,
  const PlannerConfig & config, nn::Rng & rng, std::size_t * drawn)
{
  if (drawn) *drawn = 0;
  auto sample = [&](const gen::OcclusionGenModel * model, const raster::OccupancyGrid & grid) {
    if (!model) throw std::invalid_argument(to_string(mode) + " needs a generator model");
    gen::SampleRequest req;
    req.road = &obs.road;
    req.condition_grid = &grid;
    req.observed = &obs.view.observed;
    req.ego_state = obs.ego_state;
    req.step = obs.step;
    req.count = config.samples;
    req.existence_prior = config.existence_prior;
    req.limits = config.limits;
    req.latent = config.latent;
    auto result = gen::sample_trajectories(*model, req, rng);
    if (drawn) *drawn = result.drawn;
    return std::move(result.survivors);
  };
  switch (mode) {
    case PlannerMode::kBiVO:
      return sample(models.generator, obs.view.fused);
    case PlannerMode::kCvaeOnly:
      return sample(models.cvae, obs.view.observed);
    case PlannerMode::kDriverSensorHeuristic:
      return heuristic_predictions(obs, scene.lane_graph, config);
    case PlannerMode::kNoReasoning:
    case PlannerMode::kOracle:
      return {};
  }
  return {};
}

std::size_t argmin_total(std::span<const CostBreakdown> costs)
{
  if (costs.empty()) throw std::invalid_argument("no candidates to choose from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < costs.size(); ++i) {
    if (costs[i].total < costs[best].total) best = i;
  }
  return best;
}

Trajectory emergency_trajectory(
  const AgentState & ego, int steps, double dt, const world::ControlLimits & limits, world::AgentId id, int start_step)
{
  std::vector<AgentState> states{ego};
  AgentState s = ego;
  for (int k = 1; k <= steps; ++k) {
    const double v = std::max(0.0, s.speed + limits.min_accel * dt);
    const double d = 0.5 * (s.speed + v) * dt;
    const double a = (v - s.speed) / dt;
    s = AgentState{s.x + d * std::cos(ego.heading), s.y + d * std::sin(ego.heading), ego.heading, v, a};
    states.push_back(s);
  }
  return Trajectory(id, start_step, dt, std::move(states));
}

PlanResult plan(
  const Observation & obs, const world::Scene & scene, PlannerMode mode, const Models & models,
  const PlannerConfig & config, nn::Rng & rng)
{
  config.weights.validate();
  PlanResult result;
  result.mode = mode;
  if (obs.candidates.empty()) {
    result.emergency = true;
    result.chosen = emergency_trajectory(
      obs.ego_state, config.horizon_steps, config.dt, config.limits, scene.ego.id, obs.step);
    auto c = cost_components(result.chosen, scene.lane_graph, obs.goal, config.weights);
    const auto & visible = mode == PlannerMode::kOracle ? obs.all_futures : obs.visible_futures;
    c.collision = collision_cost(result.chosen, visible, {}, config.weights);
    c.sum();
    result.costs.push_back(c);
    return result;
  }
  const auto predicted = predicted_set(obs, scene, mode, models, config, rng, &result.samples_drawn);
  result.occluded_samples_used = predicted.size();
  const auto & visible = mode == PlannerMode::kOracle ? obs.all_futures : obs.visible_futures;
  result.costs.reserve(obs.candidates.size());
  const bool cached = obs.base_costs.size() == obs.candidates.size();
  for (std::size_t i = 0; i < obs.candidates.size(); ++i) {
    const auto & cand = obs.candidates[i];
    auto c = cached ? obs.base_costs[i] : cost_components(cand, scene.lane_graph, obs.goal, config.weights);
    c.collision = collision_cost(cand, visible, predicted, config.weights);
    c.sum();
    result.costs.push_back(c);
  }
  result.chosen_index = argmin_total(result.costs);
  result.chosen = obs.candidates[result.chosen_index];
  return result;
}

PlanResult plan(
  const world::Scene & scene, int step, PlannerMode mode, const Models & models, const PlannerConfig & config,
  nn::Rng & rng)
{
  const auto & ego_state = world::state_at(scene.ego.trajectory, step);
  const auto obs = observe(scene, step, ego_state, models.driver_sensor, config);
  return plan(obs, scene, mode, models, config, rng);
}

}  // namespace bivo::plan
