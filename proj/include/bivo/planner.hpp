#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bivo/driver_sensor.hpp"
#include "bivo/occlusion_gen.hpp"
#include "bivo/world.hpp"

namespace bivo::plan
{

enum class PlannerMode
{
  kBiVO,
  kNoReasoning,
  kCvaeOnly,
  kDriverSensorHeuristic,
  kOracle,
};

inline constexpr std::array<PlannerMode, 5> kAllModes{
  PlannerMode::kBiVO, PlannerMode::kNoReasoning, PlannerMode::kCvaeOnly, PlannerMode::kDriverSensorHeuristic,
  PlannerMode::kOracle};

std::string to_string(PlannerMode mode);
/// Throws std::invalid_argument for an unknown name.
PlannerMode mode_from_string(const std::string & s);

struct CostWeights
{
  double w_hd{1.0};
  double w_vd{1.0};
  double w_ef{0.1};
  double w_col{10.0};
  double w_goal{1.0};
  double rbf_sigma{2.0};

  /// Throws std::invalid_argument on a negative weight or non-positive sigma.
  void validate() const;
};

struct CostBreakdown
{
  double heading{0.0};
  double lane_dev{0.0};
  double effort{0.0};
  double collision{0.0};
  double goal{0.0};
  double total{0.0};

  void sum() { total = heading + lane_dev + effort + collision + goal; }
};

struct PlannerConfig
{
  std::size_t candidates{64};
  std::size_t samples{1000};
  double existence_prior{0.1};
  int horizon_steps{world::kHorizonSteps};
  double dt{world::kDefaultDt};
  CostWeights weights;
  world::ControlLimits limits;
  gen::LatentSource latent{gen::LatentSource::kLearnedPrior};
  std::size_t heuristic_count{3};
  double heuristic_threshold{0.6};
  double heuristic_speed{5.0};

  double horizon_s() const { return horizon_steps * dt; }
};

/// Terminal states on lanes reachable from the ego's nearest lane, stratified over terminal speed.
/// Without a lane within 10 m the terminals lie straight ahead. Throws std::invalid_argument for J = 0.
std::vector<world::AgentState> sample_terminals(
  const world::LaneGraph & lanes, const world::AgentState & ego, std::size_t J, double horizon_s,
  const world::ControlLimits & limits = {});

/// Cubic Hermite connection sampled at dt: steps + 1 states from `start` to `terminal`.
/// Throws std::invalid_argument for steps < 2.
world::Trajectory spline_connect(
  const world::AgentState & start, const world::AgentState & terminal, int steps, double dt,
  world::AgentId id = 0, int start_step = 0);

/// Terminals connected by splines, infeasible ones dropped; order follows sample_terminals.
std::vector<world::Trajectory> generate_candidates(
  const world::LaneGraph & lanes, const world::AgentState & ego, world::AgentId ego_id, int step,
  const PlannerConfig & config);

/// Every term except collision; total is their sum.
CostBreakdown cost_components(
  const world::Trajectory & candidate, const world::LaneGraph & lanes, const world::AgentState & goal,
  const CostWeights & weights);

double rbf(double dx, double dy, double sigma);

/// Throws std::invalid_argument when a trajectory is not aligned with the candidate.
double collision_cost(
  const world::Trajectory & candidate, std::span<const world::Trajectory> visible,
  std::span<const gen::WeightedTrajectory> predicted, const CostWeights & weights);

/// Ground-truth futures over the candidate window, for the given agents (all agents when `ids` is
/// null). Agents not covering the whole window are skipped.
std::vector<world::Trajectory> agent_futures(
  const world::Scene & scene, int step, int horizon_steps, const std::vector<world::AgentId> * ids);

/// Everything the modes share at one planning step.
struct Observation
{
  int step{0};
  world::AgentState ego_state;
  world::AgentState goal;
  ds::EgoView view;
  world::RoadRaster road;
  std::vector<world::Trajectory> candidates;
  /// cost_components of each candidate; collision is filled per mode.
  std::vector<CostBreakdown> base_costs;
  std::vector<world::Trajectory> visible_futures;
  std::vector<world::Trajectory> all_futures;
};

/// Throws std::invalid_argument when the goal step lies past the logged ego trajectory.
Observation observe(
  const world::Scene & scene, int step, const world::AgentState & ego_state, const ds::DriverSensorModel * ds_model,
  const PlannerConfig & config);

struct Models
{
  const ds::DriverSensorModel * driver_sensor{nullptr};
  const gen::OcclusionGenModel * generator{nullptr};
  /// Generator trained on the raw occlusion map.
  const gen::OcclusionGenModel * cvae{nullptr};
};

struct PlanResult
{
  PlannerMode mode{PlannerMode::kNoReasoning};
  std::size_t chosen_index{0};
  world::Trajectory chosen;
  std::vector<CostBreakdown> costs;
  std::size_t occluded_samples_used{0};
  std::size_t samples_drawn{0};
  bool emergency{false};
};

/// Heuristic spawns at the highest-valued occluded cells of the fused map.
std::vector<gen::WeightedTrajectory> heuristic_predictions(
  const Observation & obs, const world::LaneGraph & lanes, const PlannerConfig & config);

/// Predicted occluded set for a mode. Throws std::invalid_argument when a needed model is missing.
std::vector<gen::WeightedTrajectory> predicted_set(
  const Observation & obs, const world::Scene & scene, PlannerMode mode, const Models & models,
  const PlannerConfig & config, nn::Rng & rng, std::size_t * drawn = nullptr);

/// Index of the minimal total; first index on ties. Throws std::invalid_argument when empty.
std::size_t argmin_total(std::span<const CostBreakdown> costs);

/// Scores the shared candidates under `mode` and picks the argmin.
PlanResult plan(
  const Observation & obs, const world::Scene & scene, PlannerMode mode, const Models & models,
  const PlannerConfig & config, nn::Rng & rng);

/// Observes from the logged ego state, then plans.
PlanResult plan(
  const world::Scene & scene, int step, PlannerMode mode, const Models & models, const PlannerConfig & config,
  nn::Rng & rng);

/// Straight-line maximum braking from `ego`.
world::Trajectory emergency_trajectory(
  const world::AgentState & ego, int steps, double dt, const world::ControlLimits & limits, world::AgentId id,
  int start_step);

}  // namespace bivo::plan
