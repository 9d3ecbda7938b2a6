#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bivo/planner.hpp"
#include "bivo/world.hpp"

namespace bivo::sim
{

enum class TemplateKind
{
  kStraightEmpty,
  kOccludingTruckCrossing,
  kOncomingBehindOccluder,
  kParkedRowPedestrian,
  kRandomTraffic,
};

inline constexpr std::array<TemplateKind, 5> kAllTemplates{
  TemplateKind::kStraightEmpty, TemplateKind::kOccludingTruckCrossing, TemplateKind::kOncomingBehindOccluder,
  TemplateKind::kParkedRowPedestrian, TemplateKind::kRandomTraffic};

std::string to_string(TemplateKind kind);
TemplateKind template_from_string(const std::string & s);
bool has_hidden_agent(TemplateKind kind);

struct ScenarioTemplate
{
  TemplateKind kind{TemplateKind::kStraightEmpty};
  /// Probability that the hidden agent of an occlusion template is present.
  double hidden_presence{1.0};
  /// Seconds between the ego reaching the conflict point and the hidden agent reaching the ego
  /// lane; drawn from [-0.6, 0.6] when unset.
  std::optional<double> conflict_offset;
};

inline constexpr int kSceneSteps = 60;
inline constexpr world::AgentId kEgoId = 0;

/// A 30 s scene at 0.5 s steps. Hidden agents sit behind their occluder at step 0.
world::Scene generate_scene(const ScenarioTemplate & tmpl, std::uint64_t seed, const std::string & id);

/// The 90/10 evaluation mix: every tenth scene uses an occlusion template, the rest are
/// straight_empty or random_traffic.
TemplateKind mixed_template(std::size_t index);

nlohmann::json scene_to_json(const world::Scene & scene);
/// Throws std::invalid_argument on a malformed document.
world::Scene scene_from_json(const nlohmann::json & j);
void save_scene(const std::string & path, const world::Scene & scene);
world::Scene load_scene(const std::string & path);

struct ReplayConfig
{
  double horizon_s{5.0};
  double replan_period_s{0.5};
  double max_scene_s{15.0};
  std::vector<plan::PlannerMode> modes{plan::kAllModes.begin(), plan::kAllModes.end()};
  std::uint64_t seed{1};

  /// Throws std::invalid_argument when the periods are inconsistent.
  void validate(double dt) const;
};

/// Replan steps: from the ego's first step while t * dt < max_scene_s and the horizon fits.
std::vector<int> replan_steps(const world::Scene & scene, const ReplayConfig & replay, const plan::PlannerConfig & config);

struct EvalRecord
{
  std::string scene_id;
  std::string loop{"open"};
  int step{0};
  plan::PlannerMode mode{plan::PlannerMode::kNoReasoning};
  std::size_t chosen_index{0};
  plan::CostBreakdown planned;
  plan::CostBreakdown hindsight;
  bool critical{false};
  bool emergency{false};
  std::size_t occluded_samples{0};
  std::uint64_t candidate_hash{0};
};

nlohmann::json record_to_json(const EvalRecord & r);
EvalRecord record_from_json(const nlohmann::json & j);

/// The planner's cost with every ground-truth agent visible and nothing predicted.
plan::CostBreakdown hindsight_cost(
  const world::Trajectory & chosen, const world::Scene & scene, int step, const plan::CostWeights & weights,
  int horizon_steps = world::kHorizonSteps);

/// FNV-1a over the candidate states.
std::uint64_t candidate_hash(const std::vector<world::Trajectory> & candidates);

/// Deterministic generator stream for one (scene, step, mode) plan call.
std::uint64_t plan_seed(std::uint64_t seed, const std::string & scene_id, int step, plan::PlannerMode mode, int loop);

std::vector<EvalRecord> run_open_loop(
  const world::Scene & scene, const plan::Models & models, const plan::PlannerConfig & config,
  const ReplayConfig & replay);

struct ClosedLoopResult
{
  world::Trajectory executed;
  std::vector<EvalRecord> records;
  /// Hindsight terms summed over the executed states.
  plan::CostBreakdown executed_cost;
  std::size_t emergencies{0};
};

ClosedLoopResult run_closed_loop(
  const world::Scene & scene, plan::PlannerMode mode, const plan::Models & models, const plan::PlannerConfig & config,
  const ReplayConfig & replay);

/// True iff NoReasoning and Oracle choose different candidates at some replan step.
bool detect_critical(const world::Scene & scene, const plan::PlannerConfig & config, const ReplayConfig & replay);

struct ModeSummary
{
  plan::PlannerMode mode{plan::PlannerMode::kNoReasoning};
  std::optional<double> open_all;
  std::optional<double> open_critical;
  std::optional<double> closed;
  std::optional<double> open_all_delta;
  std::optional<double> open_critical_delta;
  std::optional<double> closed_delta;
  std::size_t open_records{0};
  std::size_t critical_records{0};
  std::size_t closed_records{0};
};

struct Report
{
  std::vector<ModeSummary> modes;
  std::size_t scenes{0};
  std::size_t critical_scenes{0};
};

/// Per-mode mean hindsight totals and percentage deltas against Oracle.
/// Throws std::invalid_argument for empty input.
Report aggregate_report(const std::vector<EvalRecord> & records);
nlohmann::json report_to_json(const Report & report);
std::string report_table(const Report & report);

void write_run_log(const std::string & path, const std::vector<EvalRecord> & records);
std::vector<EvalRecord> read_run_log(const std::string & path);

/// Runs `task(i)` for i in [0, n) on `workers` threads; results are indexed, so merging is
/// deterministic. The first exception is rethrown.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)> & task);

}  // namespace bivo::sim
