#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "bivo/nn.hpp"
#include "bivo/raster.hpp"
#include "bivo/world.hpp"

namespace bivo::ds
{

struct DriverSensorConfig
{
  std::size_t latent_classes{32};
  std::size_t hidden{128};
  /// Past steps before the current one; the history holds history_steps + 1 states.
  int history_steps{4};
  int grid_size{raster::kAgentGridSize};

  std::size_t history_width() const { return static_cast<std::size_t>(history_steps + 1) * 5; }
  std::size_t grid_cells() const { return static_cast<std::size_t>(grid_size * grid_size); }
};

/// Per-agent categorical CVAE: history encoder, prior head p(z|x), posterior q(z|x, M_gt) and a
/// Bernoulli grid decoder p(M|z). All weights share one flat buffer.
class DriverSensorModel
{
public:
  explicit DriverSensorModel(DriverSensorConfig config = {});

  const DriverSensorConfig & config() const { return config_; }
  const nn::Mlp & encoder() const { return encoder_; }
  const nn::Mlp & prior() const { return prior_; }
  const nn::Mlp & posterior() const { return posterior_; }
  const nn::Mlp & decoder() const { return decoder_; }

  std::vector<double> & params() { return params_; }
  const std::vector<double> & params() const { return params_; }
  void initialize(std::uint64_t seed);

  /// Prior logits for a batch of history feature rows.
  nn::Tensor prior_logits(const nn::Tensor & histories) const;
  /// Per-cell occupancy probabilities for a batch of (relaxed) one-hot codes.
  nn::Tensor decode_probabilities(const nn::Tensor & codes) const;

  std::string descriptor() const;

private:
  DriverSensorConfig config_;
  nn::Mlp encoder_;
  nn::Mlp prior_;
  nn::Mlp posterior_;
  nn::Mlp decoder_;
  std::vector<double> params_;
};

/// Agent-frame history features: per state x/10, y/10, heading, speed/10, accel/4, oldest first.
/// nullopt when the trajectory does not cover the full history window.
std::optional<std::vector<double>> history_features(const world::Trajectory & traj, int step, int history_steps);

struct DsExample
{
  std::vector<double> history;
  /// Ground-truth agent-centric grid, 0/1 per cell.
  std::vector<std::uint8_t> grid;
};

struct DsLossBreakdown
{
  double reconstruction_nll{0.0};
  double kl{0.0};
  double mutual_information{0.0};
  /// Signed batch entropy term: -H(mean posterior).
  double batch_entropy{0.0};
  double beta{0.0};
  double total{0.0};
  /// Classes whose batch-mean posterior mass exceeds 1 / (10 C).
  std::size_t active_classes{0};
};

/// total = reconstruction_nll + beta * kl - mutual_information + (1 - beta) * batch_entropy.
/// Gradients w.r.t. the flat parameter buffer are written to `grads` when given (zeroed first).
/// Throws std::invalid_argument for batches smaller than two or beta outside [0, 1].
DsLossBreakdown ds_loss(
  const DriverSensorModel & model, std::span<const double> params, std::span<const DsExample * const> batch,
  double beta, double temperature, nn::Rng & rng, std::vector<double> * grads = nullptr);

struct DsTrainConfig
{
  std::size_t steps{2000};
  std::size_t batch_size{32};
  double learning_rate{1e-3};
  std::uint64_t seed{1};
  double temperature_start{1.0};
  double temperature_end{0.3};
  /// Fraction of training over which beta ramps from 0 to 1.
  double beta_anneal_fraction{0.5};
};

struct DsTrainState
{
  DriverSensorModel model;
  nn::AdamState adam;
  std::uint64_t step{0};
  std::vector<DsLossBreakdown> history;
};

DsTrainState make_train_state(const DriverSensorConfig & config, const DsTrainConfig & train);
/// Runs training until `state.step == train.steps`. Resumable: schedules use the absolute step.
/// Throws std::invalid_argument for an empty dataset.
void train_driver_sensor(DsTrainState & state, const std::vector<DsExample> & dataset, const DsTrainConfig & train);
DsTrainState train_driver_sensor(
  const std::vector<DsExample> & dataset, const DriverSensorConfig & config, const DsTrainConfig & train);

/// Decodes the argmax class of the prior into an agent-centric probability grid.
raster::OccupancyGrid reconstruct_most_likely(
  const DriverSensorModel & model, std::span<const double> history, const world::Pose2 & agent_pose);

// ---------------------------------------------------------------------------
// Belief functions

inline constexpr double kDefaultDiscount = 0.2;

struct BeliefCell
{
  double occupied{0.0};
  double free{0.0};
  double unknown{1.0};

  double pignistic() const { return occupied + 0.5 * unknown; }
};

BeliefCell to_belief(double value, bool observed, double discount = kDefaultDiscount);

struct Combination
{
  BeliefCell cell;
  bool total_conflict{false};
};

/// Dempster's rule over {occupied, free}; total conflict yields the vacuous cell.
Combination dempster_combine(const BeliefCell & a, const BeliefCell & b);

/// Fuses agent-centric probability grids (each carrying its pose) into the ego observation.
raster::OccupancyGrid fuse_to_ego(
  const raster::OccupancyGrid & ego_observed, std::span<const raster::OccupancyGrid> agent_grids,
  double discount = kDefaultDiscount);

struct EgoView
{
  raster::OccupancyGrid observed;
  raster::OccupancyGrid fused;
  std::vector<world::AgentId> visible_agents;
  std::size_t sources{0};
};

/// Observes the scene from `ego_state`, reconstructs every visible agent with enough history and
/// fuses the results. With no model the fused grid is the belief round-trip of the observation.
EgoView observe_and_fuse(
  const world::Scene & scene, int step, const world::AgentState & ego_state, world::AgentId ego_id,
  const DriverSensorModel * model, int height = raster::kEgoGridSize, int width = raster::kEgoGridSize);

/// Training pairs for every ego-visible agent with a full history, every `stride` steps.
std::vector<DsExample> mine_examples(const world::Scene & scene, const DriverSensorConfig & config, int stride = 2);

nn::Checkpoint to_checkpoint(const DsTrainState & state, const DsTrainConfig & train);
DsTrainState from_checkpoint(const nn::Checkpoint & ckpt, DsTrainConfig * train = nullptr);

}  // namespace bivo::ds
