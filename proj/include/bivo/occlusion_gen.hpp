#pragma once

#include <cstdint>
#include <vector>

#include "bivo/nn.hpp"
#include "bivo/raster.hpp"
#include "bivo/world.hpp"

namespace bivo::gen
{

/// Which occupancy grid conditions the generator next to the road raster.
enum class Conditioning
{
  kFused,     // M_ego from the driver-sensor fusion
  kObserved,  // M_obs_ego, the raw occlusion map
  kNone,      // road raster only
};

std::string to_string(Conditioning c);
Conditioning conditioning_from_string(const std::string & s);

struct GenConfig
{
  std::size_t latent_dim{16};
  std::size_t hidden{128};
  std::size_t condition_features{64};
  /// Bezier control points per coordinate emitted by the decoder.
  std::size_t control_points{6};
  int grid_size{raster::kEgoGridSize};
  int downsample{4};
  int horizon_steps{world::kHorizonSteps};
  double dt{world::kDefaultDt};
  Conditioning conditioning{Conditioning::kFused};

  int pooled_size() const { return grid_size / downsample; }
  std::size_t condition_width() const { return 2 * static_cast<std::size_t>(pooled_size() * pooled_size()); }
  std::size_t states() const { return static_cast<std::size_t>(horizon_steps + 1); }
  /// (x, y, heading, speed) per state.
  std::size_t trajectory_width() const { return states() * 4; }
  /// x control points then y control points.
  std::size_t decoder_width() const { return 2 * control_points; }
};

/// Bernstein basis (or its derivative w.r.t. the curve parameter) at `samples` evenly spaced
/// parameters in [0, 1]: samples x control_points.
nn::Tensor bezier_basis(std::size_t samples, std::size_t control_points, bool derivative = false);

/// Trajectory CVAE: a shared condition trunk over the pooled (R, M) rasters, a 4-layer conditional
/// prior p(z|R, M), a 4-layer posterior q(z|x, R, M) and a 4-layer decoder p(x|z, R, M). The decoder
/// emits Bezier control points; decoded states are the curve sampled at dt.
class OcclusionGenModel
{
public:
  explicit OcclusionGenModel(GenConfig config = {});

  const GenConfig & config() const { return config_; }
  const nn::Mlp & condition() const { return condition_; }
  const nn::Mlp & prior() const { return prior_; }
  const nn::Mlp & posterior() const { return posterior_; }
  const nn::Mlp & decoder() const { return decoder_; }
  std::vector<double> & params() { return params_; }
  const std::vector<double> & params() const { return params_; }
  void initialize(std::uint64_t seed);
  std::string descriptor() const;

private:
  GenConfig config_;
  nn::Mlp condition_;
  nn::Mlp prior_;
  nn::Mlp posterior_;
  nn::Mlp decoder_;
  std::vector<double> params_;
};

/// Pooled, flattened condition input: road raster block means then occupancy block means.
std::vector<double> condition_input(
  const world::RoadRaster & road, const raster::OccupancyGrid * occupancy, const GenConfig & config);

struct GenExample
{
  std::vector<double> condition;
  /// Raw (x, y, heading, speed) per state in the ego frame.
  std::vector<double> trajectory;
};

/// Throws std::invalid_argument when the grid needed by `conditioning` is missing.
GenExample make_example(const raster::OccludedSample & sample, const GenConfig & config);

struct GenLossBreakdown
{
  /// 0.5 * squared position error (metres) summed over states, averaged over the batch.
  double reconstruction{0.0};
  double kl{0.0};
  double total{0.0};
  /// Mean squared error per position coordinate.
  double mse{0.0};
};

/// Negative ELBO with one reparameterised draw per example. Gradients go to `grads` when given.
/// Throws std::invalid_argument for an empty batch.
GenLossBreakdown gen_elbo_loss(
  const OcclusionGenModel & model, std::span<const double> params, std::span<const GenExample * const> batch,
  nn::Rng & rng, std::vector<double> * grads = nullptr);

struct GenTrainConfig
{
  std::size_t epochs{5};
  std::size_t batch_size{32};
  double learning_rate{3e-4};
  std::uint64_t seed{1};
};

struct GenTrainState
{
  OcclusionGenModel model;
  nn::AdamState adam;
  std::uint64_t step{0};
  std::vector<GenLossBreakdown> step_history;
  /// Mean training loss per completed epoch.
  std::vector<double> epoch_elbo;
};

GenTrainState make_train_state(const GenConfig & config, const GenTrainConfig & train);
/// Trains through `train.epochs` epochs of shuffled minibatches; resumable at step granularity.
/// Throws std::invalid_argument for an empty dataset.
void train_generator(GenTrainState & state, const std::vector<GenExample> & dataset, const GenTrainConfig & train);
GenTrainState train_generator(
  const std::vector<GenExample> & dataset, const GenConfig & config, const GenTrainConfig & train);

/// Mean negative ELBO over `examples` with a fixed draw seed.
double evaluate_elbo(const OcclusionGenModel & model, const std::vector<GenExample> & examples, std::uint64_t seed);

enum class LatentSource
{
  kLearnedPrior,
  kStandardNormal,
};

struct WeightedTrajectory
{
  world::Trajectory trajectory;
  double weight{0.0};
};

struct SampleRequest
{
  const world::RoadRaster * road{nullptr};
  /// Grid fed to the condition trunk (fused, observed or ignored, per the model).
  const raster::OccupancyGrid * condition_grid{nullptr};
  /// Geometric occlusion map used for the origin filter.
  const raster::OccupancyGrid * observed{nullptr};
  world::AgentState ego_state;
  int step{0};
  std::size_t count{1000};
  double existence_prior{0.1};
  world::ControlLimits limits;
  LatentSource latent{LatentSource::kLearnedPrior};
};

struct SampleResult
{
  std::vector<WeightedTrajectory> survivors;
  std::size_t drawn{0};
  std::size_t rejected_origin{0};
  std::size_t rejected_feasibility{0};
};

/// Draws `count` latents, decodes them and keeps trajectories that start in an occluded cell and
/// pass the kinematic check. Each survivor weighs existence_prior / count.
SampleResult sample_trajectories(const OcclusionGenModel & model, const SampleRequest & request, nn::Rng & rng);

/// Decoded trajectories (world frame) for a batch of latents, without filtering.
std::vector<world::Trajectory> decode_trajectories(
  const OcclusionGenModel & model, std::span<const double> condition_features, const nn::Tensor & latents,
  const world::AgentState & ego_state, int step);

nn::Checkpoint to_checkpoint(const GenTrainState & state, const GenTrainConfig & train);
GenTrainState from_checkpoint(const nn::Checkpoint & ckpt, GenTrainConfig * train = nullptr);

}  // namespace bivo::gen
