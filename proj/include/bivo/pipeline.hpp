#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bivo/driver_sensor.hpp"
#include "bivo/occlusion_gen.hpp"
#include "bivo/raster.hpp"
#include "bivo/sim.hpp"

namespace bivo::pipeline
{

/// Training mix: three of every four scenes come from the occlusion templates.
sim::TemplateKind training_template(std::size_t index);

struct SceneSet
{
  std::string prefix{"scene"};
  std::size_t count{0};
  std::uint64_t seed{1};
  /// Evaluation scenes follow the 90/10 mix, training scenes the occlusion-heavy one.
  bool evaluation{false};
  double hidden_presence{1.0};
};

std::string scene_id(const std::string & prefix, std::size_t index);
world::Scene make_scene(const SceneSet & set, std::size_t index);
std::vector<world::Scene> make_scenes(const SceneSet & set);

std::vector<ds::DsExample> mine_dataset(const std::vector<world::Scene> & scenes, const ds::DriverSensorConfig & config);

/// Occluded samples of every scene; with a model the fused grid comes from its reconstructions.
std::vector<raster::OccludedSample> occluded_dataset(
  const std::vector<world::Scene> & scenes, const ds::DriverSensorModel * model, std::size_t workers = 1,
  int horizon_steps = world::kHorizonSteps);

struct GeneratorSplit
{
  std::vector<gen::GenExample> train;
  std::vector<gen::GenExample> test;
};

/// Every `test_every`-th sample goes to the test split.
GeneratorSplit split_examples(
  const std::vector<raster::OccludedSample> & samples, const gen::GenConfig & config, std::size_t test_every = 10);

/// Generator examples for several conditionings in one extraction pass; the occluded grids are
/// dropped scene by scene. Sample i of the concatenated set is a test example iff
/// i % test_every == test_every - 1.
std::vector<GeneratorSplit> generator_datasets(
  const std::vector<world::Scene> & scenes, const ds::DriverSensorModel * model,
  const std::vector<gen::GenConfig> & configs, std::size_t workers = 1, std::size_t test_every = 10);

}  // namespace bivo::pipeline
