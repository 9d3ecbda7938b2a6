#include "bivo/pipeline.hpp"

#include <cstdio>

namespace bivo::pipeline
{

sim::TemplateKind training_template(std::size_t index)
{
  static constexpr std::array<sim::TemplateKind, 4> cycle{
    sim::TemplateKind::kOccludingTruckCrossing, sim::TemplateKind::kOncomingBehindOccluder,
    sim::TemplateKind::kParkedRowPedestrian, sim::TemplateKind::kRandomTraffic};
  return cycle[index % cycle.size()];
}

std::string scene_id(const std::string & prefix, std::size_t index)
{
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05zu", index);
  return prefix + "-" + buf;
}

world::Scene make_scene(const SceneSet & set, std::size_t index)
{
  sim::ScenarioTemplate tmpl;
  tmpl.kind = set.evaluation ? sim::mixed_template(index) : training_template(index);
  tmpl.hidden_presence = set.hidden_presence;
  return sim::generate_scene(tmpl, set.seed * 0x100000001B3ULL + index, scene_id(set.prefix, index));
}

std::vector<world::Scene> make_scenes(const SceneSet & set)
{
  std::vector<world::Scene> out;
  out.reserve(set.count);
  for (std::size_t i = 0; i < set.count; ++i) out.push_back(make_scene(set, i));
  return out;
}

std::vector<ds::DsExample> mine_dataset(const std::vector<world::Scene> & scenes, const ds::DriverSensorConfig & config)
{
  std::vector<ds::DsExample> out;
  for (const auto & scene : scenes) {
    auto ex = ds::mine_examples(scene, config);
    out.insert(out.end(), std::make_move_iterator(ex.begin()), std::make_move_iterator(ex.end()));
  }
  return out;
}

std::vector<raster::OccludedSample> occluded_dataset(
  const std::vector<world::Scene> & scenes, const ds::DriverSensorModel * model, std::size_t workers,
  int horizon_steps)
{
  std::vector<std::vector<raster::OccludedSample>> per_scene(scenes.size());
  sim::parallel_for(scenes.size(), workers, [&](std::size_t i) {
    const auto & scene = scenes[i];
    auto samples = raster::extract_occluded_samples(scene, raster::kEgoGridSize, raster::kEgoGridSize, horizon_steps);
    for (auto & s : samples) {
      const auto view =
        ds::observe_and_fuse(scene, s.step, world::state_at(scene.ego.trajectory, s.step), scene.ego.id, model);
      s.fused_grid = view.fused;
    }
    per_scene[i] = std::move(samples);
  });
  std::vector<raster::OccludedSample> out;
  for (auto & v : per_scene) out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  return out;
}

GeneratorSplit split_examples(
  const std::vector<raster::OccludedSample> & samples, const gen::GenConfig & config, std::size_t test_every)
{
  GeneratorSplit out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto ex = gen::make_example(samples[i], config);
    if (test_every > 0 && i % test_every == test_every - 1) {
      out.test.push_back(std::move(ex));
    } else {
      out.train.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<GeneratorSplit> generator_datasets(
  const std::vector<world::Scene> & scenes, const ds::DriverSensorModel * model,
  const std::vector<gen::GenConfig> & configs, std::size_t workers, std::size_t test_every)
{
  if (configs.empty()) return {};
  const int horizon = configs.front().horizon_steps;
  // per_scene[i][k]: examples of scene i under configs[k].
  std::vector<std::vector<std::vector<gen::GenExample>>> per_scene(scenes.size());
  sim::parallel_for(scenes.size(), workers, [&](std::size_t i) {
    const auto & scene = scenes[i];
    auto samples = raster::extract_occluded_samples(scene, raster::kEgoGridSize, raster::kEgoGridSize, horizon);
    per_scene[i].resize(configs.size());
    for (auto & s : samples) {
      const auto view =
        ds::observe_and_fuse(scene, s.step, world::state_at(scene.ego.trajectory, s.step), scene.ego.id, model);
      s.fused_grid = view.fused;
      for (std::size_t k = 0; k < configs.size(); ++k) per_scene[i][k].push_back(gen::make_example(s, configs[k]));
    }
  });
  std::vector<GeneratorSplit> out(configs.size());
  std::size_t index = 0;
  for (auto & scene_examples : per_scene) {
    const std::size_t n = scene_examples.empty() ? 0 : scene_examples.front().size();
    for (std::size_t j = 0; j < n; ++j, ++index) {
      const bool test = test_every > 0 && index % test_every == test_every - 1;
      for (std::size_t k = 0; k < configs.size(); ++k) {
        auto & dst = test ? out[k].test : out[k].train;
        dst.push_back(std::move(scene_examples[k][j]));
      }
    }
    scene_examples.clear();
  }
  return out;
}

}  // namespace bivo::pipeline
