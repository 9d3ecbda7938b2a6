#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "commands.hpp"

namespace
{

using namespace bivo;

config::KeyValues parse_overrides(const std::vector<std::string> & sets)
{
  config::KeyValues out;
  for (const auto & s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw config::ConfigError("--set expects key=value, got '" + s + "'");
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return out;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"BiVO occlusion-aware planning: data generation, training, evaluation, rendering"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  if (const char * env = std::getenv("BIVO_CONFIG")) config_path = env;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "key = value config file (default: $BIVO_CONFIG)");
  app.add_option("-s,--set", sets, "Override a config key, key=value (repeatable)");

  auto * gen_data = app.add_subcommand("gen-data", "Generate synthetic scene files and manifests");
  std::string split = "both";
  gen_data->add_option("--split", split, "train, eval or both")->check(CLI::IsMember({"train", "eval", "both"}));

  auto * train = app.add_subcommand("train", "Train a model stage");
  std::string stage;
  bool resume = false;
  train->add_option("stage", stage, "driversensor or generator")->required()->check(CLI::IsMember({"driversensor", "generator"}));
  train->add_flag("--resume", resume, "Continue from the stage's checkpoint");

  auto * eval = app.add_subcommand("eval", "Replay the eval split and report hindsight costs");
  std::string loop;
  std::string from_log;
  eval->add_option("loop", loop, "open or closed")->required()->check(CLI::IsMember({"open", "closed"}));
  eval->add_option("--from-log", from_log, "Rebuild the report from an existing run-log");

  auto * render = app.add_subcommand("render", "Export occupancy maps, samples and plans as images");
  cli::RenderRequest request;
  std::string overlays = "ogm";
  std::string mode = "BiVO";
  render->add_option("--scene", request.scene_path, "Scene JSON file")->required();
  render->add_option("--step", request.step, "Planning step");
  render->add_option("--overlay", overlays, "Comma list of ogm, fused, samples, plan");
  render->add_option("--out", request.out_prefix, "Output path prefix");
  render->add_option("--mode", mode, "Planner mode for the plan overlay");

  auto * bench = app.add_subcommand("bench", "Time plan() cycles");
  std::string bench_json;
  bench->add_option("--json", bench_json, "Write the timing report here");

  auto * show = app.add_subcommand("show-config", "Print the effective configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError & e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kConfigError;
  }

  try {
    const auto cfg = config::load(config_path, parse_overrides(sets));
    if (show->parsed()) {
      std::cout << config::to_text(cfg);
    } else if (gen_data->parsed()) {
      cli::cmd_gen_data(cfg, split == "train" ? cli::Split::kTrain : split == "eval" ? cli::Split::kEval : cli::Split::kBoth, std::cout);
    } else if (train->parsed()) {
      cli::cmd_train(cfg, stage == "driversensor" ? cli::Stage::kDriverSensor : cli::Stage::kGenerator, resume, std::cout);
    } else if (eval->parsed()) {
      std::optional<std::string> log_in;
      if (!from_log.empty()) log_in = from_log;
      cli::cmd_eval(cfg, loop == "open" ? cli::Loop::kOpen : cli::Loop::kClosed, log_in, std::cout);
    } else if (render->parsed()) {
      request.overlays.clear();
      std::stringstream ss(overlays);
      std::string item;
      while (std::getline(ss, item, ',')) request.overlays.push_back(item);
      try {
        request.mode = plan::mode_from_string(mode);
      } catch (const std::invalid_argument & e) {
        throw config::ConfigError(e.what());
      }
      cli::cmd_render(cfg, request, std::cout);
    } else if (bench->parsed()) {
      const auto result = cli::cmd_bench(cfg, std::cout);
      if (!bench_json.empty()) {
        nlohmann::json j;
        j["cycles"] = result.cycles;
        j["candidates"] = result.candidates;
        j["samples"] = result.samples;
        j["median_ms"] = result.median_ms;
        j["p95_ms"] = result.p95_ms;
        j["cycle_ms"] = result.cycle_ms;
        std::ofstream(bench_json) << j.dump(2) << "\n";
      }
    }
  } catch (const config::ConfigError & e) {
    std::cerr << "config error: " << e.what() << "\n";
    return cli::kConfigError;
  } catch (const cli::OrderingError & e) {
    std::cerr << "ordering error: " << e.what() << "\n";
    return cli::kOrderingError;
  } catch (const cli::DataError & e) {
    std::cerr << "data error: " << e.what() << "\n";
    return cli::kDataError;
  } catch (const std::exception & e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kDataError;
  }
  return cli::kOk;
}
