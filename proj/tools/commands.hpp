#pragma once

#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bivo/config.hpp"
#include "bivo/sim.hpp"

namespace bivo::cli
{

enum ExitCode : int
{
  kOk = 0,
  kConfigError = 2,
  kDataError = 3,
  kOrderingError = 4,
};

class DataError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

class OrderingError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

enum class Split
{
  kTrain,
  kEval,
  kBoth,
};

std::string split_dir(const config::RunConfig & config, const std::string & split);
std::string checkpoint_path(const config::RunConfig & config, const std::string & name);

/// Writes scene files plus manifest.json per split. Throws DataError on an unwritable path.
void cmd_gen_data(const config::RunConfig & config, Split split, std::ostream & log);

/// Scenes listed in a split's manifest. Throws DataError when missing or malformed.
std::vector<world::Scene> load_split(const config::RunConfig & config, const std::string & split);

enum class Stage
{
  kDriverSensor,
  kGenerator,
};

/// Trains a stage and writes its checkpoint and per-step loss CSV. The generator stage also trains the
/// raw-occlusion CVAE baseline when enabled. Throws OrderingError without the driver-sensor
/// checkpoint, DataError on unusable data.
void cmd_train(const config::RunConfig & config, Stage stage, bool resume, std::ostream & log);

enum class Loop
{
  kOpen,
  kClosed,
};

/// Replays the eval split (or re-reads `from_log`) and writes the run-log and report.
/// Throws OrderingError when a mode's checkpoint is missing.
sim::Report cmd_eval(
  const config::RunConfig & config, Loop loop, const std::optional<std::string> & from_log, std::ostream & log);

struct RenderRequest
{
  std::string scene_path;
  int step{0};
  std::vector<std::string> overlays{"ogm"};
  std::string out_prefix{"render"};
  plan::PlannerMode mode{plan::PlannerMode::kBiVO};
};

/// Returns the written files. Unknown overlays are config errors.
std::vector<std::string> cmd_render(const config::RunConfig & config, const RenderRequest & request, std::ostream & log);

struct BenchResult
{
  std::size_t cycles{0};
  std::size_t candidates{0};
  std::size_t samples{0};
  double median_ms{0.0};
  double p95_ms{0.0};
  std::vector<double> cycle_ms;
};

/// Times plan() on an occlusion scene. Untrained models stand in for missing checkpoints.
BenchResult cmd_bench(const config::RunConfig & config, std::ostream & log);

}  // namespace bivo::cli
