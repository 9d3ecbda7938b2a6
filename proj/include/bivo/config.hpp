#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bivo/driver_sensor.hpp"
#include "bivo/occlusion_gen.hpp"
#include "bivo/planner.hpp"
#include "bivo/sim.hpp"

namespace bivo::config
{

class ConfigError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

struct RunConfig
{
  std::uint64_t seed{1};
  std::size_t workers{1};

  std::string data_dir{"data"};
  std::string checkpoint_dir{"checkpoints"};
  std::string log_dir{"logs"};
  std::string report_dir{"reports"};

  std::size_t train_scenes{300};
  std::size_t eval_scenes{200};
  double hidden_presence{1.0};

  ds::DriverSensorConfig ds;
  ds::DsTrainConfig ds_train;

  gen::GenConfig gen;
  gen::GenTrainConfig gen_train{150, 32, 3e-4, 1};
  bool train_cvae{true};

  plan::PlannerConfig planner;
  sim::ReplayConfig replay;

  std::size_t bench_cycles{30};

  bool operator==(const RunConfig & other) const;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Every key in a fixed order.
std::vector<std::string> keys();

/// Throws ConfigError for an unknown key or a malformed value.
void set(RunConfig & config, const std::string & key, const std::string & value);
std::string get(const RunConfig & config, const std::string & key);

/// `key = value` lines; `#` starts a comment. Throws ConfigError on a line without '='.
KeyValues parse_text(const std::string & text);
std::string to_text(const RunConfig & config);

/// Defaults, then the file (when non-empty), then the overrides. Throws ConfigError on a missing file,
/// an unknown key, a bad value or out-of-range settings.
RunConfig load(const std::string & path, const KeyValues & overrides);

/// Throws ConfigError when a field is out of range.
void validate(const RunConfig & config);

}  // namespace bivo::config
