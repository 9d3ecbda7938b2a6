#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bivo/world.hpp"

namespace bivo::raster
{

using world::Agent;
using world::AgentState;
using world::Pose2;
using world::Scene;

inline constexpr double kOccupied = 1.0;
inline constexpr double kFree = 0.0;
inline constexpr double kOccluded = 0.5;

inline constexpr int kEgoGridSize = 120;
inline constexpr int kAgentGridSize = 30;
/// Ray sample spacing in cells.
inline constexpr double kRaySubstep = 0.1;

struct CellIndex
{
  int row{0};
  int col{0};

  bool operator==(const CellIndex &) const = default;
};

/// Viewer-centred grid at 1 m resolution, axis-aligned with the viewer heading.
/// Cell (row, col) covers forward u in [col - W/2, col - W/2 + 1) and
/// left v in [row - H/2, row - H/2 + 1) of the viewer frame.
class OccupancyGrid
{
public:
  OccupancyGrid() = default;
  OccupancyGrid(Pose2 center, int height, int width, double fill = kFree);

  const Pose2 & center_pose() const { return center_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t cell_count() const { return values_.size(); }

  double at(int row, int col) const { return values_[index(row, col)]; }
  double & at(int row, int col) { return values_[index(row, col)]; }
  double at(CellIndex c) const { return at(c.row, c.col); }
  const std::vector<double> & values() const { return values_; }
  std::vector<double> & values() { return values_; }

  bool inside(int row, int col) const { return row >= 0 && row < height_ && col >= 0 && col < width_; }
  CellIndex viewer_cell() const { return {height_ / 2, width_ / 2}; }

  /// Cell containing a point given in the viewer frame.
  std::optional<CellIndex> cell_of_local(double u, double v) const;
  /// Cell containing a world point.
  std::optional<CellIndex> cell_of_world(double x, double y) const;
  /// Cell centre in the viewer frame.
  std::pair<double, double> local_center(int row, int col) const;
  std::pair<double, double> world_center(int row, int col) const;

  bool operator==(const OccupancyGrid &) const = default;

private:
  std::size_t index(int row, int col) const { return static_cast<std::size_t>(row * width_ + col); }

  Pose2 center_;
  int height_{0};
  int width_{0};
  std::vector<double> values_;
};

struct VisibilityMask
{
  int height{0};
  int width{0};
  std::vector<std::uint8_t> visible;

  bool at(int row, int col) const { return visible[static_cast<std::size_t>(row * width + col)] != 0; }
};

/// Binary occupancy of every agent footprint except `exclude_id` at `step`, in the frame of `frame`.
OccupancyGrid rasterize_scene(
  const Scene & scene, int step, const AgentState & frame, int height, int width,
  std::optional<world::AgentId> exclude_id = std::nullopt);

/// Line-of-sight mask: one ray from the viewer cell to every boundary cell. The ray walks exact
/// grid crossings; with `substep` > 0 a crossed cell counts only if one of the ray samples spaced
/// `substep` cells apart lands inside it. The first occupied cell on a ray is visible and ends it.
VisibilityMask visibility_mask(const OccupancyGrid & binary, CellIndex viewer_cell, double substep = kRaySubstep);

/// Visible occupied -> 1, visible free -> 0, not visible -> 0.5.
OccupancyGrid build_observed_ogm(const Scene & scene, int step, const Agent & viewer, int height, int width);
/// Same as above for an explicit viewer pose (closed-loop ego).
OccupancyGrid build_observed_ogm(
  const Scene & scene, int step, const AgentState & viewer_state, world::AgentId viewer_id, int height,
  int width);

OccupancyGrid build_ground_truth_ogm(const Scene & scene, int step, const Agent & viewer, int height, int width);

/// True when the point lies in an occluded cell of `observed`; points outside the grid are not.
bool is_occluded(const OccupancyGrid & observed, double x, double y);

/// True when no cell of the agent's footprint is observed occupied. Agents entirely outside the
/// grid, or absent at `step`, are not hidden.
bool agent_hidden(const OccupancyGrid & observed, const Agent & agent, int step);

struct OccludedSample
{
  world::AgentId agent_id{0};
  int step{0};
  /// Future segment in the ego frame at `step`, horizon_steps + 1 states.
  world::Trajectory trajectory;
  world::RoadRaster road_raster;
  OccupancyGrid observed_grid;
  /// Filled once the driver-sensor fusion has run.
  OccupancyGrid fused_grid;
};

std::vector<OccludedSample> extract_occluded_samples(
  const Scene & scene, int height, int width, int horizon_steps);

/// Binary PGM (P5): 0 free, 128 occluded, 255 occupied; intermediate probabilities scale linearly.
std::string encode_pgm(const OccupancyGrid & grid);
void write_pgm(const std::string & path, const OccupancyGrid & grid);
std::uint8_t pixel_value(double cell);

}  // namespace bivo::raster
