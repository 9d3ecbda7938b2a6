#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace bivo::world
{

using AgentId = std::int64_t;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kDefaultDt = 0.5;
inline constexpr int kHorizonSteps = 10;

/// Wraps an angle into [-pi, pi).
double normalize_angle(double angle);

struct AgentState
{
  double x{0.0};
  double y{0.0};
  double heading{0.0};
  double speed{0.0};
  double accel{0.0};

  bool operator==(const AgentState &) const = default;
};

/// Normalizes heading and clamps negative speed to zero.
AgentState make_state(double x, double y, double heading, double speed, double accel = 0.0);

struct Pose2
{
  double x{0.0};
  double y{0.0};
  double heading{0.0};

  bool operator==(const Pose2 &) const = default;
};

inline Pose2 pose_of(const AgentState & s) { return {s.x, s.y, s.heading}; }

class Trajectory
{
public:
  Trajectory() = default;
  Trajectory(AgentId agent_id, int start_step, double dt, std::vector<AgentState> states);

  AgentId agent_id() const { return agent_id_; }
  int start_step() const { return start_step_; }
  /// One past the last step covered.
  int end_step() const { return start_step_ + static_cast<int>(states_.size()); }
  double dt() const { return dt_; }
  std::size_t size() const { return states_.size(); }
  bool empty() const { return states_.empty(); }
  bool covers(int step) const { return step >= start_step_ && step < end_step(); }
  const std::vector<AgentState> & states() const { return states_; }
  const AgentState & front() const { return states_.front(); }
  const AgentState & back() const { return states_.back(); }
  const AgentState & operator[](std::size_t i) const { return states_[i]; }

  /// Sub-trajectory covering [from, from + count). Throws std::out_of_range if not covered.
  Trajectory slice(int from, int count) const;

  bool operator==(const Trajectory &) const = default;

private:
  AgentId agent_id_{0};
  int start_step_{0};
  double dt_{kDefaultDt};
  std::vector<AgentState> states_;
};

/// Stored state at an absolute step; no interpolation.
const AgentState & state_at(const Trajectory & traj, int step);

enum class AgentClass { kVehicle, kPedestrian, kCyclist };

std::string to_string(AgentClass c);
AgentClass agent_class_from_string(const std::string & s);

struct Agent
{
  AgentId id{0};
  AgentClass agent_class{AgentClass::kVehicle};
  double length{4.5};
  double width{2.0};
  Trajectory trajectory;

  bool operator==(const Agent &) const = default;
};

struct LanePoint
{
  double x{0.0};
  double y{0.0};
  double heading{0.0};

  bool operator==(const LanePoint &) const = default;
};

struct Lane
{
  std::int64_t id{0};
  std::vector<LanePoint> centerline;
  std::vector<std::int64_t> successors;

  bool operator==(const Lane &) const = default;
};

/// Projection of a point onto a lane centerline.
struct LaneProjection
{
  std::size_t lane_index{0};
  double arc_length{0.0};
  /// Positive to the left of the lane direction.
  double lateral{0.0};
  double heading{0.0};
  double distance{0.0};
  double x{0.0};
  double y{0.0};
};

class LaneGraph
{
public:
  LaneGraph() = default;
  /// Throws std::invalid_argument when spacing exceeds 2 m or a successor id is unknown.
  explicit LaneGraph(std::vector<Lane> lanes);

  const std::vector<Lane> & lanes() const { return lanes_; }
  bool empty() const { return lanes_.empty(); }
  std::optional<std::size_t> index_of(std::int64_t lane_id) const;
  double lane_length(std::size_t lane_index) const;

  LaneProjection project(std::size_t lane_index, double x, double y) const;
  /// Nearest lane over all lanes; nullopt for an empty graph.
  std::optional<LaneProjection> nearest(double x, double y) const;
  /// Nearest lane whose direction is within 90 degrees of `heading`; falls back to nearest().
  std::optional<LaneProjection> nearest_aligned(double x, double y, double heading) const;
  /// Point and heading at an arc length along a lane (clamped to its ends).
  LanePoint point_at(std::size_t lane_index, double arc_length) const;

  bool operator==(const LaneGraph & o) const { return lanes_ == o.lanes_; }

private:
  std::vector<Lane> lanes_;
  std::vector<std::vector<double>> cumulative_;
};

using Polygon = std::vector<std::array<double, 2>>;

bool point_in_polygon(const Polygon & poly, double x, double y);

enum class RoadCell : std::uint8_t { kNonDrivable = 0, kDrivable = 1 };

/// Viewer-centred, viewer-aligned road layout raster at 1 m resolution.
struct RoadRaster
{
  Pose2 origin;
  int height{0};
  int width{0};
  std::vector<RoadCell> cells;

  RoadCell at(int row, int col) const { return cells[static_cast<std::size_t>(row * width + col)]; }
};

RoadRaster rasterize_road(const std::vector<Polygon> & drivable, const Pose2 & origin, int height, int width);

struct Scene
{
  std::string id;
  LaneGraph lane_graph;
  std::vector<Polygon> drivable_polygons;
  std::vector<Agent> agents;
  Agent ego;
  int duration_steps{0};

  const Agent * find_agent(AgentId id) const;
  /// Throws std::invalid_argument if ego id collides or a trajectory overruns the duration.
  void validate() const;

  bool operator==(const Scene &) const = default;
};

struct ControlLimits
{
  double max_accel{4.0};
  double min_accel{-8.0};
  double max_speed{20.0};
  double max_curvature{0.3};
};

AgentState to_ego_frame(const AgentState & state, const AgentState & ego);
AgentState from_ego_frame(const AgentState & local, const AgentState & ego);
AgentState to_frame(const AgentState & state, const Pose2 & frame);
AgentState from_frame(const AgentState & local, const Pose2 & frame);

/// Finite-difference accel, speed and discrete curvature checks at every step.
/// Throws std::invalid_argument for fewer than two states.
bool kinematically_feasible(const Trajectory & traj, const ControlLimits & limits);

}  // namespace bivo::world
