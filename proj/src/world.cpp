#include "bivo/world.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace bivo::world
{

double normalize_angle(double angle)
{
  constexpr double two_pi = 2.0 * kPi;
  double r = angle - two_pi * std::floor((angle + kPi) / two_pi);
  if (r >= kPi) {
    r -= two_pi;
  }
  if (r < -kPi) {
    r = -kPi;
  }
  return r;
}

AgentState make_state(double x, double y, double heading, double speed, double accel)
{
  return {x, y, normalize_angle(heading), std::max(0.0, speed), accel};
}

Trajectory::Trajectory(AgentId agent_id, int start_step, double dt, std::vector<AgentState> states)
: agent_id_(agent_id), start_step_(start_step), dt_(dt), states_(std::move(states))
{
  if (!(dt_ > 0.0)) {
    throw std::invalid_argument("trajectory dt must be positive");
  }
  if (states_.empty()) {
    throw std::invalid_argument("trajectory needs at least one state");
  }
}

Trajectory Trajectory::slice(int from, int count) const
{
  if (count < 1 || !covers(from) || !covers(from + count - 1)) {
    throw std::out_of_range("trajectory slice outside covered steps");
  }
  const auto first = states_.begin() + (from - start_step_);
  return {agent_id_, from, dt_, std::vector<AgentState>(first, first + count)};
}

const AgentState & state_at(const Trajectory & traj, int step)
{
  if (!traj.covers(step)) {
    throw std::out_of_range(
      "step " + std::to_string(step) + " outside trajectory [" + std::to_string(traj.start_step()) +
      ", " + std::to_string(traj.end_step()) + ")");
  }
  return traj[static_cast<std::size_t>(step - traj.start_step())];
}

std::string to_string(AgentClass c)
{
  switch (c) {
    case AgentClass::kVehicle:
      return "vehicle";
    case AgentClass::kPedestrian:
      return "pedestrian";
    case AgentClass::kCyclist:
      return "cyclist";
  }
  return "vehicle";
}

AgentClass agent_class_from_string(const std::string & s)
{
  if (s == "vehicle") return AgentClass::kVehicle;
  if (s == "pedestrian") return AgentClass::kPedestrian;
  if (s == "cyclist") return AgentClass::kCyclist;
  throw std::invalid_argument("unknown agent class '" + s + "'");
}

// ---------------------------------------------------------------------------
// Lane graph

LaneGraph::LaneGraph(std::vector<Lane> lanes) : lanes_(std::move(lanes))
{
  std::unordered_set<std::int64_t> ids;
  for (const auto & lane : lanes_) {
    if (lane.centerline.empty()) {
      throw std::invalid_argument("lane " + std::to_string(lane.id) + " has no centerline");
    }
    if (!ids.insert(lane.id).second) {
      throw std::invalid_argument("duplicate lane id " + std::to_string(lane.id));
    }
  }
  cumulative_.reserve(lanes_.size());
  for (const auto & lane : lanes_) {
    for (const auto succ : lane.successors) {
      if (!ids.count(succ)) {
        throw std::invalid_argument(
          "lane " + std::to_string(lane.id) + " references unknown successor " + std::to_string(succ));
      }
    }
    std::vector<double> cum{0.0};
    for (std::size_t i = 1; i < lane.centerline.size(); ++i) {
      const double d = std::hypot(
        lane.centerline[i].x - lane.centerline[i - 1].x, lane.centerline[i].y - lane.centerline[i - 1].y);
      if (d > 2.0 + 1e-9) {
        throw std::invalid_argument("lane " + std::to_string(lane.id) + " centerline spacing exceeds 2 m");
      }
      cum.push_back(cum.back() + d);
    }
    cumulative_.push_back(std::move(cum));
  }
}

std::optional<std::size_t> LaneGraph::index_of(std::int64_t lane_id) const
{
  for (std::size_t i = 0; i < lanes_.size(); ++i) {
    if (lanes_[i].id == lane_id) return i;
  }
  return std::nullopt;
}

double LaneGraph::lane_length(std::size_t lane_index) const { return cumulative_.at(lane_index).back(); }

LaneProjection LaneGraph::project(std::size_t lane_index, double x, double y) const
{
  const auto & pts = lanes_.at(lane_index).centerline;
  const auto & cum = cumulative_[lane_index];
  LaneProjection best;
  best.lane_index = lane_index;
  best.distance = std::numeric_limits<double>::infinity();
  if (pts.size() == 1) {
    const double dx = x - pts[0].x;
    const double dy = y - pts[0].y;
    const double h = pts[0].heading;
    best.distance = std::hypot(dx, dy);
    best.lateral = -std::sin(h) * dx + std::cos(h) * dy;
    best.heading = h;
    best.x = pts[0].x;
    best.y = pts[0].y;
    return best;
  }
  // Squared distances in the scan; the winner's geometry is filled in once.
  double best_d2 = std::numeric_limits<double>::infinity();
  std::size_t best_i = 0;
  double best_u = 0.0;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const double ax = pts[i].x;
    const double ay = pts[i].y;
    const double sx = pts[i + 1].x - ax;
    const double sy = pts[i + 1].y - ay;
    const double len2 = sx * sx + sy * sy;
    double u = len2 > 0.0 ? ((x - ax) * sx + (y - ay) * sy) / len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    const double dx = x - (ax + u * sx);
    const double dy = y - (ay + u * sy);
    const double d2 = dx * dx + dy * dy;
    if (d2 < best_d2) {
      best_d2 = d2;
      best_i = i;
      best_u = u;
    }
  }
  const auto & a = pts[best_i];
  const auto & b = pts[best_i + 1];
  const double sx = b.x - a.x;
  const double sy = b.y - a.y;
  const double seg_len = std::hypot(sx, sy);
  best.x = a.x + best_u * sx;
  best.y = a.y + best_u * sy;
  best.distance = std::hypot(x - best.x, y - best.y);
  best.arc_length = cum[best_i] + best_u * seg_len;
  best.lateral = seg_len > 0.0 ? (sx * (y - a.y) - sy * (x - a.x)) / seg_len : 0.0;
  best.heading = normalize_angle(a.heading + best_u * normalize_angle(b.heading - a.heading));
  return best;
}

std::optional<LaneProjection> LaneGraph::nearest(double x, double y) const
{
  std::optional<LaneProjection> best;
  for (std::size_t i = 0; i < lanes_.size(); ++i) {
    auto p = project(i, x, y);
    if (!best || p.distance < best->distance) best = p;
  }
  return best;
}

std::optional<LaneProjection> LaneGraph::nearest_aligned(double x, double y, double heading) const
{
  std::optional<LaneProjection> best;
  for (std::size_t i = 0; i < lanes_.size(); ++i) {
    auto p = project(i, x, y);
    if (std::abs(normalize_angle(p.heading - heading)) >= kPi / 2.0) continue;
    if (!best || p.distance < best->distance) best = p;
  }
  return best ? best : nearest(x, y);
}

LanePoint LaneGraph::point_at(std::size_t lane_index, double arc_length) const
{
  const auto & pts = lanes_.at(lane_index).centerline;
  const auto & cum = cumulative_[lane_index];
  if (pts.size() == 1 || arc_length <= 0.0) return pts.front();
  if (arc_length >= cum.back()) return pts.back();
  const auto it = std::upper_bound(cum.begin(), cum.end(), arc_length);
  const std::size_t i = static_cast<std::size_t>(it - cum.begin()) - 1;
  const double seg = cum[i + 1] - cum[i];
  const double u = seg > 0.0 ? (arc_length - cum[i]) / seg : 0.0;
  const double dh = normalize_angle(pts[i + 1].heading - pts[i].heading);
  return {
    pts[i].x + u * (pts[i + 1].x - pts[i].x), pts[i].y + u * (pts[i + 1].y - pts[i].y),
    normalize_angle(pts[i].heading + u * dh)};
}

// ---------------------------------------------------------------------------
// Road raster

bool point_in_polygon(const Polygon & poly, double x, double y)
{
  bool inside = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const double xi = poly[i][0], yi = poly[i][1];
    const double xj = poly[j][0], yj = poly[j][1];
    if ((yi > y) != (yj > y)) {
      const double cross_x = xi + (y - yi) * (xj - xi) / (yj - yi);
      if (x < cross_x) inside = !inside;
    }
  }
  return inside;
}

RoadRaster rasterize_road(const std::vector<Polygon> & drivable, const Pose2 & origin, int height, int width)
{
  if (height <= 0 || width <= 0) {
    throw std::invalid_argument("road raster dimensions must be positive");
  }
  RoadRaster r{origin, height, width, std::vector<RoadCell>(static_cast<std::size_t>(height * width))};
  const double c = std::cos(origin.heading);
  const double s = std::sin(origin.heading);
  for (int row = 0; row < height; ++row) {
    const double v = row - height / 2 + 0.5;
    for (int col = 0; col < width; ++col) {
      const double u = col - width / 2 + 0.5;
      const double wx = origin.x + c * u - s * v;
      const double wy = origin.y + s * u + c * v;
      for (const auto & poly : drivable) {
        if (point_in_polygon(poly, wx, wy)) {
          r.cells[static_cast<std::size_t>(row * width + col)] = RoadCell::kDrivable;
          break;
        }
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Scene

const Agent * Scene::find_agent(AgentId id) const
{
  if (ego.id == id) return &ego;
  for (const auto & a : agents) {
    if (a.id == id) return &a;
  }
  return nullptr;
}

void Scene::validate() const
{
  std::unordered_set<AgentId> ids{ego.id};
  auto check = [&](const Agent & a) {
    if (!(a.length > 0.0 && a.width > 0.0)) {
      throw std::invalid_argument("agent " + std::to_string(a.id) + " has a non-positive footprint");
    }
    if (a.trajectory.start_step() < 0 || a.trajectory.end_step() > duration_steps) {
      throw std::invalid_argument("agent " + std::to_string(a.id) + " trajectory exceeds scene duration");
    }
  };
  check(ego);
  for (const auto & a : agents) {
    if (!ids.insert(a.id).second) {
      throw std::invalid_argument("duplicate agent id " + std::to_string(a.id));
    }
    check(a);
  }
}

// ---------------------------------------------------------------------------
// Frames and feasibility

AgentState to_frame(const AgentState & state, const Pose2 & frame)
{
  const double dx = state.x - frame.x;
  const double dy = state.y - frame.y;
  const double c = std::cos(frame.heading);
  const double s = std::sin(frame.heading);
  return {c * dx + s * dy, -s * dx + c * dy, normalize_angle(state.heading - frame.heading), state.speed,
          state.accel};
}

AgentState from_frame(const AgentState & local, const Pose2 & frame)
{
  const double c = std::cos(frame.heading);
  const double s = std::sin(frame.heading);
  return {frame.x + c * local.x - s * local.y, frame.y + s * local.x + c * local.y,
          normalize_angle(local.heading + frame.heading), local.speed, local.accel};
}

AgentState to_ego_frame(const AgentState & state, const AgentState & ego) { return to_frame(state, pose_of(ego)); }

AgentState from_ego_frame(const AgentState & local, const AgentState & ego)
{
  return from_frame(local, pose_of(ego));
}

bool kinematically_feasible(const Trajectory & traj, const ControlLimits & limits)
{
  if (traj.size() < 2) {
    throw std::invalid_argument("feasibility check needs at least two states");
  }
  constexpr double slack = 1e-9;
  const double dt = traj.dt();
  const auto & st = traj.states();
  if (st[0].speed > limits.max_speed + slack) return false;
  for (std::size_t k = 1; k < st.size(); ++k) {
    if (st[k].speed > limits.max_speed + slack) return false;
    const double accel = (st[k].speed - st[k - 1].speed) / dt;
    if (accel > limits.max_accel + slack || accel < limits.min_accel - slack) return false;
    const double arc = std::hypot(st[k].x - st[k - 1].x, st[k].y - st[k - 1].y);
    const double dh = std::abs(normalize_angle(st[k].heading - st[k - 1].heading));
    if (arc < 1e-6) {
      if (dh > 1e-9) return false;
      continue;
    }
    if (dh / arc > limits.max_curvature + slack) return false;
  }
  return true;
}

}  // namespace bivo::world
