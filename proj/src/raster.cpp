#include "bivo/raster.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace bivo::raster
{

OccupancyGrid::OccupancyGrid(Pose2 center, int height, int width, double fill)
: center_(center), height_(height), width_(width)
{
  if (height <= 0 || width <= 0) {
    throw std::invalid_argument("grid dimensions must be positive");
  }
  values_.assign(static_cast<std::size_t>(height * width), fill);
}

std::optional<CellIndex> OccupancyGrid::cell_of_local(double u, double v) const
{
  const int col = static_cast<int>(std::floor(u)) + width_ / 2;
  const int row = static_cast<int>(std::floor(v)) + height_ / 2;
  if (!inside(row, col)) return std::nullopt;
  return CellIndex{row, col};
}

std::optional<CellIndex> OccupancyGrid::cell_of_world(double x, double y) const
{
  const double dx = x - center_.x;
  const double dy = y - center_.y;
  const double c = std::cos(center_.heading);
  const double s = std::sin(center_.heading);
  return cell_of_local(c * dx + s * dy, -s * dx + c * dy);
}

std::pair<double, double> OccupancyGrid::local_center(int row, int col) const
{
  return {col - width_ / 2 + 0.5, row - height_ / 2 + 0.5};
}

std::pair<double, double> OccupancyGrid::world_center(int row, int col) const
{
  const auto [u, v] = local_center(row, col);
  const double c = std::cos(center_.heading);
  const double s = std::sin(center_.heading);
  return {center_.x + c * u - s * v, center_.y + s * u + c * v};
}

namespace
{

using Pt = std::array<double, 2>;

// Sutherland-Hodgman clip against one axis-aligned half plane.
template <typename Inside, typename Intersect>
std::vector<Pt> clip(const std::vector<Pt> & poly, Inside inside, Intersect intersect)
{
  std::vector<Pt> out;
  out.reserve(poly.size() + 2);
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Pt & cur = poly[i];
    const Pt & prev = poly[(i + poly.size() - 1) % poly.size()];
    const bool cin = inside(cur);
    const bool pin = inside(prev);
    if (cin) {
      if (!pin) out.push_back(intersect(prev, cur));
      out.push_back(cur);
    } else if (pin) {
      out.push_back(intersect(prev, cur));
    }
  }
  return out;
}

double overlap_area(const std::vector<Pt> & poly, double x0, double y0, double x1, double y1)
{
  auto lerp_x = [](double xc) {
    return [xc](const Pt & a, const Pt & b) {
      const double t = (xc - a[0]) / (b[0] - a[0]);
      return Pt{xc, a[1] + t * (b[1] - a[1])};
    };
  };
  auto lerp_y = [](double yc) {
    return [yc](const Pt & a, const Pt & b) {
      const double t = (yc - a[1]) / (b[1] - a[1]);
      return Pt{a[0] + t * (b[0] - a[0]), yc};
    };
  };
  auto p = clip(poly, [x0](const Pt & q) { return q[0] >= x0; }, lerp_x(x0));
  if (p.empty()) return 0.0;
  p = clip(p, [x1](const Pt & q) { return q[0] <= x1; }, lerp_x(x1));
  if (p.empty()) return 0.0;
  p = clip(p, [y0](const Pt & q) { return q[1] >= y0; }, lerp_y(y0));
  if (p.empty()) return 0.0;
  p = clip(p, [y1](const Pt & q) { return q[1] <= y1; }, lerp_y(y1));
  if (p.size() < 3) return 0.0;
  double area = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Pt & a = p[i];
    const Pt & b = p[(i + 1) % p.size()];
    area += a[0] * b[1] - b[0] * a[1];
  }
  return std::abs(area) * 0.5;
}

std::vector<CellIndex> footprint_cells(const OccupancyGrid & grid, const AgentState & local, double length, double width)
{
  const double c = std::cos(local.heading);
  const double s = std::sin(local.heading);
  const double hl = length / 2.0;
  const double hw = width / 2.0;
  std::vector<Pt> rect;
  for (const auto & [a, b] : std::array<std::pair<double, double>, 4>{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}}) {
    rect.push_back({local.x + c * a - s * b, local.y + s * a + c * b});
  }
  double umin = rect[0][0], umax = rect[0][0], vmin = rect[0][1], vmax = rect[0][1];
  for (const auto & p : rect) {
    umin = std::min(umin, p[0]);
    umax = std::max(umax, p[0]);
    vmin = std::min(vmin, p[1]);
    vmax = std::max(vmax, p[1]);
  }
  const int c0 = std::max(0, static_cast<int>(std::floor(umin)) + grid.width() / 2);
  const int c1 = std::min(grid.width() - 1, static_cast<int>(std::floor(umax)) + grid.width() / 2);
  const int r0 = std::max(0, static_cast<int>(std::floor(vmin)) + grid.height() / 2);
  const int r1 = std::min(grid.height() - 1, static_cast<int>(std::floor(vmax)) + grid.height() / 2);
  std::vector<CellIndex> out;
  for (int row = r0; row <= r1; ++row) {
    const double y0 = row - grid.height() / 2;
    for (int col = c0; col <= c1; ++col) {
      const double x0 = col - grid.width() / 2;
      if (overlap_area(rect, x0, y0, x0 + 1.0, y0 + 1.0) > 1e-9) out.push_back({row, col});
    }
  }
  return out;
}

void stamp_footprint(OccupancyGrid & grid, const AgentState & local, double length, double width)
{
  for (const auto & cell : footprint_cells(grid, local, length, width)) grid.at(cell.row, cell.col) = kOccupied;
}

}  // namespace

OccupancyGrid rasterize_scene(
  const Scene & scene, int step, const AgentState & frame, int height, int width,
  std::optional<world::AgentId> exclude_id)
{
  const Pose2 pose = world::pose_of(frame);
  OccupancyGrid grid(pose, height, width, kFree);
  auto stamp = [&](const Agent & a) {
    if (exclude_id && a.id == *exclude_id) return;
    if (!a.trajectory.covers(step)) return;
    const auto local = world::to_frame(world::state_at(a.trajectory, step), pose);
    stamp_footprint(grid, local, a.length, a.width);
  };
  stamp(scene.ego);
  for (const auto & a : scene.agents) stamp(a);
  return grid;
}

VisibilityMask visibility_mask(const OccupancyGrid & binary, CellIndex viewer, double substep)
{
  const int H = binary.height();
  const int W = binary.width();
  if (!binary.inside(viewer.row, viewer.col)) {
    throw std::out_of_range("viewer cell outside grid");
  }
  VisibilityMask mask{H, W, std::vector<std::uint8_t>(static_cast<std::size_t>(H * W), 0)};
  auto mark = [&](int r, int c) { mask.visible[static_cast<std::size_t>(r * W + c)] = 1; };
  mark(viewer.row, viewer.col);

  const double ar = viewer.row + 0.5;
  const double ac = viewer.col + 0.5;

  auto cast = [&](int br, int bc) {
    const int dr = br - viewer.row;
    const int dc = bc - viewer.col;
    if (dr == 0 && dc == 0) return;
    const int adr = std::abs(dr);
    const int adc = std::abs(dc);
    const int sr = dr > 0 ? 1 : -1;
    const int sc = dc > 0 ? 1 : -1;
    const double length = std::hypot(static_cast<double>(dr), static_cast<double>(dc));
    const long n_samples = substep > 0.0 ? static_cast<long>(std::floor(length / substep)) : 0;

    // Does any ray sample fall inside cell (r, c) whose chord spans [t_in, t_out]?
    auto sampled = [&](int r, int c, double t_in, double t_out) {
      if (substep <= 0.0) return t_out > t_in;
      const double scale = length / substep;
      long k0 = static_cast<long>(std::ceil(t_in * scale)) - 1;
      const long k1 = std::min(n_samples, static_cast<long>(std::floor(t_out * scale)) + 1);
      for (long k = std::max(1L, k0); k <= k1; ++k) {
        const double s = static_cast<double>(k) * substep / length;
        const int sr_cell = static_cast<int>(std::floor(ar + dr * s));
        const int sc_cell = static_cast<int>(std::floor(ac + dc * s));
        if (sr_cell == r && sc_cell == c) return true;
      }
      return false;
    };

    int r = viewer.row;
    int c = viewer.col;
    long i = 0;  // column crossings taken
    long j = 0;  // row crossings taken
    double t_in = 0.0;
    while (r != br || c != bc) {
      // Crossing parameters compared exactly in integers: (2i+1)/(2|dc|) vs (2j+1)/(2|dr|).
      const long lhs = adc ? (2 * i + 1) * static_cast<long>(adr) : -1;
      const long rhs = adr ? (2 * j + 1) * static_cast<long>(adc) : -1;
      double t_cross;
      if (adc && adr && lhs == rhs) {
        t_cross = static_cast<double>(2 * i + 1) / (2.0 * adc);
        c += sc;
        r += sr;
        ++i;
        ++j;
      } else if (adc && (!adr || lhs < rhs)) {
        t_cross = static_cast<double>(2 * i + 1) / (2.0 * adc);
        c += sc;
        ++i;
      } else {
        t_cross = static_cast<double>(2 * j + 1) / (2.0 * adr);
        r += sr;
        ++j;
      }
      t_in = t_cross;
      double t_out = 2.0;
      if (adc) t_out = std::min(t_out, static_cast<double>(2 * i + 1) / (2.0 * adc));
      if (adr) t_out = std::min(t_out, static_cast<double>(2 * j + 1) / (2.0 * adr));
      if (!sampled(r, c, t_in, t_out)) continue;
      mark(r, c);
      if (binary.at(r, c) >= kOccupied) break;
    }
  };

  for (int col = 0; col < W; ++col) {
    cast(0, col);
    if (H > 1) cast(H - 1, col);
  }
  for (int row = 1; row + 1 < H; ++row) {
    cast(row, 0);
    if (W > 1) cast(row, W - 1);
  }
  return mask;
}

OccupancyGrid build_observed_ogm(
  const Scene & scene, int step, const AgentState & viewer_state, world::AgentId viewer_id, int height,
  int width)
{
  OccupancyGrid grid = rasterize_scene(scene, step, viewer_state, height, width, viewer_id);
  const auto mask = visibility_mask(grid, grid.viewer_cell());
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      if (!mask.at(r, c)) grid.at(r, c) = kOccluded;
    }
  }
  return grid;
}

OccupancyGrid build_observed_ogm(const Scene & scene, int step, const Agent & viewer, int height, int width)
{
  return build_observed_ogm(
    scene, step, world::state_at(viewer.trajectory, step), viewer.id, height, width);
}

OccupancyGrid build_ground_truth_ogm(const Scene & scene, int step, const Agent & viewer, int height, int width)
{
  return rasterize_scene(scene, step, world::state_at(viewer.trajectory, step), height, width, viewer.id);
}

bool is_occluded(const OccupancyGrid & observed, double x, double y)
{
  const auto cell = observed.cell_of_world(x, y);
  return cell && observed.at(*cell) == kOccluded;
}

bool agent_hidden(const OccupancyGrid & observed, const Agent & agent, int step)
{
  if (!agent.trajectory.covers(step)) return false;
  const auto local = world::to_frame(world::state_at(agent.trajectory, step), observed.center_pose());
  const auto cells = footprint_cells(observed, local, agent.length, agent.width);
  if (cells.empty()) return false;
  return std::none_of(cells.begin(), cells.end(), [&](const CellIndex & c) { return observed.at(c) == kOccupied; });
}

std::vector<OccludedSample> extract_occluded_samples(
  const Scene & scene, int height, int width, int horizon_steps)
{
  std::vector<OccludedSample> out;
  const auto & ego_traj = scene.ego.trajectory;
  for (int t = ego_traj.start_step(); t + horizon_steps < ego_traj.end_step(); ++t) {
    std::optional<OccupancyGrid> observed;
    const auto & ego_state = world::state_at(ego_traj, t);
    for (const auto & agent : scene.agents) {
      const auto & traj = agent.trajectory;
      if (!traj.covers(t) || !traj.covers(t + horizon_steps)) continue;
      if (!observed) observed = build_observed_ogm(scene, t, scene.ego, height, width);
      if (!agent_hidden(*observed, agent, t)) continue;
      const auto segment = traj.slice(t, horizon_steps + 1);
      std::vector<AgentState> local;
      local.reserve(segment.size());
      for (const auto & st : segment.states()) local.push_back(world::to_ego_frame(st, ego_state));
      OccludedSample sample;
      sample.agent_id = agent.id;
      sample.step = t;
      sample.trajectory = world::Trajectory(agent.id, t, traj.dt(), std::move(local));
      sample.road_raster = world::rasterize_road(scene.drivable_polygons, world::pose_of(ego_state), height, width);
      sample.observed_grid = *observed;
      out.push_back(std::move(sample));
    }
  }
  return out;
}

std::uint8_t pixel_value(double cell)
{
  if (cell == kOccluded) return 128;
  return static_cast<std::uint8_t>(std::lround(std::clamp(cell, 0.0, 1.0) * 255.0));
}

std::string encode_pgm(const OccupancyGrid & grid)
{
  std::string out = "P5\n" + std::to_string(grid.width()) + " " + std::to_string(grid.height()) + "\n255\n";
  // Top image row is the leftmost grid row so forward points right.
  for (int r = grid.height() - 1; r >= 0; --r) {
    for (int c = 0; c < grid.width(); ++c) {
      out.push_back(static_cast<char>(pixel_value(grid.at(r, c))));
    }
  }
  return out;
}

void write_pgm(const std::string & path, const OccupancyGrid & grid)
{
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  const auto data = encode_pgm(grid);
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
}

}  // namespace bivo::raster
