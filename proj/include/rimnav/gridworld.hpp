#ifndef RIMNAV_GRIDWORLD_HPP_
#define RIMNAV_GRIDWORLD_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rimnav/rng.hpp"

namespace rimnav {

using json = nlohmann::json;

/// Raised when a structure that should be valid by construction is not.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Integer codes follow the common embodied-navigation convention so that the
// look_up/look_down codes (4, 5) stay free in stored files.
enum class Action : int { Stop = 0, MoveForward = 1, TurnLeft = 2, TurnRight = 3 };

inline constexpr int kNumActions = 4;
inline constexpr int kNumHeadings = 4;

inline const char* action_name(Action a) {
  switch (a) {
    case Action::Stop: return "stop";
    case Action::MoveForward: return "move_forward";
    case Action::TurnLeft: return "turn_left";
    case Action::TurnRight: return "turn_right";
  }
  return "?";
}

inline Action action_from_code(int code) {
  if (code < 0 || code >= kNumActions) {
    throw std::invalid_argument("unsupported action code " + std::to_string(code));
  }
  return static_cast<Action>(code);
}

inline int action_code(Action a) { return static_cast<int>(a); }

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
  friend auto operator<=>(const Cell&, const Cell&) = default;
};

/// Heading h points along (kHeadingDx[h], kHeadingDy[h]); TurnLeft is h+1.
inline constexpr std::array<int, 4> kHeadingDx{1, 0, -1, 0};
inline constexpr std::array<int, 4> kHeadingDy{0, 1, 0, -1};
inline constexpr std::array<double, 4> kHeadingSin{0.0, 1.0, 0.0, -1.0};
inline constexpr std::array<double, 4> kHeadingCos{1.0, 0.0, -1.0, 0.0};

struct Pose {
  int x = 0;
  int y = 0;
  int heading = 0;
  Cell cell() const { return {x, y}; }
  friend bool operator==(const Pose&, const Pose&) = default;
};

struct ObjectInstance {
  int category = 0;
  Cell cell;
  friend bool operator==(const ObjectInstance&, const ObjectInstance&) = default;
};

struct WorldConfig {
  int width = 12;
  int height = 12;
  int rooms = 3;
  int objects_per_category = 1;
  int categories = 6;
  int min_room = 2;
  int max_retries = 64;
  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

struct SensorConfig {
  int rays = 32;
  double hfov_deg = 90.0;
  double max_range = 10.0;
  friend bool operator==(const SensorConfig&, const SensorConfig&) = default;
};

struct SuccessConfig {
  int radius = 2;
  bool strict_heading = false;
  friend bool operator==(const SuccessConfig&, const SuccessConfig&) = default;
};

struct SimConfig {
  WorldConfig world;
  SensorConfig sensor;
  SuccessConfig success;
  int budget = 500;
  friend bool operator==(const SimConfig&, const SimConfig&) = default;
};

inline void to_json(json& j, const WorldConfig& c) {
  j = json{{"width", c.width},     {"height", c.height},
           {"rooms", c.rooms},     {"objects_per_category", c.objects_per_category},
           {"categories", c.categories}, {"min_room", c.min_room},
           {"max_retries", c.max_retries}};
}
inline void from_json(const json& j, WorldConfig& c) {
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  c.rooms = j.value("rooms", c.rooms);
  c.objects_per_category = j.value("objects_per_category", c.objects_per_category);
  c.categories = j.value("categories", c.categories);
  c.min_room = j.value("min_room", c.min_room);
  c.max_retries = j.value("max_retries", c.max_retries);
}
inline void to_json(json& j, const SensorConfig& c) {
  j = json{{"rays", c.rays}, {"hfov_deg", c.hfov_deg}, {"max_range", c.max_range}};
}
inline void from_json(const json& j, SensorConfig& c) {
  c.rays = j.value("rays", c.rays);
  c.hfov_deg = j.value("hfov_deg", c.hfov_deg);
  c.max_range = j.value("max_range", c.max_range);
}
inline void to_json(json& j, const SuccessConfig& c) {
  j = json{{"radius", c.radius}, {"strict_heading", c.strict_heading}};
}
inline void from_json(const json& j, SuccessConfig& c) {
  c.radius = j.value("radius", c.radius);
  c.strict_heading = j.value("strict_heading", c.strict_heading);
}
inline void to_json(json& j, const SimConfig& c) {
  j = json{{"world", c.world}, {"sensor", c.sensor}, {"success", c.success}, {"budget", c.budget}};
}
inline void from_json(const json& j, SimConfig& c) {
  if (j.contains("world")) c.world = j.at("world").get<WorldConfig>();
  if (j.contains("sensor")) c.sensor = j.at("sensor").get<SensorConfig>();
  if (j.contains("success")) c.success = j.at("success").get<SuccessConfig>();
  c.budget = j.value("budget", c.budget);
}

class GridWorld {
 public:
  GridWorld(int width, int height, std::vector<uint8_t> occupancy, std::vector<ObjectInstance> objects,
            uint64_t seed, WorldConfig config)
      : width_(width),
        height_(height),
        occupancy_(std::move(occupancy)),
        objects_(std::move(objects)),
        seed_(seed),
        config_(config),
        object_at_(static_cast<size_t>(width) * height, -1) {
    if (width < 3 || height < 3 || occupancy_.size() != static_cast<size_t>(width) * height) {
      throw std::invalid_argument("grid dimensions do not match occupancy data");
    }
    for (const auto& o : objects_) {
      if (!in_bounds(o.cell)) throw std::invalid_argument("object outside grid");
      object_at_[index(o.cell)] = o.category;
    }
  }

  int width() const { return width_; }
  int height() const { return height_; }
  uint64_t seed() const { return seed_; }
  const WorldConfig& config() const { return config_; }
  int categories() const { return config_.categories; }
  const std::vector<uint8_t>& occupancy() const { return occupancy_; }
  const std::vector<ObjectInstance>& objects() const { return objects_; }

  bool in_bounds(Cell c) const { return c.x >= 0 && c.y >= 0 && c.x < width_ && c.y < height_; }
  size_t index(Cell c) const { return static_cast<size_t>(c.y) * width_ + c.x; }
  bool is_wall(Cell c) const { return !in_bounds(c) || occupancy_[index(c)] != 0; }
  /// Category of the object on `c`, or -1.
  int object_at(Cell c) const { return in_bounds(c) ? object_at_[index(c)] : -1; }
  /// Walls and objects block both movement and rays.
  bool is_blocked(Cell c) const { return is_wall(c) || object_at(c) >= 0; }
  bool is_traversable(Cell c) const { return !is_blocked(c); }

  std::vector<Cell> instances_of(int category) const {
    std::vector<Cell> out;
    for (const auto& o : objects_)
      if (o.category == category) out.push_back(o.cell);
    return out;
  }

  std::vector<Cell> traversable_cells() const {
    std::vector<Cell> out;
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x)
        if (is_traversable({x, y})) out.push_back({x, y});
    return out;
  }

  /// Throws InvariantViolation describing the first broken invariant.
  void validate() const;

  friend bool operator==(const GridWorld& a, const GridWorld& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.occupancy_ == b.occupancy_ &&
           a.objects_ == b.objects_ && a.seed_ == b.seed_ && a.config_ == b.config_;
  }

 private:
  int width_;
  int height_;
  std::vector<uint8_t> occupancy_;
  std::vector<ObjectInstance> objects_;
  uint64_t seed_;
  WorldConfig config_;
  std::vector<int> object_at_;
};

inline void GridWorld::validate() const {
  for (int x = 0; x < width_; ++x) {
    if (!is_wall({x, 0}) || !is_wall({x, height_ - 1})) throw InvariantViolation("border cell is not a wall");
  }
  for (int y = 0; y < height_; ++y) {
    if (!is_wall({0, y}) || !is_wall({width_ - 1, y})) throw InvariantViolation("border cell is not a wall");
  }
  std::vector<uint8_t> used(occupancy_.size(), 0);
  for (const auto& o : objects_) {
    if (o.category < 0 || o.category >= config_.categories) throw InvariantViolation("object category out of range");
    if (is_wall(o.cell)) throw InvariantViolation("object placed on a wall cell");
    if (used[index(o.cell)]++) throw InvariantViolation("two objects share a cell");
    bool reachable = false;
    for (int h = 0; h < kNumHeadings; ++h) {
      reachable |= is_traversable({o.cell.x + kHeadingDx[h], o.cell.y + kHeadingDy[h]});
    }
    if (!reachable) throw InvariantViolation("object has no traversable neighbour");
  }
  // Free space (walls excluded, objects included) and the traversable subset
  // must each form one 4-connected component.
  std::vector<uint8_t> seen(occupancy_.size(), 0);
  auto components = [&](auto&& pred) {
    std::fill(seen.begin(), seen.end(), 0);
    int n = 0;
    for (int y = 0; y < height_; ++y) {
      for (int x = 0; x < width_; ++x) {
        if (!pred(Cell{x, y}) || seen[index({x, y})]) continue;
        ++n;
        std::deque<Cell> q{Cell{x, y}};
        seen[index({x, y})] = 1;
        while (!q.empty()) {
          const Cell c = q.front();
          q.pop_front();
          for (int h = 0; h < kNumHeadings; ++h) {
            const Cell nb{c.x + kHeadingDx[h], c.y + kHeadingDy[h]};
            if (in_bounds(nb) && pred(nb) && !seen[index(nb)]) {
              seen[index(nb)] = 1;
              q.push_back(nb);
            }
          }
        }
      }
    }
    return n;
  };
  if (components([&](Cell c) { return !is_wall(c); }) != 1) throw InvariantViolation("free space is not connected");
  if (components([&](Cell c) { return is_traversable(c); }) != 1) {
    throw InvariantViolation("traversable space is not connected");
  }
}

/// Recursive room partitioning with one door per partition wall, followed by
/// rejection-sampled object placement. Deterministic in (seed, config).
inline GridWorld generate_world(uint64_t seed, const WorldConfig& cfg) {
  if (cfg.width < 3 || cfg.height < 3) throw std::invalid_argument("world must be at least 3x3");
  if (cfg.categories < 1) throw std::invalid_argument("world needs at least one category");
  if (cfg.rooms < 1) throw std::invalid_argument("world needs at least one room");
  const int w = cfg.width;
  const int h = cfg.height;
  std::string last_failure = "no attempt made";
  for (int attempt = 0; attempt < std::max(1, cfg.max_retries); ++attempt) {
    Rng rng(derive_seed(seed, {0x776f726cULL, static_cast<uint64_t>(attempt)}));
    std::vector<uint8_t> occ(static_cast<size_t>(w) * h, 0);
    auto at = [&](int x, int y) -> uint8_t& { return occ[static_cast<size_t>(y) * w + x]; };
    for (int x = 0; x < w; ++x) at(x, 0) = at(x, h - 1) = 1;
    for (int y = 0; y < h; ++y) at(0, y) = at(w - 1, y) = 1;

    struct Room {
      int x0, y0, x1, y1;  // inclusive interior bounds
      int area() const { return (x1 - x0 + 1) * (y1 - y0 + 1); }
    };
    std::vector<Room> rooms{{1, 1, w - 2, h - 2}};
    const int min_room = std::max(1, cfg.min_room);
    while (static_cast<int>(rooms.size()) < cfg.rooms) {
      // Split the largest room that admits a wall leaving min_room on each side.
      std::vector<size_t> order(rooms.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(),
                       [&](size_t a, size_t b) { return rooms[a].area() > rooms[b].area(); });
      bool split = false;
      for (size_t idx : order) {
        const Room r = rooms[idx];
        const int rw = r.x1 - r.x0 + 1;
        const int rh = r.y1 - r.y0 + 1;
        bool vertical;
        if (rw == rh) {
          vertical = rng.uniform_index(2) == 0;
        } else {
          vertical = rw > rh;
        }
        for (int orient = 0; orient < 2 && !split; ++orient, vertical = !vertical) {
          std::vector<int> candidates;
          if (vertical) {
            for (int x = r.x0 + min_room; x <= r.x1 - min_room; ++x) {
              // A wall ending next to an existing door would seal it.
              if (at(x, r.y0 - 1) == 0 || at(x, r.y1 + 1) == 0) continue;
              candidates.push_back(x);
            }
          } else {
            for (int y = r.y0 + min_room; y <= r.y1 - min_room; ++y) {
              if (at(r.x0 - 1, y) == 0 || at(r.x1 + 1, y) == 0) continue;
              candidates.push_back(y);
            }
          }
          if (candidates.empty()) continue;
          const int line = candidates[rng.uniform_index(candidates.size())];
          if (vertical) {
            for (int y = r.y0; y <= r.y1; ++y) at(line, y) = 1;
            at(line, static_cast<int>(rng.uniform_int(r.y0, r.y1))) = 0;
            rooms[idx] = {r.x0, r.y0, line - 1, r.y1};
            rooms.push_back({line + 1, r.y0, r.x1, r.y1});
          } else {
            for (int x = r.x0; x <= r.x1; ++x) at(x, line) = 1;
            at(static_cast<int>(rng.uniform_int(r.x0, r.x1)), line) = 0;
            rooms[idx] = {r.x0, r.y0, r.x1, line - 1};
            rooms.push_back({r.x0, line + 1, r.x1, r.y1});
          }
          split = true;
        }
        if (split) break;
      }
      if (!split) break;
    }

    std::vector<ObjectInstance> objects;
    GridWorld probe(w, h, occ, {}, seed, cfg);
    std::vector<Cell> free_cells;
    for (int y = 1; y < h - 1; ++y)
      for (int x = 1; x < w - 1; ++x)
        if (at(x, y) == 0) free_cells.push_back({x, y});
    const int wanted = cfg.objects_per_category * cfg.categories;
    if (wanted >= static_cast<int>(free_cells.size())) {
      throw std::invalid_argument("world of " + std::to_string(free_cells.size()) + " free cells cannot host " +
                                  std::to_string(wanted) + " objects");
    }
    bool placed_all = true;
    for (int c = 0; c < cfg.categories && placed_all; ++c) {
      for (int k = 0; k < cfg.objects_per_category && placed_all; ++k) {
        bool placed = false;
        for (int tries = 0; tries < 256 && !placed; ++tries) {
          const Cell cell = free_cells[rng.uniform_index(free_cells.size())];
          if (probe.object_at(cell) >= 0) continue;
          auto candidate = objects;
          candidate.push_back({c, cell});
          GridWorld trial(w, h, occ, candidate, seed, cfg);
          try {
            trial.validate();
          } catch (const InvariantViolation&) {
            continue;
          }
          objects = std::move(candidate);
          probe = std::move(trial);
          placed = true;
        }
        if (!placed) {
          placed_all = false;
          last_failure = "could not place object of category " + std::to_string(c) + " without disconnecting";
        }
      }
    }
    if (!placed_all) continue;
    GridWorld world(w, h, std::move(occ), std::move(objects), seed, cfg);
    world.validate();
    return world;
  }
  throw std::runtime_error("world generation failed after " + std::to_string(cfg.max_retries) +
                           " attempts: " + last_failure);
}

// ---------------------------------------------------------------------------
// Sensing

/// Angle of ray i (radians, counter-clockwise from +x). Rays are spread over
/// the field of view at half-step offsets, so an odd ray count has one ray
/// exactly on the heading.
inline double ray_angle(const SensorConfig& s, int heading, int i) {
  const double hfov = s.hfov_deg * std::numbers::pi / 180.0;
  return heading * (std::numbers::pi / 2.0) + hfov * ((i + 0.5) / s.rays - 0.5);
}

/// Amanatides-Woo traversal from the centre of `origin`. `visit(cell, dist)` is
/// called for each entered cell, where dist is the ray length to the cell's
/// boundary plus half a cell (axis-aligned rays thus report centre-to-centre
/// distance). When the ray crosses a lattice corner exactly, both side cells are
/// visited before the diagonal one. Traversal stops when visit returns true or
/// dist reaches max_dist.
template <typename Visitor>
void trace_ray(Cell origin, double angle, double max_dist, Visitor&& visit) {
  const double dx = std::cos(angle);
  const double dy = std::sin(angle);
  const int step_x = dx > 0 ? 1 : (dx < 0 ? -1 : 0);
  const int step_y = dy > 0 ? 1 : (dy < 0 ? -1 : 0);
  const double inf = std::numeric_limits<double>::infinity();
  double t_max_x = step_x != 0 ? 0.5 / std::abs(dx) : inf;
  double t_max_y = step_y != 0 ? 0.5 / std::abs(dy) : inf;
  const double t_delta_x = step_x != 0 ? 1.0 / std::abs(dx) : inf;
  const double t_delta_y = step_y != 0 ? 1.0 / std::abs(dy) : inf;
  int cx = origin.x;
  int cy = origin.y;
  while (true) {
    double t;
    if (t_max_x < t_max_y) {
      t = t_max_x;
      if (t + 0.5 >= max_dist) return;
      cx += step_x;
      t_max_x += t_delta_x;
    } else if (t_max_y < t_max_x) {
      t = t_max_y;
      if (t + 0.5 >= max_dist) return;
      cy += step_y;
      t_max_y += t_delta_y;
    } else {
      t = t_max_x;
      if (t + 0.5 >= max_dist) return;
      if (visit(Cell{cx + step_x, cy}, t + 0.5)) return;
      if (visit(Cell{cx, cy + step_y}, t + 0.5)) return;
      cx += step_x;
      cy += step_y;
      t_max_x += t_delta_x;
      t_max_y += t_delta_y;
    }
    if (visit(Cell{cx, cy}, t + 0.5)) return;
  }
}

struct RaycastResult {
  std::vector<double> depth;          // normalized to [0, 1]
  std::vector<int> semantic;          // class per ray, categories then wall
  std::vector<std::optional<Cell>> hit_cells;
};

inline RaycastResult raycast(const GridWorld& world, const Pose& pose, const SensorConfig& sensor) {
  RaycastResult r;
  r.depth.assign(sensor.rays, 1.0);
  r.semantic.assign(sensor.rays, world.categories());
  r.hit_cells.assign(sensor.rays, std::nullopt);
  for (int i = 0; i < sensor.rays; ++i) {
    trace_ray(pose.cell(), ray_angle(sensor, pose.heading, i), sensor.max_range, [&](Cell c, double dist) {
      if (!world.is_blocked(c)) return false;
      r.depth[i] = std::min(dist, sensor.max_range) / sensor.max_range;
      const int obj = world.object_at(c);
      r.semantic[i] = obj >= 0 ? obj : world.categories();
      r.hit_cells[i] = c;
      return true;
    });
  }
  return r;
}

struct Observation {
  std::vector<double> depth;
  std::vector<int> semantic;
  int num_classes = 0;  // categories + 1 (wall)
  std::array<double, 4> rel_pose{0.0, 0.0, 0.0, 1.0};
  std::optional<Action> prev_action;
  int goal_category = 0;
  int step_index = 0;

  /// R x (C+1) one-hot rows, flattened row-major.
  std::vector<double> semantic_one_hot() const {
    std::vector<double> out(semantic.size() * num_classes, 0.0);
    for (size_t i = 0; i < semantic.size(); ++i) out[i * num_classes + semantic[i]] = 1.0;
    return out;
  }
};

/// Displacement and heading change of `pose` expressed in the start pose frame.
inline std::array<double, 4> relative_pose(const Pose& start, const Pose& pose) {
  const int wx = pose.x - start.x;
  const int wy = pose.y - start.y;
  const int h0 = start.heading;
  // Rotate world displacement by -h0 quarter turns.
  const int ex = static_cast<int>(kHeadingCos[h0]) * wx + static_cast<int>(kHeadingSin[h0]) * wy;
  const int ey = -static_cast<int>(kHeadingSin[h0]) * wx + static_cast<int>(kHeadingCos[h0]) * wy;
  const int dh = ((pose.heading - h0) % kNumHeadings + kNumHeadings) % kNumHeadings;
  return {static_cast<double>(ex), static_cast<double>(ey), kHeadingSin[dh], kHeadingCos[dh]};
}

inline Observation make_observation(const GridWorld& world, const SensorConfig& sensor, const Pose& start,
                                    const Pose& pose, std::optional<Action> prev, int goal, int t) {
  auto rc = raycast(world, pose, sensor);
  Observation o;
  o.depth = std::move(rc.depth);
  o.semantic = std::move(rc.semantic);
  o.num_classes = world.categories() + 1;
  o.rel_pose = relative_pose(start, pose);
  o.prev_action = prev;
  o.goal_category = goal;
  o.step_index = t;
  return o;
}

// ---------------------------------------------------------------------------
// Dynamics and distances

struct Transition {
  Pose pose;
  bool collided = false;
};

inline Transition apply_action(const GridWorld& world, const Pose& pose, Action action) {
  Transition tr{pose, false};
  switch (action) {
    case Action::MoveForward: {
      const Cell target{pose.x + kHeadingDx[pose.heading], pose.y + kHeadingDy[pose.heading]};
      if (world.is_traversable(target)) {
        tr.pose.x = target.x;
        tr.pose.y = target.y;
      } else {
        tr.collided = true;
      }
      break;
    }
    case Action::TurnLeft: tr.pose.heading = (pose.heading + 1) % kNumHeadings; break;
    case Action::TurnRight: tr.pose.heading = (pose.heading + kNumHeadings - 1) % kNumHeadings; break;
    case Action::Stop: break;
  }
  return tr;
}

/// BFS distances from `source` over traversable cells. Blocked object cells get
/// a distance when reached (they can be a path's endpoint) but are not
/// expanded. Unreached cells hold -1.
inline std::vector<int> distance_field(const GridWorld& world, Cell source) {
  std::vector<int> dist(static_cast<size_t>(world.width()) * world.height(), -1);
  if (!world.in_bounds(source) || world.is_wall(source)) return dist;
  std::deque<Cell> q{source};
  dist[world.index(source)] = 0;
  while (!q.empty()) {
    const Cell c = q.front();
    q.pop_front();
    if (c != source && world.object_at(c) >= 0) continue;
    for (int h = 0; h < kNumHeadings; ++h) {
      const Cell n{c.x + kHeadingDx[h], c.y + kHeadingDy[h]};
      if (!world.in_bounds(n) || world.is_wall(n) || dist[world.index(n)] >= 0) continue;
      dist[world.index(n)] = dist[world.index(c)] + 1;
      q.push_back(n);
    }
  }
  return dist;
}

/// Shortest 4-connected path length from `from` to the nearest cell of `to`.
/// Throws InvariantViolation when no target is reachable.
inline double geodesic_distance(const GridWorld& world, Cell from, const std::vector<Cell>& to) {
  if (to.empty()) throw std::invalid_argument("geodesic_distance needs at least one target");
  const auto dist = distance_field(world, from);
  int best = -1;
  for (const Cell& c : to) {
    if (!world.in_bounds(c)) continue;
    const int d = dist[world.index(c)];
    if (d >= 0 && (best < 0 || d < best)) best = d;
  }
  if (best < 0) throw InvariantViolation("target unreachable in a world that should be connected");
  return static_cast<double>(best);
}

/// True if some ray cast from `cell` with heading `heading` (or any heading
/// when heading < 0) first hits `target`.
inline bool target_visible(const GridWorld& world, Cell cell, Cell target, const SensorConfig& sensor,
                           int heading = -1) {
  for (int h = 0; h < kNumHeadings; ++h) {
    if (heading >= 0 && h != heading) continue;
    const auto rc = raycast(world, {cell.x, cell.y, h}, sensor);
    for (const auto& hit : rc.hit_cells)
      if (hit && *hit == target) return true;
  }
  return false;
}

inline bool is_success(const GridWorld& world, const Pose& pose, int goal_category, const SensorConfig& sensor,
                       const SuccessConfig& success) {
  const auto goals = world.instances_of(goal_category);
  if (goals.empty() || !world.is_traversable(pose.cell())) return false;
  const auto dist = distance_field(world, pose.cell());
  for (const Cell& g : goals) {
    const int d = dist[world.index(g)];
    if (d < 0 || d > success.radius) continue;
    if (target_visible(world, pose.cell(), g, sensor, success.strict_heading ? pose.heading : -1)) return true;
  }
  return false;
}

/// Traversable cells from which a Stop succeeds under some heading.
inline std::vector<Cell> success_cells(const GridWorld& world, int goal_category, const SensorConfig& sensor,
                                       const SuccessConfig& success) {
  std::vector<uint8_t> eligible(static_cast<size_t>(world.width()) * world.height(), 0);
  for (const Cell& g : world.instances_of(goal_category)) {
    const auto dist = distance_field(world, g);
    for (int y = 0; y < world.height(); ++y) {
      for (int x = 0; x < world.width(); ++x) {
        const Cell c{x, y};
        const int d = dist[world.index(c)];
        if (d < 0 || d > success.radius || !world.is_traversable(c) || eligible[world.index(c)]) continue;
        if (target_visible(world, c, g, sensor)) eligible[world.index(c)] = 1;
      }
    }
  }
  std::vector<Cell> out;
  for (int y = 0; y < world.height(); ++y)
    for (int x = 0; x < world.width(); ++x)
      if (eligible[world.index({x, y})]) out.push_back({x, y});
  return out;
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeSpec {
  uint64_t world_seed = 0;
  std::shared_ptr<const GridWorld> inline_world;  // set when the world is not regenerable from a seed
  Pose start;
  int goal_category = 0;
  int budget = 500;
};

inline bool operator==(const EpisodeSpec& a, const EpisodeSpec& b) {
  const bool worlds_equal = (!a.inline_world && !b.inline_world) ||
                            (a.inline_world && b.inline_world && *a.inline_world == *b.inline_world);
  return a.world_seed == b.world_seed && worlds_equal && a.start == b.start &&
         a.goal_category == b.goal_category && a.budget == b.budget;
}

/// The world an episode runs in: its inline world, or a regeneration from seed.
inline GridWorld resolve_world(const EpisodeSpec& spec, const WorldConfig& cfg) {
  if (spec.inline_world) return *spec.inline_world;
  return generate_world(spec.world_seed, cfg);
}

inline void validate_episode(const GridWorld& world, const EpisodeSpec& spec, const SimConfig& cfg) {
  if (world.instances_of(spec.goal_category).empty()) {
    throw std::invalid_argument("goal category " + std::to_string(spec.goal_category) + " is absent from the world");
  }
  if (!world.is_traversable(spec.start.cell()) || spec.start.heading < 0 || spec.start.heading >= kNumHeadings) {
    throw std::invalid_argument("start pose is not a valid traversable pose");
  }
  if (spec.budget <= 0) throw std::invalid_argument("episode budget must be positive");
  if (is_success(world, spec.start, spec.goal_category, cfg.sensor, cfg.success)) {
    throw std::invalid_argument("start pose already satisfies the success criterion");
  }
  const auto goals = success_cells(world, spec.goal_category, cfg.sensor, cfg.success);
  if (goals.empty()) throw std::invalid_argument("goal has no success-eligible cell");
  if (geodesic_distance(world, spec.start.cell(), goals) <= 0.0) {
    throw std::invalid_argument("start cell is success-eligible");
  }
}

/// Samples a valid episode (goal category present, start not a success cell).
inline EpisodeSpec sample_episode(const GridWorld& world, uint64_t sample_seed, const SimConfig& cfg) {
  Rng rng(sample_seed);
  std::vector<int> present;
  for (int c = 0; c < world.categories(); ++c)
    if (!world.instances_of(c).empty()) present.push_back(c);
  if (present.empty()) throw std::invalid_argument("world has no objects");
  const auto cells = world.traversable_cells();
  for (int attempt = 0; attempt < 256; ++attempt) {
    EpisodeSpec spec;
    spec.world_seed = world.seed();
    spec.goal_category = present[rng.uniform_index(present.size())];
    const Cell c = cells[rng.uniform_index(cells.size())];
    spec.start = {c.x, c.y, static_cast<int>(rng.uniform_index(kNumHeadings))};
    spec.budget = cfg.budget;
    const auto eligible = success_cells(world, spec.goal_category, cfg.sensor, cfg.success);
    if (eligible.empty()) continue;
    if (std::find(eligible.begin(), eligible.end(), c) != eligible.end()) continue;
    if (is_success(world, spec.start, spec.goal_category, cfg.sensor, cfg.success)) continue;
    return spec;
  }
  throw std::runtime_error("could not sample a valid episode");
}

struct StepResult {
  Observation observation;
  bool collided = false;
  bool done = false;
  bool success = false;
};

/// Single-owner episode state over a shared immutable world.
class Episode {
 public:
  Episode(const GridWorld& world, EpisodeSpec spec, SimConfig cfg)
      : world_(&world), spec_(std::move(spec)), cfg_(std::move(cfg)), pose_(spec_.start) {
    validate_episode(world, spec_, cfg_);
    obs_ = make_observation(*world_, cfg_.sensor, spec_.start, pose_, std::nullopt, spec_.goal_category, 0);
  }

  const Observation& observation() const { return obs_; }
  const Pose& pose() const { return pose_; }
  const EpisodeSpec& spec() const { return spec_; }
  const SimConfig& config() const { return cfg_; }
  const GridWorld& world() const { return *world_; }
  int t() const { return t_; }
  bool done() const { return done_; }
  bool success() const { return success_; }

  /// Pose and collision flag `action` would produce, without committing it.
  Transition peek(Action action) const { return apply_action(*world_, pose_, action); }

  StepResult step(Action action) {
    if (done_) throw std::logic_error("episode already finished");
    const Transition tr = apply_action(*world_, pose_, action);
    pose_ = tr.pose;
    ++t_;
    StepResult r;
    r.collided = tr.collided;
    if (action == Action::Stop) {
      done_ = true;
      success_ = is_success(*world_, pose_, spec_.goal_category, cfg_.sensor, cfg_.success);
    } else if (t_ >= spec_.budget) {
      done_ = true;
    }
    r.done = done_;
    r.success = success_;
    obs_ = make_observation(*world_, cfg_.sensor, spec_.start, pose_, action, spec_.goal_category,
                            std::min(t_, spec_.budget - 1));
    r.observation = obs_;
    return r;
  }

 private:
  const GridWorld* world_;
  EpisodeSpec spec_;
  SimConfig cfg_;
  Pose pose_;
  Observation obs_;
  int t_ = 0;
  bool done_ = false;
  bool success_ = false;
};

// ---------------------------------------------------------------------------
// World files

inline constexpr int kWorldFileVersion = 1;

inline json world_to_json(const GridWorld& w) {
  json objs = json::array();
  for (const auto& o : w.objects()) objs.push_back({{"category", o.category}, {"x", o.cell.x}, {"y", o.cell.y}});
  json occ = json::array();
  for (uint8_t v : w.occupancy()) occ.push_back(static_cast<int>(v));
  return json{{"version", kWorldFileVersion}, {"seed", w.seed()},       {"config", w.config()},
              {"width", w.width()},          {"height", w.height()},   {"occupancy", occ},
              {"objects", objs}};
}

inline GridWorld world_from_json(const json& j) {
  if (j.value("version", -1) != kWorldFileVersion) throw std::runtime_error("unsupported world file version");
  const int width = j.at("width").get<int>();
  const int height = j.at("height").get<int>();
  std::vector<uint8_t> occ;
  for (const auto& v : j.at("occupancy")) {
    const int b = v.get<int>();
    if (b != 0 && b != 1) throw std::runtime_error("occupancy entries must be 0 or 1");
    occ.push_back(static_cast<uint8_t>(b));
  }
  std::vector<ObjectInstance> objects;
  for (const auto& o : j.at("objects")) {
    objects.push_back({o.at("category").get<int>(), {o.at("x").get<int>(), o.at("y").get<int>()}});
  }
  GridWorld w(width, height, std::move(occ), std::move(objects), j.at("seed").get<uint64_t>(),
              j.at("config").get<WorldConfig>());
  w.validate();
  return w;
}

}  // namespace rimnav

#endif  // RIMNAV_GRIDWORLD_HPP_
