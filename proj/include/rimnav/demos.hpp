#ifndef RIMNAV_DEMOS_HPP_
#define RIMNAV_DEMOS_HPP_

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <queue>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "rimnav/gridworld.hpp"

namespace rimnav {

enum class DemoSource { OracleShortest, OracleExplore, Human, Rollout };

inline const char* source_name(DemoSource s) {
  switch (s) {
    case DemoSource::OracleShortest: return "oracle_shortest";
    case DemoSource::OracleExplore: return "oracle_explore";
    case DemoSource::Human: return "human";
    case DemoSource::Rollout: return "rollout";
  }
  return "?";
}

inline DemoSource source_from_name(const std::string& s) {
  if (s == "oracle_shortest") return DemoSource::OracleShortest;
  if (s == "oracle_explore") return DemoSource::OracleExplore;
  if (s == "human") return DemoSource::Human;
  if (s == "rollout") return DemoSource::Rollout;
  throw std::invalid_argument("unknown demo source '" + s + "'");
}

struct Demonstration {
  EpisodeSpec episode;
  std::vector<Action> actions;
  std::vector<Pose> poses;  // poses.size() == actions.size() + 1
  DemoSource source = DemoSource::OracleShortest;
  bool success = false;
  friend bool operator==(const Demonstration&, const Demonstration&) = default;
};

/// Number of steps whose action differs from its predecessor; step 0 counts.
inline int inflection_count(const std::vector<Action>& actions) {
  int n = 0;
  for (size_t t = 0; t < actions.size(); ++t)
    if (t == 0 || actions[t] != actions[t - 1]) ++n;
  return n;
}

struct Replay {
  std::vector<Pose> poses;
  bool success = false;
  bool terminated = false;
};

/// Re-executes `actions` in the simulator. Throws if an action follows the end
/// of the episode.
inline Replay replay_actions(const GridWorld& world, const EpisodeSpec& spec, const SimConfig& cfg,
                             const std::vector<Action>& actions) {
  Episode ep(world, spec, cfg);
  Replay r;
  r.poses.push_back(ep.pose());
  for (Action a : actions) {
    if (ep.done()) throw std::invalid_argument("action recorded after the episode ended");
    ep.step(a);
    r.poses.push_back(ep.pose());
  }
  r.success = ep.success();
  r.terminated = ep.done();
  return r;
}

/// Actions that turn from `heading` to face `dir`; 180 degree turns go left.
inline std::vector<Action> turns_to_face(int heading, int dir) {
  const int diff = ((dir - heading) % kNumHeadings + kNumHeadings) % kNumHeadings;
  if (diff == 1) return {Action::TurnLeft};
  if (diff == 2) return {Action::TurnLeft, Action::TurnLeft};
  if (diff == 3) return {Action::TurnRight};
  return {};
}

/// Shortest plan from `pose` to the nearest success position, ending in Stop.
/// Minimizes forward moves first (the geodesic length) and turns second.
/// Expansion order TurnLeft, TurnRight, MoveForward with FIFO tie-breaking
/// makes the plan deterministic and resolves 180 degree turns to the left.
inline std::vector<Action> shortest_path_plan(const GridWorld& world, const Pose& pose, int goal,
                                              const SimConfig& cfg) {
  const auto eligible = success_cells(world, goal, cfg.sensor, cfg.success);
  std::vector<uint8_t> target(static_cast<size_t>(world.width()) * world.height() * kNumHeadings, 0);
  auto sidx = [&](Cell c, int h) { return world.index(c) * kNumHeadings + h; };
  for (const Cell& c : eligible) {
    for (int h = 0; h < kNumHeadings; ++h) {
      if (!cfg.success.strict_heading || is_success(world, {c.x, c.y, h}, goal, cfg.sensor, cfg.success)) {
        target[sidx(c, h)] = 1;
      }
    }
  }
  constexpr int64_t kForwardCost = 1 << 20;
  const size_t n = target.size();
  std::vector<int64_t> cost(n, INT64_MAX);
  std::vector<int64_t> parent(n, -1);
  std::vector<Action> via(n, Action::Stop);
  using Item = std::tuple<int64_t, uint64_t, size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  uint64_t counter = 0;
  const size_t s0 = sidx(pose.cell(), pose.heading);
  cost[s0] = 0;
  pq.push({0, counter++, s0});
  int64_t found = -1;
  while (!pq.empty()) {
    auto [c, order, s] = pq.top();
    pq.pop();
    if (c != cost[s]) continue;
    if (target[s]) {
      found = static_cast<int64_t>(s);
      break;
    }
    const int h = static_cast<int>(s % kNumHeadings);
    const size_t ci = s / kNumHeadings;
    const Pose p{static_cast<int>(ci % world.width()), static_cast<int>(ci / world.width()), h};
    for (Action a : {Action::TurnLeft, Action::TurnRight, Action::MoveForward}) {
      const Transition tr = apply_action(world, p, a);
      if (tr.collided) continue;
      const size_t ns = sidx(tr.pose.cell(), tr.pose.heading);
      const int64_t nc = c + (a == Action::MoveForward ? kForwardCost : 1);
      if (nc < cost[ns]) {
        cost[ns] = nc;
        parent[ns] = static_cast<int64_t>(s);
        via[ns] = a;
        pq.push({nc, counter++, ns});
      }
    }
  }
  if (found < 0) throw std::runtime_error("no reachable success position");
  std::vector<Action> plan;
  for (int64_t s = found; s != static_cast<int64_t>(s0); s = parent[s]) plan.push_back(via[s]);
  std::reverse(plan.begin(), plan.end());
  plan.push_back(Action::Stop);
  return plan;
}

inline Demonstration shortest_path_demo(const GridWorld& world, const EpisodeSpec& spec, const SimConfig& cfg) {
  Demonstration d;
  d.episode = spec;
  d.source = DemoSource::OracleShortest;
  d.actions = shortest_path_plan(world, spec.start, spec.goal_category, cfg);
  if (static_cast<int>(d.actions.size()) > spec.budget) d.actions.resize(spec.budget);
  const auto r = replay_actions(world, spec, cfg, d.actions);
  d.poses = r.poses;
  d.success = r.success;
  return d;
}

/// Frontier exploration over the agent's own sensed map until a goal instance
/// appears in a ray, then the shortest plan to success.
inline Demonstration explore_then_go_demo(const GridWorld& world, const EpisodeSpec& spec, const SimConfig& cfg,
                                          uint64_t rng_seed) {
  Rng rng(rng_seed);
  const size_t ncells = static_cast<size_t>(world.width()) * world.height();
  std::vector<int8_t> known(ncells, -1);  // -1 unknown, 0 free, 1 blocked
  Demonstration d;
  d.episode = spec;
  d.source = DemoSource::OracleExplore;
  Pose pose = spec.start;
  known[world.index(pose.cell())] = 0;
  std::optional<Cell> target;

  auto sense = [&](const Pose& p) {
    bool goal_seen = false;
    for (int i = 0; i < cfg.sensor.rays; ++i) {
      trace_ray(p.cell(), ray_angle(cfg.sensor, p.heading, i), cfg.sensor.max_range, [&](Cell c, double) {
        if (world.is_blocked(c)) {
          known[world.index(c)] = 1;
          goal_seen |= world.object_at(c) == spec.goal_category;
          return true;
        }
        known[world.index(c)] = 0;
        return false;
      });
    }
    return goal_seen;
  };
  auto is_frontier = [&](Cell c) {
    if (known[world.index(c)] != 0) return false;
    for (int h = 0; h < kNumHeadings; ++h) {
      const Cell n{c.x + kHeadingDx[h], c.y + kHeadingDy[h]};
      if (world.in_bounds(n) && known[world.index(n)] < 0) return true;
    }
    return false;
  };

  bool goal_seen = false;
  while (static_cast<int>(d.actions.size()) < spec.budget) {
    goal_seen = sense(pose);
    if (goal_seen) break;
    // BFS over known-free cells from the current cell.
    std::vector<int> dist(ncells, -1);
    std::vector<int> par(ncells, -1);
    std::deque<Cell> q{pose.cell()};
    dist[world.index(pose.cell())] = 0;
    std::vector<Cell> order;
    while (!q.empty()) {
      const Cell c = q.front();
      q.pop_front();
      order.push_back(c);
      for (int h = 0; h < kNumHeadings; ++h) {
        const Cell n{c.x + kHeadingDx[h], c.y + kHeadingDy[h]};
        if (!world.in_bounds(n) || known[world.index(n)] != 0 || dist[world.index(n)] >= 0) continue;
        dist[world.index(n)] = dist[world.index(c)] + 1;
        par[world.index(n)] = static_cast<int>(world.index(c));
        q.push_back(n);
      }
    }
    if (!target || !is_frontier(*target) || dist[world.index(*target)] < 0 || *target == pose.cell()) {
      target.reset();
      int best = -1;
      std::vector<Cell> nearest;
      for (const Cell& c : order) {
        if (c == pose.cell() || !is_frontier(c)) continue;
        const int dc = dist[world.index(c)];
        if (best < 0 || dc < best) {
          best = dc;
          nearest.clear();
        }
        if (dc == best) nearest.push_back(c);
      }
      if (nearest.empty()) {
        // Only the current cell borders unknown space: look around in place.
        if (is_frontier(pose.cell())) {
          d.actions.push_back(Action::TurnLeft);
          pose = apply_action(world, pose, Action::TurnLeft).pose;
          continue;
        }
        break;
      }
      target = nearest[rng.uniform_index(nearest.size())];
    }
    // First step along the BFS path toward the target.
    size_t cur = world.index(*target);
    while (par[cur] >= 0 && static_cast<size_t>(par[cur]) != world.index(pose.cell())) cur = par[cur];
    const Cell next{static_cast<int>(cur % world.width()), static_cast<int>(cur / world.width())};
    int dir = 0;
    for (int h = 0; h < kNumHeadings; ++h)
      if (pose.x + kHeadingDx[h] == next.x && pose.y + kHeadingDy[h] == next.y) dir = h;
    const auto turns = turns_to_face(pose.heading, dir);
    const Action a = turns.empty() ? Action::MoveForward : turns.front();
    d.actions.push_back(a);
    pose = apply_action(world, pose, a).pose;
  }
  if (goal_seen) {
    auto plan = shortest_path_plan(world, pose, spec.goal_category, cfg);
    d.actions.insert(d.actions.end(), plan.begin(), plan.end());
  } else if (static_cast<int>(d.actions.size()) < spec.budget) {
    d.actions.push_back(Action::Stop);
  }
  if (static_cast<int>(d.actions.size()) > spec.budget) d.actions.resize(spec.budget);
  const auto r = replay_actions(world, spec, cfg, d.actions);
  d.poses = r.poses;
  d.success = r.success;
  return d;
}

// ---------------------------------------------------------------------------
// Generation

struct DemoGenConfig {
  int num_worlds = 50;
  int episodes_per_world = 4;
  uint64_t world_seed_base = 0;
  uint64_t seed = 1;
  double explore_ratio = 0.5;
  bool include_failed = false;
};

inline void to_json(json& j, const DemoGenConfig& c) {
  j = json{{"num_worlds", c.num_worlds},       {"episodes_per_world", c.episodes_per_world},
           {"world_seed_base", c.world_seed_base}, {"seed", c.seed},
           {"explore_ratio", c.explore_ratio}, {"include_failed", c.include_failed}};
}
inline void from_json(const json& j, DemoGenConfig& c) {
  c.num_worlds = j.value("num_worlds", c.num_worlds);
  c.episodes_per_world = j.value("episodes_per_world", c.episodes_per_world);
  c.world_seed_base = j.value("world_seed_base", c.world_seed_base);
  c.seed = j.value("seed", c.seed);
  c.explore_ratio = j.value("explore_ratio", c.explore_ratio);
  c.include_failed = j.value("include_failed", c.include_failed);
}

inline std::vector<Demonstration> generate_demos(const SimConfig& sim, const DemoGenConfig& gen) {
  std::vector<Demonstration> out;
  for (int i = 0; i < gen.num_worlds; ++i) {
    const uint64_t world_seed = gen.world_seed_base + static_cast<uint64_t>(i);
    const GridWorld world = generate_world(world_seed, sim.world);
    for (int e = 0; e < gen.episodes_per_world; ++e) {
      const uint64_t ep_seed = derive_seed(gen.seed, {world_seed, static_cast<uint64_t>(e)});
      const EpisodeSpec spec = sample_episode(world, ep_seed, sim);
      Rng pick(derive_seed(ep_seed, {0x6d6978ULL}));
      Demonstration d = pick.uniform() < gen.explore_ratio
                            ? explore_then_go_demo(world, spec, sim, derive_seed(ep_seed, {0x6578ULL}))
                            : shortest_path_demo(world, spec, sim);
      if (d.success || gen.include_failed) out.push_back(std::move(d));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files (JSON lines: one header, then one demonstration per line)

inline constexpr int kDatasetVersion = 1;

inline std::vector<std::string> default_category_names(int n) {
  static const std::vector<std::string> base{"chair", "couch", "plant", "bed", "toilet", "tv"};
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(i < static_cast<int>(base.size()) ? base[i] : "category_" + std::to_string(i));
  return out;
}

/// FNV-1a over the canonical JSON text.
inline std::string config_digest(const json& j) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct DemoDataset {
  SimConfig sim;
  std::vector<std::string> category_names;
  std::vector<Demonstration> demos;
  json provenance = json::object();
};

struct LineIssue {
  int line = 0;  // 1-based line number in the file
  std::string reason;
};

struct DatasetReadResult {
  DemoDataset dataset;
  std::vector<LineIssue> rejected;
};

inline json pose_to_json(const Pose& p) { return json::array({p.x, p.y, p.heading}); }
inline Pose pose_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::runtime_error("pose must be [x, y, heading]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

inline json episode_to_json(const EpisodeSpec& e) {
  json j{{"world_seed", e.world_seed},
         {"start", pose_to_json(e.start)},
         {"goal_category", e.goal_category},
         {"budget", e.budget}};
  if (e.inline_world) j["world"] = world_to_json(*e.inline_world);
  return j;
}

inline EpisodeSpec episode_from_json(const json& j) {
  EpisodeSpec e;
  e.world_seed = j.at("world_seed").get<uint64_t>();
  e.start = pose_from_json(j.at("start"));
  e.goal_category = j.at("goal_category").get<int>();
  e.budget = j.at("budget").get<int>();
  if (j.contains("world")) e.inline_world = std::make_shared<GridWorld>(world_from_json(j.at("world")));
  return e;
}

inline json demo_to_json(const Demonstration& d) {
  json actions = json::array();
  for (Action a : d.actions) actions.push_back(action_code(a));
  json poses = json::array();
  for (const Pose& p : d.poses) poses.push_back(pose_to_json(p));
  return json{{"episode", episode_to_json(d.episode)},
              {"actions", actions},
              {"poses", poses},
              {"source", source_name(d.source)},
              {"success", d.success}};
}

inline Demonstration demo_from_json(const json& j) {
  Demonstration d;
  d.episode = episode_from_json(j.at("episode"));
  for (const auto& a : j.at("actions")) d.actions.push_back(action_from_code(a.get<int>()));
  for (const auto& p : j.at("poses")) d.poses.push_back(pose_from_json(p));
  d.source = source_from_name(j.at("source").get<std::string>());
  d.success = j.at("success").get<bool>();
  return d;
}

/// Checks a demonstration against a regenerated simulator run. Returns an
/// empty string when valid, otherwise the reason.
inline std::string check_demo(const Demonstration& d, const SimConfig& sim) {
  if (d.poses.size() != d.actions.size() + 1) return "pose count must be action count + 1";
  if (static_cast<int>(d.actions.size()) > d.episode.budget) return "more actions than the episode budget";
  try {
    const GridWorld world = resolve_world(d.episode, sim.world);
    const Replay r = replay_actions(world, d.episode, sim, d.actions);
    for (size_t t = 0; t < r.poses.size(); ++t) {
      if (!(r.poses[t] == d.poses[t])) return "pose " + std::to_string(t) + " does not match replay";
    }
    if (r.success != d.success) return "success flag does not match replay";
  } catch (const std::exception& e) {
    return std::string("replay failed: ") + e.what();
  }
  return {};
}

inline json dataset_header(const DemoDataset& ds) {
  const json cfg = ds.sim;
  return json{{"type", "header"},
              {"version", kDatasetVersion},
              {"sim_config", cfg},
              {"world_config_digest", config_digest(cfg)},
              {"category_names", ds.category_names},
              {"provenance", ds.provenance}};
}

/// Writes header and demos to a temporary file, then renames it into place.
inline void write_dataset(const DemoDataset& ds, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out << dataset_header(ds).dump() << '\n';
    for (const auto& d : ds.demos) out << demo_to_json(d).dump() << '\n';
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Appends one demonstration line; the line is emitted with a single write.
inline void append_demo(const Demonstration& d, const std::filesystem::path& path) {
  const std::string line = demo_to_json(d).dump() + "\n";
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
}

/// Parses a dataset, validating every line by replay. Invalid demo lines are
/// reported and skipped; a bad header is fatal.
inline DatasetReadResult read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  DatasetReadResult result;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset is empty: " + path.string());
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw std::runtime_error("dataset header does not parse: " + std::string(e.what()));
  }
  if (header.value("type", "") != "header") throw std::runtime_error("first line is not a dataset header");
  if (header.value("version", -1) != kDatasetVersion) {
    throw std::runtime_error("dataset version " + header.value("version", json(-1)).dump() + " is not supported");
  }
  auto& ds = result.dataset;
  ds.sim = header.at("sim_config").get<SimConfig>();
  if (header.value("world_config_digest", "") != config_digest(json(ds.sim))) {
    throw std::runtime_error("world config digest does not match the stored config");
  }
  ds.category_names = header.at("category_names").get<std::vector<std::string>>();
  ds.provenance = header.value("provenance", json::object());
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Demonstration d;
    try {
      d = demo_from_json(json::parse(line));
    } catch (const std::exception& e) {
      result.rejected.push_back({lineno, std::string("parse failure: ") + e.what()});
      continue;
    }
    if (auto why = check_demo(d, ds.sim); !why.empty()) {
      result.rejected.push_back({lineno, why});
      continue;
    }
    ds.demos.push_back(std::move(d));
  }
  return result;
}

}  // namespace rimnav

#endif  // RIMNAV_DEMOS_HPP_
