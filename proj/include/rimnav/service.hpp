#ifndef RIMNAV_SERVICE_HPP_
#define RIMNAV_SERVICE_HPP_

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <regex>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rimnav/auxtasks.hpp"
#include "rimnav/demos.hpp"
#include "rimnav/evalmetrics.hpp"
#include "rimnav/gridworld.hpp"
#include "rimnav/model.hpp"

namespace rimnav {

/// Protocol error carried to the client as {code, message} with an HTTP status.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

struct ServiceConfig {
  SimConfig sim;
  std::filesystem::path demo_dir = "demos";
  size_t max_sessions = 64;
};

struct ServiceResponse {
  int status = 200;
  json body;
  /// Canonical serialization: sorted keys, no whitespace.
  std::string text() const { return body.dump(); }
};

enum class SessionMode { kTeleop, kReplay, kPolicyDrive };

inline const char* session_mode_name(SessionMode m) {
  switch (m) {
    case SessionMode::kTeleop: return "teleop";
    case SessionMode::kReplay: return "replay";
    case SessionMode::kPolicyDrive: return "policy_drive";
  }
  return "?";
}

inline SessionMode session_mode_from_name(const std::string& s) {
  if (s == "teleop") return SessionMode::kTeleop;
  if (s == "replay") return SessionMode::kReplay;
  if (s == "policy_drive") return SessionMode::kPolicyDrive;
  throw ServiceError(400, "bad_request", "unknown mode '" + s + "' (teleop, replay, policy_drive)");
}

/// 128 random bits from the OS entropy source, hex encoded.
inline std::string new_session_id() {
  std::random_device rd;
  std::string id;
  static const char* hex = "0123456789abcdef";
  for (int i = 0; i < 4; ++i) {
    const uint32_t v = rd();
    for (int k = 0; k < 4; ++k) {
      id += hex[(v >> (8 * k + 4)) & 0xf];
      id += hex[(v >> (8 * k)) & 0xf];
    }
  }
  return id;
}

inline json observation_to_json(const Observation& o) {
  return {{"depth", o.depth},
          {"semantic", o.semantic},
          {"num_classes", o.num_classes},
          {"rel_pose", o.rel_pose},
          {"prev_action", o.prev_action ? json(action_code(*o.prev_action)) : json(nullptr)},
          {"goal_category", o.goal_category},
          {"step_index", o.step_index}};
}

inline json pose_json(const Pose& p) { return {{"x", p.x}, {"y", p.y}, {"heading", p.heading}}; }

/// Rows of '#' wall, '.' free, '0'-'9' object category and '?' unknown.
/// With `explored_from` set, cells the agent has not sensed are unknown.
inline json topdown_to_json(const GridWorld& w, const Pose& at, const OccupancyAccumulator* explored_from = nullptr) {
  std::optional<OccupancyGT> seen;
  if (explored_from) seen = explored_from->crop(at, 2 * w.height() + 1, 2 * w.width() + 1, false);
  json rows = json::array();
  for (int y = 0; y < w.height(); ++y) {
    std::string row;
    for (int x = 0; x < w.width(); ++x) {
      if (seen) {
        const int r = y - at.y + w.height();
        const int c = x - at.x + w.width();
        if (!seen->explored(r, c)) {
          row += '?';
          continue;
        }
      }
      const int obj = w.object_at({x, y});
      if (w.is_wall({x, y})) {
        row += '#';
      } else if (obj >= 0) {
        row += static_cast<char>('0' + obj % 10);
      } else {
        row += '.';
      }
    }
    rows.push_back(row);
  }
  json out = {{"width", w.width()}, {"height", w.height()}, {"rows", rows}};
  out["agent"] = pose_json(at);
  return out;
}

/// Samples a start pose for a fixed goal category.
inline EpisodeSpec sample_episode_for_goal(const GridWorld& world, uint64_t seed, const SimConfig& sim, int goal) {
  if (goal < 0 || goal >= world.categories() || world.instances_of(goal).empty())
    throw ServiceError(400, "bad_request", "goal category " + std::to_string(goal) + " is absent from the world");
  for (uint64_t k = 0; k < 256; ++k) {
    EpisodeSpec spec = sample_episode(world, derive_seed(seed, {0x5e, k}), sim);
    spec.goal_category = goal;
    try {
      validate_episode(world, spec, sim);
      return spec;
    } catch (const std::invalid_argument&) {
    }
  }
  throw ServiceError(400, "bad_request", "no valid start pose for goal category " + std::to_string(goal));
}

/// Session-based teleoperation, policy driving and replay over the simulator.
/// Transport-independent: handle() routes method + path like the HTTP server.
class NavService {
 public:
  explicit NavService(ServiceConfig cfg) : cfg_(std::move(cfg)) {}

  ServiceResponse handle(const std::string& method, const std::string& path, const std::string& body = "",
                         const std::map<std::string, std::string>& query = {}) {
    try {
      return {200, route(method, path, body, query)};
    } catch (const ServiceError& e) {
      return {e.status(), {{"code", e.code()}, {"message", e.what()}}};
    } catch (const json::exception& e) {
      return {400, {{"code", "bad_request"}, {"message", std::string("malformed request: ") + e.what()}}};
    } catch (const std::invalid_argument& e) {
      return {400, {{"code", "bad_request"}, {"message", e.what()}}};
    } catch (const std::exception& e) {
      return {500, {{"code", "internal"}, {"message", e.what()}}};
    }
  }

  json create_session(const json& req) {
    const SessionMode mode = session_mode_from_name(req.value("mode", std::string("teleop")));
    auto s = std::make_shared<Session>();
    s->mode = mode;
    s->sim = cfg_.sim;
    s->full_map = req.value("full_map", true);
    s->debug = req.value("debug", false);
    if (req.contains("budget")) s->sim.budget = req.at("budget").get<int>();

    if (mode == SessionMode::kReplay) {
      const std::string name = req.at("demo").get<std::string>();
      const DemoDataset ds = load_demo_file(name);
      const size_t index = req.value("index", 0);
      if (index >= ds.demos.size()) throw ServiceError(400, "bad_request", "demo index out of range");
      s->replay = ds.demos[index];
      s->sim = ds.sim;
      s->world = std::make_shared<const GridWorld>(resolve_world(s->replay->episode, s->sim.world));
      s->spec = s->replay->episode;
    } else {
      if (req.contains("world") || req.contains("world_file")) {
        s->world = std::make_shared<const GridWorld>(world_from_json(
            req.contains("world") ? req.at("world") : read_world_file(req.at("world_file").get<std::string>())));
        s->sim.world = s->world->config();
      } else {
        s->world = std::make_shared<const GridWorld>(generate_world(req.value("world_seed", uint64_t{0}), s->sim.world));
      }
      const uint64_t start_seed = req.value("start_seed", uint64_t{0});
      if (req.contains("goal_category") && !req.at("goal_category").is_null()) {
        s->spec = sample_episode_for_goal(*s->world, start_seed, s->sim, req.at("goal_category").get<int>());
      } else {
        s->spec = sample_episode(*s->world, start_seed, s->sim);
      }
      if (req.contains("world") || req.contains("world_file")) s->spec.inline_world = s->world;
    }
    if (mode == SessionMode::kPolicyDrive) {
      if (!req.contains("checkpoint")) throw ServiceError(400, "bad_request", "policy_drive needs a checkpoint");
      s->model = load_model(req.at("checkpoint").get<std::string>());
      const PolicyConfig& pc = s->model->config();
      if (pc.rays != s->sim.sensor.rays || pc.categories != s->sim.world.categories)
        throw ServiceError(400, "bad_request", "checkpoint sensor shape does not match the simulator config");
      s->scorer.emplace(*s->model);
    }
    s->episode.emplace(*s->world, s->spec, s->sim);
    s->explored.emplace(s->sim.sensor);
    s->explored->add(s->episode->pose(), s->episode->observation().depth);
    s->poses.push_back(s->episode->pose());

    std::lock_guard<std::mutex> lock(mu_);
    if (sessions_.size() >= cfg_.max_sessions)
      throw ServiceError(429, "session_limit", "session limit of " + std::to_string(cfg_.max_sessions) + " reached");
    std::string id = new_session_id();
    while (sessions_.count(id)) id = new_session_id();
    s->id = id;
    sessions_[id] = s;
    std::lock_guard<std::mutex> slock(s->mu);
    return {{"session_id", id}, {"state", state_message(*s)}};
  }

  json state(const std::string& id) {
    auto s = find(id);
    std::lock_guard<std::mutex> lock(s->mu);
    return state_message(*s);
  }

  json act(const std::string& id, const json& req) {
    auto s = find(id);
    std::lock_guard<std::mutex> lock(s->mu);
    if (s->episode->done()) throw ServiceError(409, "episode_finished", "episode already finished");
    if (s->mode == SessionMode::kPolicyDrive)
      throw ServiceError(409, "wrong_mode", "act is not available in policy_drive mode; use policy-step");
    Action a;
    if (s->mode == SessionMode::kReplay) {
      if (s->actions.size() >= s->replay->actions.size())
        throw ServiceError(409, "episode_finished", "replay has no further actions");
      a = s->replay->actions[s->actions.size()];
    } else {
      a = parse_action(req.at("action"));
    }
    const StepResult r = s->episode->step(a);
    record(*s, a, r.collided);
    json msg = state_message(*s);
    return msg;
  }

  json policy_step(const std::string& id) {
    auto s = find(id);
    std::lock_guard<std::mutex> lock(s->mu);
    if (s->mode != SessionMode::kPolicyDrive)
      throw ServiceError(409, "wrong_mode", "policy-step needs a policy_drive session");
    if (s->episode->done()) throw ServiceError(409, "episode_finished", "episode already finished");
    const RolloutStep st = greedy_step(*s->episode, *s->scorer);
    record(*s, st.choice.action, st.choice.collided);
    s->last_probs = st.probs;
    return state_message(*s);
  }

  json save(const std::string& id, const json& req) {
    auto s = find(id);
    std::lock_guard<std::mutex> lock(s->mu);
    if (s->mode == SessionMode::kReplay) throw ServiceError(409, "wrong_mode", "replay sessions cannot be saved");
    if (!s->episode->done()) throw ServiceError(409, "episode_running", "episode has not finished");
    const Demonstration d = recorded_demo(*s);
    std::string reason = check_demo(d, s->sim);
    if (reason.empty() && req.value("require_success", false) && !d.success) reason = "episode was not successful";
    json report = {{"valid", reason.empty()}, {"reason", reason}};
    if (!reason.empty()) return {{"accepted", false}, {"validation_report", report}};
    std::string name = req.value("name", std::string());
    if (name.empty()) name = "demo_" + s->id.substr(0, 12) + "_" + std::to_string(s->saves);
    check_name(name);
    DemoDataset ds;
    ds.sim = s->sim;
    ds.category_names = default_category_names(s->sim.world.categories);
    ds.demos = {d};
    ds.provenance = provenance("serve", json(s->sim), {{"session", s->id}});
    std::filesystem::create_directories(cfg_.demo_dir);
    write_dataset(ds, cfg_.demo_dir / (name + ".jsonl"));
    ++s->saves;
    return {{"accepted", true}, {"validation_report", report}, {"name", name}, {"demo", demo_to_json(d)}};
  }

  json list_demos() const {
    std::vector<std::string> names;
    if (std::filesystem::exists(cfg_.demo_dir))
      for (const auto& e : std::filesystem::directory_iterator(cfg_.demo_dir))
        if (e.path().extension() == ".jsonl") names.push_back(e.path().stem().string());
    std::sort(names.begin(), names.end());
    return {{"demos", names}};
  }

  json replay_frame(const std::string& name, int step, size_t index = 0) {
    const DemoDataset ds = load_demo_file(name);
    if (index >= ds.demos.size()) throw ServiceError(400, "bad_request", "demo index out of range");
    const Demonstration& d = ds.demos[index];
    const int n = static_cast<int>(d.actions.size());
    if (step < 0 || step > n)
      throw ServiceError(400, "bad_request", "step must be in [0, " + std::to_string(n) + "]");
    const GridWorld w = resolve_world(d.episode, ds.sim.world);
    Episode ep(w, d.episode, ds.sim);
    for (int t = 0; t < step; ++t) ep.step(d.actions[t]);
    return {{"demo", name},
            {"index", index},
            {"step", step},
            {"total_steps", n},
            {"pose", pose_json(ep.pose())},
            {"observation", observation_to_json(ep.observation())},
            {"next_action", step < n ? json(action_code(d.actions[step])) : json(nullptr)},
            {"topdown", topdown_to_json(w, ep.pose())},
            {"done", ep.done()},
            {"success", ep.success()}};
  }

  bool delete_session(const std::string& id) {
    std::lock_guard<std::mutex> lock(mu_);
    return sessions_.erase(id) > 0;
  }

  size_t session_count() const {
    std::lock_guard<std::mutex> lock(mu_);
    return sessions_.size();
  }

  const ServiceConfig& config() const { return cfg_; }

 private:
  struct Session {
    std::mutex mu;
    std::string id;
    SessionMode mode = SessionMode::kTeleop;
    SimConfig sim;
    bool full_map = true;
    bool debug = false;
    std::shared_ptr<const GridWorld> world;
    EpisodeSpec spec;
    std::optional<Episode> episode;
    std::optional<OccupancyAccumulator> explored;
    std::vector<Action> actions;
    std::vector<Pose> poses;
    bool last_collided = false;
    std::optional<Demonstration> replay;
    std::shared_ptr<const NavModel<float>> model;
    std::optional<ModelScorer<float>> scorer;
    std::optional<ActionScores> last_probs;
    int saves = 0;
  };

  json route(const std::string& method, const std::string& path, const std::string& body,
             const std::map<std::string, std::string>& query) {
    static const std::regex session_re("^/sessions/([0-9a-f]+)(/(state|act|policy-step|save))?$");
    static const std::regex replay_re("^/demos/([A-Za-z0-9_.-]+)/replay$");
    auto parse_body = [&] { return body.empty() ? json::object() : json::parse(body); };
    std::smatch m;
    if (path == "/healthz" && method == "GET") return {{"status", "ok"}, {"version", kToolVersion}};
    if (path == "/sessions" && method == "POST") return create_session(parse_body());
    if (path == "/demos" && method == "GET") return list_demos();
    if (std::regex_match(path, m, replay_re) && method == "GET") {
      const int step = query.count("step") ? parse_int(query.at("step"), "step") : 0;
      const int index = query.count("index") ? parse_int(query.at("index"), "index") : 0;
      if (index < 0) throw ServiceError(400, "bad_request", "index must be >= 0");
      return replay_frame(m[1], step, static_cast<size_t>(index));
    }
    if (std::regex_match(path, m, session_re)) {
      const std::string id = m[1];
      const std::string op = m[3];
      if (op.empty() && method == "DELETE") {
        if (!delete_session(id)) throw ServiceError(404, "not_found", "unknown session");
        return {{"deleted", id}};
      }
      if (op == "state" && method == "GET") return state(id);
      if (op == "act" && method == "POST") return act(id, parse_body());
      if (op == "policy-step" && method == "POST") return policy_step(id);
      if (op == "save" && method == "POST") return save(id, parse_body());
    }
    throw ServiceError(404, "not_found", "no route for " + method + " " + path);
  }

  static json read_world_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ServiceError(400, "bad_request", "cannot read world file " + path);
    return json::parse(in);
  }

  static int parse_int(const std::string& s, const char* what) {
    try {
      size_t used = 0;
      const int v = std::stoi(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ServiceError(400, "bad_request", std::string(what) + " must be an integer");
  }

  static Action parse_action(const json& a) {
    if (a.is_number_integer()) {
      const int code = a.get<int>();
      if (code < 0 || code >= kNumActions) throw ServiceError(400, "bad_request", "action code out of range");
      return static_cast<Action>(code);
    }
    const std::string s = a.get<std::string>();
    for (int c = 0; c < kNumActions; ++c)
      if (s == action_name(static_cast<Action>(c))) return static_cast<Action>(c);
    throw ServiceError(400, "bad_request", "unknown action '" + s + "'");
  }

  static void check_name(const std::string& name) {
    static const std::regex ok("^[A-Za-z0-9_.-]+$");
    if (!std::regex_match(name, ok) || name.find("..") != std::string::npos)
      throw ServiceError(400, "bad_request", "demo names may use letters, digits, '_', '-' and '.'");
  }

  DemoDataset load_demo_file(const std::string& name) const {
    check_name(name);
    const auto path = cfg_.demo_dir / (name + ".jsonl");
    if (!std::filesystem::exists(path)) throw ServiceError(404, "not_found", "unknown demo '" + name + "'");
    DatasetReadResult r = read_dataset(path);
    if (r.dataset.demos.empty()) throw ServiceError(400, "bad_request", "demo file holds no valid demonstration");
    return std::move(r.dataset);
  }

  std::shared_ptr<const NavModel<float>> load_model(const std::string& path) {
    std::lock_guard<std::mutex> lock(models_mu_);
    auto it = models_.find(path);
    if (it != models_.end()) return it->second;
    if (!std::filesystem::exists(std::filesystem::path(path) / "manifest.json"))
      throw ServiceError(400, "bad_request", "checkpoint not found: " + path);
    std::shared_ptr<const NavModel<float>> m = NavModel<float>::load(path);
    models_[path] = m;
    return m;
  }

  std::shared_ptr<Session> find(const std::string& id) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "not_found", "unknown session");
    return it->second;
  }

  static void record(Session& s, Action a, bool collided) {
    s.actions.push_back(a);
    s.poses.push_back(s.episode->pose());
    s.last_collided = collided;
    s.explored->add(s.episode->pose(), s.episode->observation().depth);
  }

  static Demonstration recorded_demo(const Session& s) {
    Demonstration d;
    d.episode = s.spec;
    d.actions = s.actions;
    d.poses = s.poses;
    d.source = s.mode == SessionMode::kPolicyDrive ? DemoSource::Rollout : DemoSource::Human;
    d.success = s.episode->success();
    return d;
  }

  json state_message(const Session& s) const {
    const Episode& ep = *s.episode;
    json msg = {{"session_id", s.id},
                {"mode", session_mode_name(s.mode)},
                {"step", ep.t()},
                {"budget", ep.spec().budget},
                {"pose", pose_json(ep.pose())},
                {"goal_category", ep.spec().goal_category},
                {"observation", observation_to_json(ep.observation())},
                {"collided", s.last_collided},
                {"done", ep.done()},
                {"success", ep.success()}};
    const bool hide = s.mode == SessionMode::kPolicyDrive && !s.debug;
    if (!hide) {
      msg["topdown"] = topdown_to_json(*s.world, ep.pose(), s.full_map ? nullptr : &*s.explored);
    }
    if (s.mode == SessionMode::kPolicyDrive) {
      json out = json::object();
      if (s.last_probs) out["action_distribution"] = *s.last_probs;
      if (auto occ = s.scorer->decoded_occupancy()) {
        const int n = s.model->config().aux.em_size;
        out["decoded_occupancy"] = {{"size_h", n}, {"size_w", n}, {"channels", 2}, {"data", *occ}};
      }
      msg["model"] = out;
    }
    return msg;
  }

  ServiceConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mutex models_mu_;
  std::map<std::string, std::shared_ptr<const NavModel<float>>> models_;
};

}  // namespace rimnav

#endif  // RIMNAV_SERVICE_HPP_
