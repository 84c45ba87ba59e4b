#include <filesystem>
#include <thread>

#include <gtest/gtest.h>

#include "model_fixtures.hpp"
#include "rimnav/http.hpp"
#include "rimnav/service.hpp"
#include "rimnav/trainer.hpp"
#include "test_util.hpp"

using namespace rimnav;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rimnav_service_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ServiceConfig service_config(const std::string& name) {
  ServiceConfig c;
  c.sim = testutil::tiny_sim();
  c.sim.budget = 40;
  c.demo_dir = scratch(name);
  return c;
}

json call(NavService& svc, const std::string& method, const std::string& path, const json& body = json::object(),
          int expect = 200) {
  const ServiceResponse r = svc.handle(method, path, body.dump());
  EXPECT_EQ(r.status, expect) << method << " " << path << ": " << r.text();
  EXPECT_EQ(json::parse(r.text()).dump(), r.text());
  return r.body;
}

std::string open_session(NavService& svc, const json& req) {
  return call(svc, "POST", "/sessions", req).at("session_id").get<std::string>();
}

json box_world() {
  return world_to_json(testutil::ascii_world({"######", "#....#", "#...0#", "######"}, 3));
}

Pose pose_of(const json& state) {
  const json& p = state.at("pose");
  return {p.at("x").get<int>(), p.at("y").get<int>(), p.at("heading").get<int>()};
}

}  // namespace

TEST(Service, SameSeedsGiveIdenticalInitialState) {
  NavService svc(service_config("determinism"));
  json req = {{"world_seed", 3}, {"start_seed", 11}};
  auto a = call(svc, "POST", "/sessions", req);
  auto b = call(svc, "POST", "/sessions", req);
  EXPECT_NE(a["session_id"], b["session_id"]);
  EXPECT_EQ(a["session_id"].get<std::string>().size(), 32u);
  a["state"].erase("session_id");
  b["state"].erase("session_id");
  EXPECT_EQ(a["state"].dump(), b["state"].dump());

  const GridWorld w = generate_world(3, svc.config().sim.world);
  const EpisodeSpec spec = sample_episode(w, 11, svc.config().sim);
  EXPECT_EQ(pose_of(a["state"]), spec.start);
  EXPECT_EQ(a["state"]["goal_category"], spec.goal_category);
  EXPECT_EQ(a["state"]["step"], 0);
}

TEST(Service, AbsentGoalCategoryIsRejected) {
  NavService svc(service_config("absent"));
  auto r = call(svc, "POST", "/sessions", {{"world", box_world()}, {"goal_category", 2}}, 400);
  EXPECT_EQ(r["code"], "bad_request");
  EXPECT_NE(r["message"].get<std::string>().find("absent"), std::string::npos);
  EXPECT_EQ(svc.session_count(), 0u);
}

TEST(Service, ForwardIntoWallCollidesAndStopNearGoalSucceeds) {
  ServiceConfig cfg = service_config("wall");
  cfg.sim.world.categories = 3;
  cfg.sim.success.radius = 1;
  NavService svc(cfg);
  const json created = call(svc, "POST", "/sessions", {{"world", box_world()}, {"goal_category", 0}});
  const std::string id = created["session_id"];
  const GridWorld w = world_from_json(box_world());
  Pose p = pose_of(created["state"]);
  while (w.is_traversable({p.x + kHeadingDx[p.heading], p.y + kHeadingDy[p.heading]}))
    p = pose_of(call(svc, "POST", "/sessions/" + id + "/act", {{"action", "turn_left"}}));
  const json hit = call(svc, "POST", "/sessions/" + id + "/act", {{"action", 1}});
  EXPECT_TRUE(hit["collided"].get<bool>());
  EXPECT_EQ(pose_of(hit), p);
  EXPECT_FALSE(hit["done"].get<bool>());

  EpisodeSpec spec;
  spec.start = p;
  spec.goal_category = 0;
  spec.budget = cfg.sim.budget;
  const auto plan = shortest_path_demo(w, spec, cfg.sim).actions;
  json last;
  for (Action a : plan) last = call(svc, "POST", "/sessions/" + id + "/act", {{"action", action_code(a)}});
  EXPECT_TRUE(last["done"].get<bool>());
  EXPECT_TRUE(last["success"].get<bool>());
  EXPECT_FALSE(last["collided"].get<bool>());
  auto again = call(svc, "POST", "/sessions/" + id + "/act", {{"action", 0}}, 409);
  EXPECT_EQ(again["code"], "episode_finished");
}

TEST(Service, SavedDemoMatchesOfflineRunByteForByte) {
  NavService svc(service_config("offline"));
  const SimConfig& sim = svc.config().sim;
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const json created = call(svc, "POST", "/sessions", {{"world_seed", 20 + trial}, {"start_seed", trial}});
    const std::string id = created["session_id"];
    std::vector<Action> actions;
    json state = created["state"];
    while (!state["done"].get<bool>()) {
      const Action a = rng.uniform() < 0.05 ? Action::Stop : static_cast<Action>(rng.uniform_int(1, 3));
      actions.push_back(a);
      state = call(svc, "POST", "/sessions/" + id + "/act", {{"action", action_name(a)}});
    }
    const json saved = call(svc, "POST", "/sessions/" + id + "/save", {{"name", "t" + std::to_string(trial)}});
    ASSERT_TRUE(saved["accepted"].get<bool>()) << saved.dump();

    const GridWorld w = generate_world(20 + trial, sim.world);
    const EpisodeSpec spec = sample_episode(w, trial, sim);
    const Replay r = replay_actions(w, spec, sim, actions);
    Demonstration offline{spec, actions, r.poses, DemoSource::Human, r.success};
    EXPECT_EQ(saved["demo"].dump(), demo_to_json(offline).dump());

    const auto file = read_dataset(svc.config().demo_dir / ("t" + std::to_string(trial) + ".jsonl"));
    EXPECT_TRUE(file.rejected.empty());
    ASSERT_EQ(file.dataset.demos.size(), 1u);
    EXPECT_EQ(demo_to_json(file.dataset.demos[0]).dump(), demo_to_json(offline).dump());
  }
  const json listed = call(svc, "GET", "/demos");
  EXPECT_EQ(listed["demos"], json({"t0", "t1", "t2", "t3", "t4"}));
}

TEST(Service, SaveValidation) {
  NavService svc(service_config("save"));
  const std::string id = open_session(svc, {{"world_seed", 2}, {"start_seed", 2}});
  auto early = call(svc, "POST", "/sessions/" + id + "/save", json::object(), 409);
  EXPECT_EQ(early["code"], "episode_running");
  call(svc, "POST", "/sessions/" + id + "/act", {{"action", "turn_left"}});
  const json stopped = call(svc, "POST", "/sessions/" + id + "/act", {{"action", "stop"}});
  ASSERT_TRUE(stopped["done"].get<bool>());
  ASSERT_FALSE(stopped["success"].get<bool>());
  const json rejected = call(svc, "POST", "/sessions/" + id + "/save", {{"name", "fail"}, {"require_success", true}});
  EXPECT_FALSE(rejected["accepted"].get<bool>());
  EXPECT_FALSE(rejected["validation_report"]["reason"].get<std::string>().empty());
  EXPECT_FALSE(fs::exists(svc.config().demo_dir / "fail.jsonl"));
  call(svc, "POST", "/sessions/" + id + "/save", {{"name", "../escape"}}, 400);
  const json kept = call(svc, "POST", "/sessions/" + id + "/save", {{"name", "fail"}});
  EXPECT_TRUE(kept["accepted"].get<bool>());
}

TEST(Service, TenSavedDemosFeedTheTrainer) {
  NavService svc(service_config("ten"));
  const SimConfig& sim = svc.config().sim;
  DemoDataset merged;
  merged.sim = sim;
  for (int i = 0; i < 10; ++i) {
    const json created = call(svc, "POST", "/sessions", {{"world_seed", 40 + i}, {"start_seed", i}});
    const std::string id = created["session_id"];
    const GridWorld w = generate_world(40 + i, sim.world);
    const EpisodeSpec spec = sample_episode(w, i, sim);
    for (Action a : shortest_path_demo(w, spec, sim).actions)
      call(svc, "POST", "/sessions/" + id + "/act", {{"action", action_code(a)}});
    const json saved = call(svc, "POST", "/sessions/" + id + "/save", {{"require_success", true}});
    ASSERT_TRUE(saved["accepted"].get<bool>());
    auto r = read_dataset(svc.config().demo_dir / (saved["name"].get<std::string>() + ".jsonl"));
    ASSERT_EQ(r.dataset.demos.size(), 1u);
    EXPECT_EQ(r.dataset.demos[0].source, DemoSource::Human);
    merged.demos.push_back(r.dataset.demos[0]);
  }
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.bptt_window = 8;
  tc.val_fraction = 0;
  tc.save_every_epoch = false;
  tc.policy = testutil::tiny_policy();
  const TrainReport rep = train(tc, merged, scratch("ten_train"));
  EXPECT_EQ(rep.epochs.size(), 1u);
}

TEST(Service, ReplayFramesFollowTheDemo) {
  NavService svc(service_config("replay"));
  const SimConfig& sim = svc.config().sim;
  const GridWorld w = generate_world(5, sim.world);
  const EpisodeSpec spec = sample_episode(w, 5, sim);
  DemoDataset ds;
  ds.sim = sim;
  ds.category_names = default_category_names(sim.world.categories);
  ds.demos = {explore_then_go_demo(w, spec, sim, 3)};
  write_dataset(ds, svc.config().demo_dir / "walk.jsonl");
  const Demonstration& d = ds.demos[0];

  const json created = call(svc, "POST", "/sessions", {{"mode", "replay"}, {"demo", "walk"}});
  EXPECT_EQ(pose_of(created["state"]), d.poses[0]);
  const std::string id = created["session_id"];
  for (size_t n = 1; n < d.poses.size(); ++n) {
    const json s = call(svc, "POST", "/sessions/" + id + "/act", {{"action", "next"}});
    EXPECT_EQ(pose_of(s), d.poses[n]);
  }
  for (size_t n = 0; n < d.poses.size(); ++n) {
    const ServiceResponse r = svc.handle("GET", "/demos/walk/replay", "", {{"step", std::to_string(n)}});
    ASSERT_EQ(r.status, 200) << r.text();
    EXPECT_EQ(pose_of(r.body), d.poses[n]);
  }
  EXPECT_EQ(svc.handle("GET", "/demos/walk/replay", "", {{"step", "9999"}}).status, 400);
  EXPECT_EQ(svc.handle("GET", "/demos/nope/replay").status, 404);
  EXPECT_EQ(call(svc, "POST", "/sessions/" + id + "/save", json::object(), 409)["code"], "wrong_mode");
}

TEST(Service, PolicyStepReproducesOfflineRollout) {
  NavService svc(service_config("policy"));
  const SimConfig& sim = svc.config().sim;
  const PolicyConfig pc = testutil::tiny_policy();
  NavModel<float> model(pc, 9);
  testutil::randomize(model.store(), 9, 0.3);
  const fs::path ckpt = scratch("policy_ckpt");
  model.save(ckpt);
  const auto loaded = NavModel<float>::load(ckpt);

  for (int trial = 0; trial < 3; ++trial) {
    const json created = call(svc, "POST", "/sessions",
                              {{"mode", "policy_drive"}, {"checkpoint", ckpt.string()}, {"world_seed", 60 + trial},
                               {"start_seed", trial}});
    EXPECT_FALSE(created["state"].contains("topdown"));
    const std::string id = created["session_id"];
    call(svc, "POST", "/sessions/" + id + "/act", {{"action", 1}}, 409);
    std::vector<Pose> poses{pose_of(created["state"])};
    json s = created["state"];
    while (!s["done"].get<bool>()) {
      s = call(svc, "POST", "/sessions/" + id + "/policy-step");
      poses.push_back(pose_of(s));
      double total = 0;
      for (double p : s["model"]["action_distribution"]) total += p;
      EXPECT_NEAR(total, 1.0, 1e-6);
      const json& occ = s["model"]["decoded_occupancy"];
      EXPECT_EQ(occ["size_h"], pc.aux.em_size);
      EXPECT_EQ(occ["size_w"], pc.aux.em_size);
      EXPECT_EQ(occ["channels"], 2);
      EXPECT_EQ(occ["data"].size(), static_cast<size_t>(pc.aux.em_size * pc.aux.em_size * 2));
    }
    const GridWorld w = generate_world(60 + trial, sim.world);
    const EpisodeSpec spec = sample_episode(w, trial, sim);
    ModelScorer<float> scorer(*loaded);
    const RolloutResult offline = rollout(w, spec, sim, scorer);
    EXPECT_EQ(poses, offline.trajectory.poses);
    EXPECT_EQ(s["success"].get<bool>(), offline.trajectory.success);

    const json saved = call(svc, "POST", "/sessions/" + id + "/save", json::object());
    ASSERT_TRUE(saved["accepted"].get<bool>());
    EXPECT_EQ(saved["demo"].dump(), demo_to_json(offline.trajectory).dump());
  }
  const json dbg = call(svc, "POST", "/sessions",
                        {{"mode", "policy_drive"}, {"checkpoint", ckpt.string()}, {"world_seed", 1}, {"debug", true}});
  EXPECT_TRUE(dbg["state"].contains("topdown"));
  call(svc, "POST", "/sessions", {{"mode", "policy_drive"}, {"world_seed", 1}}, 400);
  call(svc, "POST", "/sessions", {{"mode", "policy_drive"}, {"checkpoint", "/no/such/dir"}}, 400);
}

TEST(Service, InterleavedSessionsStayIsolated) {
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    NavService shared(service_config("iso"));
    NavService alone_a(service_config("iso_a"));
    NavService alone_b(service_config("iso_b"));
    const json ra = {{"world_seed", 70 + trial}, {"start_seed", 1}};
    const json rb = {{"world_seed", 80 + trial}, {"start_seed", 2}};
    const std::string a = open_session(shared, ra), b = open_session(shared, rb);
    const std::string a1 = open_session(alone_a, ra), b1 = open_session(alone_b, rb);
    auto strip = [](json s) {
      s.erase("session_id");
      return s.dump();
    };
    bool done_a = false, done_b = false;
    for (int k = 0; k < 60 && !(done_a && done_b); ++k) {
      const bool pick_a = (rng.uniform() < 0.5 && !done_a) || done_b;
      const json act = {{"action", static_cast<int>(rng.uniform_int(1, 3))}};
      const json got = call(shared, "POST", "/sessions/" + (pick_a ? a : b) + "/act", act);
      const json ref = pick_a ? call(alone_a, "POST", "/sessions/" + a1 + "/act", act)
                              : call(alone_b, "POST", "/sessions/" + b1 + "/act", act);
      EXPECT_EQ(strip(got), strip(ref));
      (pick_a ? done_a : done_b) = got["done"].get<bool>();
    }
    EXPECT_EQ(strip(call(shared, "GET", "/sessions/" + a + "/state")),
              strip(call(alone_a, "GET", "/sessions/" + a1 + "/state")));
    EXPECT_EQ(strip(call(shared, "GET", "/sessions/" + b + "/state")),
              strip(call(alone_b, "GET", "/sessions/" + b1 + "/state")));
  }
}

TEST(Service, ConcurrentSessionsMatchSequentialOnes) {
  NavService svc(service_config("threads"));
  std::vector<std::string> ids;
  for (int i = 0; i < 4; ++i) ids.push_back(open_session(svc, {{"world_seed", 90 + i}}));
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i)
    threads.emplace_back([&, i] {
      for (int k = 0; k < 30; ++k) svc.handle("POST", "/sessions/" + ids[i] + "/act", json({{"action", 1 + (k + i) % 3}}).dump());
    });
  for (auto& t : threads) t.join();
  for (int i = 0; i < 4; ++i) {
    NavService ref(service_config("threads_ref"));
    const std::string id = open_session(ref, {{"world_seed", 90 + i}});
    for (int k = 0; k < 30; ++k) ref.handle("POST", "/sessions/" + id + "/act", json({{"action", 1 + (k + i) % 3}}).dump());
    json x = call(svc, "GET", "/sessions/" + ids[i] + "/state");
    json y = call(ref, "GET", "/sessions/" + id + "/state");
    x.erase("session_id");
    y.erase("session_id");
    EXPECT_EQ(x, y);
  }
}

TEST(Service, PartialMapHidesUnexploredCells) {
  NavService svc(service_config("partial"));
  const json full = call(svc, "POST", "/sessions", {{"world_seed", 4}})["state"];
  const json part = call(svc, "POST", "/sessions", {{"world_seed", 4}, {"full_map", false}})["state"];
  const auto& fr = full["topdown"]["rows"];
  const auto& pr = part["topdown"]["rows"];
  ASSERT_EQ(fr.size(), pr.size());
  int hidden = 0;
  for (size_t y = 0; y < fr.size(); ++y) {
    const std::string f = fr[y], p = pr[y];
    for (size_t x = 0; x < f.size(); ++x) {
      EXPECT_NE(f[x], '?');
      if (p[x] == '?') ++hidden;
      else EXPECT_EQ(p[x], f[x]);
    }
  }
  EXPECT_GT(hidden, 0);
  const Pose p = pose_of(part);
  EXPECT_NE(pr[p.y].get<std::string>()[p.x], '?');
}

TEST(Service, ErrorsAndLimits) {
  ServiceConfig cfg = service_config("errors");
  cfg.max_sessions = 2;
  NavService svc(cfg);
  EXPECT_EQ(call(svc, "GET", "/healthz")["status"], "ok");
  const std::string id = open_session(svc, {{"world_seed", 1}});
  open_session(svc, {{"world_seed", 2}});
  EXPECT_EQ(call(svc, "POST", "/sessions", {{"world_seed", 3}}, 429)["code"], "session_limit");
  EXPECT_EQ(call(svc, "GET", "/sessions/abc123/state", json::object(), 404)["code"], "not_found");
  call(svc, "POST", "/sessions/" + id + "/act", {{"action", "Jump"}}, 400);
  call(svc, "POST", "/sessions/" + id + "/act", {{"action", 7}}, 400);
  call(svc, "POST", "/sessions/" + id + "/policy-step", json::object(), 409);
  EXPECT_EQ(svc.handle("POST", "/sessions", "{not json").status, 400);
  call(svc, "POST", "/sessions", {{"mode", "fly"}}, 400);
  call(svc, "GET", "/nowhere", json::object(), 404);
  call(svc, "DELETE", "/sessions/" + id);
  EXPECT_EQ(svc.session_count(), 1u);
  open_session(svc, {{"world_seed", 3}});
}

TEST(Service, MessagesAreCanonicalJson) {
  NavService svc(service_config("canon"));
  const ServiceResponse r = svc.handle("POST", "/sessions", R"({"world_seed": 8, "start_seed": 3})");
  ASSERT_EQ(r.status, 200);
  const std::string text = r.text();
  EXPECT_EQ(json::parse(text).dump(), text);
  EXPECT_EQ(text.find(' '), std::string::npos);
  const std::string id = r.body["session_id"];
  for (int k = 0; k < 10; ++k) {
    const ServiceResponse s = svc.handle("POST", "/sessions/" + id + "/act", R"({"action": 3})");
    EXPECT_EQ(json::parse(s.text()).dump(), s.text());
  }
}

TEST(Service, ServesOverHttp) {
  NavService svc(service_config("http"));
  httplib::Server server;
  std::atomic<int> port{0};
  std::thread th([&] { serve(svc, "127.0.0.1", 0, [&](int p) { port = p; }, &server); });
  server.wait_until_ready();
  ASSERT_GT(port.load(), 0);
  httplib::Client client("127.0.0.1", port.load());
  auto h = client.Get("/healthz");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  auto c = client.Post("/sessions", R"({"world_seed": 5})", "application/json");
  ASSERT_TRUE(c);
  EXPECT_EQ(c->status, 200);
  const std::string id = json::parse(c->body)["session_id"];
  auto s = client.Post(("/sessions/" + id + "/act").c_str(), R"({"action": "turn_left"})", "application/json");
  ASSERT_TRUE(s);
  EXPECT_EQ(json::parse(s->body)["step"], 1);
  auto missing = client.Get("/sessions/ffff/state");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(json::parse(missing->body)["code"], "not_found");
  server.stop();
  th.join();
}
