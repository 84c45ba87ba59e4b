#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "rimnav/gridworld.hpp"
#include "test_util.hpp"

using namespace rimnav;

namespace {

WorldConfig desk_config() {
  WorldConfig c;
  c.width = 12;
  c.height = 12;
  c.rooms = 3;
  c.objects_per_category = 1;
  c.categories = 6;
  return c;
}

}  // namespace

TEST(GenerateWorld, DeterministicInSeedAndConfig) {
  const auto a = generate_world(7, desk_config());
  const auto b = generate_world(7, desk_config());
  EXPECT_TRUE(a == b);
  EXPECT_EQ(world_to_json(a).dump(), world_to_json(b).dump());
  const auto c = generate_world(8, desk_config());
  EXPECT_FALSE(a == c);
}

TEST(GenerateWorld, SingleRoomHasFullInterior) {
  WorldConfig cfg;
  cfg.width = 8;
  cfg.height = 8;
  cfg.rooms = 1;
  cfg.objects_per_category = 0;
  const auto w = generate_world(1, cfg);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      const bool border = x == 0 || y == 0 || x == 7 || y == 7;
      EXPECT_EQ(w.is_wall({x, y}), border) << x << "," << y;
    }
  }
}

TEST(GenerateWorld, ObjectCountAndPlacement) {
  WorldConfig cfg = desk_config();
  cfg.objects_per_category = 2;
  const auto w = generate_world(7, cfg);
  ASSERT_EQ(w.objects().size(), 12u);
  std::set<Cell> cells;
  std::vector<int> per_category(6, 0);
  for (const auto& o : w.objects()) {
    EXPECT_FALSE(w.is_wall(o.cell));
    cells.insert(o.cell);
    per_category.at(o.category)++;
  }
  EXPECT_EQ(cells.size(), 12u);
  for (int n : per_category) EXPECT_EQ(n, 2);
}

TEST(GenerateWorld, InvariantsHoldAcrossSeeds) {
  for (uint64_t seed = 0; seed < 200; ++seed) {
    WorldConfig cfg = desk_config();
    cfg.rooms = 1 + static_cast<int>(seed % 5);
    const auto w = generate_world(seed, cfg);
    EXPECT_NO_THROW(w.validate()) << "seed " << seed;
  }
}

TEST(GenerateWorld, RejectsOvercrowdedConfig) {
  WorldConfig cfg;
  cfg.width = 5;
  cfg.height = 5;
  cfg.rooms = 1;
  cfg.categories = 6;
  cfg.objects_per_category = 2;
  EXPECT_THROW(generate_world(3, cfg), std::invalid_argument);
}

TEST(WorldFile, RoundTripsAndRegenerates) {
  const auto w = generate_world(11, desk_config());
  const auto j = world_to_json(w);
  const auto back = world_from_json(json::parse(j.dump()));
  EXPECT_TRUE(back == w);
  EXPECT_TRUE(generate_world(back.seed(), back.config()) == w);
  EXPECT_EQ(world_to_json(back).dump(), j.dump());
}

TEST(WorldFile, RejectsBrokenBorder) {
  auto j = world_to_json(generate_world(11, desk_config()));
  j["occupancy"][0] = 0;
  EXPECT_THROW(world_from_json(j), InvariantViolation);
}

TEST(Raycast, AdjacentWallCentreRay) {
  const auto w = testutil::open_world(6, 6);
  SensorConfig s;
  s.rays = 33;  // odd count puts ray 16 exactly on the heading
  const auto rc = raycast(w, {4, 2, 0}, s);
  EXPECT_DOUBLE_EQ(rc.depth[16], 1.0 / s.max_range);
  EXPECT_EQ(rc.semantic[16], w.categories());
}

TEST(Raycast, ObjectAheadIsFirstHit) {
  const auto w = testutil::ascii_world({
      "#########",
      "#.......#",
      "#.....3.#",
      "#.......#",
      "#########",
  });
  SensorConfig s;
  s.rays = 33;
  const auto rc = raycast(w, {4, 2, 0}, s);
  EXPECT_EQ(rc.semantic[16], 3);
  EXPECT_DOUBLE_EQ(rc.depth[16], 2.0 / s.max_range);
}

TEST(Raycast, EmptyWorldMatchesRayMarchOracle) {
  const auto w = testutil::open_world(10, 10);
  SensorConfig s;
  for (int y = 1; y < 9; ++y) {
    for (int x = 1; x < 9; ++x) {
      for (int h = 0; h < 4; ++h) {
        const auto rc = raycast(w, {x, y, h}, s);
        for (int i = 0; i < s.rays; ++i) {
          const double d = oracle::march_depth(w, {x, y}, ray_angle(s, h, i), s.max_range);
          const double expected = std::isfinite(d) && d < s.max_range ? d / s.max_range : 1.0;
          ASSERT_NEAR(rc.depth[i], expected, 2e-4 / s.max_range) << x << "," << y << " h" << h << " ray " << i;
          ASSERT_EQ(rc.semantic[i], w.categories());
        }
      }
    }
  }
}

TEST(Raycast, SemanticRowsAreOneHot) {
  const auto w = generate_world(5, desk_config());
  SensorConfig s;
  for (const Cell& c : w.traversable_cells()) {
    const auto obs = make_observation(w, s, {c.x, c.y, 0}, {c.x, c.y, 1}, std::nullopt, 0, 0);
    const auto oh = obs.semantic_one_hot();
    for (int i = 0; i < s.rays; ++i) {
      double sum = 0.0;
      for (int k = 0; k < obs.num_classes; ++k) sum += oh[i * obs.num_classes + k];
      EXPECT_EQ(sum, 1.0);
      EXPECT_GE(obs.depth[i], 0.0);
      EXPECT_LE(obs.depth[i], 1.0);
    }
  }
}

TEST(Step, BlockedMoveCollides) {
  const auto w = testutil::open_world(5, 5);
  const Pose p{3, 2, 0};
  const auto tr = apply_action(w, p, Action::MoveForward);
  EXPECT_TRUE(tr.collided);
  EXPECT_EQ(tr.pose, p);
  const auto ok = apply_action(w, {1, 2, 0}, Action::MoveForward);
  EXPECT_FALSE(ok.collided);
  EXPECT_EQ(ok.pose, (Pose{2, 2, 0}));
}

TEST(Step, FourTurnsRestoreHeading) {
  const auto w = testutil::open_world(5, 5);
  for (Action turn : {Action::TurnLeft, Action::TurnRight}) {
    Pose p{2, 2, 1};
    for (int i = 0; i < 4; ++i) p = apply_action(w, p, turn).pose;
    EXPECT_EQ(p.heading, 1);
  }
}

TEST(Step, ObjectsBlockMovement) {
  const auto w = testutil::ascii_world({"######", "#.2..#", "######"});
  const auto tr = apply_action(w, {4, 1, 2}, Action::MoveForward);
  EXPECT_FALSE(tr.collided);
  const auto blocked = apply_action(w, tr.pose, Action::MoveForward);
  EXPECT_TRUE(blocked.collided);
}

TEST(Episode, StopNearVisibleGoalSucceeds) {
  const auto w = testutil::ascii_world({
      "########",
      "#......#",
      "#....1.#",
      "#......#",
      "########",
  });
  SimConfig cfg;
  EpisodeSpec spec;
  spec.inline_world = std::make_shared<GridWorld>(w);
  spec.start = {1, 2, 0};
  spec.goal_category = 1;
  spec.budget = 20;
  Episode ep(w, spec, cfg);
  EXPECT_FALSE(ep.step(Action::MoveForward).done);
  EXPECT_FALSE(ep.step(Action::MoveForward).done);
  const auto r = ep.step(Action::Stop);
  EXPECT_TRUE(r.done);
  EXPECT_TRUE(r.success);
}

TEST(Episode, BudgetEndsEpisodeWithoutSuccess) {
  const auto w = testutil::ascii_world({"#######", "#.....#", "#....1#", "#######"});
  SimConfig cfg;
  EpisodeSpec spec{0, nullptr, {1, 1, 2}, 1, 3};
  Episode ep(w, spec, cfg);
  ep.step(Action::TurnLeft);
  ep.step(Action::TurnLeft);
  const auto r = ep.step(Action::TurnLeft);
  EXPECT_TRUE(r.done);
  EXPECT_FALSE(r.success);
  EXPECT_LT(r.observation.step_index, spec.budget);
  EXPECT_THROW(ep.step(Action::Stop), std::logic_error);
}

TEST(Episode, RelativePoseStartsAtIdentity) {
  const auto w = generate_world(3, desk_config());
  const auto spec = sample_episode(w, 99, SimConfig{});
  Episode ep(w, spec, SimConfig{});
  const auto& rp = ep.observation().rel_pose;
  EXPECT_EQ(rp[0], 0.0);
  EXPECT_EQ(rp[1], 0.0);
  EXPECT_EQ(rp[2], 0.0);
  EXPECT_EQ(rp[3], 1.0);
}

TEST(Success, AdjacentUnobstructedGoal) {
  const auto w = testutil::ascii_world({"######", "#.4..#", "#....#", "######"});
  EXPECT_TRUE(is_success(w, {3, 1, 2}, 4, {}, {}));
  EXPECT_TRUE(is_success(w, {3, 1, 0}, 4, {}, {}));  // any heading counts
  SuccessConfig strict;
  strict.strict_heading = true;
  EXPECT_FALSE(is_success(w, {3, 1, 0}, 4, {}, strict));
}

TEST(Success, GoalBehindWallIsNotViewed) {
  // Geodesic distance 2 around the wall stub, but the stub hides the object
  // from every ray cast at (1,2).
  const auto w = testutil::ascii_world({
      "#####",
      "#.5.#",
      "#.#.#",
      "#...#",
      "#####",
  });
  const auto eligible = success_cells(w, 5, {}, {});
  EXPECT_EQ(geodesic_distance(w, {1, 3}, {{2, 1}}), 3.0);
  EXPECT_EQ(geodesic_distance(w, {1, 2}, {{2, 1}}), 2.0);
  EXPECT_TRUE(is_success(w, {1, 2, 0}, 5, {}, {}) ==
              target_visible(w, {1, 2}, {2, 1}, {}));
  const auto w2 = testutil::ascii_world({
      "#######",
      "#..#..#",
      "#..#5.#",
      "#.....#",
      "#######",
  });
  // (2,2) is 3 steps away; (2,1) is 4. Within radius 3 but the wall hides it.
  SuccessConfig wide;
  wide.radius = 3;
  EXPECT_FALSE(target_visible(w2, {2, 1}, {4, 2}, {}));
  EXPECT_FALSE(is_success(w2, {2, 2, 0}, 5, {}, {}));
}

TEST(Success, OneBeyondRadiusFailsAgainstBfsOracle) {
  const auto w = testutil::ascii_world({"##########", "#........#", "#.......6#", "##########"});
  SuccessConfig sc;
  const Cell goal{8, 2};
  for (int x = 1; x <= 7; ++x) {
    for (int y = 1; y <= 2; ++y) {
      const double d = oracle::dijkstra(w, {x, y}, {goal});
      const bool ok = is_success(w, {x, y, 0}, 6, {}, sc);
      if (d == sc.radius + 1) {
        EXPECT_FALSE(ok);
      }
      if (ok) {
        EXPECT_LE(d, sc.radius);
      }
    }
  }
}

TEST(Geodesic, BasicCases) {
  const auto w = testutil::open_world(7, 7);
  EXPECT_EQ(geodesic_distance(w, {2, 2}, {{2, 2}}), 0.0);
  EXPECT_EQ(geodesic_distance(w, {1, 1}, {{4, 5}}), 7.0);
}

TEST(Geodesic, UShapedWallMatchesDijkstra) {
  const auto w = testutil::ascii_world({
      "#########",
      "#.......#",
      "#.#####.#",
      "#.#.#.#.#",
      "#.#.#.#.#",
      "#...#...#",
      "#########",
  });
  const Cell from{3, 3};
  const Cell to{5, 3};
  const double d = geodesic_distance(w, from, {to});
  EXPECT_EQ(d, oracle::dijkstra(w, from, {to}));
  EXPECT_GT(d, 2.0);
}

TEST(Geodesic, MatchesDijkstraOnRandomWorlds) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    WorldConfig cfg = desk_config();
    cfg.rooms = 2 + static_cast<int>(seed % 4);
    const auto w = generate_world(seed, cfg);
    const auto cells = w.traversable_cells();
    Rng rng(seed);
    for (int k = 0; k < 10; ++k) {
      const Cell a = cells[rng.uniform_index(cells.size())];
      const Cell b = cells[rng.uniform_index(cells.size())];
      const Cell c = cells[rng.uniform_index(cells.size())];
      const double ab = geodesic_distance(w, a, {b});
      ASSERT_EQ(ab, oracle::dijkstra(w, a, {b}));
      EXPECT_LE(ab, geodesic_distance(w, a, {c}) + geodesic_distance(w, c, {b}));
    }
    const auto obj = w.objects().front().cell;
    ASSERT_EQ(geodesic_distance(w, cells.front(), {obj}), oracle::dijkstra(w, cells.front(), {obj}));
  }
}

TEST(Geodesic, UnreachableIsInvariantViolation) {
  const auto w = testutil::ascii_world({"#######", "#..#..#", "#######"});
  EXPECT_THROW(geodesic_distance(w, {1, 1}, {{5, 1}}), InvariantViolation);
}

TEST(Determinism, ReplayYieldsIdenticalObservations) {
  const auto w = generate_world(21, desk_config());
  const auto spec = sample_episode(w, 4, SimConfig{});
  const std::vector<Action> actions{Action::TurnLeft, Action::MoveForward, Action::MoveForward,
                                    Action::TurnRight, Action::MoveForward, Action::Stop};
  auto run = [&] {
    Episode ep(w, spec, SimConfig{});
    std::vector<double> trace;
    for (Action a : actions) {
      const auto r = ep.step(a);
      trace.insert(trace.end(), r.observation.depth.begin(), r.observation.depth.end());
      trace.push_back(ep.pose().x);
      trace.push_back(ep.pose().y);
      trace.push_back(ep.pose().heading);
      if (r.done) break;
    }
    return trace;
  };
  EXPECT_EQ(run(), run());
}
