#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "rimnav/demos.hpp"
#include "test_util.hpp"

using namespace rimnav;

namespace {

SimConfig desk_sim() {
  SimConfig s;
  s.world.width = 12;
  s.world.height = 12;
  s.world.rooms = 3;
  s.budget = 200;
  return s;
}

int forward_count(const std::vector<Action>& a) {
  return static_cast<int>(std::count(a.begin(), a.end(), Action::MoveForward));
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("rimnav_test_" + name);
}

}  // namespace

TEST(ShortestPathDemo, StraightLineStopsAtRadius) {
  const auto w = testutil::ascii_world({"##########", "#........#", "#....2...#", "#........#", "##########"});
  SimConfig sim;
  EpisodeSpec spec{0, std::make_shared<GridWorld>(w), {2, 2, 0}, 2, 50};
  const auto d = shortest_path_demo(w, spec, sim);
  // Goal 3 cells ahead, radius 2: one forward then stop.
  ASSERT_EQ(d.actions.size(), 2u);
  EXPECT_EQ(d.actions[0], Action::MoveForward);
  EXPECT_EQ(d.actions[1], Action::Stop);
  EXPECT_TRUE(d.success);
}

TEST(ShortestPathDemo, GoalBehindTurnsLeftTwice) {
  const auto w = testutil::ascii_world({"###########", "#.........#", "#.2.......#", "#.........#", "###########"});
  SimConfig sim;
  EpisodeSpec spec{0, nullptr, {7, 2, 0}, 2, 50};
  const auto d = shortest_path_demo(w, spec, sim);
  ASSERT_GE(d.actions.size(), 3u);
  EXPECT_EQ(d.actions[0], Action::TurnLeft);
  EXPECT_EQ(d.actions[1], Action::TurnLeft);
  const auto eligible = success_cells(w, 2, sim.sensor, sim.success);
  EXPECT_EQ(forward_count(d.actions), oracle::dijkstra(w, {7, 2}, eligible));
  EXPECT_TRUE(d.success);
}

TEST(ShortestPathDemo, RandomSpecsReplayToSuccessAlongGeodesics) {
  const auto sim = desk_sim();
  int checked = 0;
  for (uint64_t i = 0; i < 100; ++i) {
    const auto w = generate_world(1000 + i, sim.world);
    const auto spec = sample_episode(w, i, sim);
    const auto d = shortest_path_demo(w, spec, sim);
    const auto r = replay_actions(w, spec, sim, d.actions);
    ASSERT_TRUE(r.success) << "seed " << i;
    EXPECT_EQ(d.actions.back(), Action::Stop);
    const auto eligible = success_cells(w, spec.goal_category, sim.sensor, sim.success);
    EXPECT_EQ(forward_count(d.actions), oracle::dijkstra(w, spec.start.cell(), eligible));
    EXPECT_EQ(std::count(d.actions.begin(), d.actions.end(), Action::Stop), 1);
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}

TEST(ExploreDemo, DegeneratesWhenGoalVisibleAtStart) {
  const auto sim = desk_sim();
  int found = 0;
  for (uint64_t i = 0; i < 200 && found < 5; ++i) {
    const auto w = generate_world(i, sim.world);
    const auto spec = sample_episode(w, i, sim);
    const auto rc = raycast(w, spec.start, sim.sensor);
    if (std::find(rc.semantic.begin(), rc.semantic.end(), spec.goal_category) == rc.semantic.end()) continue;
    ++found;
    const auto e = explore_then_go_demo(w, spec, sim, 5);
    const auto s = shortest_path_demo(w, spec, sim);
    EXPECT_EQ(e.actions, s.actions);
    EXPECT_EQ(e.poses, s.poses);
  }
  EXPECT_EQ(found, 5);
}

TEST(ExploreDemo, FarGoalCostsMoreThanGeodesic) {
  const auto w = testutil::ascii_world({
      "##############",
      "#......#.....#",
      "#......#.....#",
      "#............#",
      "#......#...3.#",
      "#......#.....#",
      "##############",
  });
  SimConfig sim;
  sim.budget = 200;
  EpisodeSpec spec{0, std::make_shared<GridWorld>(w), {2, 2, 2}, 3, 200};
  const auto e = explore_then_go_demo(w, spec, sim, 3);
  ASSERT_TRUE(e.success);
  const auto eligible = success_cells(w, 3, sim.sensor, sim.success);
  EXPECT_GT(static_cast<double>(forward_count(e.actions)), oracle::dijkstra(w, spec.start.cell(), eligible));
  EXPECT_GT(e.actions.size(), shortest_path_demo(w, spec, sim).actions.size());
}

TEST(ExploreDemo, DeterministicInRngSeed) {
  const auto sim = desk_sim();
  for (uint64_t i = 0; i < 20; ++i) {
    const auto w = generate_world(300 + i, sim.world);
    const auto spec = sample_episode(w, i, sim);
    const auto a = explore_then_go_demo(w, spec, sim, 42);
    const auto b = explore_then_go_demo(w, spec, sim, 42);
    EXPECT_EQ(a, b);
    EXPECT_EQ(check_demo(a, sim), "");
  }
}

TEST(ExploreDemo, MostDeskEpisodesSucceed) {
  const auto sim = desk_sim();
  int ok = 0;
  for (uint64_t i = 0; i < 50; ++i) {
    const auto w = generate_world(500 + i, sim.world);
    const auto spec = sample_episode(w, i, sim);
    ok += explore_then_go_demo(w, spec, sim, i).success;
  }
  EXPECT_GE(ok, 48);
}

TEST(Dataset, RoundTripThousandDemos) {
  auto sim = desk_sim();
  DemoGenConfig gen;
  gen.num_worlds = 250;
  gen.episodes_per_world = 4;
  gen.include_failed = true;
  DemoDataset ds;
  ds.sim = sim;
  ds.category_names = default_category_names(sim.world.categories);
  ds.demos = generate_demos(sim, gen);
  ASSERT_EQ(ds.demos.size(), 1000u);
  const auto path = temp_path("roundtrip.jsonl");
  write_dataset(ds, path);
  const auto back = read_dataset(path);
  EXPECT_TRUE(back.rejected.empty());
  ASSERT_EQ(back.dataset.demos.size(), ds.demos.size());
  for (size_t i = 0; i < ds.demos.size(); ++i) {
    ASSERT_EQ(back.dataset.demos[i], ds.demos[i]) << i;
    EXPECT_EQ(inflection_count(back.dataset.demos[i].actions), inflection_count(ds.demos[i].actions));
  }
  EXPECT_EQ(back.dataset.category_names, ds.category_names);
  EXPECT_TRUE(back.dataset.sim == sim);
  std::filesystem::remove(path);
}

TEST(Dataset, CorruptPoseFlagsExactlyThatLine) {
  const auto sim = desk_sim();
  DemoGenConfig gen;
  gen.num_worlds = 5;
  gen.episodes_per_world = 2;
  DemoDataset ds;
  ds.sim = sim;
  ds.category_names = default_category_names(6);
  ds.demos = generate_demos(sim, gen);
  ASSERT_GE(ds.demos.size(), 4u);
  ds.demos[2].poses[1].x += 1;
  const auto path = temp_path("corrupt.jsonl");
  write_dataset(ds, path);
  const auto back = read_dataset(path);
  ASSERT_EQ(back.rejected.size(), 1u);
  EXPECT_EQ(back.rejected[0].line, 4);  // header is line 1
  EXPECT_NE(back.rejected[0].reason.find("pose 1"), std::string::npos);
  EXPECT_EQ(back.dataset.demos.size(), ds.demos.size() - 1);
  std::filesystem::remove(path);
}

TEST(Dataset, RejectsVersionMismatchAndGarbage) {
  const auto path = temp_path("bad.jsonl");
  {
    std::ofstream out(path);
    out << R"({"type":"header","version":99})" << "\n";
  }
  EXPECT_THROW(read_dataset(path), std::runtime_error);
  DemoDataset ds;
  ds.sim = desk_sim();
  ds.category_names = default_category_names(6);
  write_dataset(ds, path);
  {
    std::ofstream out(path, std::ios::app);
    out << "{not json\n";
  }
  const auto r = read_dataset(path);
  ASSERT_EQ(r.rejected.size(), 1u);
  EXPECT_EQ(r.rejected[0].line, 2);
  std::filesystem::remove(path);
}

TEST(Dataset, HumanDemoWithInlineWorldValidates) {
  const auto w = testutil::ascii_world({"#########", "#.......#", "#.....1.#", "#########"});
  SimConfig sim;
  Demonstration d;
  d.episode = {0, std::make_shared<GridWorld>(w), {1, 1, 0}, 1, 30};
  d.source = DemoSource::Human;
  d.actions = {Action::MoveForward, Action::MoveForward, Action::MoveForward, Action::MoveForward, Action::Stop};
  const auto r = replay_actions(w, d.episode, sim, d.actions);
  d.poses = r.poses;
  d.success = r.success;
  EXPECT_TRUE(d.success);
  EXPECT_EQ(check_demo(d, sim), "");
  DemoDataset ds;
  ds.sim = sim;
  ds.category_names = default_category_names(6);
  ds.demos = {d};
  const auto path = temp_path("human.jsonl");
  write_dataset(ds, path);
  const auto back = read_dataset(path);
  ASSERT_TRUE(back.rejected.empty());
  EXPECT_EQ(back.dataset.demos.front(), d);
  std::filesystem::remove(path);
}

TEST(Inflections, CountIncludesFirstStep) {
  using A = Action;
  EXPECT_EQ(inflection_count({A::MoveForward, A::MoveForward, A::TurnLeft}), 2);
  EXPECT_EQ(inflection_count({A::MoveForward, A::MoveForward, A::MoveForward}), 1);
  EXPECT_EQ(inflection_count({}), 0);
}
