#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "rimnav/evalmetrics.hpp"
#include "rimnav/gradsuite.hpp"
#include "rimnav/http.hpp"
#include "rimnav/service.hpp"
#include "rimnav/trainer.hpp"

using namespace rimnav;
namespace fs = std::filesystem;

namespace {

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return json::parse(in);
}

void write_json_file(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, p);
}

/// Config file (if any) with flag overrides merged on top.
json layered(const std::string& config_path, const json& overrides) {
  json j = config_path.empty() ? json::object() : read_json_file(config_path);
  j.merge_patch(overrides);
  return j;
}

struct WorldFlags {
  std::optional<int> width, height, rooms, categories, rays, budget;

  void add(CLI::App* app) {
    app->add_option("--width", width, "world width");
    app->add_option("--height", height, "world height");
    app->add_option("--rooms", rooms, "rooms per world");
    app->add_option("--categories", categories, "object categories");
    app->add_option("--rays", rays, "depth/semantic rays");
    app->add_option("--budget", budget, "episode step budget");
  }

  json overrides() const {
    json j = json::object();
    if (width) j["world"]["width"] = *width;
    if (height) j["world"]["height"] = *height;
    if (rooms) j["world"]["rooms"] = *rooms;
    if (categories) j["world"]["categories"] = *categories;
    if (rays) j["sensor"]["rays"] = *rays;
    if (budget) j["budget"] = *budget;
    return j;
  }
};

SimConfig sim_from(const json& cfg, const WorldFlags& wf) {
  json sim = cfg.value("sim", json(SimConfig{}));
  sim.merge_patch(wf.overrides());
  return sim.get<SimConfig>();
}

/// Merges datasets from files and directories of .jsonl files. All parts must
/// share one simulator config.
DemoDataset load_datasets(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.path().extension() == ".jsonl") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.push_back(in);
    }
  }
  if (files.empty()) throw std::invalid_argument("no dataset files given");
  DemoDataset merged;
  json sources = json::array();
  for (size_t i = 0; i < files.size(); ++i) {
    DatasetReadResult r = read_dataset(files[i]);
    for (const auto& issue : r.rejected)
      std::cerr << files[i].string() << ":" << issue.line << ": skipped: " << issue.reason << "\n";
    if (i == 0) {
      merged.sim = r.dataset.sim;
      merged.category_names = r.dataset.category_names;
    } else if (json(r.dataset.sim) != json(merged.sim)) {
      throw std::invalid_argument(files[i].string() + " was generated with a different simulator config");
    }
    for (auto& d : r.dataset.demos) merged.demos.push_back(std::move(d));
    sources.push_back(files[i].string());
  }
  merged.provenance = {{"sources", sources}};
  return merged;
}

std::string heading_glyph(int h) { return std::string(1, ">v<^"[h]); }

int cmd_gen_worlds(const std::string& config, const WorldFlags& wf, std::optional<uint64_t> seed, int count,
                   const fs::path& out) {
  const json cfg = layered(config, seed ? json{{"world_seed_base", *seed}} : json::object());
  const SimConfig sim = sim_from(cfg, wf);
  const uint64_t base = cfg.value("world_seed_base", uint64_t{0});
  const int n = cfg.value("count", count);
  fs::create_directories(out);
  for (int i = 0; i < n; ++i) {
    const uint64_t s = base + static_cast<uint64_t>(i);
    json j = world_to_json(generate_world(s, sim.world));
    j["provenance"] = provenance("gen-worlds", {{"sim", sim}, {"count", n}, {"world_seed_base", base}},
                                 {{"world_seed", s}});
    write_json_file(out / ("world_" + std::to_string(s) + ".json"), j);
  }
  std::cout << "wrote " << n << " worlds to " << out.string() << "\n";
  return 0;
}

int cmd_gen_demos(const std::string& config, const WorldFlags& wf, const json& gen_overrides, const fs::path& out) {
  json cfg = layered(config, json::object());
  const SimConfig sim = sim_from(cfg, wf);
  json gen_j = cfg.value("gen", json(DemoGenConfig{}));
  gen_j.merge_patch(gen_overrides);
  const DemoGenConfig gen = gen_j.get<DemoGenConfig>();
  DemoDataset ds;
  ds.sim = sim;
  ds.category_names = default_category_names(sim.world.categories);
  ds.demos = generate_demos(sim, gen);
  ds.provenance = provenance("gen-demos", {{"sim", sim}, {"gen", gen}}, {{"seed", gen.seed}});
  write_dataset(ds, out);
  int ok = 0;
  for (const auto& d : ds.demos) ok += d.success;
  std::cout << "wrote " << ds.demos.size() << " demonstrations (" << ok << " successful) to " << out.string() << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::vector<std::string>& data, const json& overrides,
              const fs::path& out, int workers) {
  const json cfg_j = layered(config, overrides);
  TrainConfig cfg = cfg_j.get<TrainConfig>();
  cfg.workers = workers;
  const DemoDataset ds = load_datasets(data);
  std::cerr << "training on " << ds.demos.size() << " demonstrations\n";
  fs::create_directories(out);
  const json effective = cfg;
  const json prov = provenance("train", {{"train", effective}, {"sim", ds.sim}, {"data", ds.provenance}},
                               {{"seed", cfg.seed}});
  const TrainReport rep = train(cfg, ds, out, &std::cout, prov);
  write_json_file(out / "report.json", {{"report", rep}, {"provenance", prov}});
  return 0;
}

SimConfig checkpoint_sim(const fs::path& ckpt) {
  const json meta = nn::read_manifest(ckpt).at("meta");
  const json& prov = meta.value("provenance", json::object());
  if (prov.contains("config") && prov["config"].contains("sim")) return prov["config"]["sim"].get<SimConfig>();
  throw std::invalid_argument("checkpoint has no simulator config; pass --config with a \"sim\" entry");
}

int cmd_eval(const std::string& config, const WorldFlags& wf, const fs::path& ckpt, int episodes,
             uint64_t world_seed_base, uint64_t seed, const fs::path& out, const std::string& traj_out, int workers) {
  const json cfg = layered(config, json::object());
  const SimConfig sim = cfg.contains("sim") || !wf.overrides().empty() ? sim_from(cfg, wf) : checkpoint_sim(ckpt);
  const auto model = NavModel<float>::load(ckpt);
  const auto specs = make_eval_episodes(sim, episodes, world_seed_base, seed);
  const EvalResult r = evaluate(*model, specs, sim, workers);
  const json prov = provenance("eval",
                               {{"sim", sim},
                                {"checkpoint", ckpt.string()},
                                {"episodes", episodes},
                                {"world_seed_base", world_seed_base},
                                {"policy", model->config()}},
                               {{"eval_seed", seed}});
  json eps = json::array();
  for (const auto& e : r.episodes) eps.push_back(e);
  write_json_file(out, {{"provenance", prov}, {"metrics", r.aggregate}, {"episodes", eps}});
  if (!traj_out.empty()) {
    DemoDataset ds;
    ds.sim = sim;
    ds.category_names = default_category_names(sim.world.categories);
    ds.demos = r.trajectories;
    ds.provenance = prov;
    write_dataset(ds, traj_out);
  }
  std::cout << std::fixed << std::setprecision(4) << "SR " << r.aggregate.overall.sr << "  SPL "
            << r.aggregate.overall.spl << "  SoftSPL " << r.aggregate.overall.soft_spl << "  ("
            << r.aggregate.overall.episodes << " episodes, " << std::setprecision(3) << r.ms_per_step
            << " ms/step)\n";
  return 0;
}

int cmd_sweep(const std::string& config, const std::vector<std::string>& data, const json& overrides,
              const fs::path& out, int workers) {
  const json cfg_j = layered(config, overrides);
  SweepConfig sc = cfg_j.get<SweepConfig>();
  sc.train.workers = workers;
  const DemoDataset ds = load_datasets(data);
  fs::create_directories(out);
  SweepResult res = run_sweep(sc, ds, out, &std::cerr);
  const std::string table = format_results(res.variants);
  json vars = json::array();
  for (const auto& v : res.variants) vars.push_back(v);
  write_json_file(out / "results.json",
                  {{"provenance", provenance("sweep", sc, {{"seeds", sc.seeds}})},
                   {"variants", vars},
                   {"train_reports", res.train_reports}});
  std::ofstream(out / "results.txt") << table;
  std::cout << table;
  return 0;
}

int cmd_replay(const std::string& data, size_t index, bool show_map) {
  const DatasetReadResult r = read_dataset(data);
  if (index >= r.dataset.demos.size())
    throw std::invalid_argument("index " + std::to_string(index) + " out of range (" +
                                std::to_string(r.dataset.demos.size()) + " demonstrations)");
  const Demonstration& d = r.dataset.demos[index];
  const SimConfig& sim = r.dataset.sim;
  const GridWorld w = resolve_world(d.episode, sim.world);
  std::cout << "world " << d.episode.world_seed << "  goal " << d.episode.goal_category << " ("
            << r.dataset.category_names.at(d.episode.goal_category) << ")  source " << source_name(d.source)
            << "  steps " << d.actions.size() << "  success " << (d.success ? "yes" : "no") << "\n";
  Episode ep(w, d.episode, sim);
  auto print_state = [&](size_t t) {
    const Pose& p = ep.pose();
    std::cout << "t=" << t << " pose (" << p.x << "," << p.y << ") heading " << p.heading;
    if (t < d.actions.size()) std::cout << "  next " << action_name(d.actions[t]);
    std::cout << "\n";
    if (!show_map) return;
    const json td = topdown_to_json(w, p);
    for (int y = 0; y < w.height(); ++y) {
      std::string row = td["rows"][y];
      if (y == p.y) row[p.x] = heading_glyph(p.heading)[0];
      std::cout << "  " << row << "\n";
    }
  };
  print_state(0);
  for (size_t t = 0; t < d.actions.size(); ++t) {
    ep.step(d.actions[t]);
    print_state(t + 1);
  }
  std::cout << "final: done " << (ep.done() ? "yes" : "no") << "  success " << (ep.success() ? "yes" : "no") << "\n";
  return 0;
}

int cmd_serve(const std::string& config, const WorldFlags& wf, const std::string& host, int port,
              const fs::path& demo_dir, size_t max_sessions) {
  const json cfg = layered(config, json::object());
  ServiceConfig sc;
  sc.sim = sim_from(cfg, wf);
  sc.demo_dir = demo_dir;
  sc.max_sessions = max_sessions;
  NavService svc(sc);
  const bool ok = serve(svc, host, port, [&](int bound) {
    std::cout << "listening on http://" << host << ":" << bound << " (no authentication; localhost use only)"
              << std::endl;
  });
  if (!ok) {
    std::cerr << "error: cannot bind " << host << ":" << port << "\n";
    return 1;
  }
  return 0;
}

int cmd_gradcheck(const std::string& out) {
  bool all = true;
  const auto entries = run_gradient_suite([&](const GradSuiteEntry& e) {
    all = all && e.pass();
    std::cout << std::left << std::setw(34) << e.op << std::scientific << std::setprecision(3) << e.max_rel_err
              << "  (tol " << e.tolerance << ")  " << (e.pass() ? "ok" : "FAIL  worst " + e.worst) << std::endl;
  });
  if (!out.empty()) {
    json j = json::array();
    for (const auto& e : entries) j.push_back(e);
    write_json_file(out, {{"provenance", provenance("gradcheck", json::object(), json::object())},
                          {"entries", j},
                          {"pass", all}});
  }
  std::cout << (all ? "all gradient checks passed" : "gradient check FAILED") << "\n";
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rimnav: object-goal navigation workbench"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  int workers = default_workers();
  auto common = [&](CLI::App* sub, bool with_out = true) {
    sub->add_option("--config", config, "JSON config file; flags override its values")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed");
    sub->add_option("--workers", workers, "worker threads (default: RIMNAV_WORKERS or 1)")->check(CLI::PositiveNumber);
    if (with_out) sub->add_option("--out", out, "output path")->required();
  };

  WorldFlags wf;

  auto* gen_worlds = app.add_subcommand("gen-worlds", "write generated world files");
  common(gen_worlds);
  wf.add(gen_worlds);
  int count = 10;
  gen_worlds->add_option("--count", count, "number of worlds")->check(CLI::PositiveNumber);

  auto* gen_demos = app.add_subcommand("gen-demos", "generate an oracle demonstration dataset");
  common(gen_demos);
  wf.add(gen_demos);
  std::optional<int> num_worlds, per_world;
  std::optional<uint64_t> world_seed_base;
  std::optional<double> explore_ratio;
  bool include_failed = false;
  gen_demos->add_option("--worlds", num_worlds, "number of worlds");
  gen_demos->add_option("--episodes-per-world", per_world, "episodes per world");
  gen_demos->add_option("--world-seed-base", world_seed_base, "first world seed");
  gen_demos->add_option("--explore-ratio", explore_ratio, "fraction of explore-then-go demos");
  gen_demos->add_flag("--include-failed", include_failed, "keep demos that did not reach the goal");

  auto* train_cmd = app.add_subcommand("train", "behaviour-cloning training");
  common(train_cmd);
  std::vector<std::string> data;
  std::optional<int> epochs, batch, window, d_model, layers, map_size;
  std::optional<double> lr;
  std::optional<std::string> memory;
  bool no_aux = false;
  train_cmd->add_option("--data", data, "dataset files or directories")->required();
  train_cmd->add_option("--epochs", epochs, "epochs");
  train_cmd->add_option("--batch-size", batch, "episodes per batch");
  train_cmd->add_option("--lr", lr, "base learning rate");
  train_cmd->add_option("--bptt-window", window, "truncated BPTT window");
  train_cmd->add_option("--d", d_model, "model width");
  train_cmd->add_option("--layers", layers, "transformer layers");
  train_cmd->add_option("--memory", memory, "rim, recurrent_state or episodic_sequence");
  train_cmd->add_option("--map-size", map_size, "RIM map side length");
  train_cmd->add_flag("--no-aux", no_aux, "disable auxiliary tasks");

  auto* eval_cmd = app.add_subcommand("eval", "greedy evaluation on held-out episodes");
  common(eval_cmd);
  wf.add(eval_cmd);
  std::string checkpoint, trajectories;
  int episodes = 100;
  uint64_t eval_world_base = 1000000;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--episodes", episodes, "evaluation episodes")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--world-seed-base", eval_world_base, "first evaluation world seed");
  eval_cmd->add_option("--trajectories", trajectories, "also write rollouts as a dataset file");

  auto* sweep_cmd = app.add_subcommand("sweep", "train and evaluate ablation variants");
  common(sweep_cmd);
  std::string preset;
  std::vector<uint64_t> seeds;
  std::optional<int> sweep_eps;
  sweep_cmd->add_option("--data", data, "dataset files or directories")->required();
  sweep_cmd->add_option("--preset", preset, "memory, map, aux or all");
  sweep_cmd->add_option("--seeds", seeds, "training seeds");
  sweep_cmd->add_option("--eval-episodes", sweep_eps, "evaluation episodes");
  sweep_cmd->add_option("--epochs", epochs, "epochs per run");

  auto* replay_cmd = app.add_subcommand("replay", "print a recorded trajectory step by step");
  std::string replay_data;
  size_t replay_index = 0;
  bool no_map = false;
  replay_cmd->add_option("--data", replay_data, "dataset file")->required()->check(CLI::ExistingFile);
  replay_cmd->add_option("--index", replay_index, "demonstration index");
  replay_cmd->add_flag("--no-map", no_map, "poses only");

  auto* serve_cmd = app.add_subcommand("serve", "run the teleoperation and replay service");
  common(serve_cmd, false);
  wf.add(serve_cmd);
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string demo_dir = "demos";
  size_t max_sessions = 64;
  serve_cmd->add_option("--host", host, "bind address");
  serve_cmd->add_option("--port", port, "port (0 picks a free one)");
  serve_cmd->add_option("--demo-dir", demo_dir, "where saved demos go");
  serve_cmd->add_option("--max-sessions", max_sessions, "concurrent session limit");

  auto* grad_cmd = app.add_subcommand("gradcheck", "float64 finite-difference gradient suite");
  std::string grad_out;
  grad_cmd->add_option("--out", grad_out, "JSON report path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_worlds) return cmd_gen_worlds(config, wf, seed, count, out);
    if (*gen_demos) {
      json g = json::object();
      if (seed) g["seed"] = *seed;
      if (num_worlds) g["num_worlds"] = *num_worlds;
      if (per_world) g["episodes_per_world"] = *per_world;
      if (world_seed_base) g["world_seed_base"] = *world_seed_base;
      if (explore_ratio) g["explore_ratio"] = *explore_ratio;
      if (include_failed) g["include_failed"] = true;
      return cmd_gen_demos(config, wf, g, out);
    }
    if (*train_cmd) {
      json o = json::object();
      if (seed) o["seed"] = *seed;
      if (epochs) o["epochs"] = *epochs;
      if (batch) o["batch_size"] = *batch;
      if (lr) o["base_lr"] = *lr;
      if (window) o["bptt_window"] = *window;
      if (d_model) o["policy"]["d"] = *d_model;
      if (layers) o["policy"]["layers"] = *layers;
      if (memory) o["policy"]["memory"] = *memory;
      if (map_size) o["policy"]["map_h"] = o["policy"]["map_w"] = *map_size;
      if (no_aux) o["policy"]["aux"] = {{"vp", false}, {"em", false}, {"sp", false}};
      return cmd_train(config, data, o, out, workers);
    }
    if (*eval_cmd) return cmd_eval(config, wf, checkpoint, episodes, eval_world_base, seed.value_or(7), out,
                                   trajectories, workers);
    if (*sweep_cmd) {
      json o = json::object();
      if (!preset.empty()) o["preset"] = preset;
      if (!seeds.empty()) o["seeds"] = seeds;
      if (sweep_eps) o["eval_episodes"] = *sweep_eps;
      if (epochs) o["train"]["epochs"] = *epochs;
      if (seed) o["eval_seed"] = *seed;
      return cmd_sweep(config, data, o, out, workers);
    }
    if (*replay_cmd) return cmd_replay(replay_data, replay_index, !no_map);
    if (*serve_cmd) return cmd_serve(config, wf, host, port, demo_dir, max_sessions);
    if (*grad_cmd) return cmd_gradcheck(grad_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
