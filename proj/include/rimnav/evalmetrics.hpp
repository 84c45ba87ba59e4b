#ifndef RIMNAV_EVALMETRICS_HPP_
#define RIMNAV_EVALMETRICS_HPP_

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rimnav/demos.hpp"
#include "rimnav/model.hpp"
#include "rimnav/parallel.hpp"
#include "rimnav/trainer.hpp"

namespace rimnav {

// ---------------------------------------------------------------------------
// Metrics

struct EpisodeMetrics {
  bool success = false;
  double shortest_path = 0;     // l
  double agent_path = 0;        // p, successful forward moves
  double initial_distance = 0;  // d_0
  double final_distance = 0;    // d_T
  int steps = 0;
  int collisions = 0;
  int goal_category = 0;
  friend bool operator==(const EpisodeMetrics&, const EpisodeMetrics&) = default;
};

inline void to_json(json& j, const EpisodeMetrics& m) {
  j = {{"success", m.success},
       {"shortest_path", m.shortest_path},
       {"agent_path", m.agent_path},
       {"initial_distance", m.initial_distance},
       {"final_distance", m.final_distance},
       {"steps", m.steps},
       {"collisions", m.collisions},
       {"goal_category", m.goal_category}};
}

struct MetricTriple {
  double sr = 0, spl = 0, soft_spl = 0;
  int episodes = 0;
  friend bool operator==(const MetricTriple&, const MetricTriple&) = default;
};

inline void to_json(json& j, const MetricTriple& m) {
  j = {{"sr", m.sr}, {"spl", m.spl}, {"soft_spl", m.soft_spl}, {"episodes", m.episodes}};
}

struct AggregateMetrics {
  MetricTriple overall;
  std::map<int, MetricTriple> per_category;
  friend bool operator==(const AggregateMetrics&, const AggregateMetrics&) = default;
};

inline void to_json(json& j, const AggregateMetrics& m) {
  json cats = json::object();
  for (const auto& [c, t] : m.per_category) cats[std::to_string(c)] = t;
  j = {{"sr", m.overall.sr},
       {"spl", m.overall.spl},
       {"soft_spl", m.overall.soft_spl},
       {"episodes", m.overall.episodes},
       {"per_category", cats}};
}

/// success * l / max(p, l)
inline double spl_term(const EpisodeMetrics& m) {
  return m.success ? m.shortest_path / std::max(m.agent_path, m.shortest_path) : 0.0;
}

/// max(0, 1 - d_T / d_0) * l / max(p, l)
inline double soft_spl_term(const EpisodeMetrics& m) {
  const double progress = std::max(0.0, 1.0 - m.final_distance / m.initial_distance);
  return progress * m.shortest_path / std::max(m.agent_path, m.shortest_path);
}

inline AggregateMetrics compute_metrics(const std::vector<EpisodeMetrics>& eps) {
  if (eps.empty()) throw std::invalid_argument("compute_metrics: no episodes");
  struct Sums {
    double s = 0, spl = 0, soft = 0;
    int n = 0;
  };
  Sums all;
  std::map<int, Sums> cats;
  for (const auto& m : eps) {
    if (!(m.initial_distance > 0) || !(m.shortest_path > 0))
      throw std::invalid_argument("compute_metrics: episode with non-positive initial or shortest distance");
    if (m.agent_path < 0 || m.final_distance < 0) throw std::invalid_argument("compute_metrics: negative distance");
    for (Sums* s : {&all, &cats[m.goal_category]}) {
      s->s += m.success ? 1.0 : 0.0;
      s->spl += spl_term(m);
      s->soft += soft_spl_term(m);
      ++s->n;
    }
  }
  auto finish = [](const Sums& s) { return MetricTriple{s.s / s.n, s.spl / s.n, s.soft / s.n, s.n}; };
  AggregateMetrics out{finish(all), {}};
  for (const auto& [c, s] : cats) out.per_category[c] = finish(s);
  return out;
}

// ---------------------------------------------------------------------------
// Greedy rollout with the collision fallback

using ActionScores = std::array<double, kNumActions>;

struct ActionChoice {
  Action action = Action::Stop;
  Action preferred = Action::Stop;
  bool collided = false;  // the preferred MoveForward was blocked
};

/// Actions by descending score; ties keep the lower action code first.
inline std::array<int, kNumActions> rank_actions(const ActionScores& p) {
  std::array<int, kNumActions> order{};
  for (int a = 0; a < kNumActions; ++a) order[a] = a;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
  return order;
}

/// Argmax action, replaced by the runner-up when it is a blocked MoveForward.
inline ActionChoice choose_action(const ActionScores& p, const Episode& ep) {
  const auto order = rank_actions(p);
  ActionChoice c;
  c.preferred = c.action = static_cast<Action>(order[0]);
  if (c.preferred == Action::MoveForward && ep.peek(Action::MoveForward).collided) {
    c.collided = true;
    c.action = static_cast<Action>(order[1]);
  }
  return c;
}

struct RolloutStep {
  ActionScores probs{};
  ActionChoice choice;
  StepResult result;
};

/// Scores the current observation, chooses and executes one action.
template <typename Scorer>
RolloutStep greedy_step(Episode& ep, Scorer& scorer) {
  RolloutStep s;
  s.probs = scorer(ep);
  s.choice = choose_action(s.probs, ep);
  s.result = ep.step(s.choice.action);
  return s;
}

struct RolloutResult {
  Demonstration trajectory;  // source = rollout
  EpisodeMetrics metrics;
  std::vector<ActionScores> probs;
};

/// d_T and l against the success-eligible cells of the goal category.
inline EpisodeMetrics episode_metrics(const GridWorld& world, const EpisodeSpec& spec, const SimConfig& sim,
                                      const Demonstration& traj, int collisions) {
  const auto goals = success_cells(world, spec.goal_category, sim.sensor, sim.success);
  EpisodeMetrics m;
  m.success = traj.success;
  m.goal_category = spec.goal_category;
  m.initial_distance = geodesic_distance(world, spec.start.cell(), goals);
  m.shortest_path = m.initial_distance;
  m.final_distance = geodesic_distance(world, traj.poses.back().cell(), goals);
  m.steps = static_cast<int>(traj.actions.size());
  m.collisions = collisions;
  for (size_t t = 0; t < traj.actions.size(); ++t)
    if (traj.actions[t] == Action::MoveForward && !(traj.poses[t + 1] == traj.poses[t])) m.agent_path += 1.0;
  return m;
}

/// Runs `scorer(const Episode&) -> ActionScores` greedily until Stop or budget.
template <typename Scorer>
RolloutResult rollout(const GridWorld& world, const EpisodeSpec& spec, const SimConfig& sim, Scorer&& scorer) {
  Episode ep(world, spec, sim);
  RolloutResult r;
  r.trajectory.episode = spec;
  r.trajectory.source = DemoSource::Rollout;
  r.trajectory.poses.push_back(ep.pose());
  int collisions = 0;
  while (!ep.done()) {
    RolloutStep s = greedy_step(ep, scorer);
    r.probs.push_back(s.probs);
    r.trajectory.actions.push_back(s.choice.action);
    r.trajectory.poses.push_back(ep.pose());
    if (s.choice.collided) ++collisions;
  }
  r.trajectory.success = ep.success();
  r.metrics = episode_metrics(world, spec, sim, r.trajectory, collisions);
  return r;
}

/// Stateful scorer backed by a NavModel. Call reset() before a new episode.
template <typename T>
class ModelScorer {
 public:
  explicit ModelScorer(const NavModel<T>& model) : model_(&model) {}

  void reset() {
    memory_.reset();
    seconds_ = 0;
    steps_ = 0;
  }

  ActionScores operator()(const Episode& ep) {
    const auto t0 = std::chrono::steady_clock::now();
    const Policy<T>& pol = model_->policy();
    const Observation& o = ep.observation();
    nn::Tape<T> tape;
    nn::Var<T> mem = memory_ ? tape.constant(*memory_) : pol.initial_memory(tape);
    Encoded<T> enc = pol.encode(tape, make_batch<T>({&o}, model_->config()));
    std::optional<nn::Var<T>> map_pos;
    if (model_->config().memory == MemoryVariant::kRim) map_pos = pol.map_position_features(tape);
    StepOutput<T> out = pol.step(tape, mem, enc.o, {o.rel_pose[0], o.rel_pose[1]}, nullptr, map_pos);
    memory_ = out.memory.value();
    const nn::Matrix<T> logits = pol.action_logits(tape, out.o_hat).value();
    ActionScores p{};
    const double mx = static_cast<double>(logits.maxCoeff());
    double z = 0;
    for (int a = 0; a < kNumActions; ++a) z += p[a] = std::exp(static_cast<double>(logits(0, a)) - mx);
    for (double& v : p) v /= z;
    seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++steps_;
    return p;
  }

  /// Occupancy decoded from the current map: em_size x em_size x 2
  /// probabilities, row-major (row, col, channel). Empty without the head.
  std::optional<std::vector<double>> decoded_occupancy() const {
    const AuxHeads<T>* aux = model_->aux();
    if (!memory_ || !aux || !model_->config().aux.em) return std::nullopt;
    nn::Tape<T> tape;
    const nn::Matrix<T> p = aux->em_probs(tape, tape.constant(*memory_)).value();
    std::vector<double> out(static_cast<size_t>(p.size()));
    for (Eigen::Index i = 0; i < p.size(); ++i) out[static_cast<size_t>(i)] = static_cast<double>(p.data()[i]);
    return out;
  }

  const std::optional<nn::Matrix<T>>& memory() const { return memory_; }
  double seconds() const { return seconds_; }
  int steps() const { return steps_; }

 private:
  const NavModel<T>* model_;
  std::optional<nn::Matrix<T>> memory_;
  double seconds_ = 0;
  int steps_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

/// One episode per world, world seeds base, base+1, ...
inline std::vector<EpisodeSpec> make_eval_episodes(const SimConfig& sim, int count, uint64_t world_seed_base,
                                                   uint64_t seed) {
  std::vector<EpisodeSpec> out;
  for (int i = 0; i < count; ++i) {
    const uint64_t ws = world_seed_base + static_cast<uint64_t>(i);
    const GridWorld w = generate_world(ws, sim.world);
    out.push_back(sample_episode(w, derive_seed(seed, {ws}), sim));
  }
  return out;
}

struct EvalResult {
  std::vector<EpisodeMetrics> episodes;
  AggregateMetrics aggregate;
  std::vector<Demonstration> trajectories;
  double ms_per_step = 0;  // timing only; excluded from the deterministic outputs
};

template <typename T>
EvalResult evaluate(const NavModel<T>& model, const std::vector<EpisodeSpec>& specs, const SimConfig& sim,
                    int workers = 1) {
  if (specs.empty()) throw std::invalid_argument("evaluate: no episodes");
  EvalResult r;
  r.episodes.resize(specs.size());
  r.trajectories.resize(specs.size());
  std::vector<double> secs(specs.size(), 0.0);
  std::vector<int> steps(specs.size(), 0);
  parallel_for(specs.size(), workers, [&](size_t i) {
    const GridWorld w = resolve_world(specs[i], sim.world);
    ModelScorer<T> scorer(model);
    RolloutResult rr = rollout(w, specs[i], sim, scorer);
    r.episodes[i] = rr.metrics;
    r.trajectories[i] = std::move(rr.trajectory);
    secs[i] = scorer.seconds();
    steps[i] = scorer.steps();
  });
  r.aggregate = compute_metrics(r.episodes);
  double total_s = 0;
  int total_steps = 0;
  for (size_t i = 0; i < specs.size(); ++i) {
    total_s += secs[i];
    total_steps += steps[i];
  }
  r.ms_per_step = total_steps ? 1000.0 * total_s / total_steps : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Experiments

struct VariantSpec {
  std::string name;
  json overrides = json::object();  // merged into the base policy config
};

/// Sweep variants: "memory", "map", "aux" or "all".
inline std::vector<VariantSpec> preset_variants(const std::string& preset) {
  const json no_aux = {{"vp", false}, {"em", false}, {"sp", false}};
  auto aux = [](bool vp, bool em, bool sp) { return json{{"vp", vp}, {"em", em}, {"sp", sp}}; };
  std::vector<VariantSpec> t1{{"recurrent_state", {{"memory", "recurrent_state"}, {"aux", no_aux}}},
                              {"episodic_sequence", {{"memory", "episodic_sequence"}, {"aux", no_aux}}},
                              {"rim", {{"memory", "rim"}, {"aux", no_aux}}}};
  std::vector<VariantSpec> t2;
  for (int s : {1, 3, 5, 7})
    t2.push_back({"rim_" + std::to_string(s) + "x" + std::to_string(s), {{"map_h", s}, {"map_w", s}, {"aux", no_aux}}});
  t2.push_back({"rim_3x3_no_map_pos", {{"use_map_positions", false}, {"aux", no_aux}}});
  t2.push_back({"rim_3x3_no_agent_pose", {{"use_agent_pose", false}, {"aux", no_aux}}});
  std::vector<VariantSpec> t3{{"aux_none", {{"aux", aux(false, false, false)}}},
                              {"aux_vp", {{"aux", aux(true, false, false)}}},
                              {"aux_em", {{"aux", aux(false, true, false)}}},
                              {"aux_sp", {{"aux", aux(false, false, true)}}},
                              {"aux_vp_sp", {{"aux", aux(true, false, true)}}},
                              {"aux_all", {{"aux", aux(true, true, true)}}}};
  if (preset == "memory") return t1;
  if (preset == "map") return t2;
  if (preset == "aux") return t3;
  if (preset == "all") {
    std::vector<VariantSpec> out = t1;
    out.insert(out.end(), t2.begin(), t2.end());
    out.insert(out.end(), t3.begin(), t3.end());
    return out;
  }
  throw std::invalid_argument("unknown sweep preset '" + preset + "' (memory, map, aux, all)");
}

inline PolicyConfig apply_overrides(const PolicyConfig& base, const json& overrides) {
  json j = base;
  j.merge_patch(overrides);
  PolicyConfig out = j.get<PolicyConfig>();
  out.validate();
  return out;
}

/// Human-readable memory footprint.
inline std::string memory_shape(const PolicyConfig& c) {
  switch (c.memory) {
    case MemoryVariant::kRim:
      return std::to_string(c.map_h) + "x" + std::to_string(c.map_w) + "x" + std::to_string(c.d);
    case MemoryVariant::kRecurrentState: return "1x" + std::to_string(c.d);
    case MemoryVariant::kEpisodicSequence: return "Tx" + std::to_string(c.d);
  }
  return "?";
}

struct MeanStd {
  double mean = 0, std = 0;
};

/// Sample standard deviation (n - 1); zero for a single value.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct VariantResult {
  std::string name;
  PolicyConfig policy;
  std::vector<std::string> checkpoints;
  std::vector<AggregateMetrics> per_seed;
  MeanStd sr, spl, soft_spl;
  double ms_per_step = 0;
  size_t parameters = 0;
};

inline void to_json(json& j, const MeanStd& m) { j = {{"mean", m.mean}, {"std", m.std}}; }

inline void to_json(json& j, const VariantResult& r) {
  j = {{"name", r.name},
       {"memory", memory_variant_name(r.policy.memory)},
       {"memory_shape", memory_shape(r.policy)},
       {"policy_config", r.policy},
       {"checkpoints", r.checkpoints},
       {"per_seed", r.per_seed},
       {"sr", r.sr},
       {"spl", r.spl},
       {"soft_spl", r.soft_spl},
       {"ms_per_step", r.ms_per_step},
       {"parameters", r.parameters}};
}

struct ExperimentVariant {
  std::string name;
  std::vector<std::filesystem::path> checkpoints;  // one per seed
};

/// Evaluates every checkpoint on the same episode set.
inline std::vector<VariantResult> run_experiment(const std::vector<ExperimentVariant>& variants,
                                                 const std::vector<EpisodeSpec>& episodes, const SimConfig& sim,
                                                 int workers = 1) {
  for (const auto& v : variants) {
    if (v.checkpoints.empty()) throw std::invalid_argument("variant " + v.name + " has no checkpoints");
    for (const auto& c : v.checkpoints)
      if (!std::filesystem::exists(c / "manifest.json"))
        throw std::runtime_error("missing checkpoint for variant " + v.name + ": " + c.string());
  }
  std::vector<VariantResult> out;
  for (const auto& v : variants) {
    VariantResult r;
    r.name = v.name;
    std::vector<double> sr, spl, soft, ms;
    for (const auto& c : v.checkpoints) {
      auto model = NavModel<float>::load(c);
      r.policy = model->config();
      r.parameters = 0;
      for (const auto* p : model->store().sorted())
        if (!p->name.starts_with("aux.")) r.parameters += static_cast<size_t>(p->value.size());
      EvalResult e = evaluate(*model, episodes, sim, workers);
      r.checkpoints.push_back(c.string());
      r.per_seed.push_back(e.aggregate);
      sr.push_back(e.aggregate.overall.sr);
      spl.push_back(e.aggregate.overall.spl);
      soft.push_back(e.aggregate.overall.soft_spl);
      ms.push_back(e.ms_per_step);
    }
    r.sr = mean_std(sr);
    r.spl = mean_std(spl);
    r.soft_spl = mean_std(soft);
    r.ms_per_step = mean_std(ms).mean;
    out.push_back(std::move(r));
  }
  return out;
}

/// Aligned-column text table of mean +- std per variant.
inline std::string format_results(const std::vector<VariantResult>& results) {
  std::ostringstream os;
  auto pm = [](const MeanStd& m) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * m.mean << " +- " << 100.0 * m.std;
    return s.str();
  };
  os << std::left << std::setw(26) << "variant" << std::setw(12) << "memory" << std::setw(8) << "seeds"
     << std::setw(18) << "SR" << std::setw(18) << "SPL" << std::setw(18) << "SoftSPL" << "ms/step\n";
  for (const auto& r : results) {
    std::ostringstream ms;
    ms << std::fixed << std::setprecision(3) << r.ms_per_step;
    os << std::left << std::setw(26) << r.name << std::setw(12) << memory_shape(r.policy) << std::setw(8)
       << r.per_seed.size() << std::setw(18) << pm(r.sr) << std::setw(18) << pm(r.spl) << std::setw(18)
       << pm(r.soft_spl) << ms.str() << "\n";
  }
  return os.str();
}

struct SweepConfig {
  std::string preset = "memory";
  std::vector<VariantSpec> variants;  // empty: the preset's variants
  std::vector<uint64_t> seeds{0, 1, 2};
  TrainConfig train;
  int eval_episodes = 100;
  uint64_t eval_world_seed_base = 1000000;
  uint64_t eval_seed = 7;
};

inline void to_json(json& j, const SweepConfig& c) {
  json vars = json::array();
  for (const auto& v : c.variants) vars.push_back({{"name", v.name}, {"overrides", v.overrides}});
  j = {{"preset", c.preset},
       {"variants", vars},
       {"seeds", c.seeds},
       {"train", c.train},
       {"eval_episodes", c.eval_episodes},
       {"eval_world_seed_base", c.eval_world_seed_base},
       {"eval_seed", c.eval_seed}};
}

inline void from_json(const json& j, SweepConfig& c) {
  c.preset = j.value("preset", c.preset);
  c.variants.clear();
  if (j.contains("variants"))
    for (const auto& v : j.at("variants"))
      c.variants.push_back({v.at("name").get<std::string>(), v.value("overrides", json::object())});
  c.seeds = j.value("seeds", c.seeds);
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
  c.eval_world_seed_base = j.value("eval_world_seed_base", c.eval_world_seed_base);
  c.eval_seed = j.value("eval_seed", c.eval_seed);
}

struct SweepResult {
  std::vector<VariantResult> variants;
  std::map<std::string, json> train_reports;  // "<variant>/seed_<k>" -> report
};

/// Trains each (variant, seed) that has no matching run under out_dir, then
/// evaluates all of them on one held-out episode set. A run is reused when its
/// stored train_config.json equals the effective config.
inline SweepResult run_sweep(const SweepConfig& sc, const DemoDataset& ds, const std::filesystem::path& out_dir,
                             std::ostream* progress = nullptr) {
  namespace fs = std::filesystem;
  const auto variants = sc.variants.empty() ? preset_variants(sc.preset) : sc.variants;
  if (sc.seeds.empty()) throw std::invalid_argument("sweep needs at least one seed");
  std::set<uint64_t> train_worlds;
  for (const auto& d : ds.demos) train_worlds.insert(d.episode.world_seed);
  for (int i = 0; i < sc.eval_episodes; ++i)
    if (train_worlds.count(sc.eval_world_seed_base + static_cast<uint64_t>(i)))
      throw std::invalid_argument("evaluation worlds overlap the training worlds");

  SweepResult result;
  std::vector<ExperimentVariant> exp;
  for (const auto& v : variants) {
    ExperimentVariant ev{v.name, {}};
    for (uint64_t seed : sc.seeds) {
      TrainConfig tc = sc.train;
      tc.seed = seed;
      tc.policy = apply_overrides(sc.train.policy, v.overrides);
      const fs::path run = out_dir / v.name / ("seed_" + std::to_string(seed));
      const json effective = tc;
      bool reuse = false;
      if (fs::exists(run / "final" / "manifest.json") && fs::exists(run / "train_config.json")) {
        std::ifstream in(run / "train_config.json");
        reuse = json::parse(in) == effective;
      }
      const std::string key = v.name + "/seed_" + std::to_string(seed);
      if (!reuse) {
        fs::create_directories(run);
        TrainReport rep = train(tc, ds, run, nullptr, provenance("sweep", effective, {{"seed", seed}}));
        std::ofstream(run / "report.json") << json(rep).dump(2) << "\n";
        std::ofstream(run / "train_config.json") << effective.dump(2) << "\n";
      }
      std::ifstream rin(run / "report.json");
      result.train_reports[key] = rin ? json::parse(rin) : json(nullptr);
      if (progress) *progress << json{{"trained", key}, {"reused", reuse}}.dump() << std::endl;
      ev.checkpoints.push_back(run / "final");
    }
    exp.push_back(std::move(ev));
  }
  const auto episodes = make_eval_episodes(ds.sim, sc.eval_episodes, sc.eval_world_seed_base, sc.eval_seed);
  result.variants = run_experiment(exp, episodes, ds.sim, sc.train.workers);
  return result;
}

}  // namespace rimnav

#endif  // RIMNAV_EVALMETRICS_HPP_
