#ifndef RIMNAV_TRAINER_HPP_
#define RIMNAV_TRAINER_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "rimnav/auxtasks.hpp"
#include "rimnav/demos.hpp"
#include "rimnav/model.hpp"
#include "rimnav/nn/optim.hpp"
#include "rimnav/parallel.hpp"

namespace rimnav {

/// weight_t = 1 + gamma where the action differs from its predecessor (t = 0
/// included), else 1.
inline std::vector<double> inflection_weights(const std::vector<Action>& actions, double gamma) {
  if (actions.empty()) throw std::invalid_argument("inflection_weights: empty action list");
  std::vector<double> w(actions.size(), 1.0);
  for (size_t t = 0; t < actions.size(); ++t)
    if (t == 0 || actions[t] != actions[t - 1]) w[t] = 1.0 + gamma;
  return w;
}

struct TrainConfig {
  int epochs = 25;
  int batch_size = 8;
  double gamma = 3.48;
  double base_lr = 3e-4;
  double weight_decay = 0.01;
  int bptt_window = 32;
  uint64_t seed = 0;
  int workers = 1;
  double val_fraction = 0.1;
  bool save_every_epoch = true;
  std::string expected_world_digest;  // empty: accept any dataset
  PolicyConfig policy;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
    if (bptt_window <= 0) throw std::invalid_argument("bptt_window must be positive");
    if (gamma < 0 || base_lr < 0 || weight_decay < 0) throw std::invalid_argument("gamma, lr and decay must be >= 0");
    if (val_fraction < 0 || val_fraction >= 1) throw std::invalid_argument("val_fraction must be in [0, 1)");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"gamma", c.gamma},
       {"base_lr", c.base_lr},
       {"weight_decay", c.weight_decay},
       {"bptt_window", c.bptt_window},
       {"seed", c.seed},
       {"val_fraction", c.val_fraction},
       {"save_every_epoch", c.save_every_epoch},
       {"expected_world_digest", c.expected_world_digest},
       {"policy", c.policy}};
}
inline void from_json(const json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.gamma = j.value("gamma", c.gamma);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.bptt_window = j.value("bptt_window", c.bptt_window);
  c.seed = j.value("seed", c.seed);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.save_every_epoch = j.value("save_every_epoch", c.save_every_epoch);
  c.expected_world_digest = j.value("expected_world_digest", c.expected_world_digest);
  if (j.contains("policy")) c.policy = j.at("policy").get<PolicyConfig>();
}

inline std::string world_digest(const SimConfig& sim) { return config_digest(json(sim.world)); }

/// Seed of the model a training run starts from.
inline uint64_t initial_model_seed(uint64_t train_seed) { return derive_seed(train_seed, {0x1}); }

/// Everything a demonstration contributes to training, precomputed once.
template <typename T>
struct EpisodeData {
  size_t demo_index = 0;
  std::vector<Observation> obs;  // o_0 .. o_{T-1}, teacher forced
  std::vector<int> targets;
  std::vector<double> weights;
  ObservationBatch<T> batch;
  nn::Matrix<T> visual_targets;  // T x dv, when vp is enabled
  std::vector<OccupancyGT> occupancy;
  std::vector<SemanticGT> semantic;

  int length() const { return static_cast<int>(targets.size()); }
};

template <typename T>
EpisodeData<T> make_episode_data(const Demonstration& demo, size_t index, const GridWorld& world, const SimConfig& sim,
                                 const PolicyConfig& cfg, double gamma) {
  if (demo.actions.empty()) throw std::invalid_argument("demonstration has no actions");
  EpisodeData<T> e;
  e.demo_index = index;
  Episode ep(world, demo.episode, sim);
  std::vector<Pose> poses;
  std::vector<std::vector<double>> depths;
  for (Action a : demo.actions) {
    if (ep.done()) throw std::invalid_argument("demonstration continues after its episode ended");
    e.obs.push_back(ep.observation());
    poses.push_back(ep.pose());
    depths.push_back(ep.observation().depth);
    e.targets.push_back(action_code(a));
    ep.step(a);
  }
  e.weights = inflection_weights(demo.actions, gamma);
  std::vector<const Observation*> ptrs;
  for (const auto& o : e.obs) ptrs.push_back(&o);
  e.batch = make_batch<T>(ptrs, cfg);
  const int n = e.length();
  if (cfg.memory == MemoryVariant::kRim && cfg.aux.vp) {
    VisualTargetProjector proj(cfg.rays, cfg.num_classes(), cfg.aux.vp_dim, cfg.aux.vp_projection_seed);
    e.visual_targets.resize(n, cfg.aux.vp_dim);
    for (int t = 0; t < n; ++t) e.visual_targets.row(t) = proj(e.obs[t]).template cast<T>();
  }
  if (cfg.memory == MemoryVariant::kRim && cfg.aux.em) {
    OccupancyAccumulator acc(sim.sensor);
    for (int t = 0; t < n; ++t) {
      acc.add(poses[t], depths[t]);
      e.occupancy.push_back(acc.crop(poses[t], cfg.aux.em_size, cfg.aux.em_size, cfg.aux.em_heading_aligned));
    }
  }
  if (cfg.memory == MemoryVariant::kRim && cfg.aux.sp) {
    for (int t = 0; t < n; ++t) e.semantic.push_back(make_semantic_gt(e.obs[t], cfg.categories));
  }
  return e;
}

template <typename T>
ObservationBatch<T> slice_batch(const ObservationBatch<T>& b, Eigen::Index start, Eigen::Index n) {
  ObservationBatch<T> s;
  s.rgb = b.rgb.middleRows(start, n);
  s.depth = b.depth.middleRows(start, n);
  s.pose = b.pose.middleRows(start, n);
  s.prev = b.prev.middleRows(start, n);
  s.goal = b.goal.middleRows(start, n);
  s.steps.assign(b.steps.begin() + start, b.steps.begin() + start + n);
  s.xy.assign(b.xy.begin() + start, b.xy.begin() + start + n);
  return s;
}

/// Loss sums for one episode (each already divided by the episode length).
struct LossStats {
  double ap = 0, vp = 0, em = 0, sp = 0, total = 0;
  int correct = 0;
  int steps = 0;

  LossStats& operator+=(const LossStats& o) {
    ap += o.ap;
    vp += o.vp;
    em += o.em;
    sp += o.sp;
    total += o.total;
    correct += o.correct;
    steps += o.steps;
    return *this;
  }
};

/// Per-parameter gradient sums, indexed like store.sorted().
template <typename T>
using GradBuffer = std::vector<nn::Matrix<T>>;

template <typename T>
void add_tape_grads(const nn::Tape<T>& tape, const std::vector<nn::Parameter<T>*>& params, GradBuffer<T>& buf) {
  if (buf.empty()) buf.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const nn::Matrix<T>* g = tape.param_grad(*params[i]);
    if (!g) continue;
    if (buf[i].size() == 0) {
      buf[i] = *g;
    } else {
      buf[i] += *g;
    }
  }
}

struct EpisodeRunOptions {
  int window = 32;
  bool backward = true;
  bool aux = true;            // compute auxiliary losses (when heads exist and lambda > 0)
  double loss_scale = 1.0;    // multiplies every loss before backward (1 / batch size)
};

/// Teacher-forced pass over one episode in truncated windows. The memory
/// leaving a window is detached before it enters the next. With backward on,
/// parameter gradients are added to `grads`.
template <typename T>
LossStats run_episode(const NavModel<T>& model, const EpisodeData<T>& ep, const EpisodeRunOptions& opt, Rng& rng,
                      std::type_identity_t<GradBuffer<T>>* grads) {
  const Policy<T>& pol = model.policy();
  const PolicyConfig& cfg = model.config();
  const AuxHeads<T>* aux = model.aux();
  const double lambda = cfg.aux.lambda;
  const bool use_aux = opt.aux && aux && lambda > 0;
  const bool do_vp = use_aux && cfg.aux.vp;
  const bool do_em = use_aux && cfg.aux.em;
  const bool do_sp = use_aux && cfg.aux.sp;
  const int n = ep.length();
  const T inv_n = T(1) / static_cast<T>(n);
  const auto params = model.store().sorted();

  LossStats st;
  st.steps = n;
  nn::Matrix<T> carried;
  for (int s = 0; s < n; s += opt.window) {
    const int len = std::min(opt.window, n - s);
    nn::Tape<T> tape;
    nn::Var<T> memory = s == 0 ? pol.initial_memory(tape) : tape.constant(carried);
    Encoded<T> enc = pol.encode(tape, slice_batch(ep.batch, s, len));
    std::vector<nn::Var<T>> o_hats, maps, q_hats;
    std::vector<int> q_targets, q_cands;
    nn::Var<T> o_hat_rows;
    if (cfg.memory == MemoryVariant::kEpisodicSequence) {
      auto [out, all] = pol.episodic_window(tape, memory, enc.o);
      o_hat_rows = out;
      memory = all;
    } else {
      std::optional<nn::Var<T>> map_pos;
      if (cfg.memory == MemoryVariant::kRim) map_pos = pol.map_position_features(tape);
      for (int i = 0; i < len; ++i) {
        const int t = s + i;
        std::optional<QueryToken<T>> q;
        if (do_vp) {
          const int last = std::min(t + cfg.aux.vp_k, n - 1);
          const int tq = static_cast<int>(rng.uniform_int(0, last));
          q = aux->query_token(tape, ep.obs[tq].rel_pose);
          q_targets.push_back(tq);
          q_cands.push_back(last + 1);
        }
        StepOutput<T> out = pol.step(tape, memory, nn::slice_rows(enc.o, i, 1), ep.batch.xy[t], q ? &*q : nullptr,
                                     map_pos);
        memory = out.memory;
        o_hats.push_back(out.o_hat);
        if (do_em) maps.push_back(nn::reshape(out.memory, 1, out.memory.rows() * out.memory.cols()));
        if (out.q_hat) q_hats.push_back(*out.q_hat);
      }
      o_hat_rows = nn::concat_rows(o_hats);
    }
    nn::Var<T> logits = pol.action_logits(tape, o_hat_rows);
    std::vector<int> tg(ep.targets.begin() + s, ep.targets.begin() + s + len);
    std::vector<T> w(len);
    for (int i = 0; i < len; ++i) w[i] = static_cast<T>(ep.weights[s + i]);
    nn::Var<T> l_ap = nn::scale(nn::softmax_cross_entropy(logits, tg, w), inv_n);
    for (int i = 0; i < len; ++i) {
      Eigen::Index best;
      logits.value().row(i).maxCoeff(&best);
      if (best == tg[i]) ++st.correct;
    }

    std::vector<nn::Var<T>> aux_losses;
    if (do_vp) {
      nn::Var<T> q_rows = nn::concat_rows(q_hats);
      std::vector<nn::Var<T>> parts;
      nn::Var<T> pred = nn::l2_normalize_rows(aux->vp_head()(tape, q_rows));
      for (int i = 0; i < len; ++i) {
        parts.push_back(info_nce(nn::slice_rows(pred, i, 1), nn::Matrix<T>(ep.visual_targets.topRows(q_cands[i])),
                                 q_targets[i], static_cast<T>(cfg.aux.vp_tau)));
      }
      nn::Var<T> l = nn::scale(nn::sum(nn::concat_rows(parts)), inv_n);
      st.vp += l.scalar();
      aux_losses.push_back(l);
    }
    if (do_em) {
      const Eigen::Index cells = static_cast<Eigen::Index>(ep.occupancy[s].data.size());
      nn::Matrix<T> y(len, cells);
      for (int i = 0; i < len; ++i)
        for (Eigen::Index c = 0; c < cells; ++c) y(i, c) = static_cast<T>(ep.occupancy[s + i].data[c]);
      nn::Var<T> probs = nn::sigmoid(aux->em_head()(tape, nn::concat_rows(maps)));
      // Mean over a row is the per-step loss; sum the steps then divide by n.
      nn::Var<T> l = nn::scale(nn::binary_cross_entropy(probs, y), static_cast<T>(len) * inv_n);
      st.em += l.scalar();
      aux_losses.push_back(l);
    }
    if (do_sp) {
      const int C = cfg.categories;
      nn::Matrix<T> y(len, 2 * C);
      for (int i = 0; i < len; ++i) {
        const SemanticGT& g = ep.semantic[s + i];
        for (int c = 0; c < C; ++c) {
          y(i, c) = static_cast<T>(g.existence[c]);
          y(i, C + c) = static_cast<T>(g.ratio[c]);
        }
      }
      nn::Var<T> probs = aux->sp_probs(tape, enc.visual);
      nn::Var<T> l = nn::scale(nn::binary_cross_entropy(probs, y), static_cast<T>(len) * inv_n);
      st.sp += l.scalar();
      aux_losses.push_back(l);
    }
    nn::Var<T> total = total_loss(l_ap, aux_losses, static_cast<T>(lambda));
    st.ap += l_ap.scalar();
    st.total += total.scalar();
    if (!std::isfinite(total.scalar()))
      throw std::runtime_error("non-finite loss in demo " + std::to_string(ep.demo_index) + " window starting at step " +
                               std::to_string(s));
    if (opt.backward) {
      tape.backward(opt.loss_scale == 1.0 ? total : nn::scale(total, static_cast<T>(opt.loss_scale)));
      if (grads) add_tape_grads(tape, params, *grads);
    }
    carried = memory.value();
  }
  return st;
}

struct EpochReport {
  int epoch = 0;
  double l_ap = 0, l_vp = 0, l_em = 0, l_sp = 0, total = 0;
  double train_accuracy = 0;
  std::optional<double> val_accuracy;
  double seconds = 0;
  int64_t optimizer_steps = 0;
  std::string checkpoint;
};

inline void to_json(json& j, const EpochReport& r) {
  j = {{"epoch", r.epoch},
       {"loss_ap", r.l_ap},
       {"loss_vp", r.l_vp},
       {"loss_em", r.l_em},
       {"loss_sp", r.l_sp},
       {"loss_total", r.total},
       {"train_accuracy", r.train_accuracy},
       {"val_accuracy", r.val_accuracy ? json(*r.val_accuracy) : json(nullptr)},
       {"seconds", r.seconds},
       {"optimizer_steps", r.optimizer_steps},
       {"checkpoint", r.checkpoint}};
}

struct TrainReport {
  std::vector<EpochReport> epochs;
  int64_t total_steps = 0;
  size_t train_demos = 0;
  size_t val_demos = 0;
  double final_train_accuracy = 0;
  std::optional<double> best_val_accuracy;
  int best_epoch = 0;
  std::string final_checkpoint;
  std::string best_checkpoint;
  double seconds = 0;
};

inline void to_json(json& j, const TrainReport& r) {
  j = {{"epochs", r.epochs},
       {"total_steps", r.total_steps},
       {"train_demos", r.train_demos},
       {"val_demos", r.val_demos},
       {"final_train_accuracy", r.final_train_accuracy},
       {"best_val_accuracy", r.best_val_accuracy ? json(*r.best_val_accuracy) : json(nullptr)},
       {"best_epoch", r.best_epoch},
       {"final_checkpoint", r.final_checkpoint},
       {"best_checkpoint", r.best_checkpoint},
       {"seconds", r.seconds}};
}

/// Splits demo indices into (train, validation): validation holds every demo
/// whose world seed is among the highest `fraction` of distinct seeds.
inline std::pair<std::vector<size_t>, std::vector<size_t>> split_by_world(const std::vector<Demonstration>& demos,
                                                                           double fraction) {
  std::vector<uint64_t> seeds;
  for (const auto& d : demos) seeds.push_back(d.episode.world_seed);
  std::sort(seeds.begin(), seeds.end());
  seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());
  const size_t n_val = static_cast<size_t>(std::floor(fraction * static_cast<double>(seeds.size())));
  std::vector<size_t> train, val;
  const uint64_t cut = n_val > 0 ? seeds[seeds.size() - n_val] : 0;
  for (size_t i = 0; i < demos.size(); ++i) {
    if (n_val > 0 && demos[i].episode.world_seed >= cut) {
      val.push_back(i);
    } else {
      train.push_back(i);
    }
  }
  return {train, val};
}

/// Resolves worlds once per seed and precomputes episode data.
template <typename T>
std::vector<EpisodeData<T>> prepare_episodes(const DemoDataset& ds, const std::vector<size_t>& indices,
                                             const PolicyConfig& cfg, double gamma, int workers) {
  std::map<uint64_t, std::shared_ptr<const GridWorld>> worlds;
  for (size_t i : indices) {
    const auto& spec = ds.demos[i].episode;
    if (!spec.inline_world && !worlds.count(spec.world_seed))
      worlds[spec.world_seed] = std::make_shared<const GridWorld>(generate_world(spec.world_seed, ds.sim.world));
  }
  std::vector<EpisodeData<T>> out(indices.size());
  parallel_for(indices.size(), workers, [&](size_t k) {
    const auto& d = ds.demos[indices[k]];
    const GridWorld& w = d.episode.inline_world ? *d.episode.inline_world : *worlds.at(d.episode.world_seed);
    out[k] = make_episode_data<T>(d, indices[k], w, ds.sim, cfg, gamma);
  });
  return out;
}

/// Teacher-forced action accuracy without gradients.
template <typename T>
double teacher_forced_accuracy(const NavModel<T>& model, const std::vector<EpisodeData<T>>& eps, int window,
                               int workers) {
  std::vector<LossStats> stats(eps.size());
  parallel_for(eps.size(), workers, [&](size_t i) {
    Rng rng(0);
    stats[i] = run_episode(model, eps[i], {.window = window, .backward = false, .aux = false}, rng, nullptr);
  });
  LossStats total;
  for (const auto& s : stats) total += s;
  return total.steps ? static_cast<double>(total.correct) / total.steps : 0.0;
}

/// Full behaviour-cloning run. Writes checkpoints under out_dir (epoch_<k>,
/// best, final) and one JSON progress line per epoch to `progress`.
inline TrainReport train(const TrainConfig& cfg_in, const DemoDataset& ds, const std::filesystem::path& out_dir,
                         std::ostream* progress = nullptr, const json& prov = json::object()) {
  using T = float;
  const auto t_start = std::chrono::steady_clock::now();
  TrainConfig cfg = cfg_in;
  cfg.validate();
  if (ds.demos.empty()) throw std::invalid_argument("training dataset is empty");
  if (!cfg.expected_world_digest.empty() && cfg.expected_world_digest != world_digest(ds.sim))
    throw std::invalid_argument("dataset world config digest " + world_digest(ds.sim) + " does not match expected " +
                                cfg.expected_world_digest);
  cfg.policy.rays = ds.sim.sensor.rays;
  cfg.policy.categories = ds.sim.world.categories;

  auto [train_idx, val_idx] = split_by_world(ds.demos, cfg.val_fraction);
  if (train_idx.empty()) throw std::invalid_argument("no training demos after the validation split");
  auto train_eps = prepare_episodes<T>(ds, train_idx, cfg.policy, cfg.gamma, cfg.workers);
  auto val_eps = prepare_episodes<T>(ds, val_idx, cfg.policy, cfg.gamma, cfg.workers);

  NavModel<T> model(cfg.policy, initial_model_seed(cfg.seed));
  model.policy().set_training(true);
  const int64_t batches_per_epoch = (static_cast<int64_t>(train_eps.size()) + cfg.batch_size - 1) / cfg.batch_size;
  TrainReport report;
  report.train_demos = train_eps.size();
  report.val_demos = val_eps.size();
  report.total_steps = std::max<int64_t>(1, batches_per_epoch * cfg.epochs);
  nn::AdamW<T> opt(model.store(), {.base_lr = cfg.base_lr,
                                   .weight_decay = cfg.weight_decay,
                                   .total_steps = report.total_steps});

  const json meta_prov = prov.empty() ? provenance("train", cfg, {{"seed", cfg.seed}}) : prov;
  auto save = [&](const std::string& name) {
    const auto dir = out_dir / name;
    json p = meta_prov;
    p["world_digest"] = world_digest(ds.sim);
    model.save(dir, p);
    return dir.string();
  };

  const auto params = model.store().sorted();
  std::optional<double> best_val;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    std::vector<size_t> order(train_eps.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, {0x7e, static_cast<uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    LossStats epoch_stats;
    for (size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const size_t nb = std::min<size_t>(cfg.batch_size, order.size() - b0);
      std::vector<GradBuffer<T>> grads(nb);
      std::vector<LossStats> stats(nb);
      parallel_for(nb, cfg.workers, [&](size_t k) {
        const EpisodeData<T>& ep = train_eps[order[b0 + k]];
        Rng rng(derive_seed(cfg.seed, {0x7f, static_cast<uint64_t>(epoch), ep.demo_index}));
        stats[k] = run_episode(model, ep, {.window = cfg.bptt_window, .loss_scale = 1.0 / nb}, rng, &grads[k]);
      });
      model.store().zero_grad();
      for (size_t k = 0; k < nb; ++k) {
        epoch_stats += stats[k];
        for (size_t i = 0; i < params.size() && i < grads[k].size(); ++i)
          if (grads[k][i].size() != 0) params[i]->grad += grads[k][i];
      }
      opt.step();
    }
    EpochReport er;
    er.epoch = epoch + 1;
    const double ne = static_cast<double>(train_eps.size());
    er.l_ap = epoch_stats.ap / ne;
    er.l_vp = epoch_stats.vp / ne;
    er.l_em = epoch_stats.em / ne;
    er.l_sp = epoch_stats.sp / ne;
    er.total = epoch_stats.total / ne;
    er.train_accuracy = static_cast<double>(epoch_stats.correct) / std::max(1, epoch_stats.steps);
    er.optimizer_steps = opt.step_count();
    if (!val_eps.empty()) er.val_accuracy = teacher_forced_accuracy(model, val_eps, cfg.bptt_window, cfg.workers);
    if (cfg.save_every_epoch) er.checkpoint = save("epoch_" + std::to_string(epoch + 1));
    const double score = er.val_accuracy.value_or(er.train_accuracy);
    if (!best_val || score > *best_val) {
      best_val = score;
      report.best_epoch = epoch + 1;
      report.best_checkpoint = save("best");
    }
    er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    if (progress) *progress << json(er).dump() << std::endl;
    report.epochs.push_back(er);
  }
  if (!val_eps.empty() && best_val) report.best_val_accuracy = best_val;
  report.final_checkpoint = save("final");
  if (report.best_checkpoint.empty()) report.best_checkpoint = report.final_checkpoint;
  report.final_train_accuracy = teacher_forced_accuracy(model, train_eps, cfg.bptt_window, cfg.workers);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

}  // namespace rimnav

#endif  // RIMNAV_TRAINER_HPP_
