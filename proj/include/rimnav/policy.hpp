#ifndef RIMNAV_POLICY_HPP_
#define RIMNAV_POLICY_HPP_

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rimnav/gridworld.hpp"
#include "rimnav/nn/autodiff.hpp"
#include "rimnav/nn/layers.hpp"
#include "rimnav/nn/params.hpp"

namespace rimnav {

enum class MemoryVariant { kRim, kRecurrentState, kEpisodicSequence };

inline const char* memory_variant_name(MemoryVariant v) {
  switch (v) {
    case MemoryVariant::kRim: return "rim";
    case MemoryVariant::kRecurrentState: return "recurrent_state";
    case MemoryVariant::kEpisodicSequence: return "episodic_sequence";
  }
  return "?";
}

inline MemoryVariant memory_variant_from_name(const std::string& s) {
  if (s == "rim") return MemoryVariant::kRim;
  if (s == "recurrent_state") return MemoryVariant::kRecurrentState;
  if (s == "episodic_sequence") return MemoryVariant::kEpisodicSequence;
  throw std::invalid_argument("unknown memory variant: " + s);
}

struct AuxConfig {
  bool vp = true;
  bool em = true;
  bool sp = true;
  double lambda = 0.3;
  int vp_dim = 64;
  int vp_k = 20;
  double vp_tau = 0.1;
  uint64_t vp_projection_seed = 0x5eed;
  int em_size = 24;
  int em_hidden = 256;
  bool em_heading_aligned = false;

  bool any() const { return vp || em || sp; }
};

inline void to_json(json& j, const AuxConfig& c) {
  j = {{"vp", c.vp},
       {"em", c.em},
       {"sp", c.sp},
       {"lambda", c.lambda},
       {"vp_dim", c.vp_dim},
       {"vp_k", c.vp_k},
       {"vp_tau", c.vp_tau},
       {"vp_projection_seed", c.vp_projection_seed},
       {"em_size", c.em_size},
       {"em_hidden", c.em_hidden},
       {"em_heading_aligned", c.em_heading_aligned}};
}
inline void from_json(const json& j, AuxConfig& c) {
  c.vp = j.value("vp", c.vp);
  c.em = j.value("em", c.em);
  c.sp = j.value("sp", c.sp);
  c.lambda = j.value("lambda", c.lambda);
  c.vp_dim = j.value("vp_dim", c.vp_dim);
  c.vp_k = j.value("vp_k", c.vp_k);
  c.vp_tau = j.value("vp_tau", c.vp_tau);
  c.vp_projection_seed = j.value("vp_projection_seed", c.vp_projection_seed);
  c.em_size = j.value("em_size", c.em_size);
  c.em_hidden = j.value("em_hidden", c.em_hidden);
  c.em_heading_aligned = j.value("em_heading_aligned", c.em_heading_aligned);
}

struct PolicyConfig {
  MemoryVariant memory = MemoryVariant::kRim;
  int map_h = 3;
  int map_w = 3;
  int d = 128;
  int layers = 2;
  int heads = 4;
  int ffn_mult = 4;
  bool use_map_positions = true;
  bool use_agent_pose = true;
  double explore_radius = 10.0;
  bool freeze_visual = false;
  // Sensor shape; must match the observations fed in.
  int rays = 32;
  int categories = 6;
  AuxConfig aux;

  int num_classes() const { return categories + 1; }
  double agent_pos_scale() const { return static_cast<double>(map_h) / (2.0 * explore_radius); }

  void validate() const {
    if (d <= 0 || d % 16 != 0) throw std::invalid_argument("d must be a positive multiple of 16");
    if (heads <= 0 || d % heads != 0) throw std::invalid_argument("d must be divisible by heads");
    if (map_h <= 0 || map_w <= 0) throw std::invalid_argument("map size must be positive");
    if (layers <= 0) throw std::invalid_argument("layers must be positive");
    if (rays <= 0 || categories <= 0) throw std::invalid_argument("sensor shape must be positive");
    if (explore_radius <= 0) throw std::invalid_argument("explore_radius must be positive");
    if (memory != MemoryVariant::kRim && aux.any())
      throw std::invalid_argument("auxiliary tasks need the rim memory variant");
  }
};

inline void to_json(json& j, const PolicyConfig& c) {
  j = {{"memory", memory_variant_name(c.memory)},
       {"map_h", c.map_h},
       {"map_w", c.map_w},
       {"d", c.d},
       {"layers", c.layers},
       {"heads", c.heads},
       {"ffn_mult", c.ffn_mult},
       {"use_map_positions", c.use_map_positions},
       {"use_agent_pose", c.use_agent_pose},
       {"explore_radius", c.explore_radius},
       {"freeze_visual", c.freeze_visual},
       {"rays", c.rays},
       {"categories", c.categories},
       {"aux", c.aux}};
}
inline void from_json(const json& j, PolicyConfig& c) {
  if (j.contains("memory")) c.memory = memory_variant_from_name(j.at("memory").get<std::string>());
  c.map_h = j.value("map_h", c.map_h);
  c.map_w = j.value("map_w", c.map_w);
  c.d = j.value("d", c.d);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.use_map_positions = j.value("use_map_positions", c.use_map_positions);
  c.use_agent_pose = j.value("use_agent_pose", c.use_agent_pose);
  c.explore_radius = j.value("explore_radius", c.explore_radius);
  c.freeze_visual = j.value("freeze_visual", c.freeze_visual);
  c.rays = j.value("rays", c.rays);
  c.categories = j.value("categories", c.categories);
  if (j.contains("aux")) c.aux = j.at("aux").get<AuxConfig>();
}

/// Cell positions (i - h/2, j - w/2), row-major over (i, j).
inline std::vector<std::array<double, 2>> map_cell_positions(int h, int w) {
  std::vector<std::array<double, 2>> out;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) out.push_back({i - h / 2.0, j - w / 2.0});
  return out;
}

/// Raw per-step encoder inputs, one row per observation.
template <typename T>
struct ObservationBatch {
  nn::Matrix<T> rgb;       // n x rays*(C+1), one-hot semantic rays
  nn::Matrix<T> depth;     // n x rays
  nn::Matrix<T> pose;      // n x 4
  nn::Matrix<T> prev;      // n x 5, one-hot; column 4 means "no previous action"
  nn::Matrix<T> goal;      // n x C, one-hot
  std::vector<int> steps;  // step index per row
  std::vector<std::array<double, 2>> xy;  // relative displacement per row

  Eigen::Index size() const { return static_cast<Eigen::Index>(steps.size()); }
};

/// Converts observations to encoder inputs. Throws if their shape disagrees with cfg.
template <typename T>
ObservationBatch<T> make_batch(const std::vector<const Observation*>& obs, const PolicyConfig& cfg) {
  const Eigen::Index n = static_cast<Eigen::Index>(obs.size());
  const int R = cfg.rays, K = cfg.num_classes(), C = cfg.categories;
  ObservationBatch<T> b;
  b.rgb = nn::Matrix<T>::Zero(n, R * K);
  b.depth.resize(n, R);
  b.pose.resize(n, 4);
  b.prev = nn::Matrix<T>::Zero(n, kNumActions + 1);
  b.goal = nn::Matrix<T>::Zero(n, C);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Observation& o = *obs[r];
    if (static_cast<int>(o.depth.size()) != R || static_cast<int>(o.semantic.size()) != R || o.num_classes != K)
      throw std::invalid_argument("observation shape does not match the policy config (rays/categories)");
    if (o.goal_category < 0 || o.goal_category >= C) throw std::invalid_argument("goal category out of range");
    for (int i = 0; i < R; ++i) {
      b.depth(r, i) = static_cast<T>(o.depth[i]);
      b.rgb(r, i * K + o.semantic[i]) = T(1);
    }
    for (int k = 0; k < 4; ++k) b.pose(r, k) = static_cast<T>(o.rel_pose[k]);
    b.prev(r, o.prev_action ? action_code(*o.prev_action) : kNumActions) = T(1);
    b.goal(r, o.goal_category) = T(1);
    b.steps.push_back(o.step_index);
    b.xy.push_back({o.rel_pose[0], o.rel_pose[1]});
  }
  return b;
}

/// Extra token used only by the visual-prediction objective. Map and
/// observation tokens are masked from attending to it.
template <typename T>
struct QueryToken {
  nn::Var<T> token;     // 1 x d
  std::array<double, 2> xy;  // query displacement, unscaled
};

template <typename T>
struct Encoded {
  nn::Var<T> o;       // n x d
  nn::Var<T> visual;  // n x (rgb + depth feature widths)
};

template <typename T>
struct StepOutput {
  nn::Var<T> memory;
  nn::Var<T> o_hat;  // 1 x d
  std::optional<nn::Var<T>> q_hat;
};

/// Observation encoder, memory (recursive implicit map or a baseline) and the
/// action head. Parameters live in an external store.
template <typename T>
class Policy {
 public:
  using Var = nn::Var<T>;
  using Mat = nn::Matrix<T>;

  Policy(nn::ParameterStore<T>& store, const PolicyConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.d;
    w_rgb_ = d / 4;
    w_depth_ = d / 2;
    w_pose_ = d / 8;
    w_prev_ = d / 16;
    w_goal_ = d / 16;
    enc_rgb_ = nn::Linear<T>(store, "enc.rgb", cfg_.rays * cfg_.num_classes(), w_rgb_, rng);
    enc_depth_ = nn::Linear<T>(store, "enc.depth", cfg_.rays, w_depth_, rng);
    enc_pose_ = nn::Linear<T>(store, "enc.pose", 4, w_pose_, rng);
    enc_prev_ = &store.add("enc.prev_action", {kNumActions + 1, w_prev_}, nn::Init::kTruncNormal, rng);
    enc_goal_ = &store.add("enc.goal", {cfg_.categories, w_goal_}, nn::Init::kTruncNormal, rng);
    enc_proj_ = nn::Linear<T>(store, "enc.proj", w_rgb_ + w_depth_ + w_pose_ + w_prev_ + w_goal_, d, rng);
    if (cfg_.freeze_visual) {
      store.set_trainable("enc.rgb.", false);
      store.set_trainable("enc.depth.", false);
    }
    action_head_ = nn::Linear<T>(store, "head.action", d, kNumActions, rng, /*zero_weight=*/true);

    switch (cfg_.memory) {
      case MemoryVariant::kRim: {
        pos_ffn_ = nn::FeedForward<T>(store, "rim.pos", 2, d, d, rng);
        w0_ = &store.add("rim.w0", {d}, nn::Init::kTruncNormal, rng);
        const int hw = cfg_.map_h * cfg_.map_w;
        if (cfg_.use_map_positions) {
          init_ffn_ = nn::FeedForward<T>(store, "rim.init", 2, d, d, rng, /*zero_output=*/true);
        } else {
          cell_embed_ = &store.add("rim.cell_embed", {hw, d}, nn::Init::kTruncNormal, rng);
        }
        stack_ = nn::TransformerStack<T>(store, "rim.stack", d, cfg_.layers, cfg_.heads, cfg_.ffn_mult, rng);
        cell_pos_ = Mat(hw, 2);
        auto cp = map_cell_positions(cfg_.map_h, cfg_.map_w);
        for (int i = 0; i < hw; ++i) {
          cell_pos_(i, 0) = static_cast<T>(cp[i][0]);
          cell_pos_(i, 1) = static_cast<T>(cp[i][1]);
        }
        break;
      }
      case MemoryVariant::kRecurrentState:
        gru_x_ = nn::Linear<T>(store, "gru.x", d, 3 * d, rng);
        gru_h_ = nn::Linear<T>(store, "gru.h", d, 3 * d, rng, false, /*bias=*/false);
        break;
      case MemoryVariant::kEpisodicSequence:
        stack_ = nn::TransformerStack<T>(store, "episodic.stack", d, cfg_.layers, cfg_.heads, cfg_.ffn_mult, rng);
        break;
    }
  }

  const PolicyConfig& config() const { return cfg_; }
  int visual_width() const { return w_rgb_ + w_depth_; }

  /// Overrides the map cell coordinates (hw entries, row-major over cells).
  void set_cell_positions(const std::vector<std::array<double, 2>>& pos) {
    if (cfg_.memory != MemoryVariant::kRim || static_cast<Eigen::Index>(pos.size()) != cell_pos_.rows())
      throw std::invalid_argument("cell position count mismatch");
    for (size_t i = 0; i < pos.size(); ++i) {
      cell_pos_(i, 0) = static_cast<T>(pos[i][0]);
      cell_pos_(i, 1) = static_cast<T>(pos[i][1]);
    }
  }
  const Mat& cell_positions() const { return cell_pos_; }

  /// Switches whether query tokens are accepted.
  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  Encoded<T> encode(nn::Tape<T>& t, const ObservationBatch<T>& b) const {
    const Eigen::Index n = b.size();
    Var rgb = enc_rgb_(t, t.constant(b.rgb));
    Var depth = enc_depth_(t, t.constant(b.depth));
    Var pose = cfg_.use_agent_pose ? enc_pose_(t, t.constant(b.pose)) : t.constant(Mat::Zero(n, w_pose_));
    Var prev = nn::matmul(t.constant(b.prev), t.param(*enc_prev_));
    Var goal = nn::matmul(t.constant(b.goal), t.param(*enc_goal_));
    Var visual = nn::concat_cols<T>({rgb, depth});
    Var x = enc_proj_(t, nn::gelu(nn::concat_cols<T>({visual, pose, prev, goal})));
    Mat steps(n, cfg_.d);
    for (Eigen::Index r = 0; r < n; ++r) steps.row(r) = nn::sinusoidal_embedding<T>(b.steps[r], cfg_.d);
    return {nn::add(x, t.constant(std::move(steps))), visual};
  }

  /// M^0 for the RIM variant; the zero state for RecurrentState; an empty
  /// token list (0 x d) for EpisodicSequence.
  Var initial_memory(nn::Tape<T>& t) const {
    switch (cfg_.memory) {
      case MemoryVariant::kRim: {
        Var base = cfg_.use_map_positions ? init_ffn_(t, t.constant(cell_pos_)) : t.param(*cell_embed_);
        return nn::add_row(base, t.param(*w0_));
      }
      case MemoryVariant::kRecurrentState:
        return t.constant(Mat::Zero(1, cfg_.d));
      case MemoryVariant::kEpisodicSequence:
        return t.constant(Mat(0, cfg_.d));
    }
    throw std::logic_error("unreachable");
  }

  /// Position features for map cells (hw x d).
  Var map_position_features(nn::Tape<T>& t) const {
    if (cfg_.memory != MemoryVariant::kRim) throw std::logic_error("map positions exist only for RIM");
    return cfg_.use_map_positions ? pos_ffn_(t, t.constant(cell_pos_)) : t.param(*cell_embed_);
  }

  /// Position feature for a token at displacement xy (scaled by the agent
  /// position factor). Zero when agent pose is ablated.
  Var agent_position_feature(nn::Tape<T>& t, std::array<double, 2> xy) const {
    if (!cfg_.use_agent_pose) return t.constant(Mat::Zero(1, cfg_.d));
    Mat p(1, 2);
    p(0, 0) = static_cast<T>(cfg_.agent_pos_scale() * xy[0]);
    p(0, 1) = static_cast<T>(cfg_.agent_pos_scale() * xy[1]);
    return pos_ffn_(t, t.constant(std::move(p)));
  }

  /// One memory update. `map_pos` may be passed to reuse map position
  /// features across steps on the same tape.
  StepOutput<T> step(nn::Tape<T>& t, Var memory, Var o, std::array<double, 2> xy,
                     const QueryToken<T>* query = nullptr, std::optional<Var> map_pos = std::nullopt) const {
    if (o.rows() != 1 || o.cols() != cfg_.d) throw std::invalid_argument("observation feature must be 1 x d");
    if (query && !training_) throw std::logic_error("query token given outside training mode");
    switch (cfg_.memory) {
      case MemoryVariant::kRim: return rim_step(t, memory, o, xy, query, map_pos);
      case MemoryVariant::kRecurrentState:
        if (query) throw std::invalid_argument("query tokens need the RIM memory");
        return gru_step(t, memory, o);
      case MemoryVariant::kEpisodicSequence:
        if (query) throw std::invalid_argument("query tokens need the RIM memory");
        return episodic_step(t, memory, o);
    }
    throw std::logic_error("unreachable");
  }

  Var action_logits(nn::Tape<T>& t, Var o_hat) const { return action_head_(t, o_hat); }

  /// Episodic variant over a whole window at once: `past` holds earlier
  /// tokens, `window` the new ones. Row i of the result equals step() after
  /// token i. Returns (outputs, new token list).
  std::pair<Var, Var> episodic_window(nn::Tape<T>& t, Var past, Var window) const {
    Var all = past.rows() > 0 ? nn::concat_rows<T>({past, window}) : window;
    const nn::Mask mask = nn::Mask::causal(all.rows());
    Var out = stack_(t, all, std::nullopt, &mask);
    return {nn::slice_rows(out, past.rows(), window.rows()), all};
  }

 private:
  StepOutput<T> rim_step(nn::Tape<T>& t, Var memory, Var o, std::array<double, 2> xy, const QueryToken<T>* query,
                         std::optional<Var> map_pos) const {
    const Eigen::Index hw = cell_pos_.rows();
    if (memory.rows() != hw || memory.cols() != cfg_.d) throw std::invalid_argument("map shape mismatch");
    Var mp = map_pos ? *map_pos : map_position_features(t);
    std::vector<Var> tokens{memory, o};
    std::vector<Var> pos{mp, agent_position_feature(t, xy)};
    std::optional<nn::Mask> mask;
    if (query) {
      tokens.push_back(query->token);
      pos.push_back(agent_position_feature(t, query->xy));
      const Eigen::Index n = hw + 2;
      mask = nn::Mask::all(n, n);
      for (Eigen::Index r = 0; r < n - 1; ++r) mask->set(r, n - 1, false);
    }
    Var out = stack_(t, nn::concat_rows(tokens), nn::concat_rows(pos), mask ? &*mask : nullptr);
    StepOutput<T> s{nn::slice_rows(out, 0, hw), nn::slice_rows(out, hw, 1), std::nullopt};
    if (query) s.q_hat = nn::slice_rows(out, hw + 1, 1);
    return s;
  }

  StepOutput<T> gru_step(nn::Tape<T>& t, Var h, Var x) const {
    const Eigen::Index d = cfg_.d;
    Var gx = gru_x_(t, x);
    Var gh = gru_h_(t, h);
    Var z = nn::sigmoid(nn::add(nn::slice_cols(gx, 0, d), nn::slice_cols(gh, 0, d)));
    Var r = nn::sigmoid(nn::add(nn::slice_cols(gx, d, d), nn::slice_cols(gh, d, d)));
    Var n = nn::tanh(nn::add(nn::slice_cols(gx, 2 * d, d), nn::mul(r, nn::slice_cols(gh, 2 * d, d))));
    // h' = n + z * (h - n)
    Var h2 = nn::add(n, nn::mul(z, nn::sub(h, n)));
    return {h2, h2, std::nullopt};
  }

  StepOutput<T> episodic_step(nn::Tape<T>& t, Var tokens, Var o) const {
    auto [out, all] = episodic_window(t, tokens, o);
    return {all, out, std::nullopt};
  }

  PolicyConfig cfg_;
  bool training_ = false;
  int w_rgb_ = 0, w_depth_ = 0, w_pose_ = 0, w_prev_ = 0, w_goal_ = 0;
  nn::Linear<T> enc_rgb_, enc_depth_, enc_pose_, enc_proj_;
  nn::Parameter<T>* enc_prev_ = nullptr;
  nn::Parameter<T>* enc_goal_ = nullptr;
  nn::Linear<T> action_head_;
  // RIM
  nn::FeedForward<T> pos_ffn_;
  nn::FeedForward<T> init_ffn_;
  nn::Parameter<T>* w0_ = nullptr;
  nn::Parameter<T>* cell_embed_ = nullptr;
  Mat cell_pos_;
  nn::TransformerStack<T> stack_;
  // RecurrentState
  nn::Linear<T> gru_x_, gru_h_;
};

}  // namespace rimnav

#endif  // RIMNAV_POLICY_HPP_
