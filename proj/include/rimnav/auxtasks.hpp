#ifndef RIMNAV_AUXTASKS_HPP_
#define RIMNAV_AUXTASKS_HPP_

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "rimnav/gridworld.hpp"
#include "rimnav/nn/autodiff.hpp"
#include "rimnav/nn/layers.hpp"
#include "rimnav/policy.hpp"

namespace rimnav {

// ---------------------------------------------------------------------------
// Explicit occupancy ground truth

/// Agent-centred H x W x 2 grid; channel 0 obstacle, channel 1 explored.
struct OccupancyGT {
  int size_h = 0;
  int size_w = 0;
  std::vector<uint8_t> data;  // (row, col, channel) row-major

  uint8_t obstacle(int r, int c) const { return data[(r * size_w + c) * 2]; }
  uint8_t explored(int r, int c) const { return data[(r * size_w + c) * 2 + 1]; }
  friend bool operator==(const OccupancyGT&, const OccupancyGT&) = default;
};

/// World cell shown at output (row, col) for an agent at `pose`. Rows follow
/// +y and columns +x; the agent sits at (H/2, W/2). In heading-aligned mode the
/// column axis points along the agent heading and rows to its left.
inline Cell occupancy_window_cell(const Pose& pose, int size_h, int size_w, int row, int col, bool heading_aligned) {
  const int a = col - size_w / 2;
  const int b = row - size_h / 2;
  if (!heading_aligned) return {pose.x + a, pose.y + b};
  const int h = pose.heading;
  return {pose.x + a * kHeadingDx[h] - b * kHeadingDy[h], pose.y + a * kHeadingDy[h] + b * kHeadingDx[h]};
}

/// Allocentric explored/obstacle accumulator built only from sensed rays and
/// poses. Each ray is replayed with the simulator's traversal; its depth
/// decides where it stops.
class OccupancyAccumulator {
 public:
  explicit OccupancyAccumulator(SensorConfig sensor) : sensor_(sensor) {}

  void add(const Pose& pose, const std::vector<double>& depth) {
    if (static_cast<int>(depth.size()) != sensor_.rays) throw std::invalid_argument("depth ray count mismatch");
    mark(pose.cell(), kExplored);
    for (int i = 0; i < sensor_.rays; ++i) {
      const bool hit = depth[i] < 1.0;
      const double hit_dist = depth[i] * sensor_.max_range;
      const double tol = 1e-9 * sensor_.max_range;
      trace_ray(pose.cell(), ray_angle(sensor_, pose.heading, i), sensor_.max_range, [&](Cell c, double dist) {
        if (hit && std::abs(dist - hit_dist) <= tol) {
          mark(c, kExplored | kObstacle);
          return true;
        }
        if (hit && dist > hit_dist) return true;
        mark(c, kExplored);
        return false;
      });
    }
  }

  OccupancyGT crop(const Pose& pose, int size_h, int size_w, bool heading_aligned) const {
    OccupancyGT g{size_h, size_w, std::vector<uint8_t>(static_cast<size_t>(size_h) * size_w * 2, 0)};
    for (int r = 0; r < size_h; ++r) {
      for (int c = 0; c < size_w; ++c) {
        const Cell w = occupancy_window_cell(pose, size_h, size_w, r, c, heading_aligned);
        auto it = cells_.find(key(w));
        if (it == cells_.end()) continue;
        g.data[(r * size_w + c) * 2] = (it->second & kObstacle) ? 1 : 0;
        g.data[(r * size_w + c) * 2 + 1] = (it->second & kExplored) ? 1 : 0;
      }
    }
    return g;
  }

 private:
  static constexpr uint8_t kExplored = 1;
  static constexpr uint8_t kObstacle = 2;
  static int64_t key(Cell c) { return (static_cast<int64_t>(c.x) << 32) ^ static_cast<uint32_t>(c.y); }
  void mark(Cell c, uint8_t flags) { cells_[key(c)] |= flags; }

  SensorConfig sensor_;
  std::unordered_map<int64_t, uint8_t> cells_;
};

/// Ground truth at step t from poses[0..t] and depth rays[0..t].
inline OccupancyGT make_occupancy_gt(const std::vector<Pose>& poses, const std::vector<std::vector<double>>& depths,
                                     const SensorConfig& sensor, int t, int size_h, int size_w,
                                     bool heading_aligned = false) {
  if (t < 0 || t >= static_cast<int>(poses.size()) || t >= static_cast<int>(depths.size()))
    throw std::invalid_argument("make_occupancy_gt: t out of range");
  OccupancyAccumulator acc(sensor);
  for (int s = 0; s <= t; ++s) acc.add(poses[s], depths[s]);
  return acc.crop(poses[t], size_h, size_w, heading_aligned);
}

// ---------------------------------------------------------------------------
// Semantic ground truth

struct SemanticGT {
  std::vector<double> existence;  // per category, 0 or 1
  std::vector<double> ratio;      // fraction of rays hitting the category

  /// Throws if existence and ratio disagree or ratios exceed 1 in total.
  void validate() const {
    if (existence.size() != ratio.size()) throw std::invalid_argument("semantic gt: size mismatch");
    double total = 0;
    for (size_t c = 0; c < ratio.size(); ++c) {
      if (existence[c] != 0.0 && existence[c] != 1.0) throw std::invalid_argument("semantic gt: existence not binary");
      if (ratio[c] < 0 || ratio[c] > 1) throw std::invalid_argument("semantic gt: ratio out of [0,1]");
      if ((existence[c] == 1.0) != (ratio[c] > 0)) throw std::invalid_argument("semantic gt: existence/ratio mismatch");
      total += ratio[c];
    }
    if (total > 1.0 + 1e-12) throw std::invalid_argument("semantic gt: ratios sum above 1");
  }
};

inline SemanticGT make_semantic_gt(const Observation& o, int categories) {
  SemanticGT g{std::vector<double>(categories, 0.0), std::vector<double>(categories, 0.0)};
  for (int s : o.semantic) {
    if (s < categories) g.ratio[s] += 1.0;
  }
  for (int c = 0; c < categories; ++c) {
    g.ratio[c] /= static_cast<double>(o.semantic.size());
    g.existence[c] = g.ratio[c] > 0 ? 1.0 : 0.0;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Visual feature targets

/// Frozen Gaussian projection of the raw rays (depth followed by one-hot
/// semantics) to a unit vector of width dim.
class VisualTargetProjector {
 public:
  VisualTargetProjector(int rays, int num_classes, int dim, uint64_t seed)
      : rays_(rays), classes_(num_classes), proj_(rays * (1 + num_classes), dim) {
    Rng rng(seed);
    const double s = 1.0 / std::sqrt(static_cast<double>(proj_.rows()));
    for (Eigen::Index i = 0; i < proj_.size(); ++i) proj_.data()[i] = s * rng.normal();
  }

  nn::Matrix<double> operator()(const Observation& o) const {
    if (static_cast<int>(o.depth.size()) != rays_ || o.num_classes != classes_)
      throw std::invalid_argument("visual target: observation shape mismatch");
    nn::Matrix<double> x(1, proj_.rows());
    for (int i = 0; i < rays_; ++i) x(0, i) = o.depth[i];
    const auto oh = o.semantic_one_hot();
    for (size_t i = 0; i < oh.size(); ++i) x(0, rays_ + static_cast<Eigen::Index>(i)) = oh[i];
    nn::Matrix<double> v = x * proj_;
    return v / v.norm();
  }

  int dim() const { return static_cast<int>(proj_.cols()); }

 private:
  int rays_;
  int classes_;
  nn::Matrix<double> proj_;
};

// ---------------------------------------------------------------------------
// Losses

/// Temperature-scaled contrastive loss: -log softmax(pred . targets^T / tau)[index].
/// `pred` must be unit-norm (1 x dv); `targets` holds one unit row per candidate.
template <typename T>
nn::Var<T> info_nce(nn::Var<T> pred, const nn::Matrix<T>& targets, int index, T tau) {
  if (targets.rows() == 0) throw std::invalid_argument("info_nce: empty candidate set");
  if (index < 0 || index >= targets.rows()) throw std::invalid_argument("info_nce: target index out of range");
  nn::Tape<T>& t = *pred.tape;
  nn::Var<T> logits = nn::scale(nn::matmul_nt(pred, t.constant(targets)), T(1) / tau);
  return nn::softmax_cross_entropy(logits, {index}, {T(1)});
}

/// L = L_AP + lambda * (sum of the enabled auxiliary losses).
template <typename T>
nn::Var<T> total_loss(nn::Var<T> ap, const std::vector<nn::Var<T>>& aux, T lambda) {
  if (lambda < 0) throw std::invalid_argument("lambda must be >= 0");
  if (aux.empty() || lambda == T(0)) return ap;
  nn::Var<T> s = aux.front();
  for (size_t i = 1; i < aux.size(); ++i) s = nn::add(s, aux[i]);
  return nn::add(ap, nn::scale(s, lambda));
}

/// Heads for the three auxiliary objectives. Only enabled heads own
/// parameters. They use their own random stream so the policy initialisation
/// does not depend on which heads exist.
template <typename T>
class AuxHeads {
 public:
  using Var = nn::Var<T>;

  AuxHeads(nn::ParameterStore<T>& store, const PolicyConfig& cfg, int visual_width, uint64_t seed) : cfg_(cfg) {
    const AuxConfig& a = cfg.aux;
    const int d = cfg.d;
    if (cfg.memory != MemoryVariant::kRim && a.any())
      throw std::invalid_argument("auxiliary objectives need the RIM memory");
    if (a.vp) {
      Rng rng(derive_seed(seed, {0xa0, 1}));
      query_ = nn::Linear<T>(store, "aux.query", 4, d, rng);
      vp_ = nn::FeedForward<T>(store, "aux.vp", d, d, a.vp_dim, rng);
    }
    if (a.em) {
      Rng rng(derive_seed(seed, {0xa0, 2}));
      em_ = nn::FeedForward<T>(store, "aux.em", cfg.map_h * cfg.map_w * d, a.em_hidden, a.em_size * a.em_size * 2, rng);
    }
    if (a.sp) {
      Rng rng(derive_seed(seed, {0xa0, 3}));
      sp_ = nn::Linear<T>(store, "aux.sp", visual_width, 2 * cfg.categories, rng);
    }
  }

  const nn::FeedForward<T>& vp_head() const {
    require(cfg_.aux.vp, "vp");
    return vp_;
  }
  const nn::FeedForward<T>& em_head() const {
    require(cfg_.aux.em, "em");
    return em_;
  }

  /// Query token for the relative pose (x, y, sin, cos) at t'.
  QueryToken<T> query_token(nn::Tape<T>& t, const std::array<double, 4>& pose) const {
    require(cfg_.aux.vp, "vp");
    nn::Matrix<T> p(1, 4);
    for (int k = 0; k < 4; ++k) p(0, k) = static_cast<T>(pose[k]);
    return {query_(t, t.constant(std::move(p))), {pose[0], pose[1]}};
  }

  Var vp_loss(nn::Tape<T>&, Var q_hat, const nn::Matrix<T>& candidates, int target) const {
    require(cfg_.aux.vp, "vp");
    Var pred = nn::l2_normalize_rows(vp_(*q_hat.tape, q_hat));
    return info_nce(pred, candidates, target, static_cast<T>(cfg_.aux.vp_tau));
  }

  /// Occupancy probabilities decoded from the map, 1 x (H*W*2).
  Var em_probs(nn::Tape<T>& t, Var map) const {
    require(cfg_.aux.em, "em");
    return nn::sigmoid(em_(t, nn::reshape(map, 1, map.rows() * map.cols())));
  }

  Var em_loss(nn::Tape<T>& t, Var map, const OccupancyGT& gt) const {
    const int n = cfg_.aux.em_size;
    if (gt.size_h != n || gt.size_w != n) throw std::invalid_argument("em_loss: ground-truth size mismatch");
    nn::Matrix<T> y(1, static_cast<Eigen::Index>(gt.data.size()));
    for (size_t i = 0; i < gt.data.size(); ++i) y(0, static_cast<Eigen::Index>(i)) = static_cast<T>(gt.data[i]);
    return nn::binary_cross_entropy(em_probs(t, map), y);
  }

  /// Existence probabilities (first C) then ratios (next C).
  Var sp_probs(nn::Tape<T>& t, Var visual) const {
    require(cfg_.aux.sp, "sp");
    return nn::sigmoid(sp_(t, visual));
  }

  Var sp_loss(nn::Tape<T>& t, Var visual, const SemanticGT& gt) const {
    gt.validate();
    const int C = cfg_.categories;
    if (static_cast<int>(gt.ratio.size()) != C) throw std::invalid_argument("sp_loss: category count mismatch");
    nn::Matrix<T> y(1, 2 * C);
    for (int c = 0; c < C; ++c) {
      y(0, c) = static_cast<T>(gt.existence[c]);
      y(0, C + c) = static_cast<T>(gt.ratio[c]);
    }
    return nn::binary_cross_entropy(sp_probs(t, visual), y);
  }

 private:
  static void require(bool on, const char* what) {
    if (!on) throw std::logic_error(std::string("auxiliary head disabled: ") + what);
  }

  PolicyConfig cfg_;
  nn::Linear<T> query_;
  nn::FeedForward<T> vp_;
  nn::FeedForward<T> em_;
  nn::Linear<T> sp_;
};

}  // namespace rimnav

#endif  // RIMNAV_AUXTASKS_HPP_
