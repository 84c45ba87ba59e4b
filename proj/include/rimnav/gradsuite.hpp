#ifndef RIMNAV_GRADSUITE_HPP_
#define RIMNAV_GRADSUITE_HPP_

#include <functional>
#include <string>
#include <vector>

#include "rimnav/nn/gradcheck.hpp"
#include "rimnav/nn/layers.hpp"
#include "rimnav/trainer.hpp"

namespace rimnav {

struct GradSuiteEntry {
  std::string op;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  size_t checked = 0;
  std::string worst;
  bool pass() const { return max_rel_err <= tolerance; }
};

inline void to_json(json& j, const GradSuiteEntry& e) {
  j = {{"op", e.op},           {"max_rel_err", e.max_rel_err}, {"tolerance", e.tolerance},
       {"checked", e.checked}, {"worst", e.worst},             {"pass", e.pass()}};
}

namespace gradsuite_detail {

using Md = nn::Matrix<double>;
using V = nn::Var<double>;
using Tp = nn::Tape<double>;

inline Md random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Md m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline void randomize(nn::ParameterStore<double>& store, Rng& rng, double scale) {
  for (auto* p : store.sorted()) p->value = random_matrix(rng, p->value.rows(), p->value.cols(), scale);
}

inline nn::Parameter<double> leaf(const std::string& name, Md v) {
  nn::Parameter<double> p;
  p.name = name;
  p.shape = {v.rows(), v.cols()};
  p.value = std::move(v);
  return p;
}

// Fixed random projection to a scalar, so every output element gets a
// distinct upstream gradient.
inline V project(Tp& t, V x) {
  Rng rng(99);
  return nn::sum(nn::mul(x, t.constant(random_matrix(rng, x.rows(), x.cols()))));
}

inline GradSuiteEntry entry(const std::string& op, const nn::GradCheckResult& r, double tol) {
  return {op, r.max_rel_err, tol, r.checked, r.worst_name + "[" + std::to_string(r.worst_index) + "]"};
}

inline SimConfig toy_sim() {
  SimConfig sim;
  sim.world.width = 9;
  sim.world.height = 9;
  sim.world.rooms = 2;
  sim.world.categories = 3;
  sim.sensor.rays = 5;
  sim.budget = 60;
  return sim;
}

inline PolicyConfig toy_policy(MemoryVariant v) {
  PolicyConfig p;
  p.memory = v;
  p.d = 16;
  p.layers = 2;
  p.heads = 2;
  p.ffn_mult = 2;
  p.map_h = 2;
  p.map_w = 2;
  p.rays = 5;
  p.categories = 3;
  p.aux.vp_dim = 6;
  p.aux.vp_k = 2;
  p.aux.em_size = 5;
  p.aux.em_hidden = 8;
  if (v != MemoryVariant::kRim) p.aux.vp = p.aux.em = p.aux.sp = false;
  return p;
}

}  // namespace gradsuite_detail

/// Float64 finite-difference checks of every differentiable op, the layers,
/// the three memory variants unrolled over three steps and the full training
/// loss with all auxiliary tasks on a three-step toy episode.
inline std::vector<GradSuiteEntry> run_gradient_suite(
    const std::function<void(const GradSuiteEntry&)>& on_entry = nullptr) {
  using namespace gradsuite_detail;
  using namespace nn;
  constexpr double kTol = 1e-4;
  constexpr double kLinearTol = 1e-7;
  std::vector<GradSuiteEntry> out;
  auto push = [&](GradSuiteEntry e) {
    if (on_entry) on_entry(e);
    out.push_back(std::move(e));
  };

  Rng rng(1);
  {
    ParameterStore<double> store;
    Linear<double> lin(store, "lin", 5, 3, rng);
    randomize(store, rng, 0.5);
    auto x = leaf("x", random_matrix(rng, 4, 5));
    auto leaves = store.sorted();
    leaves.push_back(&x);
    push(entry("linear", grad_check(leaves, [&](Tp& t) { return project(t, lin(t, t.param(x))); }), kLinearTol));
  }

  auto a = leaf("a", random_matrix(rng, 3, 4, 1.5));
  auto b = leaf("b", random_matrix(rng, 3, 4));
  auto c = leaf("c", random_matrix(rng, 4, 2));
  auto row = leaf("row", random_matrix(rng, 1, 4));
  const std::vector<Parameter<double>*> ab{&a, &b};
  auto unary = [&](const std::string& name, std::function<V(Tp&, V)> fn) {
    push(entry(name, grad_check({&a}, [&](Tp& t) { return project(t, fn(t, t.param(a))); }), kTol));
  };
  auto binary = [&](const std::string& name, std::function<V(Tp&, V, V)> fn) {
    push(entry(name, grad_check(ab, [&](Tp& t) { return project(t, fn(t, t.param(a), t.param(b))); }), kTol));
  };
  binary("add", [](Tp&, V x, V y) { return add(x, y); });
  binary("sub", [](Tp&, V x, V y) { return sub(x, y); });
  binary("mul", [](Tp&, V x, V y) { return mul(x, y); });
  binary("matmul_nt", [](Tp&, V x, V y) { return matmul_nt(x, y); });
  binary("concat_cols", [](Tp&, V x, V y) { return concat_cols<double>({x, y, x}); });
  binary("concat_rows", [](Tp&, V x, V y) { return concat_rows<double>({y, x}); });
  push(entry("matmul", grad_check({&a, &c}, [&](Tp& t) { return project(t, matmul(t.param(a), t.param(c))); }),
             kTol));
  push(entry("add_row",
             grad_check({&a, &row}, [&](Tp& t) { return project(t, add_row(t.param(a), t.param(row))); }), kTol));
  unary("affine", [](Tp&, V x) { return affine(x, 2.5, -1.0); });
  unary("scale", [](Tp&, V x) { return scale(x, -0.7); });
  unary("gelu", [](Tp&, V x) { return gelu(x); });
  unary("sigmoid", [](Tp&, V x) { return sigmoid(x); });
  unary("tanh", [](Tp&, V x) { return nn::tanh(x); });
  unary("slice_rows", [](Tp&, V x) { return slice_rows(x, 1, 2); });
  unary("slice_cols", [](Tp&, V x) { return slice_cols(x, 1, 2); });
  unary("reshape", [](Tp&, V x) { return reshape(x, 2, 6); });
  unary("softmax_rows", [](Tp&, V x) { return softmax_rows(x); });
  unary("l2_normalize_rows", [](Tp&, V x) { return l2_normalize_rows(x); });
  push(entry("sum", grad_check({&a}, [&](Tp& t) { return sum(mul(t.param(a), t.param(a))); }), kTol));
  push(entry("mean", grad_check({&a}, [&](Tp& t) { return mean(mul(t.param(a), t.param(a))); }), kTol));
  {
    auto sq = leaf("sq", random_matrix(rng, 3, 3));
    const Mask mask = Mask::causal(3);
    push(entry("softmax_rows_masked",
               grad_check({&sq}, [&](Tp& t) { return project(t, softmax_rows(t.param(sq), &mask)); }), kTol));
  }
  {
    auto g = leaf("g", random_matrix(rng, 1, 4));
    auto bias = leaf("bias", random_matrix(rng, 1, 4));
    push(entry("layer_norm", grad_check({&a, &g, &bias}, [&](Tp& t) {
                 return project(t, layer_norm(t.param(a), t.param(g), t.param(bias)));
               }),
               kTol));
  }
  push(entry("softmax_cross_entropy", grad_check({&a}, [&](Tp& t) {
               return softmax_cross_entropy(t.param(a), {0, 3, 1}, {1.0, 4.48, 0.5});
             }),
             kTol));
  {
    Md targets(3, 4);
    targets << 0, 1, 1, 0, 0.5, 1, 0, 0, 1, 0.25, 0, 1;
    push(entry("binary_cross_entropy",
               grad_check({&a}, [&](Tp& t) { return binary_cross_entropy(sigmoid(t.param(a)), targets); }), kTol));
  }
  {
    auto u = leaf("u", random_matrix(rng, 1, 6));
    auto v = leaf("v", random_matrix(rng, 1, 6));
    push(entry("cosine_similarity",
               grad_check({&u, &v}, [&](Tp& t) { return cosine_similarity(t.param(u), t.param(v)); }), kTol));
  }
  {
    ParameterStore<double> store;
    FeedForward<double> ffn(store, "ffn", 4, 6, 3, rng);
    randomize(store, rng, 0.5);
    auto leaves = store.sorted();
    leaves.push_back(&a);
    push(entry("feed_forward", grad_check(leaves, [&](Tp& t) { return project(t, ffn(t, t.param(a))); }), kTol));
  }
  {
    ParameterStore<double> store;
    TransformerLayer<double> layer(store, "l", 8, 2, 4, rng);
    randomize(store, rng, 0.4);
    auto x = leaf("x", random_matrix(rng, 3, 8));
    auto pos = leaf("pos", random_matrix(rng, 3, 8));
    Mask mask = Mask::all(3, 3);
    mask.set(0, 2, false);
    auto leaves = store.sorted();
    leaves.push_back(&x);
    leaves.push_back(&pos);
    push(entry("transformer_layer", grad_check(leaves, [&](Tp& t) {
                 return project(t, layer(t, t.param(x), t.param(pos), &mask));
               }, 1e-5),
               kTol));
  }

  const SimConfig sim = toy_sim();
  const GridWorld world = generate_world(8, sim.world);
  Demonstration demo;
  demo.episode = sample_episode(world, 8, sim);
  demo.actions = {Action::MoveForward, Action::TurnLeft, Action::MoveForward};
  for (auto variant : {MemoryVariant::kRim, MemoryVariant::kRecurrentState, MemoryVariant::kEpisodicSequence}) {
    PolicyConfig cfg = toy_policy(variant);
    cfg.aux.vp = cfg.aux.em = cfg.aux.sp = false;
    NavModel<double> m(cfg, 15);
    Rng init(5);
    randomize(m.store(), init, 0.3);
    const auto ep = make_episode_data<double>(demo, 0, world, sim, cfg, 3.48);
    auto r = grad_check(m.store().sorted(), [&](Tp& t) {
      auto enc = m.policy().encode(t, ep.batch);
      auto mem = m.policy().initial_memory(t);
      std::vector<V> o_hats;
      for (int i = 0; i < ep.length(); ++i) {
        auto s = m.policy().step(t, mem, slice_rows(enc.o, i, 1), ep.batch.xy[i]);
        mem = s.memory;
        o_hats.push_back(s.o_hat);
      }
      auto logits = m.policy().action_logits(t, concat_rows(o_hats));
      return softmax_cross_entropy(logits, ep.targets, ep.weights);
    });
    push(entry(std::string("policy_unroll_") + memory_variant_name(variant), r, kTol));
  }
  {
    const PolicyConfig cfg = toy_policy(MemoryVariant::kRim);
    NavModel<double> m(cfg, 4);
    m.policy().set_training(true);
    Rng init(6);
    randomize(m.store(), init, 0.3);
    const auto ep = make_episode_data<double>(demo, 0, world, sim, cfg, 3.48);
    GradBuffer<double> g;
    Rng sample(17);
    run_episode(m, ep, {.window = ep.length()}, sample, &g);
    const auto params = m.store().sorted();
    std::vector<Md> analytic;
    for (size_t i = 0; i < params.size(); ++i)
      analytic.push_back(i < g.size() && g[i].size() ? g[i]
                                                     : Md::Zero(params[i]->value.rows(), params[i]->value.cols()));
    auto r = compare_gradients(params, analytic, [&] {
      Rng again(17);
      return run_episode(m, ep, {.window = ep.length(), .backward = false}, again, nullptr).total;
    });
    push(entry("total_loss_with_aux", r, kTol));
  }
  return out;
}

}  // namespace rimnav

#endif  // RIMNAV_GRADSUITE_HPP_
