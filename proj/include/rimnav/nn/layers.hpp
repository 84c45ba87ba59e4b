#ifndef RIMNAV_NN_LAYERS_HPP_
#define RIMNAV_NN_LAYERS_HPP_

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "rimnav/nn/autodiff.hpp"
#include "rimnav/nn/params.hpp"

namespace rimnav::nn {

/// Interleaved sin/cos: e[2k] = sin(t / 10000^(2k/d)), e[2k+1] = cos(same).
template <typename T>
Matrix<T> sinusoidal_embedding(int64_t t, int64_t d) {
  if (t < 0) throw std::invalid_argument("sinusoidal_embedding: t must be >= 0");
  if (d <= 0 || d % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: d must be positive and even");
  Matrix<T> e(1, d);
  for (int64_t k = 0; k < d / 2; ++k) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(d));
    const double a = static_cast<double>(t) * freq;
    e(0, 2 * k) = static_cast<T>(std::sin(a));
    e(0, 2 * k + 1) = static_cast<T>(std::cos(a));
  }
  return e;
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, int64_t in, int64_t out, Rng& rng,
         bool zero_weight = false, bool bias = true)
      : in_(in), out_(out) {
    w_ = &store.add(name + ".w", {in, out}, zero_weight ? Init::kZeros : Init::kTruncNormal, rng);
    if (bias) b_ = &store.add(name + ".b", {out}, Init::kZeros, rng);
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const {
    Var<T> y = matmul(x, t.param(*w_));
    return b_ ? add_row(y, t.param(*b_)) : y;
  }

  int64_t in() const { return in_; }
  int64_t out() const { return out_; }
  Parameter<T>& weight() const { return *w_; }

 private:
  Parameter<T>* w_ = nullptr;
  Parameter<T>* b_ = nullptr;
  int64_t in_ = 0;
  int64_t out_ = 0;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, int64_t d, Rng& rng) {
    g_ = &store.add(name + ".g", {d}, Init::kOnes, rng);
    b_ = &store.add(name + ".b", {d}, Init::kZeros, rng);
  }
  Var<T> operator()(Tape<T>& t, Var<T> x) const { return layer_norm(x, t.param(*g_), t.param(*b_)); }

 private:
  Parameter<T>* g_ = nullptr;
  Parameter<T>* b_ = nullptr;
};

/// Two linear layers with GELU between.
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore<T>& store, const std::string& name, int64_t in, int64_t hidden, int64_t out, Rng& rng,
              bool zero_output = false)
      : fc1_(store, name + ".fc1", in, hidden, rng), fc2_(store, name + ".fc2", hidden, out, rng, zero_output) {}

  Var<T> operator()(Tape<T>& t, Var<T> x) const { return fc2_(t, gelu(fc1_(t, x))); }

 private:
  Linear<T> fc1_;
  Linear<T> fc2_;
};

/// Pre-norm transformer layer. Position features, when given, are added to
/// the query and key inputs only.
template <typename T>
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(ParameterStore<T>& store, const std::string& name, int64_t d, int64_t heads, int64_t ffn_mult,
                   Rng& rng)
      : d_(d), heads_(heads) {
    if (heads <= 0 || d % heads != 0) throw std::invalid_argument("d must be divisible by the head count");
    ln1_ = LayerNorm<T>(store, name + ".ln1", d, rng);
    wq_ = Linear<T>(store, name + ".attn.q", d, d, rng);
    // A key bias only shifts each row of logits by a constant, so it is omitted.
    wk_ = Linear<T>(store, name + ".attn.k", d, d, rng, false, false);
    wv_ = Linear<T>(store, name + ".attn.v", d, d, rng);
    wo_ = Linear<T>(store, name + ".attn.o", d, d, rng);
    ln2_ = LayerNorm<T>(store, name + ".ln2", d, rng);
    ffn_ = FeedForward<T>(store, name + ".ffn", d, ffn_mult * d, d, rng);
  }

  /// `weights`, if non-null, receives the per-head attention matrices.
  Var<T> operator()(Tape<T>& t, Var<T> x, std::optional<Var<T>> pos, const Mask* mask,
                    std::vector<Matrix<T>>* weights = nullptr) const {
    Var<T> h = attention(t, x, pos, mask, weights);
    Var<T> y = add(x, h);
    return add(y, ffn_(t, ln2_(t, y)));
  }

  Var<T> attention(Tape<T>& t, Var<T> x, std::optional<Var<T>> pos, const Mask* mask,
                   std::vector<Matrix<T>>* weights = nullptr) const {
    Var<T> n = ln1_(t, x);
    Var<T> qk_in = pos ? add(n, *pos) : n;
    Var<T> q = wq_(t, qk_in);
    Var<T> k = wk_(t, qk_in);
    Var<T> v = wv_(t, n);
    const int64_t dh = d_ / heads_;
    const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> outs;
    outs.reserve(heads_);
    for (int64_t hd = 0; hd < heads_; ++hd) {
      Var<T> qh = slice_cols(q, hd * dh, dh);
      Var<T> kh = slice_cols(k, hd * dh, dh);
      Var<T> vh = slice_cols(v, hd * dh, dh);
      Var<T> a = softmax_rows(scale(matmul_nt(qh, kh), scale_factor), mask);
      if (weights) weights->push_back(a.value());
      outs.push_back(matmul(a, vh));
    }
    Var<T> cat = heads_ == 1 ? outs.front() : concat_cols(outs);
    return wo_(t, cat);
  }

 private:
  int64_t d_ = 0;
  int64_t heads_ = 1;
  LayerNorm<T> ln1_;
  Linear<T> wq_, wk_, wv_, wo_;
  LayerNorm<T> ln2_;
  FeedForward<T> ffn_;
};

/// L transformer layers followed by a final layer norm.
template <typename T>
class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(ParameterStore<T>& store, const std::string& name, int64_t d, int64_t layers, int64_t heads,
                   int64_t ffn_mult, Rng& rng) {
    for (int64_t i = 0; i < layers; ++i)
      layers_.emplace_back(store, name + ".layer" + std::to_string(i), d, heads, ffn_mult, rng);
    final_ln_ = LayerNorm<T>(store, name + ".ln_f", d, rng);
  }

  Var<T> operator()(Tape<T>& t, Var<T> x, std::optional<Var<T>> pos, const Mask* mask) const {
    for (const auto& layer : layers_) x = layer(t, x, pos, mask);
    return final_ln_(t, x);
  }

  const std::vector<TransformerLayer<T>>& layers() const { return layers_; }

 private:
  std::vector<TransformerLayer<T>> layers_;
  LayerNorm<T> final_ln_;
};

}  // namespace rimnav::nn

#endif  // RIMNAV_NN_LAYERS_HPP_
