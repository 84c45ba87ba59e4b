#ifndef RIMNAV_NN_AUTODIFF_HPP_
#define RIMNAV_NN_AUTODIFF_HPP_

#include <cassert>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace rimnav::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named trainable tensor. Vectors are stored as 1 x n matrices with a
/// one-element shape.
template <typename T>
struct Parameter {
  std::string name;
  std::vector<int64_t> shape;
  Matrix<T> value;
  Matrix<T> grad;
  bool trainable = true;
};

template <typename T>
class Tape;

/// Handle to a node on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Matrix<T>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
  bool valid() const { return tape != nullptr; }
};

/// Records a computation for reverse-mode differentiation. A tape is owned by
/// one thread; parameters are referenced, not copied.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> v) { return push(std::move(v), false, nullptr); }

  /// Leaf that receives a gradient (used for input sensitivities).
  Var<T> variable(Matrix<T> v) { return push(std::move(v), true, nullptr); }

  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.external = &p.value;
    n.requires_grad = p.trainable;
    n.param = &p;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace(&p, id);
    return {this, id};
  }

  const Matrix<T>& value(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const Matrix<T>& grad(int id) const { return nodes_[id].grad; }

  template <typename Expr>
  void add_grad(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  template <typename F>
  Var<T> push(Matrix<T> value, bool requires_grad, F&& backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if constexpr (!std::is_same_v<std::decay_t<F>, std::nullptr_t>) {
      if (requires_grad) n.backward = std::forward<F>(backward);
    }
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Back-propagates from a 1 x 1 node.
  void backward(Var<T> root) {
    if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward needs a scalar root");
    if (!nodes_[root.id].requires_grad) return;
    add_grad(root.id, Matrix<T>::Ones(1, 1));
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backward && n.grad.size() != 0) n.backward(id);
    }
  }

  /// Gradient accumulated for `p` on this tape, or nullptr if p was unused.
  const Matrix<T>* param_grad(const Parameter<T>& p) const {
    auto it = param_nodes_.find(const_cast<Parameter<T>*>(&p));
    if (it == param_nodes_.end() || nodes_[it->second].grad.size() == 0) return nullptr;
    return &nodes_[it->second].grad;
  }

  /// Adds this tape's parameter gradients into Parameter::grad.
  void accumulate_param_grads() const {
    for (const auto& [p, id] : param_nodes_) {
      const Node& n = nodes_[id];
      if (n.grad.size() == 0) continue;
      if (p->grad.size() == 0) p->grad = Matrix<T>::Zero(p->value.rows(), p->value.cols());
      p->grad += n.grad;
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    const Matrix<T>* external = nullptr;
    Matrix<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void(int)> backward;
  };
  std::deque<Node> nodes_;
  std::unordered_map<Parameter<T>*, int> param_nodes_;
};

namespace detail {

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vs) {
  for (const auto& v : vs)
    if (v.tape->requires_grad(v.id)) return true;
  return false;
}

inline void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), detail::any_grad({a, b}), [&t, ia, ib](int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.add_grad(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.add_grad(ib, t.value(ia).transpose() * g);
  });
}

/// a * b^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::check(a.cols() == b.cols(), "matmul_nt: column counts differ");
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value() * b.value().transpose();
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), detail::any_grad({a, b}), [&t, ia, ib](int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.add_grad(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.add_grad(ib, g.transpose() * t.value(ia));
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value() + b.value();
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), detail::any_grad({a, b}), [&t, ia, ib](int self) {
    t.add_grad(ia, t.grad(self));
    t.add_grad(ib, t.grad(self));
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value() - b.value();
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), detail::any_grad({a, b}), [&t, ia, ib](int self) {
    t.add_grad(ia, t.grad(self));
    t.add_grad(ib, -t.grad(self));
  });
}

/// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value().cwiseProduct(b.value());
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), detail::any_grad({a, b}), [&t, ia, ib](int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.add_grad(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.add_grad(ib, g.cwiseProduct(t.value(ia)));
  });
}

/// a + row, with the 1 x n row broadcast over a's rows.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  detail::check(row.rows() == 1 && row.cols() == a.cols(), "add_row: row shape mismatch");
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  const int ia = a.id, ib = row.id;
  return t.push(std::move(out), detail::any_grad({a, row}), [&t, ia, ib](int self) {
    t.add_grad(ia, t.grad(self));
    if (t.requires_grad(ib)) t.add_grad(ib, t.grad(self).colwise().sum());
  });
}

/// alpha * a + beta, elementwise.
template <typename T>
Var<T> affine(Var<T> a, T alpha, T beta) {
  Tape<T>& t = *a.tape;
  Matrix<T> out = (a.value().array() * alpha + beta).matrix();
  const int ia = a.id;
  return t.push(std::move(out), detail::any_grad({a}),
                [&t, ia, alpha](int self) { t.add_grad(ia, t.grad(self) * alpha); });
}

template <typename T>
Var<T> scale(Var<T> a, T alpha) {
  return affine(a, alpha, T(0));
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

template <typename T>
Var<T> gelu(Var<T> a) {
  Tape<T>& t = *a.tape;
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  Matrix<T> out = a.value().unaryExpr([inv_sqrt2](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); });
  const int ia = a.id;
  return t.push(std::move(out), detail::any_grad({a}), [&t, ia, inv_sqrt2](int self) {
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    Matrix<T> d = t.value(ia).unaryExpr([&](T x) {
      return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * std::exp(T(-0.5) * x * x) * inv_sqrt_2pi;
    });
    t.add_grad(ia, t.grad(self).cwiseProduct(d));
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value().unaryExpr([](T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  });
  const int ia = a.id;
  return t.push(std::move(out), detail::any_grad({a}), [&t, ia](int self) {
    const auto& y = t.value(self);
    t.add_grad(ia, t.grad(self).cwiseProduct(y.cwiseProduct((T(1) - y.array()).matrix())));
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value().array().tanh().matrix();
  const int ia = a.id;
  return t.push(std::move(out), detail::any_grad({a}), [&t, ia](int self) {
    const auto& y = t.value(self);
    t.add_grad(ia, t.grad(self).cwiseProduct((T(1) - y.array().square()).matrix()));
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention weights

/// Row-wise layer normalization with gain and bias (both 1 x n).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const Eigen::Index n = x.cols();
  detail::check(gain.cols() == n && bias.cols() == n, "layer_norm: parameter width mismatch");
  Tape<T>& t = *x.tape;
  const auto& xv = x.value();
  Matrix<T> xhat(xv.rows(), n);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return t.push(std::move(out), detail::any_grad({x, gain, bias}),
                [&t, ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), n](int self) {
                  const auto& g = t.grad(self);
                  if (t.requires_grad(ig)) t.add_grad(ig, g.cwiseProduct(xhat).colwise().sum());
                  if (t.requires_grad(ib)) t.add_grad(ib, g.colwise().sum());
                  if (t.requires_grad(ix)) {
                    Matrix<T> dxhat = g.array().rowwise() * t.value(ig).row(0).array();
                    Matrix<T> dx(g.rows(), n);
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      const T s1 = dxhat.row(r).sum();
                      const T s2 = dxhat.row(r).dot(xhat.row(r));
                      dx.row(r) = (dxhat.row(r).array() * T(n) - s1 - xhat.row(r).array() * s2) * (inv_std(r) / T(n));
                    }
                    t.add_grad(ix, dx);
                  }
                });
}

/// Boolean attention mask, rows x cols, row-major; true means "may attend".
struct Mask {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::vector<uint8_t> allow;

  static Mask all(Eigen::Index r, Eigen::Index c) { return {r, c, std::vector<uint8_t>(r * c, 1)}; }
  static Mask causal(Eigen::Index n) {
    Mask m{n, n, std::vector<uint8_t>(n * n, 0)};
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j <= i; ++j) m.allow[i * n + j] = 1;
    return m;
  }
  bool operator()(Eigen::Index r, Eigen::Index c) const { return allow[r * cols + c] != 0; }
  void set(Eigen::Index r, Eigen::Index c, bool v) { allow[r * cols + c] = v ? 1 : 0; }
};

/// Row softmax. Masked entries behave as -inf logits and get exactly zero
/// weight. Throws if a row has no allowed entry.
template <typename T>
Var<T> softmax_rows(Var<T> x, const Mask* mask = nullptr) {
  Tape<T>& t = *x.tape;
  const auto& xv = x.value();
  if (mask) detail::check(mask->rows == xv.rows() && mask->cols == xv.cols(), "softmax_rows: mask shape mismatch");
  Matrix<T> out = Matrix<T>::Zero(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (Eigen::Index c = 0; c < xv.cols(); ++c)
      if (!mask || (*mask)(r, c)) mx = std::max(mx, xv(r, c));
    if (mx == -std::numeric_limits<T>::infinity()) throw std::invalid_argument("softmax_rows: row has no allowed entry");
    T sum = 0;
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      if (mask && !(*mask)(r, c)) continue;
      out(r, c) = std::exp(xv(r, c) - mx);
      sum += out(r, c);
    }
    out.row(r) /= sum;
  }
  const int ix = x.id;
  return t.push(std::move(out), detail::any_grad({x}), [&t, ix](int self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    Matrix<T> dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const T dot = g.row(r).dot(y.row(r));
      dx.row(r) = y.row(r).array() * (g.row(r).array() - dot);
    }
    t.add_grad(ix, dx);
  });
}

/// Rows scaled to unit L2 norm. Throws on a zero row.
template <typename T>
Var<T> l2_normalize_rows(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& xv = x.value();
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms = xv.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) > T(0))) throw std::invalid_argument("l2_normalize_rows: zero-norm vector");
  }
  Matrix<T> out = xv.array().colwise() / norms.array();
  const int ix = x.id;
  return t.push(std::move(out), detail::any_grad({x}), [&t, ix, norms = std::move(norms)](int self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    Matrix<T> dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      dx.row(r) = (g.row(r) - y.row(r) * g.row(r).dot(y.row(r))) / norms(r);
    }
    t.add_grad(ix, dx);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::check(!parts.empty(), "concat_cols: no inputs");
  Tape<T>& t = *parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::check(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
    rg |= t.requires_grad(p.id);
  }
  Matrix<T> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index c0 = 0;
  for (const auto& p : parts) {
    out.middleCols(c0, p.cols()) = p.value();
    spans.push_back({p.id, p.cols()});
    c0 += p.cols();
  }
  return t.push(std::move(out), rg, [&t, spans = std::move(spans)](int self) {
    Eigen::Index c = 0;
    for (const auto& [id, n] : spans) {
      if (t.requires_grad(id)) t.add_grad(id, t.grad(self).middleCols(c, n));
      c += n;
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::check(!parts.empty(), "concat_rows: no inputs");
  Tape<T>& t = *parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::check(p.cols() == cols, "concat_rows: column counts differ");
    rows += p.rows();
    rg |= t.requires_grad(p.id);
  }
  Matrix<T> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index r0 = 0;
  for (const auto& p : parts) {
    out.middleRows(r0, p.rows()) = p.value();
    spans.push_back({p.id, p.rows()});
    r0 += p.rows();
  }
  return t.push(std::move(out), rg, [&t, spans = std::move(spans)](int self) {
    Eigen::Index r = 0;
    for (const auto& [id, n] : spans) {
      if (t.requires_grad(id)) t.add_grad(id, t.grad(self).middleRows(r, n));
      r += n;
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index start, Eigen::Index count) {
  detail::check(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value().middleRows(start, count);
  const int ia = a.id;
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return t.push(std::move(out), detail::any_grad({a}), [&t, ia, start, count, rows, cols](int self) {
    Matrix<T> g = Matrix<T>::Zero(rows, cols);
    g.middleRows(start, count) = t.grad(self);
    t.add_grad(ia, g);
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index count) {
  detail::check(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value().middleCols(start, count);
  const int ia = a.id;
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return t.push(std::move(out), detail::any_grad({a}), [&t, ia, start, count, rows, cols](int self) {
    Matrix<T> g = Matrix<T>::Zero(rows, cols);
    g.middleCols(start, count) = t.grad(self);
    t.add_grad(ia, g);
  });
}

/// Row-major reshape.
template <typename T>
Var<T> reshape(Var<T> a, Eigen::Index rows, Eigen::Index cols) {
  detail::check(rows * cols == a.value().size(), "reshape: element count differs");
  Tape<T>& t = *a.tape;
  Matrix<T> out = Eigen::Map<const Matrix<T>>(a.value().data(), rows, cols);
  const int ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return t.push(std::move(out), detail::any_grad({a}), [&t, ia, r0, c0](int self) {
    const auto& g = t.grad(self);
    t.add_grad(ia, Eigen::Map<const Matrix<T>>(g.data(), r0, c0));
  });
}

/// Gradient-blocking copy.
template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape->constant(a.value());
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Var<T> sum(Var<T> a) {
  Tape<T>& t = *a.tape;
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(std::move(out), detail::any_grad({a}),
                [&t, ia, r, c](int self) { t.add_grad(ia, Matrix<T>::Constant(r, c, t.grad(self)(0, 0))); });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Sum over rows of weight[i] * -log softmax(logits[i])[target[i]].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& target, const std::vector<T>& weight) {
  const auto& z = logits.value();
  detail::check(static_cast<Eigen::Index>(target.size()) == z.rows() &&
                    static_cast<Eigen::Index>(weight.size()) == z.rows(),
                "softmax_cross_entropy: one target and weight per row required");
  Tape<T>& t = *logits.tape;
  Matrix<T> probs(z.rows(), z.cols());
  T loss = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    detail::check(target[r] >= 0 && target[r] < z.cols(), "softmax_cross_entropy: target out of range");
    const T mx = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - mx).exp();
    const T s = probs.row(r).sum();
    probs.row(r) /= s;
    loss += weight[r] * (std::log(s) + mx - z(r, target[r]));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = loss;
  const int iz = logits.id;
  return t.push(std::move(out), detail::any_grad({logits}),
                [&t, iz, probs = std::move(probs), target, weight](int self) {
                  Matrix<T> d = probs;
                  for (Eigen::Index r = 0; r < d.rows(); ++r) {
                    d(r, target[r]) -= T(1);
                    d.row(r) *= weight[r];
                  }
                  t.add_grad(iz, d * t.grad(self)(0, 0));
                });
}

/// Mean binary cross entropy of probabilities against targets in [0, 1].
/// Probabilities are clamped to [eps, 1 - eps]; clamped entries pass no gradient.
template <typename T>
Var<T> binary_cross_entropy(Var<T> probs, const Matrix<T>& targets, T eps = T(1e-7)) {
  const auto& p = probs.value();
  detail::check(p.rows() == targets.rows() && p.cols() == targets.cols(), "binary_cross_entropy: shape mismatch");
  Tape<T>& t = *probs.tape;
  const T n = static_cast<T>(p.size());
  T loss = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const T q = std::clamp(p.data()[i], eps, T(1) - eps);
    const T y = targets.data()[i];
    loss -= y * std::log(q) + (T(1) - y) * std::log(T(1) - q);
  }
  Matrix<T> out(1, 1);
  out(0, 0) = loss / n;
  const int ip = probs.id;
  return t.push(std::move(out), detail::any_grad({probs}), [&t, ip, targets, eps, n](int self) {
    const auto& pv = t.value(ip);
    Matrix<T> d(pv.rows(), pv.cols());
    for (Eigen::Index i = 0; i < pv.size(); ++i) {
      const T q = pv.data()[i];
      const T y = targets.data()[i];
      d.data()[i] = (q < eps || q > T(1) - eps) ? T(0) : (-y / q + (T(1) - y) / (T(1) - q)) / n;
    }
    t.add_grad(ip, d * t.grad(self)(0, 0));
  });
}

/// Cosine similarity of two 1 x n rows, returned as 1 x 1. Throws on zero norm.
template <typename T>
Var<T> cosine_similarity(Var<T> u, Var<T> v) {
  detail::check(u.rows() == 1 && v.rows() == 1 && u.cols() == v.cols(), "cosine_similarity: needs equal-width rows");
  return matmul_nt(l2_normalize_rows(u), l2_normalize_rows(v));
}

}  // namespace rimnav::nn

#endif  // RIMNAV_NN_AUTODIFF_HPP_
