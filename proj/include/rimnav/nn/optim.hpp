#ifndef RIMNAV_NN_OPTIM_HPP_
#define RIMNAV_NN_OPTIM_HPP_

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "rimnav/nn/params.hpp"

namespace rimnav::nn {

struct AdamWConfig {
  double base_lr = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t total_steps = 1;
};

inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = {{"base_lr", c.base_lr}, {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
       {"beta2", c.beta2},     {"eps", c.eps},                   {"total_steps", c.total_steps}};
}
inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.total_steps = j.value("total_steps", c.total_steps);
}

/// AdamW with bias correction, decoupled multiplicative decay and a linear
/// learning-rate decay to zero.
template <typename T>
class AdamW {
 public:
  AdamW(ParameterStore<T>& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {
    if (cfg_.total_steps <= 0) throw std::invalid_argument("total_steps must be positive");
  }

  double lr_at(int64_t step) const {
    return std::max(0.0, cfg_.base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(cfg_.total_steps)));
  }
  double current_lr() const { return lr_at(step_); }
  int64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

  /// Applies one update from Parameter::grad. Missing gradients count as zero.
  /// Throws without touching anything if a gradient is non-finite.
  void step() {
    auto params = store_->sorted();
    for (auto* p : params) {
      if (p->trainable && p->grad.size() != 0 && !p->grad.allFinite())
        throw std::runtime_error("non-finite gradient in parameter " + p->name + " at step " + std::to_string(step_));
    }
    const double lr = lr_at(step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto* p : params) {
      if (!p->trainable) continue;
      auto& st = state_[p->name];
      if (st.m.size() == 0) {
        st.m = Matrix<T>::Zero(p->value.rows(), p->value.cols());
        st.v = Matrix<T>::Zero(p->value.rows(), p->value.cols());
      }
      const bool has_grad = p->grad.size() != 0;
      const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
      const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
      for (Eigen::Index i = 0; i < p->value.size(); ++i) {
        const T g = has_grad ? p->grad.data()[i] : T(0);
        T& m = st.m.data()[i];
        T& v = st.v.data()[i];
        m = b1 * m + (T(1) - b1) * g;
        v = b2 * v + (T(1) - b2) * g * g;
        const double mhat = static_cast<double>(m) / bc1;
        const double vhat = static_cast<double>(v) / bc2;
        const double upd = lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        T& x = p->value.data()[i];
        x = static_cast<T>(static_cast<double>(x * decay) - upd);
      }
    }
  }

 private:
  struct Moments {
    Matrix<T> m;
    Matrix<T> v;
  };
  ParameterStore<T>* store_;
  AdamWConfig cfg_;
  int64_t step_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace rimnav::nn

#endif  // RIMNAV_NN_OPTIM_HPP_
