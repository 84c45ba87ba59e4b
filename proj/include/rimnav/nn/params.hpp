#ifndef RIMNAV_NN_PARAMS_HPP_
#define RIMNAV_NN_PARAMS_HPP_

#include <algorithm>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rimnav/nn/autodiff.hpp"
#include "rimnav/rng.hpp"

namespace rimnav::nn {

enum class Init { kTruncNormal, kZeros, kOnes };

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "float32" : "float64";
}

/// Owns parameters with stable addresses. Iteration is in name order.
template <typename T>
class ParameterStore {
 public:
  static constexpr double kInitSigma = 0.02;

  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter<T>& add(const std::string& name, std::vector<int64_t> shape, Init init, Rng& rng) {
    if (shape.empty() || shape.size() > 2) throw std::invalid_argument("parameter shape must be 1-D or 2-D: " + name);
    if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    const int64_t rows = shape.size() == 1 ? 1 : shape[0];
    const int64_t cols = shape.back();
    p->shape = std::move(shape);
    p->value.resize(rows, cols);
    switch (init) {
      case Init::kZeros:
        p->value.setZero();
        break;
      case Init::kOnes:
        p->value.setOnes();
        break;
      case Init::kTruncNormal:
        for (Eigen::Index i = 0; i < p->value.size(); ++i)
          p->value.data()[i] = static_cast<T>(rng.truncated_normal(kInitSigma));
        break;
    }
    Parameter<T>* raw = p.get();
    by_name_.emplace(name, raw);
    owned_.push_back(std::move(p));
    return *raw;
  }

  Parameter<T>& get(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *it->second;
  }
  const Parameter<T>& get(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->get(name);
  }
  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

  std::vector<Parameter<T>*> sorted() const {
    std::vector<Parameter<T>*> out;
    out.reserve(by_name_.size());
    for (const auto& [_, p] : by_name_) out.push_back(p);
    return out;
  }

  size_t size() const { return owned_.size(); }

  size_t num_scalars() const {
    size_t n = 0;
    for (const auto& p : owned_) n += static_cast<size_t>(p->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : owned_) p->grad.setZero(p->value.rows(), p->value.cols());
  }

  /// Marks every parameter whose name starts with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [name, p] : by_name_)
      if (name.compare(0, prefix.size(), prefix) == 0) p->trainable = trainable;
  }

  /// Copies values from a store of possibly different precision. Names and
  /// shapes must match exactly.
  template <typename U>
  void copy_values_from(const ParameterStore<U>& other) {
    auto src = other.sorted();
    auto dst = sorted();
    if (src.size() != dst.size()) throw std::invalid_argument("copy_values_from: parameter count differs");
    for (size_t i = 0; i < src.size(); ++i) {
      if (src[i]->name != dst[i]->name || src[i]->shape != dst[i]->shape)
        throw std::invalid_argument("copy_values_from: mismatch at " + dst[i]->name);
      dst[i]->value = src[i]->value.template cast<T>();
    }
  }

 private:
  std::map<std::string, Parameter<T>*> by_name_;
  std::vector<std::unique_ptr<Parameter<T>>> owned_;
};

/// Throws if any parameter value is non-finite.
template <typename T>
void check_finite(const ParameterStore<T>& store) {
  for (auto* p : store.sorted()) {
    if (!p->value.allFinite()) throw std::runtime_error("non-finite value in parameter " + p->name);
  }
}

}  // namespace rimnav::nn

#endif  // RIMNAV_NN_PARAMS_HPP_
