#ifndef RIMNAV_NN_GRADCHECK_HPP_
#define RIMNAV_NN_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "rimnav/nn/autodiff.hpp"

namespace rimnav::nn {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_name;
  Eigen::Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  size_t checked = 0;
};

/// Below kGradFloor the denominator is clamped, so gradients smaller than the
/// finite-difference noise are compared on an absolute scale.
inline constexpr double kGradFloor = 1e-6;

inline double grad_rel_err(double a, double n) {
  return std::abs(a - n) / std::max(kGradFloor, std::abs(a) + std::abs(n));
}

/// Compares `analytic` (one matrix per leaf) against five-point central
/// differences of the scalar function `f()`, which must read the leaves'
/// current values. `stride` > 1 checks every stride-th element only.
template <typename F>
GradCheckResult compare_gradients(const std::vector<Parameter<double>*>& leaves,
                                  const std::vector<Matrix<double>>& analytic, F&& f, double h = 1e-4,
                                  Eigen::Index stride = 1) {
  if (analytic.size() != leaves.size()) throw std::invalid_argument("compare_gradients: one gradient per leaf");
  GradCheckResult r;
  r.max_rel_err = -1.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Parameter<double>& p = *leaves[li];
    for (Eigen::Index i = 0; i < p.value.size(); i += stride) {
      double& x = p.value.data()[i];
      const double orig = x;
      auto at = [&](double offset) {
        x = orig + offset;
        return f();
      };
      const double num = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      x = orig;
      const double a = analytic[li].data()[i];
      const double e = grad_rel_err(a, num);
      ++r.checked;
      if (e > r.max_rel_err) {
        r.max_rel_err = e;
        r.worst_name = p.name;
        r.worst_index = i;
        r.worst_analytic = a;
        r.worst_numeric = num;
      }
    }
  }
  if (r.max_rel_err < 0) r.max_rel_err = 0;
  return r;
}

/// Checks the tape gradients of `loss` for every element of `leaves`.
/// `loss(tape)` must build a 1 x 1 result and read the leaves through
/// tape.param(). Inputs are checked by wrapping them as parameters.
template <typename F>
GradCheckResult grad_check(const std::vector<Parameter<double>*>& leaves, F&& loss, double h = 1e-4,
                           Eigen::Index stride = 1) {
  std::vector<Matrix<double>> analytic;
  {
    Tape<double> tape;
    Var<double> out = loss(tape);
    tape.backward(out);
    for (auto* p : leaves) {
      const Matrix<double>* g = tape.param_grad(*p);
      analytic.push_back(g ? *g : Matrix<double>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  return compare_gradients(
      leaves, analytic,
      [&]() {
        Tape<double> tape;
        return loss(tape).scalar();
      },
      h, stride);
}

}  // namespace rimnav::nn

#endif  // RIMNAV_NN_GRADCHECK_HPP_
