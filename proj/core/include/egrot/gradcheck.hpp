#pragma once

#include <functional>
#include <string>
#include <vector>

#include "egrot/tensor.hpp"

namespace egrot::ag {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;  // index into the checked inputs
  std::size_t worst_index = 0;  // flat element index within that input
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = false;
};

using ScalarFn = std::function<Tensor<double>()>;

// Compares reverse-mode gradients of `f` with central differences
// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every element of every
// input. Relative error uses max(|analytic|, |numeric|, 1e-6 * max(1, |f(x)|))
// as denominator, so exactly-zero gradients are not judged on round-off.
// `f` must rebuild its graph from the inputs' current values on each call.
GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs, double eps, double tol);

// Single-input form: `f` receives the tensor being checked.
GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           const Tensor<double>& x, double eps, double tol);

}  // namespace egrot::ag
