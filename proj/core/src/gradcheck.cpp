#include "egrot/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace egrot::ag {

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs, double eps, double tol) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  const Tensor<double> out = f();
  // Central differences of a value of size |f| carry round-off near
  // |f| * 1e-16 / eps; gradients below this floor are compared absolutely.
  const double floor = 1e-6 * std::max(1.0, std::abs(out.item()));
  out.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& x : inputs) {
    analytic.emplace_back(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.back().begin());
    x.zero_grad();
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double plus = f().item();
      values[i] = saved - eps;
      const double minus = f().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_rel_error || (k == 0 && i == 0)) {
        result.max_rel_error = std::max(result.max_rel_error, rel);
        result.worst_input = k;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  result.passed = result.max_rel_error <= tol;
  return result;
}

GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           const Tensor<double>& x, double eps, double tol) {
  return grad_check([&f, &x] { return f(x); }, {x}, eps, tol);
}

}  // namespace egrot::ag
