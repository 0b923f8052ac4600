#include "egrot/optim.hpp"

#include <cmath>

#include "egrot/error.hpp"

namespace egrot::ag {

template <typename T>
void adamw_step(ParamList<T>& params, OptimizerState<T>& state) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw MissingGrad("adamw_step: parameter '" + p.name + "' has no gradient");
  }
  const AdamWConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (auto& p : params) {
    auto& mom = state.moments[p.name];
    const std::size_t n = p.tensor.numel();
    if (mom.first.size() != n) {
      mom.first.assign(n, T(0));
      mom.second.assign(n, T(0));
    }
    auto w = p.tensor.mutable_data();
    auto g = p.tensor.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      const double m = c.beta1 * static_cast<double>(mom.first[i]) + (1.0 - c.beta1) * gi;
      const double v = c.beta2 * static_cast<double>(mom.second[i]) + (1.0 - c.beta2) * gi * gi;
      mom.first[i] = static_cast<T>(m);
      mom.second[i] = static_cast<T>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + c.eps) + c.weight_decay * static_cast<double>(w[i]);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - c.lr * update);
    }
  }
}

template void adamw_step(ParamList<float>&, OptimizerState<float>&);
template void adamw_step(ParamList<double>&, OptimizerState<double>&);

}  // namespace egrot::ag
