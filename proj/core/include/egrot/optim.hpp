#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "egrot/tensor.hpp"

namespace egrot::ag {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct Moments {
  std::vector<T> first;
  std::vector<T> second;
};

// Moments are keyed by parameter name so a parameter subset (e.g. with the
// encoder frozen) can be stepped without disturbing the rest.
template <typename T>
struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Moments<T>> moments;
};

// One decoupled-weight-decay Adam update with bias correction:
//   w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)
// Increments state.step. Gradients are read, not cleared. Throws MissingGrad if
// any parameter has no gradient.
template <typename T>
void adamw_step(ParamList<T>& params, OptimizerState<T>& state);

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace egrot::ag
