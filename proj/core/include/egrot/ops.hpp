#pragma once

#include <vector>

#include "egrot/tensor.hpp"

// Differentiable primitives. Every op records itself on the graph when grad
// mode is on and at least one input requires grad. Shape errors throw
// ShapeMismatch naming the op and the offending shapes.
namespace egrot::ag {

// (M, K) x (K, N) -> (M, N)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise; `b` may also be a vector matching the last axis of `a` (bias add).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// 2-D transpose.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);

// Normalizes over `axis`, then applies per-element gain and bias of that length.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                    std::size_t axis, T eps = T(1e-5));

// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);

// x (..., in) times weight (in, out) plus bias (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis);

template <typename T>
Tensor<T> mean(const Tensor<T>& a);

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis);

// mean((a - b)^2) over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

// x (B, C, H, W), weight (Cout, C, k, k), bias (Cout); zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding);

enum class AttentionMask {
  kFull,     // every token sees every token
  kBlocked,  // references see references; each query sees references and itself
};

// Multi-head scaled dot-product attention within one token set. q, k, v are
// (T, d) with d divisible by `heads`; the first `n_ref` rows are references.
// When `probs` is given it receives the head-averaged (T, T) weights.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    AttentionMask mask, std::size_t n_ref, std::vector<T>* probs = nullptr);

}  // namespace egrot::ag
