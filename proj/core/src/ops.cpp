#include "egrot/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "egrot/error.hpp"

namespace egrot::ag {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<MatR<T>>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;

template <typename T>
using Backward = std::function<void(Node<T>&)>;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw ShapeMismatch(std::string(op) + ": " + detail);
}

// Builds the output node; history is recorded only when needed.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      const char* op, Backward<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (grad_mode_enabled()) {
    for (const Tensor<T>* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor<T>* in : inputs) node->parents.push_back(in->node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs, const char* op,
                      Backward<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (grad_mode_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

// Gradient buffer of parent `i`, or nullptr when it does not take gradients.
template <typename T>
T* parent_grad(Node<T>& n, std::size_t i) {
  Node<T>* p = n.parents[i].get();
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) shape_error(op, "axis " + std::to_string(axis) + " out of range for " + to_string(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out.push_back(s[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  Map<T>(out.data(), m, n).noalias() = CMap<T>(a.data().data(), m, k) * CMap<T>(b.data().data(), k, n);
  return make_result<T>({m, n}, std::move(out), {&a, &b}, "matmul", [m, k, n](Node<T>& self) {
    CMap<T> g(self.grad.data(), m, n);
    if (T* ga = parent_grad(self, 0)) {
      Map<T>(ga, m, k).noalias() += g * CMap<T>(self.parents[1]->data.data(), k, n).transpose();
    }
    if (T* gb = parent_grad(self, 1)) {
      Map<T>(gb, k, n).noalias() += CMap<T>(self.parents[0]->data.data(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, "add", [](Node<T>& self) {
      for (std::size_t p = 0; p < 2; ++p) {
        if (T* g = parent_grad(self, p)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
      }
    });
  }
  if (b.rank() == 1 && a.shape().back() == b.dim(0)) {
    const std::size_t n = b.dim(0);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i % n];
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, "add_bias", [n](Node<T>& self) {
      if (T* g = parent_grad(self, 0)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
      if (T* g = parent_grad(self, 1)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
      }
    });
  }
  shape_error("add", to_string(a.shape()) + " + " + to_string(b.shape()));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("sub", to_string(a.shape()) + " - " + to_string(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "sub", [](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mul", to_string(a.shape()) + " * " + to_string(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "mul", [](Node<T>& self) {
    const auto& x = self.parents[0]->data;
    const auto& y = self.parents[1]->data;
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {&a}, "scale", [factor](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) shape_error("concat", "axis " + std::to_string(axis) + " for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i) ok = i == axis || p.dim(i) == first[i];
    if (!ok) shape_error("concat", to_string(first) + " vs " + to_string(p.shape()) + " on axis " + std::to_string(axis));
    out_shape[axis] += p.dim(axis);
  }
  const AxisSplit s = split_axis(out_shape, axis, "concat");
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis);
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(p.data().data() + o * len * s.inner, len * s.inner, out.data() + (o * s.n + off) * s.inner);
    }
    off += len;
  }
  return make_result<T>(out_shape, std::move(out), parts, "concat", [s, offsets](Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      T* g = parent_grad(self, i);
      if (!g) continue;
      const std::size_t len = self.parents[i]->shape.size() > 0 ? self.parents[i]->data.size() / (s.outer * s.inner) : 0;
      for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = self.grad.data() + (o * s.n + offsets[i]) * s.inner;
        T* dst = g + o * len * s.inner;
        for (std::size_t j = 0; j < len * s.inner; ++j) dst[j] += src[j];
      }
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_axis(a.shape(), axis, "slice");
  if (length == 0 || start + length > s.n) {
    shape_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") on axis " + std::to_string(axis) + " of " + to_string(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<T> out(numel(out_shape));
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(a.data().data() + (o * s.n + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
  }
  return make_result<T>(out_shape, std::move(out), {&a}, "slice", [s, start, length](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = self.grad.data() + o * length * s.inner;
        T* dst = g + (o * s.n + start) * s.inner;
        for (std::size_t j = 0; j < length * s.inner; ++j) dst[j] += src[j];
      }
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_error("reshape", to_string(a.shape()) + " -> " + to_string(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), {&a}, "reshape", [](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) shape_error("transpose", "expects rank 2, got " + to_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(a.numel());
  Map<T>(out.data(), c, r) = CMap<T>(a.data().data(), r, c).transpose();
  return make_result<T>({c, r}, std::move(out), {&a}, "transpose", [r, c](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) Map<T>(g, r, c) += CMap<T>(self.grad.data(), c, r).transpose();
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "softmax");
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.n * s.inner + j;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, x[base + i * s.inner]);
      T total = 0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const T e = std::exp(x[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= total;
    }
  }
  return make_result<T>(a.shape(), std::move(out), {&a}, "softmax", [s](Node<T>& self) {
    T* g = parent_grad(self, 0);
    if (!g) return;
    const auto& y = self.data;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < s.inner; ++j) {
        const std::size_t base = o * s.n * s.inner + j;
        T dot = 0;
        for (std::size_t i = 0; i < s.n; ++i) dot += y[base + i * s.inner] * self.grad[base + i * s.inner];
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t k = base + i * s.inner;
          g[k] += y[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t axis, T eps) {
  const AxisSplit s = split_axis(a.shape(), axis, "layernorm");
  if (gamma.shape() != Shape{s.n} || beta.shape() != Shape{s.n}) {
    shape_error("layernorm", "gain " + to_string(gamma.shape()) + " / bias " + to_string(beta.shape()) +
                                 " for axis of length " + std::to_string(s.n));
  }
  const std::size_t groups = s.outer * s.inner;
  std::vector<T> out(a.numel());
  // Normalized values and 1/sigma per group are kept for the backward pass.
  auto xhat = std::make_shared<std::vector<T>>(a.numel());
  auto inv_std = std::make_shared<std::vector<T>>(groups);
  const T* x = a.data().data();
  const T* ga = gamma.data().data();
  const T* be = beta.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.n * s.inner + j;
      T mu = 0;
      for (std::size_t i = 0; i < s.n; ++i) mu += x[base + i * s.inner];
      mu /= T(s.n);
      T var = 0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const T d = x[base + i * s.inner] - mu;
        var += d * d;
      }
      var /= T(s.n);
      const T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[o * s.inner + j] = is;
      for (std::size_t i = 0; i < s.n; ++i) {
        const std::size_t k = base + i * s.inner;
        (*xhat)[k] = (x[k] - mu) * is;
        out[k] = (*xhat)[k] * ga[i] + be[i];
      }
    }
  }
  return make_result<T>(a.shape(), std::move(out), {&a, &gamma, &beta}, "layernorm",
                        [s, xhat, inv_std](Node<T>& self) {
                          const T* ga = self.parents[1]->data.data();
                          T* gx = parent_grad(self, 0);
                          T* gg = parent_grad(self, 1);
                          T* gb = parent_grad(self, 2);
                          const T n = T(s.n);
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t j = 0; j < s.inner; ++j) {
                              const std::size_t base = o * s.n * s.inner + j;
                              T sum_dy = 0, sum_dy_xhat = 0;
                              for (std::size_t i = 0; i < s.n; ++i) {
                                const std::size_t k = base + i * s.inner;
                                const T dy = self.grad[k] * ga[i];
                                sum_dy += dy;
                                sum_dy_xhat += dy * (*xhat)[k];
                                if (gg) gg[i] += self.grad[k] * (*xhat)[k];
                                if (gb) gb[i] += self.grad[k];
                              }
                              if (!gx) continue;
                              const T is = (*inv_std)[o * s.inner + j];
                              for (std::size_t i = 0; i < s.n; ++i) {
                                const std::size_t k = base + i * s.inner;
                                const T dy = self.grad[k] * ga[i];
                                gx[k] += is * (dy - sum_dy / n - (*xhat)[k] * sum_dy_xhat / n);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  const T kInvSqrt2Pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2));
  }
  return make_result<T>(a.shape(), std::move(out), {&a}, "gelu", [kInvSqrt2Pi](Node<T>& self) {
    T* g = parent_grad(self, 0);
    if (!g) return;
    const auto& xs = self.parents[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T x = xs[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
      const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.shape().back() != weight.dim(0) || bias.shape() != Shape{weight.dim(1)}) {
    shape_error("linear", "x " + to_string(x.shape()) + ", weight " + to_string(weight.shape()) + ", bias " +
                              to_string(bias.shape()));
  }
  const std::size_t in = weight.dim(0);
  Tensor<T> flat = x.rank() == 2 ? x : reshape(x, {x.numel() / in, in});
  Tensor<T> y = add(matmul(flat, weight), bias);
  if (x.rank() == 2) return y;
  Shape out_shape = x.shape();
  out_shape.back() = weight.dim(1);
  return reshape(y, out_shape);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return make_result<T>({1}, {total}, {&a}, "sum", [](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "sum");
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.n; ++i) {
      for (std::size_t j = 0; j < s.inner; ++j) out[o * s.inner + j] += a.data()[(o * s.n + i) * s.inner + j];
    }
  }
  return make_result<T>(drop_axis(a.shape(), axis), std::move(out), {&a}, "sum_axis", [s](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.n; ++i) {
          for (std::size_t j = 0; j < s.inner; ++j) g[(o * s.n + i) * s.inner + j] += self.grad[o * s.inner + j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis) {
  const std::size_t n = split_axis(a.shape(), axis, "mean").n;
  return scale(sum(a, axis), T(1) / T(n));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mse", to_string(a.shape()) + " vs " + to_string(b.shape()));
  const Tensor<T> d = sub(a, b);
  return mean(mul(d, d));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3) ||
      bias.shape() != Shape{weight.dim(0)} || stride == 0) {
    shape_error("conv2d", "x " + to_string(x.shape()) + ", weight " + to_string(weight.shape()) + ", bias " +
                              to_string(bias.shape()));
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (h + 2 * padding < k || w + 2 * padding < k) {
    shape_error("conv2d", "kernel " + std::to_string(k) + " larger than padded input " + to_string(x.shape()));
  }
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t patch = cin * k * k;
  const std::size_t cols_n = batch * ho * wo;

  // im2col: rows index (c, ky, kx), columns index (b, oy, ox).
  auto cols = std::make_shared<std::vector<T>>(patch * cols_n, T(0));
  const T* xd = x.data().data();
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols->data() + ((c * k + ky) * k + kx) * cols_n;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              row[(b * ho + oy) * wo + ox] = xd[((b * cin + c) * h + iy) * w + ix];
            }
          }
        }
      }
    }
  }
  MatR<T> prod = CMap<T>(weight.data().data(), cout, patch) * CMap<T>(cols->data(), patch, cols_n);
  std::vector<T> out(batch * cout * ho * wo);
  const std::size_t plane = ho * wo;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t co = 0; co < cout; ++co) {
      const T bv = bias.data()[co];
      const T* src = prod.data() + co * cols_n + b * plane;
      T* dst = out.data() + (b * cout + co) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bv;
    }
  }
  return make_result<T>(
      {batch, cout, ho, wo}, std::move(out), {&x, &weight, &bias}, "conv2d",
      [=](Node<T>& self) {
        // Regroup the output gradient to (cout, b * plane) to match the column layout.
        MatR<T> g(cout, cols_n);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t co = 0; co < cout; ++co) {
            std::copy_n(self.grad.data() + (b * cout + co) * plane, plane, g.data() + co * cols_n + b * plane);
          }
        }
        if (T* gw = parent_grad(self, 1)) {
          Map<T>(gw, cout, patch).noalias() += g * CMap<T>(cols->data(), patch, cols_n).transpose();
        }
        if (T* gb = parent_grad(self, 2)) {
          for (std::size_t co = 0; co < cout; ++co) gb[co] += g.row(co).sum();
        }
        if (T* gx = parent_grad(self, 0)) {
          MatR<T> gcols = CMap<T>(self.parents[1]->data.data(), cout, patch).transpose() * g;
          for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = gcols.data() + ((c * k + ky) * k + kx) * cols_n;
                for (std::size_t b = 0; b < batch; ++b) {
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                      const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                      if (ix < 0 || ix >= static_cast<long>(w)) continue;
                      gx[((b * cin + c) * h + iy) * w + ix] += row[(b * ho + oy) * wo + ox];
                    }
                  }
                }
              }
            }
          }
        }
      });
}


template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    AttentionMask mask, std::size_t n_ref, std::vector<T>* probs) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape() || heads == 0 ||
      q.dim(1) % heads != 0 || n_ref > q.dim(0)) {
    shape_error("attention", "q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                                 to_string(v.shape()) + ", heads " + std::to_string(heads) + ", n_ref " +
                                 std::to_string(n_ref));
  }
  const std::size_t n = q.dim(0), d = q.dim(1), dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
  auto visible = [mask, n_ref](std::size_t row, std::size_t col) {
    if (mask == AttentionMask::kFull) return true;
    return col < n_ref || (row >= n_ref && col == row);
  };

  CMap<T> qm(q.data().data(), n, d), km(k.data().data(), n, d), vm(v.data().data(), n, d);
  auto p = std::make_shared<std::vector<MatR<T>>>(heads);
  MatR<T> out(n, d);
  if (probs) probs->assign(n * n, T(0));
  for (std::size_t h = 0; h < heads; ++h) {
    MatR<T> s = (qm.middleCols(h * dh, dh) * km.middleCols(h * dh, dh).transpose()) * scale_factor;
    for (std::size_t i = 0; i < n; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (visible(i, j)) mx = std::max(mx, s(i, j));
      }
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        s(i, j) = visible(i, j) ? std::exp(s(i, j) - mx) : T(0);
        total += s(i, j);
      }
      s.row(i) /= total;
    }
    out.middleCols(h * dh, dh).noalias() = s * vm.middleCols(h * dh, dh);
    if (probs) {
      Map<T> avg(probs->data(), n, n);
      avg += s / static_cast<T>(heads);
    }
    (*p)[h] = std::move(s);
  }
  std::vector<T> data(out.data(), out.data() + out.size());
  return make_result<T>(
      {n, d}, std::move(data), {&q, &k, &v}, "attention", [=](Node<T>& self) {
        CMap<T> g(self.grad.data(), n, d);
        CMap<T> qd(self.parents[0]->data.data(), n, d), kd(self.parents[1]->data.data(), n, d),
            vd(self.parents[2]->data.data(), n, d);
        T* gq = parent_grad(self, 0);
        T* gk = parent_grad(self, 1);
        T* gv = parent_grad(self, 2);
        for (std::size_t h = 0; h < heads; ++h) {
          const MatR<T>& ph = (*p)[h];
          const auto gh = g.middleCols(h * dh, dh);
          if (gv) Map<T>(gv, n, d).middleCols(h * dh, dh).noalias() += ph.transpose() * gh;
          if (!gq && !gk) continue;
          MatR<T> dp = gh * vd.middleCols(h * dh, dh).transpose();
          // Softmax backward: dS = P * (dP - rowsum(dP * P)).
          const auto row_dot = (dp.array() * ph.array()).rowwise().sum().eval();
          MatR<T> ds = (ph.array() * (dp.array().colwise() - row_dot)).matrix() * scale_factor;
          if (gq) Map<T>(gq, n, d).middleCols(h * dh, dh).noalias() += ds * kd.middleCols(h * dh, dh);
          if (gk) Map<T>(gk, n, d).middleCols(h * dh, dh).noalias() += ds.transpose() * qd.middleCols(h * dh, dh);
        }
      });
}

#define EGROT_INSTANTIATE_OPS(T)                                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                           \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                   \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                     \
  template Tensor<T> transpose(const Tensor<T>&);                                                          \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                               \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, T);      \
  template Tensor<T> gelu(const Tensor<T>&);                                                               \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> sum(const Tensor<T>&);                                                                \
  template Tensor<T> sum(const Tensor<T>&, std::size_t);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                               \
  template Tensor<T> mean(const Tensor<T>&, std::size_t);                                                  \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, AttentionMask, \
                               std::size_t, std::vector<T>*);

EGROT_INSTANTIATE_OPS(float)
EGROT_INSTANTIATE_OPS(double)

#undef EGROT_INSTANTIATE_OPS

}  // namespace egrot::ag
