#include <cmath>
#include <functional>
#include <string>

#include "doctest.h"
#include "egrot/error.hpp"
#include "egrot/gradcheck.hpp"
#include "egrot/ops.hpp"
#include "egrot/optim.hpp"
#include "egrot/rng.hpp"

using namespace egrot;
using namespace egrot::ag;
using T64 = Tensor<double>;

namespace {

T64 randn(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return T64(std::move(shape), std::move(v), true);
}

// Weighted sum so every output element gets a distinct upstream gradient.
T64 probe(const T64& y, std::uint64_t seed) {
  Rng rng(seed);
  T64 w = randn(rng, y.shape());
  w.set_requires_grad(false);
  return sum(mul(y, w));
}

// Checks `op` on 20 random draws of its inputs.
void check_op(const std::string& name, const std::vector<Shape>& shapes,
              const std::function<T64(const std::vector<T64>&)>& op, double tol = 1e-4) {
  Rng rng(std::hash<std::string>{}(name));
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<T64> inputs;
    for (const auto& s : shapes) inputs.push_back(randn(rng, s));
    const std::uint64_t seed = rng.next_u64();
    auto r = grad_check([&] { return probe(op(inputs), seed); }, inputs, 1e-5, tol);
    worst = std::max(worst, r.max_rel_error);
  }
  INFO(name << " max relative error " << worst);
  CHECK(worst <= tol);
}

}  // namespace

TEST_CASE("forward values") {
  T64 a({2, 2}, {1, 2, 3, 4});
  T64 eye({2, 2}, {1, 0, 0, 1});
  auto m = matmul(a, eye);
  CHECK(std::vector<double>(m.data().begin(), m.data().end()) == std::vector<double>{1, 2, 3, 4});

  auto s = softmax(T64({2}, {0, 0}), 0);
  CHECK(s.at(0) == 0.5);
  CHECK(s.at(1) == 0.5);

  T64 x({3}, {1, 2, 3});
  auto y = layernorm(x, T64({3}, {1, 1, 1}), T64({3}, {0, 0, 0}), 0, 0.0);
  const double sd = std::sqrt(2.0 / 3.0);
  CHECK(std::abs(y.at(0) + 1 / sd) <= 1e-9);
  CHECK(std::abs(y.at(1)) <= 1e-9);
  CHECK(std::abs(y.at(2) - 1 / sd) <= 1e-9);
}

TEST_CASE("shape errors name the op") {
  T64 a({2, 3}, std::vector<double>(6, 1.0));
  T64 b({2, 3}, std::vector<double>(6, 1.0));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), ShapeMismatch);
  CHECK_THROWS_AS(add(a, T64({2}, {1, 1})), ShapeMismatch);
  CHECK_THROWS_AS(concat<double>({a, T64({3, 3}, std::vector<double>(9, 0.0))}, 1), ShapeMismatch);
  CHECK_THROWS_AS(slice(a, 1, 2, 2), ShapeMismatch);
  CHECK_THROWS_AS(reshape(a, {4}), ShapeMismatch);
  CHECK_THROWS_AS(T64({2, 2}, {1, 2, 3}), ShapeMismatch);
}

TEST_CASE("backward trivial cases") {
  T64 x({3}, {0.3, -1.0, 2.0}, true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  T64 v = T64::scalar(1.7, true);
  mse(v, T64::scalar(0.0)).backward();
  CHECK(v.grad()[0] == doctest::Approx(3.4).epsilon(1e-15));

  CHECK_THROWS_AS(x.backward(), NotScalar);
}

TEST_CASE("gradients accumulate across uses") {
  Rng rng(1);
  T64 x = randn(rng, {4});
  T64 w1 = randn(rng, {4}), w2 = randn(rng, {4});
  w1.set_requires_grad(false);
  w2.set_requires_grad(false);
  // loss = sum(x*w1) + sum(gelu(x)*w2), so grad = w1 + gelu'(x) * w2
  add(sum(mul(x, w1)), sum(mul(gelu(x), w2))).backward();
  std::vector<double> combined(x.grad().begin(), x.grad().end());

  T64 xa(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  sum(mul(xa, w1)).backward();
  T64 xb(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  sum(mul(gelu(xb), w2)).backward();
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(combined[i] - (xa.grad()[i] + xb.grad()[i])) <= 1e-12);
}

TEST_CASE("no_grad records nothing") {
  T64 x({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = scale(x, 2.0);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}

TEST_CASE("grad_check on exact linear case") {
  Rng rng(2);
  auto r = grad_check([](const T64& x) { return sum(x); }, randn(rng, {5}), 1e-5, 1e-10);
  CHECK(r.max_rel_error <= 1e-10);
}

TEST_CASE("grad_check on gelu") {
  Rng rng(3);
  auto r = grad_check([](const T64& x) { return sum(gelu(x)); }, randn(rng, {16}), 1e-5, 1e-4);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("every primitive passes grad_check") {
  check_op("matmul", {{3, 4}, {4, 2}}, [](auto& in) { return matmul(in[0], in[1]); });
  check_op("add", {{3, 4}, {3, 4}}, [](auto& in) { return add(in[0], in[1]); });
  check_op("add_bias", {{3, 4}, {4}}, [](auto& in) { return add(in[0], in[1]); });
  check_op("sub", {{2, 5}, {2, 5}}, [](auto& in) { return sub(in[0], in[1]); });
  check_op("mul", {{2, 5}, {2, 5}}, [](auto& in) { return mul(in[0], in[1]); });
  check_op("scale", {{6}}, [](auto& in) { return scale(in[0], -1.3); });
  check_op("concat0", {{2, 3}, {1, 3}}, [](auto& in) { return concat<double>({in[0], in[1]}, 0); });
  check_op("concat1", {{2, 3}, {2, 2}}, [](auto& in) { return concat<double>({in[0], in[1]}, 1); });
  check_op("slice", {{3, 5, 2}}, [](auto& in) { return slice(in[0], 1, 1, 3); });
  check_op("reshape", {{3, 4}}, [](auto& in) { return reshape(in[0], {2, 6}); });
  check_op("transpose", {{3, 4}}, [](auto& in) { return transpose(in[0]); });
  check_op("softmax_last", {{3, 5}}, [](auto& in) { return softmax(in[0], 1); });
  check_op("softmax_first", {{3, 5}}, [](auto& in) { return softmax(in[0], 0); });
  check_op("layernorm", {{3, 6}, {6}, {6}}, [](auto& in) { return layernorm(in[0], in[1], in[2], 1); });
  check_op("layernorm_axis0", {{4, 3}, {4}, {4}}, [](auto& in) { return layernorm(in[0], in[1], in[2], 0); });
  check_op("gelu", {{12}}, [](auto& in) { return gelu(in[0]); });
  check_op("linear", {{3, 4}, {4, 5}, {5}}, [](auto& in) { return linear(in[0], in[1], in[2]); });
  check_op("linear_3d", {{2, 3, 4}, {4, 2}, {2}}, [](auto& in) { return linear(in[0], in[1], in[2]); });
  check_op("sum_all", {{3, 4}}, [](auto& in) { return sum(in[0]); });
  check_op("sum_axis", {{3, 4, 2}}, [](auto& in) { return sum(in[0], 1); });
  check_op("mean_all", {{3, 4}}, [](auto& in) { return mean(in[0]); });
  check_op("mean_axis", {{3, 4, 2}}, [](auto& in) { return mean(in[0], 2); });
  check_op("mse", {{7}, {7}}, [](auto& in) { return mse(in[0], in[1]); });
  check_op("conv2d", {{2, 3, 6, 6}, {4, 3, 3, 3}, {4}},
           [](auto& in) { return conv2d(in[0], in[1], in[2], 2, 1); });
  check_op("conv2d_s1", {{1, 2, 5, 5}, {3, 2, 3, 3}, {3}},
           [](auto& in) { return conv2d(in[0], in[1], in[2], 1, 1); });
  check_op("attention_full", {{5, 8}, {5, 8}, {5, 8}},
           [](auto& in) { return attention(in[0], in[1], in[2], 2, AttentionMask::kFull, 3); });
  check_op("attention_blocked", {{6, 8}, {6, 8}, {6, 8}},
           [](auto& in) { return attention(in[0], in[1], in[2], 2, AttentionMask::kBlocked, 4); });
}

TEST_CASE("attention masking") {
  Rng rng(6);
  auto q = randn(rng, {5, 4}), k = randn(rng, {5, 4}), v = randn(rng, {5, 4});
  std::vector<double> probs;
  attention(q, k, v, 2, AttentionMask::kBlocked, 3, &probs);
  for (std::size_t i = 0; i < 5; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      const bool visible = j < 3 || (i >= 3 && j == i);
      if (!visible) CHECK(probs[i * 5 + j] == 0.0);
      total += probs[i * 5 + j];
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
  // A single visible column gets all the weight.
  attention(q, k, v, 1, AttentionMask::kBlocked, 1, &probs);
  CHECK(probs[0] == 1.0);
}

TEST_CASE("softmax rows sum to one and layernorm normalizes") {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    auto x = randn(rng, {5, 9}, 3.0);
    auto s = softmax(x, 1);
    for (std::size_t r = 0; r < 5; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 9; ++c) total += s.at(r * 9 + c);
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
    auto y = layernorm(x, T64::full({9}, 1.0), T64::zeros({9}), 1, 0.0);
    for (std::size_t r = 0; r < 5; ++r) {
      double m = 0, v = 0;
      for (std::size_t c = 0; c < 9; ++c) m += y.at(r * 9 + c);
      m /= 9;
      for (std::size_t c = 0; c < 9; ++c) v += (y.at(r * 9 + c) - m) * (y.at(r * 9 + c) - m);
      v /= 9;
      CHECK(std::abs(m) <= 1e-9);
      CHECK(std::abs(v - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("forward is bitwise deterministic") {
  Rng rng(5);
  auto x = randn(rng, {2, 3, 8, 8});
  auto w = randn(rng, {4, 3, 3, 3});
  auto b = randn(rng, {4});
  auto a = conv2d(x, w, b, 2, 1);
  auto c = conv2d(x, w, b, 2, 1);
  CHECK(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
}

TEST_CASE("adamw closed forms") {
  SUBCASE("zero gradient, no decay leaves parameters") {
    ParamList<double> p{{"w", T64({3}, {1, -2, 3}, true)}};
    p[0].tensor.mutable_grad();
    OptimizerState<double> st;
    st.config.weight_decay = 0.0;
    adamw_step(p, st);
    CHECK(p[0].tensor.at(0) == 1.0);
    CHECK(p[0].tensor.at(1) == -2.0);
    CHECK(st.step == 1);
  }
  SUBCASE("single step") {
    ParamList<double> p{{"w", T64::scalar(1.0, true)}};
    p[0].tensor.mutable_grad()[0] = 1.0;
    OptimizerState<double> st;
    st.config = {0.1, 0.9, 0.999, 1e-8, 0.0};
    adamw_step(p, st);
    // m_hat = 1, v_hat = 1
    CHECK(p[0].tensor.item() == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
    CHECK(p[0].tensor.grad()[0] == 1.0);
  }
  SUBCASE("weight decay term") {
    ParamList<double> p{{"w", T64::scalar(2.0, true)}};
    p[0].tensor.mutable_grad()[0] = 1.0;
    OptimizerState<double> st;
    st.config = {0.1, 0.9, 0.999, 1e-8, 0.01};
    adamw_step(p, st);
    CHECK(p[0].tensor.item() == doctest::Approx(2.0 - 0.1 / (1.0 + 1e-8) - 0.1 * 0.01 * 2.0).epsilon(1e-15));
  }
  SUBCASE("missing gradient names the parameter") {
    ParamList<double> p{{"encoder.w", T64::scalar(2.0, true)}};
    OptimizerState<double> st;
    CHECK_THROWS_WITH_AS(adamw_step(p, st), doctest::Contains("encoder.w"), MissingGrad);
    CHECK(st.step == 0);
  }
}
