#include <cmath>
#include <functional>
#include <string>

#include "doctest.h"
#include "saldist/errors.hpp"
#include "support.hpp"

using namespace saldist;
using saldist::testing::random_tensor;

TEST_SUITE("autodiff") {

TEST_CASE("construction") {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  CHECK(eye.rows() == 2);
  CHECK(eye.matrix()(0, 0) == 1.0);
  CHECK(eye.matrix()(0, 1) == 0.0);

  const Tensor v({3}, {1, 2, 3});
  CHECK(v.dim() == 1);
  CHECK_FALSE(v.requires_grad());
  CHECK_FALSE(v.has_grad());

  CHECK_THROWS_AS(Tensor({2}, {1, 2, 3}), TensorError);
  CHECK_THROWS_AS(Tensor({2}, {1, NAN}), TensorError);
  CHECK_THROWS_AS(Tensor({1}, {INFINITY}), TensorError);
}

TEST_CASE("forward values") {
  const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor p = matmul(a, eye);
  CHECK(std::vector<double>(p.values().begin(), p.values().end()) == std::vector<double>{1, 2, 3, 4});

  const Tensor s = softmax(Tensor({3}, {0, 0, 0}));
  for (double x : s.values()) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  // -log(e^2 / (e^2 + 2)), evaluated by hand.
  const double e2 = std::exp(2.0);
  const double expected = -std::log(e2 / (e2 + 2.0));
  const TokenIds target{0};
  const double got = cross_entropy(Tensor::matrix(1, 3, {2, 0, 0}), target).item();
  CHECK(std::abs(got - expected) < 1e-15);

  const TokenIds bad{3};
  CHECK_THROWS_AS(cross_entropy(Tensor::matrix(1, 3, {2, 0, 0}), bad), TensorError);
  CHECK_THROWS_AS(matmul(a, Tensor::matrix(1, 2, {1, 2})), TensorError);
}

TEST_CASE("softmax rows are distributions") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = random_tensor(rng, {4, 7}, 30.0, false);
    for (int axis : {0, 1}) {
      const Tensor s = softmax(x, axis);
      const auto m = s.matrix();
      if (axis == 1) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) CHECK(std::abs(m.row(r).sum() - 1.0) <= 1e-12);
      } else {
        for (Eigen::Index c = 0; c < m.cols(); ++c) CHECK(std::abs(m.col(c).sum() - 1.0) <= 1e-12);
      }
      CHECK(m.minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("backward examples") {
  const Tensor x({3}, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{2, 4, 6});

  // Root does not depend on y: y keeps a zero gradient.
  const Tensor y({3}, {1, 2, 3}, true);
  const Tensor c({3}, {5, 6, 7}, true);
  backward(sum(c));
  for (double g : y.grad()) CHECK(g == 0.0);

  CHECK_THROWS_AS(backward(mul_scalar(x, 2.0)), TensorError);  // not a scalar
  CHECK_THROWS_AS(backward(sum(Tensor({2}, {1, 2}))), TensorError);  // no graph
}

TEST_CASE("leaf gradients accumulate across calls") {
  const Tensor x({2}, {1, -1}, true);
  const Tensor root = sum(mul(x, x));
  backward(root);
  backward(root);
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[1] == -4.0);
}

TEST_CASE("no-grad guard records nothing") {
  const Tensor x({2}, {1, 2}, true);
  NoGradGuard guard;
  const Tensor y = mul_scalar(x, 3.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check examples") {
  const Tensor x({3}, {1, 2, 3});
  CHECK(grad_check([](const Tensor& t) { return sum(mul(t, t)); }, x, 1e-5) < 1e-7);
  const Tensor k = Tensor::scalar(4.0);
  CHECK(grad_check([&](const Tensor&) { return k; }, x) == 0.0);

  int calls = 0;
  auto drifting = [&](const Tensor& t) { return mul_scalar(sum(t), 1.0 + 1e-3 * ++calls); };
  CHECK_THROWS_AS(grad_check(drifting, x), Error);
}

TEST_CASE("backward is linear in the root") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor w = random_tensor(rng, {3, 4});
    const Tensor x = random_tensor(rng, {4, 2}, 1.0, false);
    auto f = [&] { return sum(gelu(matmul(w, x))); };
    auto g = [&] { return mean(softmax(matmul(w, x), 0)); };

    w.zero_grad();
    backward(f());
    const std::vector<double> gf(w.grad().begin(), w.grad().end());
    w.zero_grad();
    backward(g());
    const std::vector<double> gg(w.grad().begin(), w.grad().end());
    w.zero_grad();
    backward(add(f(), g()));
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(w.grad()[i] - (gf[i] + gg[i])) <= 1e-12);
  }
}

TEST_CASE("identical forward passes are bitwise equal") {
  Rng rng(5);
  const Tensor w = random_tensor(rng, {5, 5});
  const Tensor g = random_tensor(rng, {5});
  const Tensor b = random_tensor(rng, {5});
  auto run = [&] { return layer_norm(gelu(matmul(w, w)), g, b); };
  const Tensor first = run();
  backward(sum(first));
  const Tensor second = run();
  CHECK(saldist::testing::bitwise_equal(first.values(), second.values()));
}

// Every op against central differences, 100 seeds each. A random weighting
// keeps reductions like softmax-sum from collapsing to constants.
TEST_CASE("per-op gradients match finite differences") {
  using Unary = std::function<Tensor(const Tensor&, Rng&)>;
  struct Case {
    std::string name;
    Shape shape;
    Unary op;
  };
  const std::vector<Case> cases = {
      {"matmul_left", {3, 4}, [](const Tensor& x, Rng& r) { return matmul(x, random_tensor(r, {4, 2}, 1, false)); }},
      {"matmul_right", {4, 2}, [](const Tensor& x, Rng& r) { return matmul(random_tensor(r, {3, 4}, 1, false), x); }},
      {"transpose", {3, 2}, [](const Tensor& x, Rng&) { return transpose(x); }},
      {"add", {3, 4}, [](const Tensor& x, Rng& r) { return add(x, random_tensor(r, {3, 4}, 1, false)); }},
      {"add_bias", {4}, [](const Tensor& x, Rng& r) { return add(random_tensor(r, {3, 4}, 1, false), x); }},
      {"sub", {3, 4}, [](const Tensor& x, Rng& r) { return sub(random_tensor(r, {3, 4}, 1, false), x); }},
      {"mul", {3, 4}, [](const Tensor& x, Rng& r) { return mul(x, random_tensor(r, {3, 4}, 1, false)); }},
      {"mul_scalar", {3, 4}, [](const Tensor& x, Rng& r) { return mul_scalar(x, r.uniform(-2, 2)); }},
      {"embedding_gather", {6, 3},
       [](const Tensor& x, Rng& r) {
         const TokenIds ids = saldist::testing::random_ids(r, 5, 0, 6);
         return embedding_gather(x, ids);
       }},
      {"softmax_rows", {3, 5}, [](const Tensor& x, Rng&) { return softmax(x, 1); }},
      {"softmax_cols", {3, 5}, [](const Tensor& x, Rng&) { return softmax(x, 0); }},
      {"softmax_vector", {5}, [](const Tensor& x, Rng&) { return softmax(x); }},
      {"log_softmax", {3, 5}, [](const Tensor& x, Rng&) { return log_softmax(x, 1); }},
      {"layer_norm_x", {3, 6},
       [](const Tensor& x, Rng& r) {
         return layer_norm(x, random_tensor(r, {6}, 1, false), random_tensor(r, {6}, 1, false));
       }},
      {"layer_norm_gain", {6},
       [](const Tensor& g, Rng& r) {
         return layer_norm(random_tensor(r, {3, 6}, 1, false), g, random_tensor(r, {6}, 1, false));
       }},
      {"layer_norm_bias", {6},
       [](const Tensor& b, Rng& r) {
         return layer_norm(random_tensor(r, {3, 6}, 1, false), random_tensor(r, {6}, 1, false), b);
       }},
      {"gelu", {3, 4}, [](const Tensor& x, Rng&) { return gelu(x); }},
      {"reshape", {3, 4}, [](const Tensor& x, Rng&) { return reshape(x, {2, 6}); }},
      {"concat_rows", {2, 3},
       [](const Tensor& x, Rng& r) {
         const std::vector<Tensor> parts{random_tensor(r, {1, 3}, 1, false), x, x};
         return concat(parts, 0);
       }},
      {"concat_cols", {2, 3},
       [](const Tensor& x, Rng& r) {
         const std::vector<Tensor> parts{x, random_tensor(r, {2, 2}, 1, false)};
         return concat(parts, 1);
       }},
      {"slice_cols", {3, 6}, [](const Tensor& x, Rng&) { return slice_cols(x, 2, 3); }},
      {"sum", {3, 4}, [](const Tensor& x, Rng&) { return sum(x); }},
      {"mean", {3, 4}, [](const Tensor& x, Rng&) { return mean(x); }},
      {"pick", {3, 4},
       [](const Tensor& x, Rng& r) {
         const TokenIds cols = saldist::testing::random_ids(r, 3, 0, 4);
         return pick(x, cols);
       }},
      {"cross_entropy", {4, 5},
       [](const Tensor& x, Rng& r) {
         const TokenIds t = saldist::testing::random_ids(r, 4, 0, 5);
         return cross_entropy(x, t);
       }},
      {"cross_entropy_ignore", {4, 5},
       [](const Tensor& x, Rng&) {
         const TokenIds t{1, 0, 3, 0};
         return cross_entropy(x, t, 0);
       }},
  };

  for (const auto& c : cases) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      const Tensor x = random_tensor(rng, c.shape, 2.0, false);
      const std::uint64_t op_seed = rng.next();
      auto f = [&](const Tensor& t) {
        Rng r(op_seed);
        const Tensor y = c.op(t, r);
        return sum(mul(y, random_tensor(r, y.shape(), 1.0, false)));
      };
      worst = std::max(worst, grad_check(f, x, 1e-5));
    }
    INFO(c.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("two-layer network gradients") {
  Rng rng(21);
  Tensor w1 = random_tensor(rng, {6, 8});
  Tensor w2 = random_tensor(rng, {8, 4});
  const Tensor x = random_tensor(rng, {5, 6}, 1.0, false);
  const TokenIds targets{0, 3, 1, 2, 3};
  auto loss = [&] { return cross_entropy(matmul(gelu(matmul(x, w1)), w2), targets); };
  CHECK(grad_check_inplace(loss, w1) < 1e-6);
  CHECK(grad_check_inplace(loss, w2) < 1e-6);
}

}  // TEST_SUITE
