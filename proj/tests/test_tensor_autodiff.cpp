#include <doctest.h>

#include <cmath>

#include "fuselm/error.hpp"
#include "fuselm/ops.hpp"
#include "fuselm/rng.hpp"
#include "fuselm/tensor.hpp"

using namespace fuselm;

TEST_CASE("tensor: factories validate shape against data") {
  Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6.0);
  CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  CHECK_THROWS_AS(Tensor().shape(), Error);
}

TEST_CASE("autodiff: sum gradient is all ones") {
  Tensor x = Tensor::from_values({2, 3}, {1, -2, 3, 4, -5, 6}, true);
  backward(sum(x));
  REQUIRE(x.has_grad());
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("autodiff: quadratic loss gradient equals the input") {
  Tensor x = Tensor::from_values({4}, {0.5, -1.5, 2.0, 0.0}, true);
  Tensor loss = scale(sum(mul(x, x)), 0.5);
  backward(loss);
  const auto g = x.grad();
  for (int i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(x.at(i)).epsilon(1e-12));
}

TEST_CASE("autodiff: fan-out accumulates additively") {
  Tensor x = Tensor::from_values({2}, {3.0, 4.0}, true);
  // loss = sum(x) + sum(x*x): dloss/dx = 1 + 2x
  Tensor loss = add(sum(x), sum(mul(x, x)));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(1.0 + 6.0));
  CHECK(x.grad()[1] == doctest::Approx(1.0 + 8.0));
}

TEST_CASE("autodiff: per-example accumulation matches one big backward") {
  Rng rng(3);
  Tensor w = Tensor::randn({3, 3}, rng, 0.5, true);
  Tensor a = Tensor::randn({2, 3}, rng, 1.0);
  Tensor b = Tensor::randn({2, 3}, rng, 1.0);

  backward(sum(matmul(a, w)));
  backward(sum(matmul(b, w)));
  std::vector<double> accumulated(w.grad().begin(), w.grad().end());
  w.zero_grad();

  backward(add(sum(matmul(a, w)), sum(matmul(b, w))));
  const auto joint = w.grad();
  for (size_t i = 0; i < accumulated.size(); ++i) {
    CHECK(accumulated[i] == doctest::Approx(joint[i]).epsilon(1e-12));
  }
}

TEST_CASE("autodiff: a consumed graph refuses a second backward") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  Tensor mid = mul(x, x);
  Tensor loss = sum(mid);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), GraphStateError);
  // A new root over the consumed interior must fail loudly, not silently
  // under-propagate.
  CHECK_THROWS_AS(backward(sum(mul(mid, mid))), GraphStateError);
}

TEST_CASE("autodiff: non-scalar and non-finite roots are rejected") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(mul(x, x)), DimensionError);
  Tensor y = Tensor::from_values({1}, {std::numeric_limits<double>::infinity()}, true);
  CHECK_THROWS_AS(backward(sum(y)), NumericError);
}

TEST_CASE("autodiff: NoGradGuard suppresses taping") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  {
    NoGradGuard guard;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  Tensor y = mul(x, x);
  CHECK(y.requires_grad());
  backward(sum(y));
  CHECK(x.has_grad());
}

TEST_CASE("autodiff: zero_grad drops the buffer entirely") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  backward(sum(x));
  CHECK(x.has_grad());
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
  CHECK_THROWS_AS(x.grad(), GraphStateError);
}

TEST_CASE("tensor: detach_copy shares nothing") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  Tensor d = x.detach_copy();
  CHECK_FALSE(d.requires_grad());
  d.mutable_values()[0] = 99.0;
  CHECK(x.at(0) == 1.0);
}

TEST_CASE("autodiff: graph trace visits each node once, children first") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  Tensor a = mul(x, x);
  Tensor b = add(a, a);   // fan-out of a
  Tensor loss = sum(b);
  Graph g = Graph::trace(loss);
  // nodes: x, a, b, loss — each exactly once
  CHECK(g.order.size() == 4);
  // children precede parents
  auto pos = [&](const detail::TensorNode* n) {
    for (size_t i = 0; i < g.order.size(); ++i) {
      if (g.order[i].get() == n) return static_cast<int>(i);
    }
    return -1;
  };
  CHECK(pos(x.node().get()) < pos(a.node().get()));
  CHECK(pos(a.node().get()) < pos(b.node().get()));
  CHECK(pos(b.node().get()) < pos(loss.node().get()));
}
