#include <catch2/catch_amalgamated.hpp>

#include "ltsp/ops.hpp"
#include "ltsp/rng.hpp"
#include "ltsp/tensor.hpp"

using ltsp::Tensor;

TEST_CASE("tensor construction keeps shape/data consistent") {
  auto t = Tensor<float>::zeros({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.rank() == 3);
  CHECK_FALSE(t.requires_grad());

  CHECK_THROWS_AS(Tensor<float>::zeros({}), ltsp::Error);
  CHECK_THROWS_AS(Tensor<float>::zeros({1, 1, 1, 1, 1, 1}), ltsp::Error);
  CHECK_THROWS_AS(Tensor<float>::zeros({2, 0, 3}), ltsp::Error);
  CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1.f, 2.f, 3.f}), ltsp::Error);
}

TEST_CASE("backward of sum gives all-ones gradient") {
  auto x = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto loss = ltsp::sum(x);
  ltsp::backward(loss);
  REQUIRE(x.has_grad());
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of quadratic sum(x*x)/2 gives x") {
  auto x = Tensor<double>::from_data({4}, {0.5, -1.25, 2.0, 3.5}, true);
  auto loss = ltsp::affine(ltsp::sum(ltsp::mul(x, x)), 0.5, 0.0);
  ltsp::backward(loss);
  for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == Catch::Approx(x.data()[i]));
}

TEST_CASE("backward rejects non-scalar and untracked losses") {
  auto x = Tensor<double>::from_data({3}, {1, 2, 3}, true);
  CHECK_THROWS_AS(ltsp::backward(ltsp::mul(x, x)), ltsp::Error);

  auto y = Tensor<double>::from_data({3}, {1, 2, 3}, false);
  CHECK_THROWS_AS(ltsp::backward(ltsp::sum(y)), ltsp::Error);
}

TEST_CASE("repeated backward resets then writes, no accumulation") {
  auto x = Tensor<double>::from_data({3}, {1, 2, 3}, true);
  auto loss = ltsp::sum(ltsp::mul(x, x));
  ltsp::backward(loss);
  const auto first = x.grad();
  ltsp::backward(loss);
  CHECK(x.grad() == first);
}

TEST_CASE("gradients accumulate across multiple uses of one tensor") {
  auto x = Tensor<double>::from_data({2}, {3, 4}, true);
  // loss = sum(x) + sum(x*x): d/dx = 1 + 2x
  auto loss = ltsp::add(ltsp::sum(x), ltsp::sum(ltsp::mul(x, x)));
  ltsp::backward(loss);
  CHECK(x.grad()[0] == Catch::Approx(1 + 2 * 3.0));
  CHECK(x.grad()[1] == Catch::Approx(1 + 2 * 4.0));
}

TEST_CASE("NoGradGuard suppresses graph recording") {
  auto x = Tensor<double>::from_data({2}, {1, 2}, true);
  ltsp::NoGradGuard guard;
  auto y = ltsp::mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("forward ops on finite inputs stay finite") {
  ltsp::Rng rng(99);
  std::vector<float> vals(64);
  for (auto& v : vals) v = static_cast<float>(rng.uniform(-10.0, 10.0));
  auto x = Tensor<float>::from_data({4, 4, 4}, vals);
  for (auto kind : {ltsp::Act::relu, ltsp::Act::sigmoid, ltsp::Act::tanh}) {
    auto y = ltsp::activation(x, kind);
    for (float v : y.values()) CHECK(std::isfinite(v));
  }
}
