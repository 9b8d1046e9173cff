#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ltsp/adam.hpp"
#include "ltsp/ops.hpp"

using ltsp::Tensor;

TEST_CASE("adam state validates hyperparameters") {
  std::vector<Tensor<double>> params{Tensor<double>::zeros({2}, true)};
  CHECK_THROWS_AS(ltsp::AdamState<double>::create(params, -0.1), ltsp::Error);
  CHECK_THROWS_AS(ltsp::AdamState<double>::create(params, 0.01, 1.0), ltsp::Error);
  CHECK_THROWS_AS(ltsp::AdamState<double>::create(params, 0.01, 0.9, 0.0), ltsp::Error);
}

TEST_CASE("zero gradient leaves parameters unchanged") {
  auto w = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5}, true);
  std::vector<Tensor<double>> params{w};
  auto st = ltsp::AdamState<double>::create(params, 0.01);
  w.grad().assign(3, 0.0);
  const auto before = w.values();
  ltsp::adam_step(params, st);
  CHECK(w.values() == before);
  CHECK(st.step_count == 1);
}

TEST_CASE("first step moves each coordinate by about the learning rate") {
  auto w = Tensor<double>::from_data({3}, {0.0, 0.0, 0.0}, true);
  std::vector<Tensor<double>> params{w};
  const double lr = 0.05;
  auto st = ltsp::AdamState<double>::create(params, lr);
  w.grad() = {0.3, -2.0, 1e-3};
  ltsp::adam_step(params, st);
  // bias correction makes mhat = g, vhat = g^2, so the update is
  // lr * g / (|g| + eps) = lr * sign(g) up to eps
  CHECK(w.values()[0] == Catch::Approx(-lr).epsilon(1e-4));
  CHECK(w.values()[1] == Catch::Approx(lr).epsilon(1e-4));
  CHECK(w.values()[2] == Catch::Approx(-lr).epsilon(1e-3));
}

TEST_CASE("missing gradient is rejected") {
  auto w = Tensor<double>::zeros({2}, true);
  std::vector<Tensor<double>> params{w};
  auto st = ltsp::AdamState<double>::create(params);
  CHECK_THROWS_AS(ltsp::adam_step(params, st), ltsp::Error);
}

TEST_CASE("100 steps on (w-3)^2 reach the optimum region") {
  auto w = Tensor<double>::from_data({1}, {0.0}, true);
  std::vector<Tensor<double>> params{w};
  auto st = ltsp::AdamState<double>::create(params, 0.05);
  for (int iter = 0; iter < 100; ++iter) {
    auto diff = ltsp::affine(w, 1.0, -3.0);
    auto loss = ltsp::sum(ltsp::mul(diff, diff));
    ltsp::backward(loss);
    ltsp::adam_step(params, st);
  }
  CHECK(std::abs(w.values()[0] - 3.0) < 0.1);
  CHECK(st.step_count == 100);
}
