/*
 * Copyright 2026 The GPSVI Lab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "gpsvi/tensor.hpp"

#include <gtest/gtest.h>

#include <random>

#include "gpsvi/grad_check.hpp"

namespace gpsvi {
namespace {

std::vector<double> uniform_values(std::mt19937_64& rng, std::size_t n, double lo = -2.0,
                                   double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

Tensor random_param(std::mt19937_64& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  auto n = numel(shape);
  return Tensor::parameter(std::move(shape), uniform_values(rng, n, lo, hi));
}

TEST(TensorTest, MatmulByHand) {
  auto a = Tensor::constant({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::constant({2, 1}, {1, 1});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 3.0);
  EXPECT_EQ(c[1], 7.0);
}

TEST(TensorTest, SoftmaxOfZerosIsUniform) {
  auto y = softmax(Tensor::vector({0, 0, 0}), 0);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(TensorTest, ExpAtZero) {
  Tape tape;
  auto x = Tensor::parameter({1}, {0.0});
  auto y = exp(x);
  EXPECT_EQ(y[0], 1.0);
  tape.backward(sum_all(y));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(TensorTest, BackwardOfSquare) {
  Tape tape;
  auto x = Tensor::parameter({1}, {3.0});
  tape.backward(sum_all(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(TensorTest, BackwardThroughSigmoidAtZero) {
  Tape tape;
  auto w = Tensor::parameter({1}, {0.0});
  auto x = Tensor::constant({1}, {1.0});
  tape.backward(sum_all(sigmoid(dot(w, x))));
  EXPECT_DOUBLE_EQ(w.grad()[0], 0.25);
}

TEST(TensorTest, BackwardThroughReluMean) {
  Tape tape;
  auto x = Tensor::parameter({2}, {-1.0, 2.0});
  tape.backward(mean_all(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.5);
}

TEST(TensorTest, ShapeMismatchReportsBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4});
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(TensorTest, DomainErrors) {
  EXPECT_THROW(log(Tensor::vector({1.0, 0.0})), DomainError);
  EXPECT_THROW(log(Tensor::vector({-1.0})), DomainError);
  EXPECT_THROW(l2norm(Tensor::vector({0.0, 0.0})), DomainError);
}

TEST(TensorTest, NonScalarLossIsRankError) {
  Tape tape;
  auto x = Tensor::parameter({2}, {1.0, 2.0});
  auto y = mul(x, x);
  EXPECT_THROW(tape.backward(y), RankError);
}

TEST(TensorTest, ConstantsAreNotRecorded) {
  Tape tape;
  auto a = Tensor::vector({1, 2});
  auto b = add(a, a);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(b.requires_grad());
}

TEST(TensorTest, TapeIsConsumedByBackward) {
  Tape tape;
  auto x = Tensor::parameter({1}, {2.0});
  auto loss = sum_all(mul(x, x));
  EXPECT_GT(tape.size(), 0u);
  tape.backward(loss);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(TensorTest, BroadcastRules) {
  auto m = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  auto row = Tensor::vector({10, 20, 30});
  auto r = add(m, row);
  EXPECT_EQ(r[3], 14.0);
  auto col = Tensor::constant({2, 1}, {100, 200});
  auto c = add(m, col);
  EXPECT_EQ(c[5], 206.0);
  auto s = mul(m, Tensor::scalar(2.0));
  EXPECT_EQ(s[5], 12.0);
  EXPECT_THROW(add(m, Tensor::vector({1, 2})), ShapeError);
}

TEST(TensorTest, MaskedSoftmaxIgnoresMaskedPositions) {
  auto x = Tensor::constant({2, 3}, {1.0, 5.0, 2.0, 3.0, 3.0, 3.0});
  auto mask = Tensor::constant({2, 3}, {1, 0, 1, 0, 0, 0});
  auto y = masked_softmax(x, mask, 1);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[0] + y[2], 1.0, 1e-15);
  EXPECT_NEAR(y[0], 1.0 / (1.0 + std::exp(1.0)), 1e-15);
  for (std::size_t i = 3; i < 6; ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(TensorTest, SoftmaxStableForLargeLogits) {
  auto y = softmax(Tensor::vector({1000.0, 1000.0, -1000.0}), 0);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[2], 0.0);
  auto loss = bce_with_logits(Tensor::vector({800.0, -800.0}), Tensor::vector({0.0, 1.0}));
  EXPECT_DOUBLE_EQ(loss[0], 800.0);
  EXPECT_DOUBLE_EQ(loss[1], 800.0);
}

// Softmax rows are nonnegative and sum to one, on random inputs.
TEST(TensorPropertyTest, SoftmaxNormalizes) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = Tensor::constant({4, 5}, uniform_values(rng, 20, -50.0, 50.0));
    for (long axis : {0L, 1L}) {
      auto y = softmax(x, axis);
      auto totals = sum(y, axis);
      for (double v : y.values()) EXPECT_GE(v, 0.0);
      for (double t : totals.values()) EXPECT_NEAR(t, 1.0, 1e-12);
    }
  }
}

// Every primitive's analytic gradient agrees with central differences on
// random inputs drawn from [-2, 2].
TEST(TensorPropertyTest, PrimitiveGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  const double tol = 1e-5;
  auto weights = [&](const Shape& s) { return Tensor::constant(s, uniform_values(rng, numel(s))); };
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_param(rng, {3, 4});
    auto b = random_param(rng, {3, 4});
    auto w = weights({3, 4});
    auto weighted = [&](const Tensor& t) { return sum_all(mul(t, w)); };
    auto w_3x2 = weights({3, 2});
    auto w_2x3x5 = weights({2, 3, 5});
    auto w_4 = weights({4});
    auto w_3x1 = weights({3, 1});
    auto w_3x8 = weights({3, 8});
    auto w_6x4 = weights({6, 4});
    auto w_2x6 = weights({2, 6});
    auto w_3 = weights({3});
    auto w_3x4 = weights({3, 4});

    EXPECT_LT(grad_check([&] { return weighted(add(a, b)); }, {a, b}), tol);
    EXPECT_LT(grad_check([&] { return weighted(sub(a, b)); }, {a, b}), tol);
    EXPECT_LT(grad_check([&] { return weighted(mul(a, b)); }, {a, b}), tol);
    EXPECT_LT(grad_check([&] { return weighted(exp(a)); }, {a}), tol);
    EXPECT_LT(grad_check([&] { return weighted(tanh(a)); }, {a}), tol);
    EXPECT_LT(grad_check([&] { return weighted(sigmoid(a)); }, {a}), tol);
    EXPECT_LT(grad_check([&] { return weighted(softmax(a, 1)); }, {a}), tol);
    EXPECT_LT(grad_check([&] { return weighted(softmax(a, 0)); }, {a}), tol);

    auto pos = random_param(rng, {3, 4}, 0.2, 2.0);
    EXPECT_LT(grad_check([&] { return weighted(log(pos)); }, {pos}), tol);
    EXPECT_LT(grad_check([&] { return weighted(sqrt(pos)); }, {pos}), tol);
    EXPECT_LT(grad_check([&] { return weighted(div(a, pos)); }, {a, pos}), tol);

    // Kinked ops are checked away from their kinks.
    auto away = Tensor::parameter({3, 4}, [&] {
      auto v = uniform_values(rng, 12);
      for (auto& x : v) x = x >= 0 ? x + 0.1 : x - 0.1;
      return v;
    }());
    EXPECT_LT(grad_check([&] { return weighted(relu(away)); }, {away}), tol);
    EXPECT_LT(grad_check([&] { return weighted(max0(away)); }, {away}), tol);
    EXPECT_LT(grad_check([&] { return weighted(clamp(away, -1.05, 1.05)); }, {away}), tol);

    auto c = random_param(rng, {4, 2});
    EXPECT_LT(grad_check([&] { return sum_all(mul(matmul(a, c), w_3x2)); }, {a, c}), tol);
    auto ba = random_param(rng, {2, 3, 4});
    auto bb = random_param(rng, {2, 4, 5});
    auto bt = random_param(rng, {2, 5, 4});
    EXPECT_LT(grad_check([&] { return sum_all(mul(bmm(ba, bb), w_2x3x5)); }, {ba, bb}), tol);
    EXPECT_LT(grad_check([&] { return sum_all(mul(bmm(ba, bt, true), w_2x3x5)); }, {ba, bt}),
              tol);

    auto row = random_param(rng, {4});
    auto col = random_param(rng, {3, 1});
    EXPECT_LT(grad_check([&] { return weighted(add(a, row)); }, {a, row}), tol);
    EXPECT_LT(grad_check([&] { return weighted(mul(a, col)); }, {a, col}), tol);
    EXPECT_LT(grad_check([&] { return weighted(broadcast_to(row, {3, 4})); }, {row}), tol);

    EXPECT_LT(grad_check([&] { return sum_all(mul(sum(a, 0), w_4)); }, {a}), tol);
    EXPECT_LT(grad_check([&] { return sum_all(mul(mean(a, 1, true), w_3x1)); }, {a}), tol);
    EXPECT_LT(grad_check([&] { return sum_all(mul(concat({a, b}, 1), w_3x8)); }, {a, b}), tol);
    EXPECT_LT(grad_check([&] { return sum_all(mul(concat({a, b}, 0), w_6x4)); }, {a, b}), tol);
    EXPECT_LT(grad_check([&] { return sum_all(mul(slice(a, 1, 1, 3), w_3x2)); }, {a}), tol);
    EXPECT_LT(grad_check([&] { return sum_all(mul(reshape(a, {2, 6}), w_2x6)); }, {a}), tol);
    EXPECT_LT(grad_check([&] { return dot(row, row); }, {row}), tol);
    EXPECT_LT(grad_check([&] { return sum_all(mul(l2norm(a), w_3)); }, {a}), tol);
    EXPECT_LT(grad_check([&] { return sum_all(mul(gather_rows(a, {2, 0, 2}), w_3x4)); }, {a}),
              tol);

    auto targets = Tensor::constant({3, 4}, [&] {
      std::vector<double> v(12);
      for (auto& t : v) t = static_cast<double>(rng() % 2);
      return v;
    }());
    EXPECT_LT(grad_check([&] { return sum_all(bce_with_logits(a, targets)); }, {a}), tol);
  }
}

TEST(TensorPropertyTest, BackwardIsLinearInTheLoss) {
  std::mt19937_64 rng(3);
  auto x = random_param(rng, {5});
  auto y = random_param(rng, {5});
  auto f1 = [&] { return sum_all(exp(mul(x, y))); };
  auto f2 = [&] { return sum_all(sigmoid(add(x, x))); };
  auto grads = [&](auto&& build) {
    x.zero_grad();
    y.zero_grad();
    Tape tape;
    tape.backward(build());
    return std::make_pair(std::vector<double>(x.grad().begin(), x.grad().end()),
                          std::vector<double>(y.grad().begin(), y.grad().end()));
  };
  auto g1 = grads(f1);
  auto g2 = grads(f2);
  auto g12 = grads([&] { return add(f1(), f2()); });
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(g12.first[i], g1.first[i] + g2.first[i], 1e-12);
    EXPECT_NEAR(g12.second[i], g1.second[i] + (g2.second.empty() ? 0.0 : g2.second[i]), 1e-12);
  }
}

TEST(GradCheckTest, PolynomialIsNearlyExact) {
  auto err = grad_check([](const Tensor& x) { return sum_all(mul(x, x)); }, Tensor::vector({1, 2, 3}),
                        1e-5);
  EXPECT_LT(err, 1e-7);
}

TEST(GradCheckTest, LogisticLossOfRandomWeights) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = Tensor::constant({6}, uniform_values(rng, 6));
    auto w = random_param(rng, {6});
    auto y = Tensor::constant({1}, {static_cast<double>(trial % 2)});
    auto err = grad_check([&] { return sum_all(bce_with_logits(reshape(dot(w, x), {1}), y)); }, {w});
    EXPECT_LT(err, 1e-5);
  }
}

TEST(GradCheckTest, WrongGradientIsDetected) {
  // sqrt near zero has a steep derivative that a coarse step cannot resolve.
  auto err = grad_check([](const Tensor& x) { return sum_all(sqrt(x)); }, Tensor::vector({1e-4}), 5e-5);
  EXPECT_GT(err, 1e-2);
}

}  // namespace
}  // namespace gpsvi
