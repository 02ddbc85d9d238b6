// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include <mtlcer/optim.hpp>
#include <mtlcer/rng.hpp>
#include <mtlcer/tensor.hpp>

using namespace mtlcer;
using Td = Tensor<double>;

namespace {

// Runs loss = sum(c * p) so that the gradient equals c.
void linear_backward(Tape<double>& tape, Td& p, const std::vector<double>& c) {
  tape.clear();
  tape.backward(sum(tape, mul(tape, p, Td::vector(c))));
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersBitIdentical) {
  Tape<double> tape;
  auto p = Td::vector({0.25, -1.5, 3.0}, true);
  const auto before = p.values();
  Adam<double> opt(AdamOptions{0.1, 0.9, 0.999, 1e-8});
  opt.add(p);
  for (int s = 0; s < 5; ++s) {
    opt.zero_grad();
    linear_backward(tape, p, {0, 0, 0});
    opt.step();
  }
  EXPECT_EQ(p.values(), before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tape<double> tape;
  auto p = Td::scalar(1.0, true);
  Adam<double> opt(AdamOptions{0.1, 0.9, 0.999, 1e-8});
  opt.add(p);
  opt.zero_grad();
  linear_backward(tape, p, {1.0});
  opt.step();
  // m_hat = 1, v_hat = 1, so the update is 0.1 / (1 + 1e-8).
  EXPECT_NEAR(p.item() - 1.0, -0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, MatchesHandRecurrenceOverSeveralSteps) {
  Tape<double> tape;
  auto p = Td::vector({0.5, -0.2}, true);
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Adam<double> opt(AdamOptions{lr, b1, b2, eps});
  opt.add(p);
  std::vector<double> ref = p.values(), m(2, 0), v(2, 0);
  const std::vector<std::vector<double>> grads{{1, -2}, {0.5, 0.1}, {-3, 0}, {2, 2}};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    opt.zero_grad();
    linear_backward(tape, p, grads[t - 1]);
    opt.step();
    for (std::size_t i = 0; i < 2; ++i) {
      const double g = grads[t - 1][i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mh = m[i] / (1 - std::pow(b1, double(t)));
      const double vh = v[i] / (1 - std::pow(b2, double(t)));
      ref[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(p[i], ref[i], 1e-15);
  }
  EXPECT_EQ(opt.steps(), 4);
}

TEST(Adam, IdenticalParametersStayIdentical) {
  Tape<double> tape;
  auto a = Td::vector({0.3, 0.7}, true), b = Td::vector({0.3, 0.7}, true);
  Adam<double> opt(AdamOptions{0.01});
  opt.add(a);
  opt.add(b);
  for (int s = 0; s < 20; ++s) {
    opt.zero_grad();
    tape.clear();
    auto la = sum(tape, mul(tape, tanh(tape, a), a));
    auto lb = sum(tape, mul(tape, tanh(tape, b), b));
    tape.backward(add(tape, la, lb));
    opt.step();
  }
  EXPECT_EQ(a.values(), b.values());
}

TEST(Adam, UnreachedParameterIsSkipped) {
  Tape<double> tape;
  auto used = Td::vector({1.0}, true), unused = Td::vector({2.0}, true);
  Adam<double> opt(AdamOptions{0.1});
  opt.add(used);
  opt.add(unused);
  opt.zero_grad();
  linear_backward(tape, used, {1.0});
  opt.step();
  EXPECT_EQ(unused.item(), 2.0);
  EXPECT_EQ(opt.slots()[1].t, 0);
  EXPECT_EQ(opt.slots()[0].t, 1);
}

TEST(Adam, PerParameterLearningRate) {
  Tape<double> tape;
  auto a = Td::scalar(0.0, true), b = Td::scalar(0.0, true);
  Adam<double> opt(AdamOptions{0.1});
  opt.add(a);
  opt.add(b, 0.0);
  opt.zero_grad();
  tape.backward(add(tape, sum(tape, a), sum(tape, b)));
  opt.step();
  EXPECT_NE(a.item(), 0.0);
  EXPECT_EQ(b.item(), 0.0);
}

TEST(Adam, ClipGradNorm) {
  Tape<double> tape;
  auto p = Td::vector({0, 0}, true);
  Adam<double> opt;
  opt.add(p);
  opt.zero_grad();
  linear_backward(tape, p, {3, 4});
  EXPECT_DOUBLE_EQ(opt.clip_grad_norm(1.0), 5.0);
  EXPECT_NEAR(p.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(p.grad()[1], 0.8, 1e-15);
  EXPECT_NEAR(opt.clip_grad_norm(10.0), 1.0, 1e-15);
  EXPECT_NEAR(p.grad()[0], 0.6, 1e-15);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs = differs || x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, DerivedStreamsAreDeterministicAndDistinct) {
  const Rng root(7);
  auto a = root.derive("x", 1), b = root.derive("x", 1), c = root.derive("x", 2), d = root.derive("y", 1);
  const auto va = a.next_u64();
  EXPECT_EQ(va, b.next_u64());
  EXPECT_NE(va, c.next_u64());
  EXPECT_NE(va, d.next_u64());
}

TEST(Rng, UniformRangeAndBelowFrequencies) {
  Rng r(1);
  std::vector<int> counts(5, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ++counts[r.below(5)];
  }
  // Each bin is Binomial(n, 1/5); 5 sigma is about 632.
  for (int c : counts) EXPECT_NEAR(c, n / 5.0, 650.0);
  EXPECT_THROW(r.below(0), ArgumentError);
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 5.0 / std::sqrt(double(n)));
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Init, SameSeedBitIdentical) {
  Rng a(5), b(5);
  EXPECT_EQ(init_param<double>({10, 7}, a).values(), init_param<double>({10, 7}, b).values());
}

TEST(Init, EmpiricalMeanWithinThreeSigma) {
  Rng r(123);
  auto w = init_param<double>({100, 100}, r);
  const double limit = std::sqrt(6.0 / 200.0);
  double s = 0;
  for (double v : w.values()) {
    EXPECT_LE(std::abs(v), limit);
    s += v;
  }
  const double mean = s / 10000.0;
  const double sigma = limit / std::sqrt(3.0) / 100.0;  // sd of the mean of 10^4 uniforms
  EXPECT_LT(std::abs(mean), 3 * sigma);
  EXPECT_TRUE(w.requires_grad());
}

TEST(Init, BiasIsZero) {
  auto b = init_bias<double>(6);
  for (double v : b.values()) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(b.requires_grad());
}

TEST(Dropout, RateZeroAndEvaluationAreIdentity) {
  Tape<double> tape;
  Rng r(1);
  auto x = Td::vector({1, 2, 3}, true);
  EXPECT_TRUE(dropout(tape, x, 0.0, true, r).same_node(x));
  EXPECT_TRUE(dropout(tape, x, 0.0, false, r).same_node(x));
  EXPECT_TRUE(dropout(tape, x, 0.5, false, r).same_node(x));
  EXPECT_THROW(dropout(tape, x, 1.0, true, r), ArgumentError);
  EXPECT_THROW(dropout(tape, x, -0.1, true, r), ArgumentError);
}

TEST(Dropout, MonteCarloMeanIsPreserved) {
  Tape<double> tape;
  Rng r(2024);
  const std::size_t units = 4, draws = 1000000;
  std::vector<double> acc(units, 0.0);
  auto ones = Td::vector(std::vector<double>(units, 1.0));
  for (std::size_t k = 0; k < draws; ++k) {
    auto y = dropout(tape, ones, 0.5, true, r);
    for (std::size_t i = 0; i < units; ++i) acc[i] += y[i];
  }
  for (double a : acc) EXPECT_NEAR(a / double(draws), 1.0, 1e-2);
}

TEST(Dropout, GradientUsesTheSameMask) {
  Tape<double> tape;
  Rng r(3);
  auto x = Td::vector(std::vector<double>(50, 1.0), true);
  auto y = dropout(tape, x, 0.3, true, r);
  tape.backward(sum(tape, y));
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(x.grad()[i], y[i]);
}
