// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace mtlcer {

struct AdamOptions {
  double learning_rate = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction.
///
/// Each parameter keeps its own moments and its own update count, which is
/// what the bias correction uses. A parameter that received no gradient in
/// the last backward pass (not reachable from the loss) is left untouched and
/// its count does not advance, so an auxiliary loss that never reaches a
/// parameter group does not perturb that group's trajectory.
template <std::floating_point T>
class Adam {
 public:
  struct Slot {
    Tensor<T> param;
    double learning_rate;
    std::vector<T> m;
    std::vector<T> v;
    std::int64_t t = 0;
  };

  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  /// Registers a parameter; a negative rate means the default learning rate.
  void add(Tensor<T> param, double learning_rate = -1.0) {
    const double lr = learning_rate < 0 ? opts_.learning_rate : learning_rate;
    const auto n = param.size();
    slots_.push_back({std::move(param), lr, std::vector<T>(n, T(0)), std::vector<T>(n, T(0)), 0});
  }

  std::int64_t steps() const { return t_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const AdamOptions& options() const { return opts_; }

  void zero_grad() {
    for (auto& s : slots_)
      if (s.param.requires_grad()) s.param.zero_grad();
  }

  /// Rescales all gradients so their global L2 norm is at most max_norm.
  /// Returns the norm before clipping.
  double clip_grad_norm(double max_norm) {
    double sq = 0;
    for (const auto& s : slots_)
      for (T g : s.param.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
      const T f = static_cast<T>(max_norm / norm);
      for (auto& s : slots_)
        for (auto& g : s.param.grad()) g *= f;
    }
    return norm;
  }

  void step() {
    ++t_;
    const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
    const T eps = static_cast<T>(opts_.epsilon);
    for (auto& s : slots_) {
      if (!s.param.requires_grad() || !s.param.touched() || s.learning_rate == 0.0) continue;
      ++s.t;
      const T c1 = T(1) - static_cast<T>(std::pow(opts_.beta1, static_cast<double>(s.t)));
      const T c2 = T(1) - static_cast<T>(std::pow(opts_.beta2, static_cast<double>(s.t)));
      const T lr = static_cast<T>(s.learning_rate);
      auto p = s.param.data();
      auto g = s.param.grad();
      for (std::size_t i = 0; i < p.size(); ++i) {
        s.m[i] = b1 * s.m[i] + (T(1) - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (T(1) - b2) * g[i] * g[i];
        const T mh = s.m[i] / c1;
        const T vh = s.v[i] / c2;
        p[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }

 private:
  AdamOptions opts_;
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
};

}  // namespace mtlcer
