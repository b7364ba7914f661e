// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "elab/error.hpp"
#include "elab/tensor.hpp"

namespace elab {

/// Per-parameter gradient buffers, aligned with a parameter list.
template <std::floating_point T>
using Gradients = std::vector<std::vector<T>>;

template <std::floating_point T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  AdamState() = default;
  AdamState(const std::vector<Tensor<T>>& params, double learning_rate) : lr(learning_rate) {
    for (const auto& p : params) {
      m.emplace_back(p.size(), T{0});
      v.emplace_back(p.size(), T{0});
    }
  }
};

/// One bias-corrected Adam update in place.
template <std::floating_point T>
void adam_step(AdamState<T>& state, std::vector<Tensor<T>>& params, const Gradients<T>& grads) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionError("adam_step: parameter, gradient and moment counts differ");
  if (state.step == std::numeric_limits<std::uint64_t>::max()) throw ContractError("adam_step: step counter overflow");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto data = params[k].data();
    const auto& g = grads[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (g.size() != data.size() || m.size() != data.size())
      throw DimensionError("adam_step: shape mismatch for parameter " + std::to_string(k));
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = g[i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = state.lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps);
      data[i] = static_cast<T>(data[i] - update);
    }
  }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before scaling.
template <std::floating_point T>
double clip_grad_norm(Gradients<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (T x : g) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (T& x : g) x *= s;
  }
  return norm;
}

}  // namespace elab
