#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "amid/errors.hpp"
#include "amid/numerics/tensor.hpp"

namespace amid {

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline AdamState make_adam_state(double lr, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8) {
  AdamState state;
  state.lr = lr;
  state.beta1 = beta1;
  state.beta2 = beta2;
  state.epsilon = epsilon;
  return state;
}

// Bias-corrected Adam, applied in place. Entries whose gradient is exactly
// zero are skipped (moments included), so a zero gradient never moves a
// parameter and rows that did not take part in a batch keep their state.
inline void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads count mismatch");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_step: state/params count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != grads[k].shape() || state.first_moment[k].size() != params[k].numel()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(k) + " " +
                       shape_str(params[k].shape()) + " vs " + shape_str(grads[k].shape()));
    }
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k].mutable_values();
    const auto g = grads[k].values();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (g[i] == 0.0) continue;
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      theta[i] -= state.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.epsilon);
    }
  }
}

}  // namespace amid
