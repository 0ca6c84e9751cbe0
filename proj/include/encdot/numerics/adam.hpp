#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "encdot/numerics/parameters.hpp"

namespace encdot::nn {

struct AdamState {
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_parameters(const ParameterSet& params) {
    AdamState state;
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment.emplace_back(params[i].size(), 0.0f);
      state.second_moment.emplace_back(params[i].size(), 0.0f);
    }
    return state;
  }
};

// One bias-corrected Adam update; gradients are zeroed afterwards.
inline void adam_step(ParameterSet& params, AdamState& state, double lr) {
  if (state.first_moment.size() != params.size()) {
    throw Error("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                " parameters, set has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw Error("adam_step: parameter '" + params.name(i) + "' has no gradient");
  }
  ++state.step;
  const double correction1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const float b1 = static_cast<float>(state.beta1), b2 = static_cast<float>(state.beta2);
  const float step_size = static_cast<float>(lr / correction1);
  const float inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(correction2));
  const float eps = static_cast<float>(state.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].data();
    auto grad = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const float g = grad[j];
      m[j] = b1 * m[j] + (1.0f - b1) * g;
      v[j] = b2 * v[j] + (1.0f - b2) * g * g;
      values[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_c2 + eps);
      grad[j] = 0.0f;
    }
  }
}

}  // namespace encdot::nn
