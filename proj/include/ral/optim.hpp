#pragma once

#include <cmath>
#include <cstdint>

#include "ral/variational.hpp"

namespace ral {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates mirroring a parameter set.
template <typename T>
struct AdamState {
  std::vector<GaussianLayer<T>> m;
  std::vector<GaussianLayer<T>> v;
  std::int64_t step = 0;

  static AdamState for_params(const VariationalParams<T>& p) {
    return {p.zero_gradient(), p.zero_gradient(), 0};
  }
};

/// One bias-corrected Adam update, step size scaled by `multiplier`.
template <typename T>
void adam_step(VariationalParams<T>& params, const ParamGradient<T>& grad, AdamState<T>& state,
               const AdamConfig& cfg, double multiplier = 1.0) {
  if (state.m.size() != params.layers.size()) state = AdamState<T>::for_params(params);
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T lr = static_cast<T>(cfg.learning_rate * multiplier * std::sqrt(c2) / c1);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.epsilon * std::sqrt(c2));
  for_each_array(
      [&](auto& p, const auto& g, auto& m, auto& v) {
        m.array() = b1 * m.array() + (T(1) - b1) * g.array();
        v.array() = b2 * v.array() + (T(1) - b2) * g.array().square();
        p.array() -= lr * m.array() / (v.array().sqrt() + eps);
      },
      params.layers, grad, state.m, state.v);
}

}  // namespace ral
