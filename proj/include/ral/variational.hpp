#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "ral/numeric.hpp"
#include "ral/topology.hpp"

namespace ral {

/// Mean-field Gaussian posterior over one affine layer. Weight rows are
/// output units; columns follow the (channel, ky, kx) patch order for conv.
/// sigma = softplus(rho).
template <typename T>
struct GaussianLayer {
  Matrix<T> mu;
  Matrix<T> rho;
  Vector<T> bias_mu;
  Vector<T> bias_rho;

  Matrix<T> weight_variance() const { return array_ops::softplus(rho.array()).square().matrix(); }
  Vector<T> bias_variance() const { return array_ops::softplus(bias_rho.array()).square().matrix(); }

  static GaussianLayer zeros(int out, int fan_in) {
    return {Matrix<T>::Zero(out, fan_in), Matrix<T>::Zero(out, fan_in), Vector<T>::Zero(out),
            Vector<T>::Zero(out)};
  }

  template <typename U>
  GaussianLayer<U> cast() const {
    return {mu.template cast<U>(), rho.template cast<U>(), bias_mu.template cast<U>(),
            bias_rho.template cast<U>()};
  }
};

/// Applies f to each (mu, rho, bias_mu, bias_rho) array of every layer, in a
/// fixed order. Extra layer lists are walked in lockstep, which is how the
/// optimizer pairs parameters with gradients and moment estimates.
template <typename F, typename Layers, typename... Rest>
void for_each_array(F&& f, Layers& first, Rest&... rest) {
  for (std::size_t i = 0; i < first.size(); ++i) {
    f(first[i].mu, rest[i].mu...);
    f(first[i].rho, rest[i].rho...);
    f(first[i].bias_mu, rest[i].bias_mu...);
    f(first[i].bias_rho, rest[i].bias_rho...);
  }
}

template <typename T>
using ParamGradient = std::vector<GaussianLayer<T>>;

template <typename T>
struct VariationalParams {
  Topology topology;
  std::vector<GaussianLayer<T>> layers;  // one per Linear/Conv, in order
  T prior_precision = T(1);

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += 2 * (l.mu.size() + l.bias_mu.size());
    return n;
  }

  ParamGradient<T> zero_gradient() const {
    ParamGradient<T> g;
    g.reserve(layers.size());
    for (const auto& l : layers) g.push_back(GaussianLayer<T>::zeros(l.mu.rows(), l.mu.cols()));
    return g;
  }

  template <typename U>
  VariationalParams<U> cast() const {
    VariationalParams<U> out{topology, {}, static_cast<U>(prior_precision)};
    for (const auto& l : layers) out.layers.push_back(l.template cast<U>());
    return out;
  }

  /// Throws if the parameter arrays disagree with the topology.
  void validate() const {
    require(prior_precision > T(0), "prior precision must be positive");
    topology.validate();
    std::size_t k = 0;
    for (const auto& spec : topology.layers) {
      if (!has_weights(spec)) continue;
      if (k >= layers.size()) throw ShapeError("missing parameters for layer");
      const auto& l = layers[k++];
      int out = 0, fan_in = 0;
      if (auto* lin = std::get_if<Linear>(&spec)) out = lin->out, fan_in = lin->in;
      if (auto* c = std::get_if<Conv>(&spec))
        out = c->out_channels, fan_in = c->in_channels * c->kernel * c->kernel;
      if (l.mu.rows() != out || l.mu.cols() != fan_in || l.rho.rows() != out ||
          l.rho.cols() != fan_in || l.bias_mu.size() != out || l.bias_rho.size() != out)
        throw ShapeError("parameter shape does not match topology");
    }
    if (k != layers.size()) throw ShapeError("extra parameter layers");
  }
};

inline int fan_in(const LayerSpec& spec) {
  if (auto* lin = std::get_if<Linear>(&spec)) return lin->in;
  if (auto* c = std::get_if<Conv>(&spec)) return c->in_channels * c->kernel * c->kernel;
  return 0;
}

inline int fan_out(const LayerSpec& spec) {
  if (auto* lin = std::get_if<Linear>(&spec)) return lin->out;
  if (auto* c = std::get_if<Conv>(&spec)) return c->out_channels;
  return 0;
}

/// Means ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); sigma = init_sigma_ratio / sqrt(fan_in).
template <typename T>
VariationalParams<T> init_params(const Topology& topology, T prior_precision, std::uint64_t seed,
                                 double init_sigma_ratio = 0.05) {
  topology.validate();
  VariationalParams<T> p{topology, {}, prior_precision};
  std::mt19937_64 rng(seed);
  for (const auto& spec : topology.layers) {
    if (!has_weights(spec)) continue;
    const int in = fan_in(spec);
    const int out = fan_out(spec);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> uni(-bound, bound);
    const T rho0 = static_cast<T>(softplus_inverse(init_sigma_ratio * bound));
    auto layer = GaussianLayer<T>::zeros(out, in);
    for (int j = 0; j < in; ++j)
      for (int i = 0; i < out; ++i) layer.mu(i, j) = static_cast<T>(uni(rng));
    for (int i = 0; i < out; ++i) layer.bias_mu(i) = static_cast<T>(uni(rng));
    layer.rho.setConstant(rho0);
    layer.bias_rho.setConstant(rho0);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

}  // namespace ral
