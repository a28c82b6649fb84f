#pragma once

#include <variant>
#include <vector>

#include "ral/moments.hpp"

namespace ral {

/// Reverse-mode record of one moment-propagation pass.
///
/// The op set is fixed (affine, conv, pool, ReLU, flatten), so each entry
/// stores exactly what its adjoint needs instead of a generic closure.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::size_t layer = 0;  // index into topology.layers
    std::size_t weights = 0;  // index into params.layers (affine ops only)
    int batch = 0;
    ImageShape in_shape;
    AffineCache<T> affine;
    MomentTensor<T> relu_input;
  };

  void clear() { entries_.clear(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

 private:
  std::vector<Entry> entries_;
};

/// Propagates moments through the whole network. If `tape` is given, records
/// the intermediates needed by `backward`.
template <typename T>
MomentTensor<T> forward_moments(const VariationalParams<T>& params, MomentTensor<T> x,
                                Tape<T>* tape = nullptr) {
  if (!(x.shape == params.topology.input))
    throw ShapeError("input shape does not match the network input");
  if (tape) tape->clear();
  std::size_t w = 0;
  for (std::size_t li = 0; li < params.topology.layers.size(); ++li) {
    const LayerSpec& spec = params.topology.layers[li];
    typename Tape<T>::Entry e;
    e.layer = li;
    e.batch = x.batch;
    e.in_shape = x.shape;
    if (auto* lin = std::get_if<Linear>(&spec)) {
      if (!x.shape.flat()) throw ShapeError("linear layer needs a flat input");
      e.weights = w;
      e.affine.deterministic = x.deterministic;
      e.affine.xm = std::move(x.mean);
      if (!x.deterministic) e.affine.xv = std::move(x.var);
      auto [m, v] = affine_moments(params.layers[w++], e.affine);
      x = MomentTensor<T>{x.batch, {lin->out, 1, 1}, std::move(m), std::move(v), false};
    } else if (auto* conv = std::get_if<Conv>(&spec)) {
      const ImageShape out = layer_output_shape(*conv, x.shape);
      e.weights = w;
      e.affine.deterministic = x.deterministic;
      e.affine.xm = im2col(x.mean, x.batch, x.shape, *conv);
      if (!x.deterministic) e.affine.xv = im2col(x.var, x.batch, x.shape, *conv);
      auto [m, v] = affine_moments(params.layers[w++], e.affine);
      x = MomentTensor<T>{x.batch, out, std::move(m), std::move(v), false};
    } else if (auto* pool = std::get_if<AvgPool>(&spec)) {
      x = avg_pool_moments(x, pool->size);
    } else if (std::holds_alternative<Relu>(spec)) {
      MomentTensor<T> y = relu_moment_forward(x);
      if (tape) e.relu_input = std::move(x);
      x = std::move(y);
    } else {
      x.mean = flatten_channel_major(x.mean, x.batch, x.shape);
      x.var = flatten_channel_major(x.var, x.batch, x.shape);
      x.shape = {x.shape.size(), 1, 1};
    }
    if (tape) tape->entries().push_back(std::move(e));
  }
  return x;
}

/// Reverse pass: given d loss / d output mean and variance, returns the
/// gradient w.r.t. every (mu, rho) of the network.
template <typename T>
ParamGradient<T> backward(const VariationalParams<T>& params, const Tape<T>& tape,
                          Matrix<T> g_mean, Matrix<T> g_var) {
  ParamGradient<T> grad = params.zero_gradient();
  const auto& entries = tape.entries();
  for (std::size_t k = entries.size(); k-- > 0;) {
    const auto& e = entries[k];
    const LayerSpec& spec = params.topology.layers[e.layer];
    const bool need_input = k > 0;
    if (std::holds_alternative<Linear>(spec)) {
      Matrix<T> gm, gv;
      affine_moments_backward(params.layers[e.weights], e.affine, g_mean, g_var,
                              grad[e.weights], need_input ? &gm : nullptr,
                              need_input ? &gv : nullptr);
      g_mean = std::move(gm);
      g_var = std::move(gv);
    } else if (auto* conv = std::get_if<Conv>(&spec)) {
      Matrix<T> gm, gv;
      affine_moments_backward(params.layers[e.weights], e.affine, g_mean, g_var,
                              grad[e.weights], need_input ? &gm : nullptr,
                              need_input ? &gv : nullptr);
      if (need_input) {
        g_mean = col2im(gm, e.batch, e.in_shape, *conv);
        g_var = col2im(gv, e.batch, e.in_shape, *conv);
      }
    } else if (auto* pool = std::get_if<AvgPool>(&spec)) {
      std::tie(g_mean, g_var) = avg_pool_backward(g_mean, g_var, e.batch, e.in_shape, pool->size);
    } else if (std::holds_alternative<Relu>(spec)) {
      std::tie(g_mean, g_var) = relu_moment_backward(e.relu_input, g_mean, g_var);
    } else {
      g_mean = unflatten_channel_major(g_mean, e.batch, e.in_shape);
      g_var = unflatten_channel_major(g_var, e.batch, e.in_shape);
    }
  }
  return grad;
}

/// Closed-form posterior predictive for one input.
template <typename T>
struct PredictiveDistribution {
  Vector<T> g;      // output mean
  Vector<T> h;      // output variance
  Vector<T> p;      // Phi(g / sqrt(h + 1)) per class
  Vector<T> p_cat;  // p normalised to a categorical
};

template <typename T>
PredictiveDistribution<T> make_predictive(Vector<T> g, Vector<T> h) {
  PredictiveDistribution<T> d{std::move(g), std::move(h), {}, {}};
  d.h = d.h.cwiseMax(T(0));
  d.p = d.g.binaryExpr(d.h, [](T gc, T hc) { return predictive_probability(gc, hc); });
  const Vector<T> clamped = d.p.unaryExpr([](T v) { return clamp_probability(v); });
  d.p_cat = clamped / clamped.sum();
  return d;
}

/// Batched network_forward over inputs stored one sample per column.
template <typename T>
std::vector<PredictiveDistribution<T>> predict_batch(const VariationalParams<T>& params,
                                                     const Matrix<T>& inputs) {
  const MomentTensor<T> out =
      forward_moments(params, MomentTensor<T>::lift(inputs, params.topology.input));
  std::vector<PredictiveDistribution<T>> res;
  res.reserve(out.batch);
  for (int b = 0; b < out.batch; ++b) res.push_back(make_predictive<T>(out.mean.col(b), out.var.col(b)));
  return res;
}

template <typename T>
PredictiveDistribution<T> network_forward(const Vector<T>& x, const VariationalParams<T>& params) {
  require(x.allFinite(), "network_forward: input must be finite");
  return predict_batch(params, Matrix<T>(x)).front();
}

/// Predictions for a large input set, processed in fixed-size chunks.
template <typename T>
std::vector<PredictiveDistribution<T>> predict_all(const VariationalParams<T>& params,
                                                   const Matrix<T>& inputs, int chunk = 256) {
  ScopedFlushDenormals ftz;
  std::vector<PredictiveDistribution<T>> res;
  res.reserve(inputs.cols());
  for (Eigen::Index s = 0; s < inputs.cols(); s += chunk) {
    const Eigen::Index n = std::min<Eigen::Index>(chunk, inputs.cols() - s);
    auto part = predict_batch(params, Matrix<T>(inputs.middleCols(s, n)));
    for (auto& d : part) res.push_back(std::move(d));
  }
  return res;
}

}  // namespace ral
