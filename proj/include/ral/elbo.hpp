#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "ral/network.hpp"

namespace ral {

/// Inputs one sample per column, labels as class ids.
template <typename T>
struct LabeledBatch {
  Matrix<T> inputs;
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
};

struct ElboReport {
  double nll = 0.0;
  double kl = 0.0;
  double total = 0.0;
  std::size_t n_points = 0;
};

/// KL(q || N(0, 1/alpha)) summed over every weight and bias.
template <typename T>
double kl_gaussian(const VariationalParams<T>& params) {
  const T alpha = params.prior_precision;
  require(alpha > T(0), "kl_gaussian: prior precision must be positive");
  double kl = 0.0;
  auto term = [&](const auto& mu, const auto& rho) {
    const auto s2 = array_ops::softplus(rho.array()).square().eval();
    require((s2 > T(0)).all(), "kl_gaussian: posterior variance underflowed to zero");
    kl += (T(0.5) * (alpha * (mu.array().square() + s2) - T(1) - (alpha * s2).log()))
              .template cast<double>()
              .sum();
  };
  for (const auto& l : params.layers) {
    term(l.mu, l.rho);
    term(l.bias_mu, l.bias_rho);
  }
  return kl;
}

/// Adds scale * d KL / d(mu, rho) into `grad`.
template <typename T>
void add_kl_gradient(const VariationalParams<T>& params, ParamGradient<T>& grad, double scale = 1.0) {
  const T alpha = params.prior_precision;
  const T sc = static_cast<T>(scale);
  auto term = [&](const auto& mu, const auto& rho, auto& gmu, auto& grho) {
    const auto s = array_ops::softplus(rho.array()).eval();
    gmu.array() += sc * alpha * mu.array();
    grho.array() += sc * (alpha * s - s.inverse()) * array_ops::sigmoid(rho.array());
  };
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    term(params.layers[k].mu, params.layers[k].rho, grad[k].mu, grad[k].rho);
    term(params.layers[k].bias_mu, params.layers[k].bias_rho, grad[k].bias_mu, grad[k].bias_rho);
  }
}

/// Per-class Bernoulli-probit negative log likelihood of output moments (g, h)
/// (one sample per column). Writes d loss / dg and d loss / dh if requested.
template <typename T>
double bernoulli_probit_nll(const Matrix<T>& g, const Matrix<T>& h, const std::vector<int>& labels,
                            Matrix<T>* dg = nullptr, Matrix<T>* dh = nullptr) {
  const Eigen::Index classes = g.rows();
  if (static_cast<std::size_t>(g.cols()) != labels.size())
    throw ShapeError("label count does not match batch");
  if (dg) dg->resize(g.rows(), g.cols());
  if (dh) dh->resize(g.rows(), g.cols());
  double loss = 0.0;
  for (Eigen::Index b = 0; b < g.cols(); ++b) {
    const int y = labels[b];
    if (y < 0 || y >= classes)
      throw ShapeError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    for (Eigen::Index c = 0; c < classes; ++c) {
      const double hv = std::max<double>(h(c, b), 0.0);
      const double scale = 1.0 / std::sqrt(hv + 1.0);
      const double z = g(c, b) * scale;
      // P(y_c = observed) = Phi(s z) with s = +1 for the true class, -1 otherwise.
      const double sign = (c == y) ? 1.0 : -1.0;
      const double raw = normal_cdf(sign * z);
      const double p = clamp_probability(raw);
      loss -= std::log(p);
      if (dg || dh) {
        const bool clamped = raw != p;
        const double dz = clamped ? 0.0 : -sign * normal_pdf(z) / p;
        if (dg) (*dg)(c, b) = static_cast<T>(dz * scale);
        if (dh) (*dh)(c, b) = static_cast<T>(dz * (-0.5 * z / (hv + 1.0)));
      }
    }
  }
  return loss;
}

/// Expected negative log-likelihood of a batch, scaled by N / |batch|.
template <typename T>
double nll_term(const LabeledBatch<T>& batch, const VariationalParams<T>& params,
                std::size_t dataset_size = 0) {
  require(batch.size() > 0, "nll_term: empty batch");
  const MomentTensor<T> out =
      forward_moments(params, MomentTensor<T>::lift(batch.inputs, params.topology.input));
  const double scale = dataset_size ? double(dataset_size) / batch.size() : 1.0;
  return scale * bernoulli_probit_nll(out.mean, out.var, batch.labels);
}

template <typename T>
struct ElboGradient {
  ElboReport report;
  ParamGradient<T> grad;
};

/// Exact reverse-mode gradient of nll_term + kl_gaussian w.r.t. (mu, rho).
template <typename T>
ElboGradient<T> elbo_gradient(const LabeledBatch<T>& batch, const VariationalParams<T>& params,
                              std::size_t dataset_size = 0, bool report_kl = true) {
  require(batch.size() > 0, "elbo_gradient: empty batch");
  Tape<T> tape;
  const MomentTensor<T> out =
      forward_moments(params, MomentTensor<T>::lift(batch.inputs, params.topology.input), &tape);
  const double scale = dataset_size ? double(dataset_size) / batch.size() : 1.0;
  Matrix<T> dg, dh;
  ElboGradient<T> res;
  res.report.nll = scale * bernoulli_probit_nll(out.mean, out.var, batch.labels, &dg, &dh);
  if (report_kl) res.report.kl = kl_gaussian(params);
  res.report.total = res.report.nll + res.report.kl;
  res.report.n_points = batch.labels.size();
  dg *= static_cast<T>(scale);
  dh *= static_cast<T>(scale);
  res.grad = backward(params, tape, std::move(dg), std::move(dh));
  add_kl_gradient(params, res.grad);
  return res;
}

template <typename T>
ElboReport elbo(const LabeledBatch<T>& batch, const VariationalParams<T>& params,
                std::size_t dataset_size = 0) {
  ElboReport r;
  r.nll = nll_term(batch, params, dataset_size);
  r.kl = kl_gaussian(params);
  r.total = r.nll + r.kl;
  r.n_points = batch.labels.size();
  return r;
}

struct GradientCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor: coordinates whose gradient is below this in magnitude
  // are compared in absolute terms.
  double abs_floor = 1e-4;
  std::size_t max_coordinates = 2000;
  std::uint64_t seed = 0;
};

struct GradientCheckReport {
  struct Failure {
    std::size_t coordinate;
    double analytic;
    double numeric;
    double rel_error;
  };
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::vector<Failure> failures;

  bool passed() const { return failures.empty(); }
};

namespace detail {

/// Flat view over every parameter scalar in for_each_array order.
template <typename Layers>
auto flat_refs(Layers& layers) {
  using Scalar = typename std::remove_cvref_t<decltype(layers[0].mu)>::Scalar;
  using Ptr = std::conditional_t<std::is_const_v<std::remove_reference_t<Layers>>, const Scalar*, Scalar*>;
  std::vector<Ptr> refs;
  for_each_array([&](auto& a) {
    for (Eigen::Index i = 0; i < a.size(); ++i) refs.push_back(a.data() + i);
  }, layers);
  return refs;
}

}  // namespace detail

/// Central-difference check of a supplied analytic gradient of the ELBO.
inline GradientCheckReport check_gradient(const VariationalParams<double>& params,
                                          const LabeledBatch<double>& batch,
                                          const ParamGradient<double>& analytic,
                                          const GradientCheckOptions& opt = {},
                                          std::size_t dataset_size = 0) {
  VariationalParams<double> probe = params;
  auto coords = detail::flat_refs(probe.layers);
  const auto grads = detail::flat_refs(analytic);
  require(coords.size() == grads.size(), "check_gradient: gradient shape mismatch");
  std::vector<std::size_t> order(coords.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (order.size() > opt.max_coordinates) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(opt.max_coordinates);
    std::sort(order.begin(), order.end());
  }
  GradientCheckReport rep;
  for (std::size_t idx : order) {
    double* x = coords[idx];
    const double saved = *x;
    *x = saved + opt.step;
    const double up = elbo(batch, probe, dataset_size).total;
    *x = saved - opt.step;
    const double down = elbo(batch, probe, dataset_size).total;
    *x = saved;
    const double numeric = (up - down) / (2.0 * opt.step);
    const double a = *grads[idx];
    const double rel = std::abs(a - numeric) /
                       std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    ++rep.checked;
    if (rel > opt.tolerance) rep.failures.push_back({idx, a, numeric, rel});
  }
  return rep;
}

/// Compares elbo_gradient against central differences.
inline GradientCheckReport finite_difference_check(const VariationalParams<double>& params,
                                                   const LabeledBatch<double>& batch,
                                                   const GradientCheckOptions& opt = {},
                                                   std::size_t dataset_size = 0) {
  return check_gradient(params, batch, elbo_gradient(batch, params, dataset_size).grad, opt,
                        dataset_size);
}

}  // namespace ral
