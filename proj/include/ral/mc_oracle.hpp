#pragma once

#include <cstdint>
#include <random>

#include "ral/network.hpp"

namespace ral {

/// How fully connected weights are drawn by the Monte-Carlo oracle.
enum class LinearSampling {
  /// Draw every weight per sample.
  weights,
  /// Draw pre-activations from N(sum mu h, sum sigma^2 h^2) given the sampled
  /// input. Exact in distribution for fresh per-sample weights and much cheaper.
  local,
};

/// Empirical statistics of the network output under q(w) (and the input
/// distribution, if stochastic).
template <typename T>
struct EmpiricalPredictive {
  PredictiveDistribution<T> dist;  // g,h: sample mean/variance; p: mean of Phi(f)
  std::size_t samples = 0;
};

namespace detail {

/// One sampled forward pass per column of `acts` (sample-major features).
template <typename T>
class SampledForward {
 public:
  SampledForward(const VariationalParams<T>& params, std::mt19937_64& rng, LinearSampling mode)
      : params_(params), rng_(rng), mode_(mode) {}

  Matrix<double> run(Matrix<double> acts) {
    ImageShape shape = params_.topology.input;
    std::size_t w = 0;
    for (const auto& spec : params_.topology.layers) {
      if (auto* lin = std::get_if<Linear>(&spec)) {
        acts = linear(acts, params_.layers[w++]);
        shape = {lin->out, 1, 1};
      } else if (auto* conv = std::get_if<Conv>(&spec)) {
        const ImageShape out = conv_output_shape(*conv, shape);
        acts = convolve(acts, params_.layers[w++], *conv, shape, out);
        shape = out;
      } else if (auto* pool = std::get_if<AvgPool>(&spec)) {
        const ImageShape out{shape.channels, shape.height / pool->size, shape.width / pool->size};
        Matrix<double> pooled = Matrix<double>::Zero(out.size(), acts.cols());
        for (int c = 0; c < shape.channels; ++c)
          for (int y = 0; y < shape.height; ++y)
            for (int x = 0; x < shape.width; ++x)
              pooled.row((c * out.height + y / pool->size) * out.width + x / pool->size) +=
                  acts.row((c * shape.height + y) * shape.width + x);
        acts = pooled / double(pool->size * pool->size);
        shape = out;
      } else if (std::holds_alternative<Relu>(spec)) {
        acts = acts.cwiseMax(0.0);
      } else {
        shape = {shape.size(), 1, 1};
      }
    }
    return acts;
  }

 private:
  Matrix<double> linear(const Matrix<double>& h, const GaussianLayer<T>& l) {
    const Matrix<double> mu = l.mu.template cast<double>();
    const Matrix<double> sd = l.rho.template cast<double>().unaryExpr([](double r) { return softplus(r); });
    const Vector<double> bmu = l.bias_mu.template cast<double>();
    const Vector<double> bsd =
        l.bias_rho.template cast<double>().unaryExpr([](double r) { return softplus(r); });
    Matrix<double> out(mu.rows(), h.cols());
    if (mode_ == LinearSampling::local) {
      Matrix<double> mean = mu * h;
      Matrix<double> var = sd.cwiseAbs2() * h.cwiseAbs2();
      for (Eigen::Index j = 0; j < out.cols(); ++j)
        for (Eigen::Index i = 0; i < out.rows(); ++i)
          out(i, j) = mean(i, j) + bmu(i) +
                      std::sqrt(var(i, j) + bsd(i) * bsd(i)) * normal_(rng_);
      return out;
    }
    Matrix<double> wt(mu.rows(), mu.cols());
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
      for (Eigen::Index k = 0; k < wt.size(); ++k) wt.data()[k] = mu.data()[k] + sd.data()[k] * normal_(rng_);
      out.col(j) = wt * h.col(j);
      for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, j) += bmu(i) + bsd(i) * normal_(rng_);
    }
    return out;
  }

  Matrix<double> convolve(const Matrix<double>& acts, const GaussianLayer<T>& l, const Conv& conv,
                          const ImageShape& in, const ImageShape& out) {
    const Matrix<double> mu = l.mu.template cast<double>();
    const Matrix<double> sd = l.rho.template cast<double>().unaryExpr([](double r) { return softplus(r); });
    const Vector<double> bmu = l.bias_mu.template cast<double>();
    const Vector<double> bsd =
        l.bias_rho.template cast<double>().unaryExpr([](double r) { return softplus(r); });
    const int k = conv.kernel;
    Matrix<double> result(out.size(), acts.cols());
    Matrix<double> patches(out.spatial(), in.channels * k * k);
    Matrix<double> wt(mu.rows(), mu.cols());
    Vector<double> bias(mu.rows());
    for (Eigen::Index n = 0; n < acts.cols(); ++n) {
      for (Eigen::Index q = 0; q < wt.size(); ++q) wt.data()[q] = mu.data()[q] + sd.data()[q] * normal_(rng_);
      for (Eigen::Index i = 0; i < bias.size(); ++i) bias(i) = bmu(i) + bsd(i) * normal_(rng_);
      for (int oy = 0; oy < out.height; ++oy)
        for (int ox = 0; ox < out.width; ++ox)
          for (int c = 0; c < in.channels; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * conv.stride - conv.padding + ky;
                const int ix = ox * conv.stride - conv.padding + kx;
                const bool inside = iy >= 0 && iy < in.height && ix >= 0 && ix < in.width;
                patches(oy * out.width + ox, (c * k + ky) * k + kx) =
                    inside ? acts((c * in.height + iy) * in.width + ix, n) : 0.0;
              }
      // (positions x out_channels), column-major == sample-major channel blocks
      Matrix<double> y = patches * wt.transpose();
      y.rowwise() += bias.transpose();
      result.col(n) = Eigen::Map<const Vector<double>>(y.data(), y.size());
    }
    return result;
  }

  const VariationalParams<T>& params_;
  std::mt19937_64& rng_;
  LinearSampling mode_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace detail

/// Monte-Carlo reference for network_forward: samples weights (and inputs,
/// when `input_var` is nonzero), runs ordinary forward passes, and reports
/// empirical output moments. Seeded and reproducible.
template <typename T>
EmpiricalPredictive<T> mc_forward_oracle(const Vector<T>& input_mean, const Vector<T>& input_var,
                                         const VariationalParams<T>& params, std::size_t n_samples,
                                         std::uint64_t seed,
                                         LinearSampling mode = LinearSampling::local,
                                         std::size_t chunk = 2048) {
  require(n_samples >= 1, "mc_forward_oracle: need at least one sample");
  require(input_mean.size() == params.topology.input.size() && input_var.size() == input_mean.size(),
          "mc_forward_oracle: input size mismatch");
  require((input_var.array() >= T(0)).all(), "mc_forward_oracle: input variance must be nonnegative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  detail::SampledForward<T> fwd(params, rng, mode);
  const int outputs = params.topology.num_outputs();
  Vector<double> sum = Vector<double>::Zero(outputs);
  Vector<double> sum_sq = Vector<double>::Zero(outputs);
  Vector<double> prob = Vector<double>::Zero(outputs);
  const Vector<double> xm = input_mean.template cast<double>();
  const Vector<double> xs = input_var.template cast<double>().cwiseSqrt();
  const bool stochastic_input = (xs.array() > 0.0).any();
  // Shift by the first draw for a numerically stable variance.
  Vector<double> shift;
  for (std::size_t done = 0; done < n_samples;) {
    const std::size_t n = std::min(chunk, n_samples - done);
    Matrix<double> acts(xm.size(), static_cast<Eigen::Index>(n));
    for (Eigen::Index j = 0; j < acts.cols(); ++j) {
      acts.col(j) = xm;
      if (stochastic_input)
        for (Eigen::Index i = 0; i < acts.rows(); ++i) acts(i, j) += xs(i) * normal(rng);
    }
    Matrix<double> f = fwd.run(std::move(acts));
    if (done == 0) shift = f.col(0);
    f.colwise() -= shift;
    sum += f.rowwise().sum();
    sum_sq += f.cwiseAbs2().rowwise().sum();
    f.colwise() += shift;
    prob += f.unaryExpr([](double v) { return normal_cdf(v); }).rowwise().sum();
    done += n;
  }
  const double count = static_cast<double>(n_samples);
  Vector<double> mean_shifted = sum / count;
  Vector<double> var = (sum_sq / count - mean_shifted.cwiseAbs2()).cwiseMax(0.0);
  if (n_samples > 1) var *= count / (count - 1.0);
  EmpiricalPredictive<T> res;
  res.samples = n_samples;
  res.dist.g = (mean_shifted + shift).template cast<T>();
  res.dist.h = var.template cast<T>();
  res.dist.p = (prob / count).template cast<T>();
  const Vector<T> clamped = res.dist.p.unaryExpr([](T v) { return clamp_probability(v); });
  res.dist.p_cat = clamped / clamped.sum();
  return res;
}

/// Deterministic input overload.
template <typename T>
EmpiricalPredictive<T> mc_forward_oracle(const Vector<T>& x, const VariationalParams<T>& params,
                                         std::size_t n_samples, std::uint64_t seed,
                                         LinearSampling mode = LinearSampling::local) {
  return mc_forward_oracle(x, Vector<T>::Zero(x.size()).eval(), params, n_samples, seed, mode);
}

}  // namespace ral
