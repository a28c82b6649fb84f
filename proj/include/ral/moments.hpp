#pragma once

#include <algorithm>
#include <numbers>
#include <utility>

#include "ral/numeric.hpp"
#include "ral/topology.hpp"
#include "ral/variational.hpp"

namespace ral {

/// Diagonal-Gaussian activations for a batch of samples.
///
/// Storage is channel-major: row c holds channel c, column b*H*W + y*W + x
/// holds sample b at pixel (y, x). For flat tensors this reduces to the usual
/// (features x batch) layout.
template <typename T>
struct MomentTensor {
  int batch = 0;
  ImageShape shape;
  Matrix<T> mean;
  Matrix<T> var;
  // True when every variance entry is exactly zero (lifted data).
  bool deterministic = false;

  int columns() const { return batch * shape.spatial(); }

  /// Lifts inputs stored one sample per column, features in (c, y, x) order.
  static MomentTensor lift(const Matrix<T>& inputs, const ImageShape& shape) {
    if (inputs.rows() != shape.size())
      throw ShapeError("input rows " + std::to_string(inputs.rows()) + " != shape size " +
                       std::to_string(shape.size()));
    MomentTensor t;
    t.batch = static_cast<int>(inputs.cols());
    t.shape = shape;
    t.mean = to_channel_major(inputs, shape);
    t.var = Matrix<T>::Zero(t.mean.rows(), t.mean.cols());
    t.deterministic = true;
    return t;
  }

  /// Gaussian inputs with per-feature mean and variance (sample-major columns).
  static MomentTensor gaussian(const Matrix<T>& mean, const Matrix<T>& var, const ImageShape& shape) {
    if (mean.rows() != var.rows() || mean.cols() != var.cols())
      throw ShapeError("mean and variance shapes differ");
    require((var.array() >= T(0)).all(), "input variance must be nonnegative");
    MomentTensor t = lift(mean, shape);
    t.var = to_channel_major(var, shape);
    t.deterministic = false;
    return t;
  }

  static Matrix<T> to_channel_major(const Matrix<T>& samples, const ImageShape& shape) {
    if (shape.flat()) return samples;
    const int hw = shape.spatial();
    const int b = static_cast<int>(samples.cols());
    Matrix<T> out(shape.channels, b * hw);
    for (int n = 0; n < b; ++n)
      for (int c = 0; c < shape.channels; ++c)
        for (int s = 0; s < hw; ++s) out(c, n * hw + s) = samples(c * hw + s, n);
    return out;
  }
};

/// First two raw moments of ReLU(b) for b ~ N(mean, variance).
template <typename T>
struct ReluMoments {
  T e1;  // E[r(b)]
  T e2;  // E[r(b)^2]
};

template <typename T>
ReluMoments<T> relu_moments(T mean, T variance) {
  require(variance >= T(0), "relu_moments: variance must be nonnegative");
  if (variance <= T(kVarianceFloor)) {
    const T r = std::max(mean, T(0));
    return {r, r * r};
  }
  const double m = mean;
  const double s = std::sqrt(static_cast<double>(variance));
  const double z = m / s;
  const double cdf = normal_cdf(z);
  const double pdf = normal_pdf(z);
  return {static_cast<T>(m * cdf + s * pdf),
          static_cast<T>((m * m + s * s) * cdf + m * s * pdf)};
}

/// ReLU output (mean, variance) and the local Jacobian used in reverse mode.
struct ReluLocal {
  double mean, var;
  double dmean_dm, dmean_dv;
  double dvar_dm, dvar_dv;
};

inline ReluLocal relu_local(double m, double v) {
  if (v <= kVarianceFloor) {
    const bool on = m > 0.0;
    return {on ? m : 0.0, 0.0, on ? 1.0 : 0.0, 0.0, 0.0, on ? 1.0 : 0.0};
  }
  const double s = std::sqrt(v);
  const double z = m / s;
  // One erfc per element; the larger tail is taken as the complement.
  double cdf, ccdf;
  if (z >= 0.0) {
    ccdf = normal_cdf(-z);
    cdf = 1.0 - ccdf;
  } else {
    cdf = normal_cdf(z);
    ccdf = 1.0 - cdf;
  }
  const double pdf = normal_pdf(z);
  const double a = z * cdf + pdf;  // e1 / s
  // e2/v - (e1/s)^2 rearranged to avoid cancellation when z >> 0.
  const double spread = z * z * cdf * ccdf + cdf + z * pdf * (ccdf - cdf) - pdf * pdf;
  const double e1 = s * a;
  return {e1, std::max(v * spread, 0.0), cdf, pdf / (2.0 * s), 2.0 * e1 * ccdf, cdf - a * pdf};
}

/// Bernoulli-probit predictive probability Phi(g / sqrt(h + 1)).
template <typename T>
T predictive_probability(T g, T h) {
  require(h >= T(0), "predictive_probability: variance must be nonnegative");
  return normal_cdf(g / std::sqrt(h + T(1)));
}

/// Patch extraction for a channel-major tensor. Rows are (c, ky, kx), columns
/// are (b, oy, ox). Out-of-range pixels read as zero.
template <typename T>
Matrix<T> im2col(const Matrix<T>& x, int batch, const ImageShape& in, const Conv& conv) {
  const ImageShape out = conv_output_shape(conv, in);
  const int k = conv.kernel;
  const int rows = in.channels * k * k;
  Matrix<T> cols(rows, batch * out.spatial());
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        const Eigen::Index col = (static_cast<Eigen::Index>(b) * out.height + oy) * out.width + ox;
        T* dst = cols.col(col).data();
        for (int c = 0; c < in.channels; ++c) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * conv.stride - conv.padding + ky;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * conv.stride - conv.padding + kx;
              const bool inside = iy >= 0 && iy < in.height && ix >= 0 && ix < in.width;
              *dst++ = inside ? x(c, (static_cast<Eigen::Index>(b) * in.height + iy) * in.width + ix)
                              : T(0);
            }
          }
        }
      }
    }
  }
  return cols;
}

/// Adjoint of im2col: scatters patch gradients back onto the image.
template <typename T>
Matrix<T> col2im(const Matrix<T>& cols, int batch, const ImageShape& in, const Conv& conv) {
  const ImageShape out = conv_output_shape(conv, in);
  const int k = conv.kernel;
  Matrix<T> x = Matrix<T>::Zero(in.channels, static_cast<Eigen::Index>(batch) * in.spatial());
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        const Eigen::Index col = (static_cast<Eigen::Index>(b) * out.height + oy) * out.width + ox;
        const T* src = cols.col(col).data();
        for (int c = 0; c < in.channels; ++c) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * conv.stride - conv.padding + ky;
            for (int kx = 0; kx < k; ++kx, ++src) {
              const int ix = ox * conv.stride - conv.padding + kx;
              if (iy >= 0 && iy < in.height && ix >= 0 && ix < in.width)
                x(c, (static_cast<Eigen::Index>(b) * in.height + iy) * in.width + ix) += *src;
            }
          }
        }
      }
    }
  }
  return x;
}

/// Intermediates of one affine moment map, kept for the reverse pass.
template <typename T>
struct AffineCache {
  Matrix<T> xm;      // input means (patches for conv)
  Matrix<T> xv;      // input variances; empty when deterministic
  Matrix<T> second;  // E[x^2] = xv + xm^2
  Matrix<T> mu_sq;   // mu^2
  Matrix<T> sigma_sq;
  Vector<T> bias_var;
  bool deterministic = false;
};

/// Moment-matched affine map over independent inputs:
///   mean = mu x_m + b_mu
///   var  = mu^2 x_v + sigma^2 E[x^2] + b_var
template <typename T>
std::pair<Matrix<T>, Matrix<T>> affine_moments(const GaussianLayer<T>& w, AffineCache<T>& c) {
  if (c.xm.rows() != w.mu.cols())
    throw ShapeError("affine input size " + std::to_string(c.xm.rows()) + " != fan-in " +
                     std::to_string(w.mu.cols()));
  c.sigma_sq = w.weight_variance();
  c.bias_var = w.bias_variance();
  Matrix<T> mean = w.mu * c.xm;
  mean.colwise() += w.bias_mu;
  Matrix<T> var;
  if (c.deterministic) {
    c.second = c.xm.cwiseAbs2();
    var = c.sigma_sq * c.second;
  } else {
    c.second = c.xv + c.xm.cwiseAbs2();
    c.mu_sq = w.mu.cwiseAbs2();
    var = c.mu_sq * c.xv;
    var.noalias() += c.sigma_sq * c.second;
  }
  var.colwise() += c.bias_var;
  return {std::move(mean), std::move(var)};
}

/// Reverse pass of affine_moments. Accumulates parameter gradients into `grad`
/// and, if requested, returns gradients w.r.t. the input mean and variance.
template <typename T>
void affine_moments_backward(const GaussianLayer<T>& w, const AffineCache<T>& c,
                             const Matrix<T>& g_mean, const Matrix<T>& g_var, GaussianLayer<T>& grad,
                             Matrix<T>* g_xm, Matrix<T>* g_xv) {
  grad.mu.noalias() += g_mean * c.xm.transpose();
  if (!c.deterministic) {
    Matrix<T> gv_xv = g_var * c.xv.transpose();
    grad.mu.array() += T(2) * w.mu.array() * gv_xv.array();
  }
  // d sigma^2 / d rho = 2 softplus(rho) sigmoid(rho)
  const Matrix<T> g_s2 = g_var * c.second.transpose();
  grad.rho.array() += g_s2.array() * T(2) * array_ops::softplus(w.rho.array()) * array_ops::sigmoid(w.rho.array());
  grad.bias_mu += g_mean.rowwise().sum();
  grad.bias_rho.array() += g_var.rowwise().sum().array() * T(2) * array_ops::softplus(w.bias_rho.array()) *
                           array_ops::sigmoid(w.bias_rho.array());
  if (g_xm || g_xv) {
    Matrix<T> a = c.sigma_sq.transpose() * g_var;
    if (g_xm) {
      *g_xm = w.mu.transpose() * g_mean;
      g_xm->array() += T(2) * c.xm.array() * a.array();
    }
    if (g_xv) {
      if (c.deterministic) {
        *g_xv = w.mu.cwiseAbs2().transpose() * g_var + a;
      } else {
        *g_xv = c.mu_sq.transpose() * g_var;
        *g_xv += a;
      }
    }
  }
}

/// Fully connected moment propagation (one sample per column).
template <typename T>
MomentTensor<T> linear_moment_forward(const MomentTensor<T>& input, const GaussianLayer<T>& w) {
  if (!input.shape.flat()) throw ShapeError("linear layer needs a flat input");
  AffineCache<T> c;
  c.xm = input.mean;
  c.deterministic = input.deterministic;
  if (!c.deterministic) c.xv = input.var;
  auto [m, v] = affine_moments(w, c);
  return {input.batch, {static_cast<int>(w.mu.rows()), 1, 1}, std::move(m), std::move(v), false};
}

/// Sliding-window moment propagation: im2col followed by the affine map.
template <typename T>
MomentTensor<T> conv_moment_forward(const MomentTensor<T>& input, const GaussianLayer<T>& w,
                                    const Conv& conv) {
  const ImageShape out = layer_output_shape(conv, input.shape);
  AffineCache<T> c;
  c.xm = im2col(input.mean, input.batch, input.shape, conv);
  c.deterministic = input.deterministic;
  if (!c.deterministic) c.xv = im2col(input.var, input.batch, input.shape, conv);
  auto [m, v] = affine_moments(w, c);
  return {input.batch, out, std::move(m), std::move(v), false};
}

/// Non-overlapping average pooling of independent Gaussians:
/// mean of means, variance sum / k^4.
template <typename T>
MomentTensor<T> avg_pool_moments(const MomentTensor<T>& input, int k) {
  const ImageShape out = layer_output_shape(AvgPool{k}, input.shape);
  const ImageShape& in = input.shape;
  MomentTensor<T> o{input.batch, out, Matrix<T>::Zero(in.channels, input.batch * out.spatial()),
                    Matrix<T>::Zero(in.channels, input.batch * out.spatial()), input.deterministic};
  const T inv_area = T(1) / T(k * k);
  for (int b = 0; b < input.batch; ++b)
    for (int y = 0; y < in.height; ++y)
      for (int x = 0; x < in.width; ++x) {
        const Eigen::Index src = (static_cast<Eigen::Index>(b) * in.height + y) * in.width + x;
        const Eigen::Index dst =
            (static_cast<Eigen::Index>(b) * out.height + y / k) * out.width + x / k;
        o.mean.col(dst) += input.mean.col(src);
        o.var.col(dst) += input.var.col(src);
      }
  o.mean *= inv_area;
  o.var *= inv_area * inv_area;
  return o;
}

template <typename T>
std::pair<Matrix<T>, Matrix<T>> avg_pool_backward(const Matrix<T>& g_mean, const Matrix<T>& g_var,
                                                  int batch, const ImageShape& in, int k) {
  const ImageShape out{in.channels, in.height / k, in.width / k};
  Matrix<T> gm(in.channels, static_cast<Eigen::Index>(batch) * in.spatial());
  Matrix<T> gv(gm.rows(), gm.cols());
  const T inv_area = T(1) / T(k * k);
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < in.height; ++y)
      for (int x = 0; x < in.width; ++x) {
        const Eigen::Index dst = (static_cast<Eigen::Index>(b) * in.height + y) * in.width + x;
        const Eigen::Index src =
            (static_cast<Eigen::Index>(b) * out.height + y / k) * out.width + x / k;
        gm.col(dst) = g_mean.col(src) * inv_area;
        gv.col(dst) = g_var.col(src) * (inv_area * inv_area);
      }
  return {std::move(gm), std::move(gv)};
}

namespace detail {

/// Vectorised relu_local over whole arrays. Computes in T; for double this
/// matches relu_local to rounding.
template <typename T>
struct ReluArrays {
  using A = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic>;
  A mean, var, dmean_dm, dmean_dv, dvar_dm, dvar_dv;

  ReluArrays(const Matrix<T>& m_in, const Matrix<T>& v_in, bool jacobian) {
    const A m = m_in.array();
    const A v = v_in.array().max(T(0));
    const auto point = (v <= T(kVarianceFloor)).eval();
    const A s = point.select(T(1), v.sqrt());
    const A z = m / s;
    const A tail = T(0.5) * array_ops::erfc_nonneg((z.abs() * T(std::numbers::sqrt2 / 2)).eval());
    const auto pos = (z >= T(0)).eval();
    const A cdf = pos.select(T(1) - tail, tail);
    const A ccdf = pos.select(tail, T(1) - tail);
    const A pdf = T(0.3989422804014326779399460599343818684759) * (T(-0.5) * z.square()).exp();
    const A a = z * cdf + pdf;
    const A spread = z.square() * cdf * ccdf + cdf + z * pdf * (ccdf - cdf) - pdf.square();
    const A e1 = s * a;
    const auto on = (m > T(0)).eval();
    mean = point.select(on.select(m, T(0)), e1);
    var = point.select(T(0), (v * spread).max(T(0)));
    if (jacobian) {
      const A step = on.select(A::Ones(m.rows(), m.cols()), A::Zero(m.rows(), m.cols()));
      dmean_dm = point.select(step, cdf);
      dmean_dv = point.select(T(0), pdf / (T(2) * s));
      dvar_dm = point.select(T(0), T(2) * e1 * ccdf);
      dvar_dv = point.select(step, cdf - a * pdf);
    }
  }
};

}  // namespace detail

/// Elementwise ReLU moment matching over a tensor.
template <typename T>
MomentTensor<T> relu_moment_forward(const MomentTensor<T>& input) {
  detail::ReluArrays<T> r(input.mean, input.var, false);
  return {input.batch, input.shape, r.mean.matrix(), r.var.matrix(), input.deterministic};
}

template <typename T>
std::pair<Matrix<T>, Matrix<T>> relu_moment_backward(const MomentTensor<T>& input,
                                                     const Matrix<T>& g_mean,
                                                     const Matrix<T>& g_var) {
  const detail::ReluArrays<T> r(input.mean, input.var, true);
  Matrix<T> gm = (g_mean.array() * r.dmean_dm + g_var.array() * r.dvar_dm).matrix();
  Matrix<T> gv = (g_mean.array() * r.dmean_dv + g_var.array() * r.dvar_dv).matrix();
  return {std::move(gm), std::move(gv)};
}

/// (C x B*HW) -> (C*HW x B).
template <typename T>
Matrix<T> flatten_channel_major(const Matrix<T>& x, int batch, const ImageShape& shape) {
  const int hw = shape.spatial();
  Matrix<T> out(shape.size(), batch);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < shape.channels; ++c)
      for (int s = 0; s < hw; ++s) out(c * hw + s, b) = x(c, b * hw + s);
  return out;
}

/// Inverse of flatten_channel_major.
template <typename T>
Matrix<T> unflatten_channel_major(const Matrix<T>& x, int batch, const ImageShape& shape) {
  const int hw = shape.spatial();
  Matrix<T> out(shape.channels, batch * hw);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < shape.channels; ++c)
      for (int s = 0; s < hw; ++s) out(c, b * hw + s) = x(c * hw + s, b);
  return out;
}

}  // namespace ral
