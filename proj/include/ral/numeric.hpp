#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <type_traits>

#include <Eigen/Dense>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace ral {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Thrown when an operation is called outside its documented domain.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown on incompatible tensor / layer shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw PreconditionError(what);
}

// Variances at or below this are treated as a point mass.
inline constexpr double kVarianceFloor = 1e-12;
// Probabilities are clamped to [kProbFloor, 1 - kProbFloor] before logs.
inline constexpr double kProbFloor = 1e-7;

/// Flushes denormals to zero for the lifetime of the guard. Tiny variance
/// gradients otherwise fall into the denormal range and stall the GEMMs.
class ScopedFlushDenormals {
 public:
  ScopedFlushDenormals() {
#if defined(__SSE__)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040);  // FTZ | DAZ
#endif
  }
  ~ScopedFlushDenormals() {
#if defined(__SSE__)
    _mm_setcsr(saved_);
#endif
  }
  ScopedFlushDenormals(const ScopedFlushDenormals&) = delete;
  ScopedFlushDenormals& operator=(const ScopedFlushDenormals&) = delete;

 private:
  unsigned int saved_ = 0;
};

template <typename T>
T normal_pdf(T x) {
  constexpr T inv_sqrt_2pi = T(0.3989422804014326779399460599343818684759);
  return inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
}

template <typename T>
T normal_cdf(T x) {
  return T(0.5) * std::erfc(-x / std::numbers::sqrt2_v<T>);
}

template <typename T>
T clamp_probability(T p) {
  const T lo = T(kProbFloor);
  return p < lo ? lo : (p > T(1) - lo ? T(1) - lo : p);
}

/// log(1 + exp(x)) without overflow.
template <typename T>
T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// Elementwise helpers over Eigen arrays. Float inputs take vectorised paths.
namespace array_ops {

template <typename Derived>
auto softplus(const Eigen::ArrayBase<Derived>& r) {
  using S = typename Derived::Scalar;
  return (r.max(S(0)) + (-r.abs()).exp().log1p()).eval();
}

template <typename Derived>
auto sigmoid(const Eigen::ArrayBase<Derived>& r) {
  using S = typename Derived::Scalar;
  const auto e = (-r.abs()).exp().eval();
  return (r >= S(0)).select(S(1) / (S(1) + e), e / (S(1) + e)).eval();
}

/// erfc of a nonnegative argument. Float uses a Chebyshev fit with
/// fractional error below 1.2e-7 everywhere; double defers to std::erfc.
template <typename Derived>
auto erfc_nonneg(const Eigen::ArrayBase<Derived>& x) {
  using S = typename Derived::Scalar;
  using A = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>;
  if constexpr (std::is_same_v<S, float>) {
    const A t = S(1) / (S(1) + S(0.5) * x);
    const A poly =
        S(-1.26551223) +
        t * (S(1.00002368) +
             t * (S(0.37409196) +
                  t * (S(0.09678418) +
                       t * (S(-0.18628806) +
                            t * (S(0.27886807) +
                                 t * (S(-1.13520398) +
                                      t * (S(1.48851587) + t * (S(-0.82215223) + t * S(0.17087277)))))))));
    return A(t * (poly - x.square()).exp());
  } else {
    return A(x.unaryExpr([](S v) { return std::erfc(v); }));
  }
}

}  // namespace array_ops

/// Inverse of softplus, for initialising raw spread parameters.
template <typename T>
T softplus_inverse(T y) {
  return y > T(30) ? y : std::log(std::expm1(y));
}

}  // namespace ral
