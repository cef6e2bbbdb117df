#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>

#include "i2cl/error.hpp"

namespace i2cl {

// Row-major so that one row is one token position.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using RowVector = RowVectorX<double>;

inline constexpr double kLayerNormEps = 1e-5;

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& x, const std::string& what) {
  if (!x.allFinite()) {
    throw NumericError("non-finite value in " + what);
  }
}

/// Row-wise softmax with max subtraction.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar peak = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Derived>
MatrixX<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar peak = x.row(r).maxCoeff();
    const Scalar lse = peak + std::log((x.row(r).array() - peak).exp().sum());
    out.row(r) = (x.row(r).array() - lse).matrix();
  }
  return out;
}

/// Per-row layer normalization followed by the affine gain/bias.
template <typename Derived, typename GainDerived, typename BiasDerived>
MatrixX<typename Derived::Scalar> layer_norm(const Eigen::MatrixBase<Derived>& x,
                                             const Eigen::MatrixBase<GainDerived>& gain,
                                             const Eigen::MatrixBase<BiasDerived>& bias,
                                             typename Derived::Scalar eps = kLayerNormEps) {
  using Scalar = typename Derived::Scalar;
  if (gain.size() != x.cols() || bias.size() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias length does not match row width");
  }
  MatrixX<Scalar> out(x.rows(), x.cols());
  const Scalar n = static_cast<Scalar>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).sum() / n;
    const auto centered = (x.row(r).array() - mean).eval();
    const Scalar var = centered.square().sum() / n;
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    out.row(r) = (centered * inv * gain.reshaped().transpose().array() +
                  bias.reshaped().transpose().array())
                     .matrix();
  }
  return out;
}

/// GELU, tanh approximation.
template <typename Scalar>
Scalar gelu(Scalar x) {
  constexpr Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
  const Scalar inner = k * (x + Scalar(0.044715) * x * x * x);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(inner));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  constexpr Scalar k = Scalar(0.7978845608028654);
  const Scalar inner = k * (x + Scalar(0.044715) * x * x * x);
  const Scalar t = std::tanh(inner);
  const Scalar dinner = k * (Scalar(1) + Scalar(3 * 0.044715) * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * dinner;
}

template <typename Scalar>
Scalar softplus(Scalar x) {
  // log(1 + e^x) without overflow for large x
  return x > Scalar(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar inverse_softplus(Scalar y) {
  if (!(y > Scalar(0))) {
    throw ConfigError("inverse_softplus: argument must be positive");
  }
  return y > Scalar(30) ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-x))
                        : std::exp(x) / (Scalar(1) + std::exp(x));
}

}  // namespace i2cl
