#pragma once

#include <Eigen/Core>
#include <cmath>

namespace rial {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// log(sum(exp(z))) with max subtraction.
template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& z) {
  using std::exp;
  using std::log;
  const auto m = z.maxCoeff();
  return m + log((z.array() - m).exp().sum());
}

/// Max-subtracted softmax.
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  Vector<Scalar> e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

template <typename Derived>
Vector<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& z) {
  return (z.array() - log_sum_exp(z)).matrix();
}

/// Logistic function, evaluated without overflow for either sign.
template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

/// log(sigmoid(x)) = -softplus(-x).
template <typename Scalar>
Scalar log_sigmoid(Scalar x) {
  using std::exp;
  using std::log1p;
  if (x >= Scalar(0)) return -log1p(exp(-x));
  return x - log1p(exp(x));
}

}  // namespace rial
