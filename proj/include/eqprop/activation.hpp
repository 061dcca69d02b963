#pragma once

#include "eqprop/tensor.hpp"

#include <type_traits>

namespace eqprop {

/// Which boundary convention the hard-sigmoid derivative uses at exactly 0 and 1.
///
/// `inclusive` returns 1 on the closed interval [0, 1]. `strict` returns 1 only on
/// the open interval; with strict boundaries any neuron whose state is clipped to
/// 0 or 1 stops receiving drive and decays by (1 - eps) forever, so a network
/// started from the zero state never leaves it.
enum class DerivBoundary { inclusive, strict };

template <class Derived>
auto hard_sigmoid(const Eigen::MatrixBase<Derived>& u) {
  using S = typename Derived::Scalar;
  return u.array().max(S(0)).min(S(1)).matrix();
}

template <class Scalar>
  requires std::is_floating_point_v<Scalar>
Scalar hard_sigmoid(Scalar u) {
  return u < Scalar(0) ? Scalar(0) : (u > Scalar(1) ? Scalar(1) : u);
}

template <class Scalar>
  requires std::is_floating_point_v<Scalar>
Scalar hard_sigmoid_deriv(Scalar u, DerivBoundary boundary = DerivBoundary::inclusive) {
  if (boundary == DerivBoundary::strict) return (u > Scalar(0) && u < Scalar(1)) ? Scalar(1) : Scalar(0);
  return (u >= Scalar(0) && u <= Scalar(1)) ? Scalar(1) : Scalar(0);
}

template <class Derived>
Matrix<typename Derived::Scalar> hard_sigmoid_deriv(const Eigen::MatrixBase<Derived>& u,
                                                    DerivBoundary boundary = DerivBoundary::inclusive) {
  using S = typename Derived::Scalar;
  return u.unaryExpr([boundary](S v) { return hard_sigmoid_deriv(v, boundary); });
}

// 1 strictly inside (0, 1): the derivative of the clip applied to a pre-activation.
template <class Derived>
Matrix<typename Derived::Scalar> interior_mask(const Eigen::MatrixBase<Derived>& u) {
  using S = typename Derived::Scalar;
  return u.unaryExpr([](S v) { return (v > S(0) && v < S(1)) ? S(1) : S(0); });
}

}  // namespace eqprop
