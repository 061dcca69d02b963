#pragma once

#include "eqprop/tensor.hpp"

#include <cmath>

namespace eqprop {

enum class LossKind { mse, ce };

// Column-wise softmax.
template <class Scalar>
Batch<Scalar> softmax(const Batch<Scalar>& logits) {
  Batch<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    const Scalar m = logits.col(b).maxCoeff();
    out.col(b) = (logits.col(b).array() - m).exp().matrix();
    out.col(b) /= out.col(b).sum();
  }
  return out;
}

/// Half the mean squared difference, averaged over units and samples.
template <class Scalar>
Scalar mse_loss(const Batch<Scalar>& out, const Batch<Scalar>& target) {
  if (out.rows() != target.rows() || out.cols() != target.cols()) throw ShapeError("mse_loss: shape mismatch");
  if (out.size() == 0) return Scalar(0);
  return Scalar(0.5) * (out - target).squaredNorm() / Scalar(out.size());
}

/// Softmax cross-entropy, averaged over samples.
template <class Scalar>
Scalar ce_loss(const Batch<Scalar>& logits, const Batch<Scalar>& target) {
  if (logits.rows() != target.rows() || logits.cols() != target.cols()) throw ShapeError("ce_loss: shape mismatch");
  if (logits.cols() == 0) return Scalar(0);
  Scalar total = 0;
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    const Scalar m = logits.col(b).maxCoeff();
    const Scalar lse = m + std::log((logits.col(b).array() - m).exp().sum());
    total += -(target.col(b).array() * (logits.col(b).array() - lse)).sum();
  }
  return total / Scalar(logits.cols());
}

/// The per-sample objective the nudge descends, averaged over the batch. For
/// MSE this is 1/2 ||out - y||^2 (the unnormalized sum), so its gradient is
/// exactly out - y.
template <class Scalar>
Scalar objective(LossKind kind, const Batch<Scalar>& out, const Batch<Scalar>& target) {
  if (kind == LossKind::ce) return ce_loss(out, target);
  return mse_loss(out, target) * Scalar(out.rows());
}

/// d objective / d out, per sample (not divided by the batch size).
template <class Scalar>
Batch<Scalar> objective_grad(LossKind kind, const Batch<Scalar>& out, const Batch<Scalar>& target) {
  if (out.rows() != target.rows() || out.cols() != target.cols()) throw ShapeError("objective_grad: shape mismatch");
  if (kind == LossKind::ce) return softmax(out) - target;
  return out - target;
}

/// Reported metric for a loss kind (mean-normalized MSE or cross-entropy).
template <class Scalar>
Scalar loss_metric(LossKind kind, const Batch<Scalar>& out, const Batch<Scalar>& target) {
  return kind == LossKind::ce ? ce_loss(out, target) : mse_loss(out, target);
}

}  // namespace eqprop
