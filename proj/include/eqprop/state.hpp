#pragma once

#include "eqprop/loss.hpp"
#include "eqprop/network.hpp"

#include <vector>

namespace eqprop {

/// Dynamical variables of every layer for a batch. Index 0 is the input layer:
/// xi[0] holds the clamped input and v[0]/s[0] its spike encoder.
template <class Scalar>
struct NeuronState {
  std::vector<Batch<Scalar>> xi;
  std::vector<Batch<Scalar>> rho_prev;
  std::vector<Batch<Scalar>> v;
  std::vector<Batch<Scalar>> d;
  std::vector<Batch<Scalar>> s;

  static NeuronState zeros(const Topology& topo, Eigen::Index batch) {
    NeuronState st;
    for (int n = 0; n <= topo.depth(); ++n) {
      const int rows = topo.state_shape(n).size();
      for (auto* field : {&st.xi, &st.rho_prev, &st.v, &st.d, &st.s}) field->push_back(Batch<Scalar>::Zero(rows, batch));
    }
    return st;
  }

  /// Zero state with `input` clamped on layer 0.
  static NeuronState with_input(const Topology& topo, const Batch<Scalar>& input) {
    require_rows(input.rows(), topo.state_shape(0).size(), "input");
    NeuronState st = zeros(topo, input.cols());
    st.xi[0] = input;
    st.rho_prev[0] = input;
    return st;
  }

  int depth() const { return static_cast<int>(xi.size()) - 1; }
  Eigen::Index batch() const { return xi.empty() ? 0 : xi[0].cols(); }

  std::size_t bytes() const {
    std::size_t total = 0;
    for (const auto* field : {&xi, &rho_prev, &v, &d, &s})
      for (const auto& m : *field) total += buffer_bytes(m);
    return total;
  }
};

/// Output-layer nudge: beta times the negative objective gradient.
template <class Scalar>
struct Nudge {
  Scalar beta = 0;
  const Batch<Scalar>* target = nullptr;
  LossKind loss = LossKind::mse;
};

template <class Scalar>
Batch<Scalar> nudge_drive(const Nudge<Scalar>& nudge, const Batch<Scalar>& out_rho) {
  if (!nudge.target) throw ShapeError("nudge without target");
  if (nudge.target->rows() != out_rho.rows() || nudge.target->cols() != out_rho.cols())
    throw ShapeError("nudge target shape does not match output layer");
  return -nudge.beta * objective_grad(nudge.loss, out_rho, *nudge.target);
}

}  // namespace eqprop
