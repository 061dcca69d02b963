#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace eqprop {

// A batch of feature maps: one column per sample, rows are the flattened
// (channel, row, column) coordinates in channel-major order. Linear layers use
// the same layout with height = width = 1, so flattening a conv map into a
// linear layer is a no-op.
template <class Scalar>
using Batch = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct Shape3 {
  int channels = 0;
  int height = 1;
  int width = 1;

  int spatial() const { return height * width; }
  int size() const { return channels * height * width; }
  bool operator==(const Shape3&) const = default;

  std::string str() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" +
           std::to_string(width);
  }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require_rows(Eigen::Index rows, int expected, const char* what) {
  if (rows != expected) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(expected) +
                     " rows, got " + std::to_string(rows));
  }
}

// Broadcast a per-channel bias across every spatial position of a map.
template <class Scalar>
Vector<Scalar> expand_bias(const Vector<Scalar>& bias, int spatial) {
  Vector<Scalar> out(bias.size() * spatial);
  for (Eigen::Index c = 0; c < bias.size(); ++c) out.segment(c * spatial, spatial).setConstant(bias(c));
  return out;
}

// Adjoint of expand_bias applied column-wise and summed over the batch.
template <class Scalar>
Vector<Scalar> reduce_bias(const Batch<Scalar>& g, int channels, int spatial) {
  require_rows(g.rows(), channels * spatial, "reduce_bias");
  Vector<Scalar> row_sum = g.rowwise().sum();
  Vector<Scalar> out(channels);
  for (int c = 0; c < channels; ++c) out(c) = row_sum.segment(c * spatial, spatial).sum();
  return out;
}

template <class Derived>
std::size_t buffer_bytes(const Eigen::DenseBase<Derived>& m) {
  return static_cast<std::size_t>(m.size()) * sizeof(typename Derived::Scalar);
}

}  // namespace eqprop
