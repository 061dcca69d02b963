#pragma once

#include "eqprop/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace eqprop {

class IdxError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch, bad_label };

  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr int kNumClasses = 10;

/// Images scaled to [0, 1], one column per sample (row-major pixels).
struct Dataset {
  Batch<float> images;
  std::vector<int> labels;
  int rows = 28;
  int cols = 28;

  std::size_t size() const { return labels.size(); }

  template <class Scalar>
  Batch<Scalar> gather(const std::vector<int>& idx) const {
    Batch<Scalar> out(images.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = images.col(idx[i]).cast<Scalar>();
    return out;
  }

  template <class Scalar>
  Batch<Scalar> one_hot(const std::vector<int>& idx) const {
    Batch<Scalar> out = Batch<Scalar>::Zero(kNumClasses, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out(labels[idx[i]], static_cast<Eigen::Index>(i)) = Scalar(1);
    return out;
  }
};

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major
};

IdxImages read_idx_images(const std::string& path);
std::vector<std::uint8_t> read_idx_labels(const std::string& path);
void write_idx_images(const std::string& path, const IdxImages& images);
void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

/// Parse a matching IDX image/label pair; pixels are divided by 255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Sample indices grouped into batches. Shuffling is a seeded permutation; the
/// final short batch is kept.
std::vector<std::vector<int>> batches(std::size_t count, int batch_size, std::uint64_t seed, bool shuffle);

/// n samples chosen by seed. Stratified selection keeps each class's share of n
/// within one sample of its share of the full dataset.
Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed, bool stratified);

}  // namespace eqprop
