#pragma once

#include "eqprop/network.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace eqprop {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version, integrity, layer_count, shape };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

/// One named tensor with its logical shape and row-major payload.
struct NamedTensor {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;
};

// Layout (little-endian): "EQPCKPT\0", u32 version, u32 count, then per tensor
// u32 name length, name bytes, u8 dtype, u32 rank, u64 dims, payload; a crc32 of
// everything before it closes the file.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_tensors(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(const std::string& path);

template <class Scalar>
void save_checkpoint(const std::string& path, const Topology& topo, const Parameters<Scalar>& params);

/// Parameters for `topo`; throws CheckpointError on any disagreement.
template <class Scalar>
Parameters<Scalar> load_checkpoint(const std::string& path, const Topology& topo);

}  // namespace eqprop
