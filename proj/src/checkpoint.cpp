#include "eqprop/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace eqprop {

namespace {

constexpr char kMagic[8] = {'E', 'Q', 'P', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  template <class T>
  void put(T v) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    buf.insert(buf.end(), bytes, bytes + sizeof(T));
  }
  void raw(const void* p, std::size_t n) {
    auto c = static_cast<const unsigned char*>(p);
    buf.insert(buf.end(), c, c + n);
  }
  std::vector<unsigned char> buf;
};

class Reader {
 public:
  Reader(const std::vector<unsigned char>& b, std::size_t end, std::string path) : buf_(b), end_(end), path_(std::move(path)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError(CheckpointError::Kind::integrity, path_ + ": truncated checkpoint");
  }
  const std::vector<unsigned char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string path_;
};

std::uint32_t crc_of(const unsigned char* p, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

template <class Scalar>
constexpr DType dtype_of() {
  return sizeof(Scalar) == 4 ? DType::f32 : DType::f64;
}

std::string layer_name(int n, const char* what) { return "layer" + std::to_string(n) + "." + what; }

}  // namespace

void write_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.raw(t.name.data(), t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    std::uint64_t count = 1;
    for (auto d : t.shape) {
      w.put<std::uint64_t>(d);
      count *= d;
    }
    if (count != t.values.size()) throw CheckpointError(CheckpointError::Kind::shape, t.name + ": payload/shape mismatch");
    for (double v : t.values) {
      if (t.dtype == DType::f32)
        w.put<float>(static_cast<float>(v));
      else
        w.put<double>(v);
    }
  }
  w.put<std::uint32_t>(crc_of(w.buf.data(), w.buf.size()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed: " + path);
}

std::vector<NamedTensor> read_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path);
  const std::vector<unsigned char> buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (buf.size() < sizeof kMagic + 12 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError(CheckpointError::Kind::bad_magic, path + ": not a checkpoint");
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored = 0;
  std::memcpy(&stored, buf.data() + body, 4);
  if constexpr (std::endian::native == std::endian::big) stored = __builtin_bswap32(stored);
  if (stored != crc_of(buf.data(), body))
    throw CheckpointError(CheckpointError::Kind::integrity, path + ": checksum mismatch (corrupt checkpoint)");

  Reader r(buf, body, path);
  r.str(sizeof kMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointError::Kind::version, path + ": unsupported format version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.get<std::uint32_t>());
    const auto dt = r.get<std::uint8_t>();
    if (dt != std::uint8_t(DType::f32) && dt != std::uint8_t(DType::f64))
      throw CheckpointError(CheckpointError::Kind::integrity, t.name + ": unknown dtype");
    t.dtype = DType(dt);
    const auto rank = r.get<std::uint32_t>();
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(r.get<std::uint64_t>());
      n *= t.shape.back();
    }
    t.values.reserve(n);
    for (std::uint64_t k = 0; k < n; ++k) t.values.push_back(t.dtype == DType::f32 ? double(r.get<float>()) : r.get<double>());
    out.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError(CheckpointError::Kind::integrity, path + ": trailing bytes");
  return out;
}

template <class Scalar>
void save_checkpoint(const std::string& path, const Topology& topo, const Parameters<Scalar>& params) {
  params.check_congruent(topo, "save_checkpoint");
  std::vector<NamedTensor> tensors;
  for (int n = 1; n <= topo.depth(); ++n) {
    const auto& g = topo.layer(n);
    NamedTensor w{layer_name(n, "weight"), dtype_of<Scalar>()};
    if (g.is_conv())
      w.shape = {std::uint64_t(g.spec.units), std::uint64_t(g.lower.channels), std::uint64_t(g.spec.kernel),
                 std::uint64_t(g.spec.kernel)};
    else
      w.shape = {std::uint64_t(g.weight_rows()), std::uint64_t(g.weight_cols())};
    const auto& m = params.w(n);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.values.push_back(double(m(i, j)));
    tensors.push_back(std::move(w));
    NamedTensor b{layer_name(n, "bias"), dtype_of<Scalar>(), {std::uint64_t(g.bias_size())}};
    for (Eigen::Index i = 0; i < params.b(n).size(); ++i) b.values.push_back(double(params.b(n)(i)));
    tensors.push_back(std::move(b));
  }
  write_tensors(path, tensors);
}

template <class Scalar>
Parameters<Scalar> load_checkpoint(const std::string& path, const Topology& topo) {
  const auto tensors = read_tensors(path);
  if (tensors.size() != std::size_t(2 * topo.depth()))
    throw CheckpointError(CheckpointError::Kind::layer_count,
                          path + ": checkpoint holds " + std::to_string(tensors.size() / 2) + " layers, config has " +
                              std::to_string(topo.depth()));
  auto params = Parameters<Scalar>::zeros(topo);
  for (int n = 1; n <= topo.depth(); ++n) {
    const NamedTensor& w = tensors[std::size_t(2 * (n - 1))];
    const NamedTensor& b = tensors[std::size_t(2 * (n - 1) + 1)];
    if (w.name != layer_name(n, "weight") || b.name != layer_name(n, "bias"))
      throw CheckpointError(CheckpointError::Kind::shape, path + ": unexpected tensor order at layer " + std::to_string(n));
    auto& m = params.w(n);
    std::uint64_t wn = 1;
    for (auto d : w.shape) wn *= d;
    if (wn != std::uint64_t(m.size()) || w.shape.empty() || w.shape[0] != std::uint64_t(m.rows()) ||
        b.values.size() != std::size_t(params.b(n).size()))
      throw CheckpointError(CheckpointError::Kind::shape, path + ": " + w.name + " shape does not match the config");
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = Scalar(w.values[k++]);
    for (Eigen::Index i = 0; i < params.b(n).size(); ++i) params.b(n)(i) = Scalar(b.values[std::size_t(i)]);
  }
  return params;
}

template void save_checkpoint<float>(const std::string&, const Topology&, const Parameters<float>&);
template void save_checkpoint<double>(const std::string&, const Topology&, const Parameters<double>&);
template Parameters<float> load_checkpoint<float>(const std::string&, const Topology&);
template Parameters<double> load_checkpoint<double>(const std::string&, const Topology&);

}  // namespace eqprop
