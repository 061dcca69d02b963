#include "eqprop/data.hpp"

#include "eqprop/rng.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>

namespace eqprop {

namespace {

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t offset, const std::string& path) {
  if (buf.size() < offset + 4) throw IdxError(IdxError::Kind::truncated, path + ": truncated header");
  return (std::uint32_t(buf[offset]) << 24) | (std::uint32_t(buf[offset + 1]) << 16) |
         (std::uint32_t(buf[offset + 2]) << 8) | std::uint32_t(buf[offset + 3]);
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(bytes, 4);
}

void check_magic(std::uint32_t got, std::uint32_t want, const std::string& path) {
  if (got != want)
    throw IdxError(IdxError::Kind::bad_magic, path + ": bad IDX magic 0x" + [got] {
      char s[16];
      std::snprintf(s, sizeof s, "%08x", got);
      return std::string(s);
    }());
}

}  // namespace

IdxImages read_idx_images(const std::string& path) {
  const auto buf = slurp(path);
  check_magic(read_be32(buf, 0, path), kIdxImageMagic, path);
  IdxImages img;
  img.count = read_be32(buf, 4, path);
  img.rows = read_be32(buf, 8, path);
  img.cols = read_be32(buf, 12, path);
  const std::size_t payload = std::size_t(img.count) * img.rows * img.cols;
  if (buf.size() < 16 + payload)
    throw IdxError(IdxError::Kind::truncated, path + ": expected " + std::to_string(payload) + " pixel bytes, found " +
                                                  std::to_string(buf.size() - 16));
  img.pixels.assign(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(payload));
  return img;
}

std::vector<std::uint8_t> read_idx_labels(const std::string& path) {
  const auto buf = slurp(path);
  check_magic(read_be32(buf, 0, path), kIdxLabelMagic, path);
  const std::uint32_t count = read_be32(buf, 4, path);
  if (buf.size() < 8 + std::size_t(count))
    throw IdxError(IdxError::Kind::truncated, path + ": expected " + std::to_string(count) + " labels");
  return {buf.begin() + 8, buf.begin() + 8 + count};
}

void write_idx_images(const std::string& path, const IdxImages& images) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError(IdxError::Kind::io, "cannot write " + path);
  put_be32(out, kIdxImageMagic);
  put_be32(out, images.count);
  put_be32(out, images.rows);
  put_be32(out, images.cols);
  out.write(reinterpret_cast<const char*>(images.pixels.data()), static_cast<std::streamsize>(images.pixels.size()));
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError(IdxError::Kind::io, "cannot write " + path);
  put_be32(out, kIdxLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const IdxImages img = read_idx_images(images_path);
  const auto labels = read_idx_labels(labels_path);
  if (labels.size() != img.count)
    throw IdxError(IdxError::Kind::count_mismatch, images_path + " has " + std::to_string(img.count) + " images but " +
                                                       labels_path + " has " + std::to_string(labels.size()) +
                                                       " labels");
  Dataset ds;
  ds.rows = static_cast<int>(img.rows);
  ds.cols = static_cast<int>(img.cols);
  const Eigen::Index features = Eigen::Index(img.rows) * img.cols;
  ds.images.resize(features, img.count);
  const float scale = 1.0f / 255.0f;
  for (Eigen::Index i = 0; i < Eigen::Index(img.count); ++i)
    for (Eigen::Index p = 0; p < features; ++p) ds.images(p, i) = float(img.pixels[std::size_t(i * features + p)]) * scale;
  ds.labels.reserve(labels.size());
  for (auto l : labels) {
    if (l >= kNumClasses) throw IdxError(IdxError::Kind::bad_label, labels_path + ": label " + std::to_string(l) + " >= 10");
    ds.labels.push_back(l);
  }
  return ds;
}

std::vector<std::vector<int>> batches(std::size_t count, int batch_size, std::uint64_t seed, bool shuffle) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<int> order(count);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    auto rng = rng_stream(seed, "shuffle");
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < count; i += std::size_t(batch_size))
    out.emplace_back(order.begin() + std::ptrdiff_t(i), order.begin() + std::ptrdiff_t(std::min(count, i + batch_size)));
  return out;
}

Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed, bool stratified) {
  if (n > ds.size())
    throw ConfigError("subset: requested " + std::to_string(n) + " samples from a dataset of " + std::to_string(ds.size()));
  auto rng = rng_stream(seed, "subset");
  std::vector<int> chosen;
  if (!stratified) {
    std::vector<int> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    chosen.assign(order.begin(), order.begin() + std::ptrdiff_t(n));
  } else {
    std::vector<std::vector<int>> by_class(kNumClasses);
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[std::size_t(ds.labels[i])].push_back(int(i));
    // Largest-remainder quotas: each class gets floor or ceil of its exact share.
    std::vector<std::size_t> quota(kNumClasses);
    std::vector<std::pair<double, int>> remainder;
    std::size_t assigned = 0;
    for (int c = 0; c < kNumClasses; ++c) {
      const double exact = double(n) * double(by_class[c].size()) / double(ds.size());
      quota[c] = std::size_t(exact);
      assigned += quota[c];
      remainder.emplace_back(exact - double(quota[c]), c);
    }
    std::stable_sort(remainder.begin(), remainder.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++quota[std::size_t(remainder[k].second)];
    for (int c = 0; c < kNumClasses; ++c) {
      auto& members = by_class[std::size_t(c)];
      std::shuffle(members.begin(), members.end(), rng);
      chosen.insert(chosen.end(), members.begin(), members.begin() + std::ptrdiff_t(quota[std::size_t(c)]));
    }
  }
  std::sort(chosen.begin(), chosen.end());
  Dataset out;
  out.rows = ds.rows;
  out.cols = ds.cols;
  out.images.resize(ds.images.rows(), Eigen::Index(chosen.size()));
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    out.images.col(Eigen::Index(i)) = ds.images.col(chosen[i]);
    out.labels.push_back(ds.labels[std::size_t(chosen[i])]);
  }
  return out;
}

}  // namespace eqprop
