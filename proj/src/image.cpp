#include "mmcqa/image.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mmcqa {

namespace {

// Float payloads are written raw; the format is defined little-endian.
static_assert(std::endian::native == std::endian::little);

constexpr char kMagic[4] = {'C', 'Q', 'A', 'F'};
constexpr std::uint32_t kVersion = 1;

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t lo = read_u32(in);
  std::uint64_t hi = read_u32(in);
  return lo | (hi << 32);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  write_u32(out, static_cast<std::uint32_t>(v));
  write_u32(out, static_cast<std::uint32_t>(v >> 32));
}

}  // namespace

FeatureStore FeatureStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("feature store: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("feature store: bad magic in " + path);
  const std::uint32_t version = read_u32(in);
  if (version != kVersion)
    throw std::runtime_error("feature store: unsupported version " + std::to_string(version));
  const std::uint32_t count = read_u32(in);
  const std::uint32_t m = read_u32(in);
  const std::uint32_t d = read_u32(in);
  if (!in || m == 0 || d == 0) throw std::runtime_error("feature store: bad header");

  FeatureStore store;
  store.regions_ = m;
  store.dim_ = d;
  store.ids_.reserve(count);
  store.data_.resize(std::size_t(count) * m * d);
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::uint64_t id = read_u64(in);
    in.read(reinterpret_cast<char*>(store.data_.data() + std::size_t(r) * m * d),
            std::streamsize(sizeof(float)) * m * d);
    if (!in) throw std::runtime_error("feature store: truncated record " + std::to_string(r));
    if (store.index_.count(id))
      throw std::runtime_error("feature store: duplicate id " + std::to_string(id));
    store.index_[id] = r;
    store.ids_.push_back(id);
  }
  for (float v : store.data_) {
    if (!std::isfinite(v)) throw std::runtime_error("feature store: non-finite value");
  }
  return store;
}

ImageFeatures FeatureStore::get(std::uint64_t id) const {
  auto it = index_.find(id);
  if (it == index_.end())
    throw std::runtime_error("feature store: missing id " + std::to_string(id));
  reads_.fetch_add(1, std::memory_order_relaxed);
  ImageFeatures f;
  f.id = id;
  f.regions = regions_;
  f.dim = dim_;
  const float* base = data_.data() + it->second * regions_ * dim_;
  f.spatial.assign(base, base + regions_ * dim_);
  f.flat.assign(dim_, 0.f);
  for (std::size_t r = 0; r < regions_; ++r) {
    for (std::size_t j = 0; j < dim_; ++j) f.flat[j] += base[r * dim_ + j];
  }
  for (float& v : f.flat) v /= float(regions_);
  return f;
}

void write_feature_file(
    const std::string& path, std::size_t regions, std::size_t dim,
    const std::vector<std::pair<std::uint64_t, std::vector<float>>>& records) {
  if (regions == 0 || dim == 0)
    throw std::invalid_argument("feature store: regions and dim must be positive");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("feature store: cannot write " + path);
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(records.size()));
  write_u32(out, static_cast<std::uint32_t>(regions));
  write_u32(out, static_cast<std::uint32_t>(dim));
  for (const auto& [id, values] : records) {
    if (values.size() != regions * dim)
      throw std::invalid_argument("feature store: record size mismatch for id " +
                                  std::to_string(id));
    write_u64(out, id);
    out.write(reinterpret_cast<const char*>(values.data()),
              std::streamsize(sizeof(float)) * values.size());
  }
  if (!out) throw std::runtime_error("feature store: write failed for " + path);
}

}  // namespace mmcqa
