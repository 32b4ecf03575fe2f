#pragma once

// Image side of the encoders: the binary feature store for precomputed
// flat/spatial embeddings and the shared projection into the fusion dim.

#include <atomic>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmcqa/tape.hpp"
#include "mmcqa/tensor.hpp"

namespace mmcqa {

struct ImageFeatures {
  std::uint64_t id = 0;
  std::vector<float> flat;     // [D_img], mean of spatial rows
  std::vector<float> spatial;  // [m * D_img], row-major
  std::size_t regions = 0;
  std::size_t dim = 0;
};

// Binary store: magic "CQAF", version u32=1, count u32, m u32 (1 = flat
// only), D_img u32, then per record id u64 + m*D_img little-endian f32.
class FeatureStore {
 public:
  FeatureStore() = default;
  FeatureStore(FeatureStore&& other) noexcept
      : ids_(std::move(other.ids_)),
        index_(std::move(other.index_)),
        data_(std::move(other.data_)),
        regions_(other.regions_),
        dim_(other.dim_),
        reads_(other.reads_.load()) {}
  FeatureStore& operator=(FeatureStore&& other) noexcept {
    ids_ = std::move(other.ids_);
    index_ = std::move(other.index_);
    data_ = std::move(other.data_);
    regions_ = other.regions_;
    dim_ = other.dim_;
    reads_.store(other.reads_.load());
    return *this;
  }

  static FeatureStore load(const std::string& path);

  std::size_t size() const { return ids_.size(); }
  std::size_t regions() const { return regions_; }
  std::size_t dim() const { return dim_; }
  bool has(std::uint64_t id) const { return index_.count(id) != 0; }

  // Throws on a missing id. Counts every access so tests can prove a
  // text-only run never touches image data.
  ImageFeatures get(std::uint64_t id) const;

  std::uint64_t read_count() const { return reads_.load(); }

 private:
  std::vector<std::uint64_t> ids_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::vector<float> data_;  // size * m * D_img
  std::size_t regions_ = 0;
  std::size_t dim_ = 0;
  mutable std::atomic<std::uint64_t> reads_{0};
};

// Records must share one spatial size m*D_img; ids must be unique.
void write_feature_file(const std::string& path, std::size_t regions, std::size_t dim,
                        const std::vector<std::pair<std::uint64_t, std::vector<float>>>& records);

// tanh(rows * W + b) rowwise: projects [n, D_img] regions (or flat vectors
// batched as rows) into the fusion dim. W is [D_img, d], b is [d].
template <typename T>
ValueId project_image_rows(Tape<T>& tape, ValueId rows, ValueId w, ValueId b) {
  return tape.tanh_op(tape.add_rows(tape.matmul(rows, w), b));
}

}  // namespace mmcqa
