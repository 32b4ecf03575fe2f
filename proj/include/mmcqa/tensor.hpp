#pragma once

// Dense row-major tensor. Rank 1 and 2 cover everything the models need;
// the batch dimension is folded into rows.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmcqa/rng.hpp"

namespace mmcqa {

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<T> data, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
    if (numel_of(shape_) != data_.size()) {
      throw std::invalid_argument("Tensor: shape/data size mismatch");
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(std::vector<std::size_t> shape, T value, bool requires_grad = false) {
    std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<T> data, bool requires_grad = false) {
    std::size_t n = data.size();
    return Tensor({n}, std::move(data), requires_grad);
  }

  // Uniform in [-range, range].
  static Tensor random_uniform(std::vector<std::size_t> shape, T range, Rng& rng,
                               bool requires_grad = false) {
    std::size_t n = numel_of(shape);
    std::vector<T> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      data[i] = static_cast<T>(rng.uniform(-double(range), double(range)));
    }
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor random_normal(std::vector<std::size_t> shape, T mean, T stddev, Rng& rng,
                              bool requires_grad = false) {
    std::size_t n = numel_of(shape);
    std::vector<T> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      data[i] = static_cast<T>(rng.normal(double(mean), double(stddev)));
    }
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  // Xavier-uniform for a weight of shape [out, in].
  static Tensor glorot(std::size_t out, std::size_t in, Rng& rng, bool requires_grad = true) {
    T range = static_cast<T>(std::sqrt(6.0 / double(out + in)));
    return random_uniform({out, in}, range, rng, requires_grad);
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const {
    if (rank() != 2) throw std::logic_error("Tensor::cols: rank-2 only");
    return shape_[1];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  T at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(double(v))) return false;
    }
    return true;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out), requires_grad_);
  }

  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    if (shape.empty()) return 0;
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw std::invalid_argument("Tensor: zero dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
  bool requires_grad_ = false;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace mmcqa
