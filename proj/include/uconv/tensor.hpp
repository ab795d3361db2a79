#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "uconv/error.hpp"

namespace uconv {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

// Dense row-major array with shared storage. Treated as an immutable value
// once handed to an operation; in-place mutation is reserved for parameter
// initialization and optimizer updates, which hold exclusive access.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    numel_ = shape_numel(shape_);
    data_ = std::shared_ptr<T[]>(new T[numel_]());
  }

  Tensor(Shape shape, std::vector<T> values) : Tensor(std::move(shape)) {
    if (static_cast<int64_t>(values.size()) != numel_) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape_));
    }
    std::copy(values.begin(), values.end(), data_.get());
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel_; ++i) t.data_[i] = value;
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  int64_t numel() const { return numel_; }
  bool defined() const { return static_cast<bool>(data_); }

  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }

  T& operator[](int64_t i) { return data_[i]; }
  const T& operator[](int64_t i) const { return data_[i]; }

  T& at(int64_t i, int64_t j) { return data_[i * shape_[1] + j]; }
  const T& at(int64_t i, int64_t j) const { return data_[i * shape_[1] + j]; }
  T& at(int64_t i, int64_t j, int64_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(int64_t i, int64_t j, int64_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Shares storage; only the shape changes.
  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel_) {
      throw ShapeError("reshape " + shape_str(shape_) + " -> " +
                       shape_str(new_shape) + " changes element count");
    }
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.numel_ = numel_;
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t(shape_);
    std::copy(data_.get(), data_.get() + numel_, t.data_.get());
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(shape_);
    for (int64_t i = 0; i < numel_; ++i) t[i] = static_cast<U>(data_[i]);
    return t;
  }

  void fill(T value) {
    for (int64_t i = 0; i < numel_; ++i) data_[i] = value;
  }

  bool all_finite() const {
    for (int64_t i = 0; i < numel_; ++i) {
      if (!std::isfinite(static_cast<double>(data_[i]))) return false;
    }
    return true;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor rank must be at least 1");
    for (int64_t e : shape_) {
      if (e <= 0) {
        throw ShapeError("tensor extents must be positive, got " +
                         shape_str(shape_));
      }
    }
  }

  Shape shape_;
  int64_t numel_ = 0;
  std::shared_ptr<T[]> data_;
};

}  // namespace uconv
