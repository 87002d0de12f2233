#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nf {

/// Raised when operand extents are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);

inline int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1},
                         [](int64_t a, int64_t b) { return a * b; });
}

/// Dense row-major tensor. Four-dimensional image data is laid out
/// batch-height-width-channels.
///
/// A tensor may be "meta": it carries a shape but no storage. Every op
/// propagates meta-ness, which lets full-size networks run shape inference
/// and parameter accounting without allocating activations.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor meta(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.validate_shape();
    t.meta_ = true;
    return t;
  }

  static Tensor zeros_like(const Tensor& other) {
    return other.meta_ ? meta(other.shape_) : Tensor(other.shape_);
  }

  const Shape& shape() const { return shape_; }
  int64_t dim(size_t axis) const { return shape_.at(axis); }
  size_t rank() const { return shape_.size(); }
  int64_t size() const { return shape_numel(shape_); }
  bool is_meta() const { return meta_; }
  bool defined() const { return !shape_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NHWC element access.
  T& at(int64_t n, int64_t h, int64_t w, int64_t c) {
    return data_[static_cast<size_t>(((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c)];
  }
  const T& at(int64_t n, int64_t h, int64_t w, int64_t c) const {
    return data_[static_cast<size_t>(((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c)];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    if (meta_) return Tensor<U>::meta(shape_);
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && meta_ == other.meta_ && data_ == other.data_;
  }

 private:
  void validate_shape() const {
    for (int64_t e : shape_) {
      if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
  bool meta_ = false;
};

/// Rows [begin, end) of the leading axis.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, int64_t begin, int64_t end) {
  if (t.rank() == 0 || begin < 0 || end > t.dim(0) || begin >= end) {
    throw ShapeError("cannot slice rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                     shape_str(t.shape()));
  }
  Shape shape = t.shape();
  const int64_t row = t.size() / shape[0];
  shape[0] = end - begin;
  return Tensor<T>(shape, std::vector<T>(t.ptr() + begin * row, t.ptr() + end * row));
}

}  // namespace nf
