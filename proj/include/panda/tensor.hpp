#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "panda/error.hpp"

namespace panda {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage, so vectorised reductions split identically on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using AlignedVector = std::vector<double, AlignedAllocator<double>>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array of doubles. Every extent is positive and the data
/// length always equals the product of the extents.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_volume(shape_), fill);
  }

  Tensor(Shape shape, AlignedVector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_volume(shape_))
      throw InvalidArgument("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                            shape_string(shape_));
  }

  Tensor(std::initializer_list<std::size_t> shape, std::initializer_list<double> data)
      : Tensor(Shape(shape), AlignedVector(data)) {}

  Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), AlignedVector(data.begin(), data.end())) {}

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }
  AlignedVector& values() { return data_; }
  const AlignedVector& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t c, std::size_t y, std::size_t x) { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Same data under a new shape of equal volume.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Bit-exact equality of shape and values.
  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  void check_shape() const {
    for (std::size_t i = 0; i < shape_.size(); ++i)
      if (shape_[i] == 0) throw InvalidArgument("tensor extent " + std::to_string(i) + " is zero");
  }

  Shape shape_;
  AlignedVector data_;
};

/// Row `i` of a tensor with leading batch dimension, as its own tensor.
inline Tensor batch_row(const Tensor& batch, std::size_t i) {
  Shape inner(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_volume(inner);
  AlignedVector values(batch.raw() + i * n, batch.raw() + (i + 1) * n);
  return Tensor(std::move(inner), std::move(values));
}

/// Stacks equally shaped tensors along a new leading dimension.
inline Tensor stack(std::span<const Tensor> rows) {
  if (rows.empty()) throw InvalidArgument("stack of zero tensors");
  Shape shape{rows.size()};
  shape.insert(shape.end(), rows[0].shape().begin(), rows[0].shape().end());
  AlignedVector values;
  values.reserve(shape_volume(shape));
  for (const auto& r : rows) {
    if (r.shape() != rows[0].shape()) throw InvalidArgument("stack: mismatched shapes " + shape_string(r.shape()));
    values.insert(values.end(), r.values().begin(), r.values().end());
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace panda
