#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "unblur/errors.hpp"

namespace unblur {

// Dense row-major n-d array. Images are (C,H,W), batches (N,C,H,W),
// latent vectors (N,D).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), T(0));
  }

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != count(shape_))
      throw ShapeError("tensor data size does not match shape");
  }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 2-d (rows, cols)
  T& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  const T& at(int i, int j) const {
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }

  // 3-d (c, h, w)
  T& at(int c, int h, int w) {
    return data_[(static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  const T& at(int c, int h, int w) const {
    return data_[(static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }

  // 4-d (n, c, h, w)
  T& at(int n, int c, int h, int w) {
    return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) *
                     shape_[3] +
                 w];
  }
  const T& at(int n, int c, int h, int w) const {
    return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) *
                     shape_[3] +
                 w];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int> shape) const {
    if (count(shape) != numel()) throw ShapeError("reshape changes numel");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t = Tensor<U>(shape_);
    for (int64_t i = 0; i < numel(); ++i) t[i] = static_cast<U>(data_[i]);
    return t;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o)) throw ShapeError("operator+=: shape mismatch");
    for (int64_t i = 0; i < numel(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(T v) {
    for (auto& x : data_) x *= v;
    return *this;
  }

  bool all_finite() const {
    for (const auto& x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape_.size(); ++i)
      os << shape_[i] << (i + 1 < shape_.size() ? "," : "");
    os << ")";
    return os.str();
  }

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

namespace detail {

template <typename T>
Tensor<T> as_batch(const Tensor<T>& img) {
  if (img.ndim() == 4) return img;
  if (img.ndim() != 3) throw ShapeError("expected (C,H,W) or (N,C,H,W)");
  return img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
}

template <typename T>
Tensor<T> maybe_unbatch(Tensor<T> t, bool batched) {
  if (batched || t.ndim() != 4) return t;
  return t.reshaped({t.dim(1), t.dim(2), t.dim(3)});
}

}  // namespace detail

template <typename T>
double mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("mean_abs_diff: shape mismatch");
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return a.numel() ? s / static_cast<double>(a.numel()) : 0.0;
}

}  // namespace unblur
