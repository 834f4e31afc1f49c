#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gdist/error.hpp"

namespace gdist {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

/// Dense row-major tensor of doubles. Value type; copies are deep.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  Shape shape_;
  std::vector<double> data_;
};

inline void expect_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw ShapeError(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                     shape_str(t.shape()));
}

inline void expect_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
}

/// Rows [begin, begin+count) of the leading dimension.
inline Tensor slice_leading(const Tensor& t, std::size_t begin, std::size_t count) {
  Shape s = t.shape();
  const std::size_t inner = t.size() / s.at(0);
  s[0] = count;
  std::vector<double> d(t.storage().begin() + static_cast<std::ptrdiff_t>(begin * inner),
                        t.storage().begin() + static_cast<std::ptrdiff_t>((begin + count) * inner));
  return Tensor(std::move(s), std::move(d));
}

/// Stack equally shaped tensors along a new leading dimension.
inline Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack of zero tensors");
  Shape s = parts[0].shape();
  std::vector<double> d;
  d.reserve(parts.size() * parts[0].size());
  for (const auto& p : parts) {
    if (p.shape() != s) throw ShapeError("stack: mismatched shapes " + shape_str(s) + " vs " + shape_str(p.shape()));
    d.insert(d.end(), p.storage().begin(), p.storage().end());
  }
  s.insert(s.begin(), parts.size());
  return Tensor(std::move(s), std::move(d));
}

}  // namespace gdist
