#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hilcbm/error.hpp"

namespace hilcbm {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { float32 = 1, float64 = 2 };

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense row-major array. Values are always held as double; a float32 tensor
/// keeps its values rounded to single precision so storage is value-exact.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, DType dtype = DType::float64)
      : shape_(std::move(shape)), dtype_(dtype), data_(element_count(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::float64)
      : shape_(std::move(shape)), dtype_(dtype), data_(std::move(data)) {
    require(element_count(shape_) == data_.size(), ErrorKind::shape_mismatch,
            "shape " + shape_string(shape_) + " does not hold " + std::to_string(data_.size()) +
                " values");
    if (dtype_ == DType::float32) round_to_dtype();
  }

  static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor(Shape{rows, cols}); }
  static Tensor vector(std::size_t n) { return Tensor(Shape{n}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  DType dtype() const noexcept { return dtype_; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Leading-axis slice: row `i` of a matrix, sample `i` of a batch.
  std::span<double> row(std::size_t i) {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<double>(data_).subspan(i * stride, stride);
  }
  std::span<const double> row(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<const double>(data_).subspan(i * stride, stride);
  }

  void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor as(DType dtype) const { return Tensor(shape_, data_, dtype); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dtype_ == b.dtype_ && a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void round_to_dtype() {
    for (double& v : data_) v = static_cast<double>(static_cast<float>(v));
  }

  Shape shape_;
  DType dtype_ = DType::float64;
  std::vector<double> data_;
};

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  require(t.rank() == rank, ErrorKind::shape_mismatch,
          std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
              shape_string(t.shape()));
}

/// Rows of `a` gathered in the order of `indices`.
inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  Shape shape = a.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  const std::size_t stride = shape[0] ? out.size() / shape[0] : 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = a.row(indices[i]);
    std::copy(src.begin(), src.end(), out.values().begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

/// Columns of matrix `a` selected in the order of `indices`.
inline Tensor gather_columns(const Tensor& a, std::span<const std::size_t> indices) {
  require_rank(a, 2, "gather_columns input");
  Tensor out = Tensor::matrix(a.dim(0), indices.size());
  for (std::size_t r = 0; r < a.dim(0); ++r)
    for (std::size_t j = 0; j < indices.size(); ++j) out(r, j) = a(r, indices[j]);
  return out;
}

/// Spatial mean over H and W. Accepts [N x H x W x D] or already-pooled [N x D].
inline Tensor pool_features(const Tensor& features) {
  if (features.rank() == 2) return features;
  require_rank(features, 4, "features");
  const std::size_t n = features.dim(0), hw = features.dim(1) * features.dim(2),
                    d = features.dim(3);
  Tensor pooled = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto sample = features.row(i);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < d; ++c) pooled(i, c) += sample[p * d + c];
    for (std::size_t c = 0; c < d; ++c) pooled(i, c) /= static_cast<double>(hw);
  }
  return pooled;
}

/// out[N x R] = x[N x D] * w[R x D]^T
inline Tensor matmul_transposed(const Tensor& x, const Tensor& w) {
  require_rank(x, 2, "left operand");
  require_rank(w, 2, "right operand");
  require(x.dim(1) == w.dim(1), ErrorKind::shape_mismatch,
          "inner dimensions differ: " + shape_string(x.shape()) + " vs " + shape_string(w.shape()));
  Tensor out = Tensor::matrix(x.dim(0), w.dim(0));
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t r = 0; r < w.dim(0); ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < x.dim(1); ++c) acc += x(i, c) * w(r, c);
      out(i, r) = acc;
    }
  return out;
}

}  // namespace hilcbm
