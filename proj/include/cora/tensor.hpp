#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "cora/errors.hpp"

namespace cora {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

/// N-order dense tensor of doubles stored row-major.
class DenseTensor {
 public:
  DenseTensor() = default;
  explicit DenseTensor(Shape shape);
  DenseTensor(Shape shape, std::vector<double> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t order() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t c, std::size_t u, std::size_t v) {
    return data_[(c * shape_[1] + u) * shape_[2] + v];
  }
  double at(std::size_t c, std::size_t u, std::size_t v) const {
    return data_[(c * shape_[1] + u) * shape_[2] + v];
  }
  double& at(std::size_t i, std::size_t c, std::size_t u, std::size_t v) {
    return data_[((i * shape_[1] + c) * shape_[2] + u) * shape_[3] + v];
  }
  double at(std::size_t i, std::size_t c, std::size_t u, std::size_t v) const {
    return data_[((i * shape_[1] + c) * shape_[2] + u) * shape_[3] + v];
  }

  bool all_finite() const noexcept;
  DenseTensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  Matrix transposed() const;
  bool all_finite() const noexcept;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
double frobenius_norm(std::span<const double> values);

/// Stride and zero padding of a 2-D convolution, per spatial axis.
struct ConvGeometry {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

/// Output extent of a sliding window: floor((extent + 2*pad - kernel) / stride) + 1.
std::size_t conv_out_extent(std::size_t extent, std::size_t kernel, std::size_t stride,
                            std::size_t pad);

// Mode-1 matricization of an m x n x k1 x k2 tensor into m x (n*k1*k2).
Matrix matricize_mode1(const DenseTensor& t);

// Inverse of matricize_mode1; fold_shape is (n, k1, k2).
DenseTensor tensorize_mode1(const Matrix& m, const Shape& fold_shape);

/// Sliding-window unfolding of an n x w x h input into (n*k1*k2) x w' x h'.
/// Row index c*k1*k2 + u*k2 + v holds kernel tap (u, v) of channel c, matching
/// the column order of matricize_mode1.
DenseTensor unfold_input(const DenseTensor& x, std::size_t k1, std::size_t k2,
                         const ConvGeometry& geometry);

/// Cross-correlation of x (n x w x h) with w (m x n x k1 x k2), computed as the
/// mode-1 product of the unfolded input with the matricized kernel.
DenseTensor conv2d(const DenseTensor& weight, const DenseTensor& x, const ConvGeometry& geometry);

std::vector<double> hadamard(std::span<const double> a, std::span<const double> b);

}  // namespace cora
