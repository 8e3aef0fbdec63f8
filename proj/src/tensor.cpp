#include "cora/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "cora/kernels.hpp"

namespace cora {

const char* to_string(Errc code) noexcept {
  switch (code) {
    case Errc::order_mismatch: return "order mismatch";
    case Errc::shape_mismatch: return "shape mismatch";
    case Errc::geometry: return "geometry error";
    case Errc::numeric: return "numeric error";
    case Errc::invalid_argument: return "invalid argument";
    case Errc::out_of_range: return "out of range";
    case Errc::io: return "I/O error";
    case Errc::bad_magic: return "bad magic";
    case Errc::version_mismatch: return "version mismatch";
    case Errc::shape_composition: return "shape composition error";
    case Errc::truncated: return "truncated file";
    case Errc::integrity: return "integrity error";
    case Errc::format: return "format error";
  }
  return "error";
}

namespace {

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

DenseTensor::DenseTensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {
  for (auto d : shape_)
    if (d == 0) throw Error(Errc::shape_mismatch, "zero-sized dimension in " + shape_string(shape_));
}

DenseTensor::DenseTensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw Error(Errc::shape_mismatch, "zero-sized dimension in " + shape_string(shape_));
  if (data_.size() != shape_size(shape_))
    throw Error(Errc::shape_mismatch, "data length " + std::to_string(data_.size()) +
                                          " does not match shape " + shape_string(shape_));
}

bool DenseTensor::all_finite() const noexcept {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

DenseTensor DenseTensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw Error(Errc::shape_mismatch,
                "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  return DenseTensor(std::move(shape), data_);
}

Matrix::Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols)
    throw Error(Errc::shape_mismatch, "matrix data length does not match rows*cols");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

bool Matrix::all_finite() const noexcept {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw Error(Errc::shape_mismatch, "matmul inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  kernels::gemm(a.rows(), b.cols(), a.cols(), a.data().data(), b.data().data(), c.data().data());
  return c;
}

double frobenius_norm(std::span<const double> values) {
  double sum = 0.0;
  for (double v : values) sum += v * v;
  return std::sqrt(sum);
}

std::size_t conv_out_extent(std::size_t extent, std::size_t kernel, std::size_t stride,
                            std::size_t pad) {
  if (stride == 0) throw Error(Errc::geometry, "stride must be positive");
  if (extent + 2 * pad < kernel)
    throw Error(Errc::geometry, "kernel extent " + std::to_string(kernel) +
                                    " exceeds padded input extent " +
                                    std::to_string(extent + 2 * pad));
  return (extent + 2 * pad - kernel) / stride + 1;
}

Matrix matricize_mode1(const DenseTensor& t) {
  if (t.order() != 4)
    throw Error(Errc::order_mismatch,
                "mode-1 matricization expects a 4-order tensor, got order " +
                    std::to_string(t.order()));
  const std::size_t rows = t.dim(0);
  // Row-major storage already lays out (c, u, v) as c*k1*k2 + u*k2 + v.
  return Matrix(rows, t.size() / rows, t.values());
}

DenseTensor tensorize_mode1(const Matrix& m, const Shape& fold_shape) {
  if (fold_shape.size() != 3)
    throw Error(Errc::shape_mismatch, "fold shape must be (n, k1, k2)");
  if (shape_size(fold_shape) != m.cols())
    throw Error(Errc::shape_mismatch, "fold shape " + shape_string(fold_shape) +
                                          " incompatible with " + std::to_string(m.cols()) +
                                          " columns");
  std::vector<double> data(m.data().begin(), m.data().end());
  return DenseTensor({m.rows(), fold_shape[0], fold_shape[1], fold_shape[2]}, std::move(data));
}

DenseTensor unfold_input(const DenseTensor& x, std::size_t k1, std::size_t k2,
                         const ConvGeometry& geometry) {
  if (x.order() != 3) throw Error(Errc::order_mismatch, "unfold expects an n x w x h input");
  const std::size_t oh = conv_out_extent(x.dim(1), k1, geometry.stride_h, geometry.pad_h);
  const std::size_t ow = conv_out_extent(x.dim(2), k2, geometry.stride_w, geometry.pad_w);
  DenseTensor out({x.dim(0) * k1 * k2, oh, ow});
  kernels::im2col(x.data().data(), x.dim(0), x.dim(1), x.dim(2), k1, k2, geometry,
                  out.data().data());
  return out;
}

DenseTensor conv2d(const DenseTensor& weight, const DenseTensor& x, const ConvGeometry& geometry) {
  if (weight.order() != 4) throw Error(Errc::order_mismatch, "conv2d weight must be 4-order");
  if (x.order() != 3) throw Error(Errc::order_mismatch, "conv2d input must be 3-order");
  if (weight.dim(1) != x.dim(0))
    throw Error(Errc::shape_mismatch, "conv2d expects " + std::to_string(weight.dim(1)) +
                                          " input channels, got " + std::to_string(x.dim(0)));
  const DenseTensor cols = unfold_input(x, weight.dim(2), weight.dim(3), geometry);
  const Matrix kernel = matricize_mode1(weight);
  DenseTensor out({weight.dim(0), cols.dim(1), cols.dim(2)});
  kernels::gemm(kernel.rows(), cols.dim(1) * cols.dim(2), kernel.cols(), kernel.data().data(),
                cols.data().data(), out.data().data());
  return out;
}

std::vector<double> hadamard(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw Error(Errc::shape_mismatch, "hadamard operands differ in length");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

}  // namespace cora
