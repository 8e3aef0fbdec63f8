#pragma once

#include <cstddef>
#include <vector>

#include "cora/svd.hpp"
#include "cora/tensor.hpp"

namespace cora {

/// SVD of the mode-1 matricized quantization residual of one conv layer,
/// kept together with what is needed to fold factors back into filters.
struct ResidualFactorization {
  std::size_t layer = 0;
  Matrix u;               // m x R
  std::vector<double> s;  // R, descending
  Matrix v;               // (n*k1*k2) x R
  Shape fold_shape;       // (n, k1, k2)
  ConvGeometry geometry;

  std::size_t max_rank() const noexcept { return s.size(); }
  std::size_t out_channels() const noexcept { return u.rows(); }
};

/// Residual operator B (*) A: A is an r x n x k1 x k2 conv applied with the host
/// layer's geometry, B an m x r x 1 x 1 conv applied with stride 1, no padding.
struct LowRankAdapter {
  DenseTensor a;
  DenseTensor b;
  std::size_t rank = 0;
  ConvGeometry geometry;
};

ResidualFactorization factorize_residual(const DenseTensor& dw, std::size_t layer = 0,
                                         const ConvGeometry& geometry = {});

/// Top-r truncation: A = fold(S_r^1/2 V^T), B = fold(U S_r^1/2).
LowRankAdapter build_adapter_hard(const ResidualFactorization& f, std::size_t rank);

/// Normalized Butterworth kernel: phi_r = 1 / sqrt(1 + (r / cutoff)^(2k)), r = 1..R.
std::vector<double> butterworth_mask(double cutoff, std::size_t max_rank, int order);

/// d phi_r / d cutoff for the same kernel; every entry is >= 0.
std::vector<double> mask_gradient(double cutoff, std::size_t max_rank, int order);

/// Full-width soft adapter: both factors carry phi (.) S^1/2, so the composed
/// operator has singular values phi^2 (.) S.
LowRankAdapter build_adapter_soft(const ResidualFactorization& f, double cutoff, int order);

/// Per-component factor weights g = phi (.) S^1/2 used by the soft adapter.
std::vector<double> soft_factor_weights(const ResidualFactorization& f, double cutoff, int order);

/// Builds A and B from explicit per-component weights g (length R): A row i is
/// g_i V[:, i]^T and B column i is U[:, i] g_i.
LowRankAdapter build_adapter_weighted(const ResidualFactorization& f, std::span<const double> g);

/// Matricized composition B_(1) A_(1), an m x (n*k1*k2) matrix.
Matrix compose(const LowRankAdapter& adapter);

}  // namespace cora
