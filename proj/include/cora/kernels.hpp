#pragma once

// Low-level dense kernels. The functions in cora::kernels are the OpenMP
// versions used by the library; cora::kernels::reference holds the plain
// serial loops they are tested and benchmarked against.

#include <cstddef>

#include "cora/tensor.hpp"

namespace cora::kernels {

// C[m x n] = A[m x k] * B[k x n]   (C += ... when accumulate)
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate = false);

// C[m x n] = A[k x m]^T * B[k x n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate = false);

// C[m x n] = A[m x k] * B[n x k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate = false);

// im2col: x is channels x height x width, cols is (channels*k1*k2) x (out_h*out_w).
void im2col(const double* x, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k1, std::size_t k2, const ConvGeometry& g, double* cols);

// Adjoint of im2col: scatters cols back into x, accumulating overlapping taps.
void col2im_add(const double* cols, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t k1, std::size_t k2, const ConvGeometry& g, double* x);

// y[m x out_h x out_w] = conv(w[m x n x k1 x k2], x[n x h x w]); im2col + gemm.
void conv2d(const double* w, std::size_t m, std::size_t n, std::size_t k1, std::size_t k2,
            const double* x, std::size_t height, std::size_t width, const ConvGeometry& g,
            double* y);

/// Thread count used by parallel regions; <= 0 restores the OpenMP default.
void set_num_threads(int threads);
int max_threads();

namespace reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

// Direct six-loop cross-correlation with zero padding.
void conv2d(const double* w, std::size_t m, std::size_t n, std::size_t k1, std::size_t k2,
            const double* x, std::size_t height, std::size_t width, const ConvGeometry& g,
            double* y);

}  // namespace reference
}  // namespace cora::kernels
