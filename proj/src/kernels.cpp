#include "cora/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <vector>

namespace cora::kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 15;

bool go_parallel(std::size_t work) { return work >= kParallelWork && !omp_in_parallel(); }

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (go_parallel(m * n * k))
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (go_parallel(m * n * k))
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p * m + i];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (go_parallel(m * n * k))
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

void im2col(const double* x, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k1, std::size_t k2, const ConvGeometry& g, double* cols) {
  const std::size_t oh = conv_out_extent(height, k1, g.stride_h, g.pad_h);
  const std::size_t ow = conv_out_extent(width, k2, g.stride_w, g.pad_w);
  const std::size_t plane = oh * ow;
  const auto rows = static_cast<std::ptrdiff_t>(channels * k1 * k2);
#pragma omp parallel for schedule(static) if (go_parallel(channels * k1 * k2 * plane * 4))
  for (std::ptrdiff_t row = 0; row < rows; ++row) {
    const std::size_t c = static_cast<std::size_t>(row) / (k1 * k2);
    const std::size_t u = (static_cast<std::size_t>(row) / k2) % k1;
    const std::size_t v = static_cast<std::size_t>(row) % k2;
    double* out = cols + row * plane;
    const double* xc = x + c * height * width;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + u) -
                      static_cast<std::ptrdiff_t>(g.pad_h);
      double* orow = out + oy * ow;
      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
        std::fill(orow, orow + ow, 0.0);
        continue;
      }
      const double* xrow = xc + iy * width;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + v) -
                        static_cast<std::ptrdiff_t>(g.pad_w);
        orow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) ? 0.0 : xrow[ix];
      }
    }
  }
}

void col2im_add(const double* cols, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t k1, std::size_t k2, const ConvGeometry& g, double* x) {
  const std::size_t oh = conv_out_extent(height, k1, g.stride_h, g.pad_h);
  const std::size_t ow = conv_out_extent(width, k2, g.stride_w, g.pad_w);
  const std::size_t plane = oh * ow;
  // Parallel over channels: taps of one channel only ever write that channel.
  const auto nch = static_cast<std::ptrdiff_t>(channels);
#pragma omp parallel for schedule(static) if (go_parallel(channels * k1 * k2 * plane * 4))
  for (std::ptrdiff_t c = 0; c < nch; ++c) {
    double* xc = x + c * height * width;
    for (std::size_t u = 0; u < k1; ++u) {
      for (std::size_t v = 0; v < k2; ++v) {
        const double* in = cols + ((c * k1 + u) * k2 + v) * plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + u) -
                          static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + v) -
                            static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
            xc[iy * width + ix] += in[oy * ow + ox];
          }
        }
      }
    }
  }
}

void conv2d(const double* w, std::size_t m, std::size_t n, std::size_t k1, std::size_t k2,
            const double* x, std::size_t height, std::size_t width, const ConvGeometry& g,
            double* y) {
  const std::size_t plane = conv_out_extent(height, k1, g.stride_h, g.pad_h) *
                            conv_out_extent(width, k2, g.stride_w, g.pad_w);
  const std::size_t taps = n * k1 * k2;
  std::vector<double> cols(taps * plane);
  im2col(x, n, height, width, k1, k2, g, cols.data());
  gemm(m, plane, taps, w, cols.data(), y);
}

void set_num_threads(int threads) {
  if (threads <= 0) threads = omp_get_num_procs();
  omp_set_num_threads(threads);
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace cora::kernels
