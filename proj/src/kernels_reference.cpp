#include "cora/kernels.hpp"

namespace cora::kernels::reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

void conv2d(const double* w, std::size_t m, std::size_t n, std::size_t k1, std::size_t k2,
            const double* x, std::size_t height, std::size_t width, const ConvGeometry& g,
            double* y) {
  const std::size_t oh = conv_out_extent(height, k1, g.stride_h, g.pad_h);
  const std::size_t ow = conv_out_extent(width, k2, g.stride_w, g.pad_w);
  for (std::size_t o = 0; o < m; ++o) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          for (std::size_t u = 0; u < k1; ++u) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + u) -
                            static_cast<std::ptrdiff_t>(g.pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
            for (std::size_t v = 0; v < k2; ++v) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + v) -
                              static_cast<std::ptrdiff_t>(g.pad_w);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
              acc += w[((o * n + c) * k1 + u) * k2 + v] * x[(c * height + iy) * width + ix];
            }
          }
        }
        y[(o * oh + oy) * ow + ox] = acc;
      }
    }
  }
}

}  // namespace cora::kernels::reference
