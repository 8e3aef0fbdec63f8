#include "cora/residual_adapter.hpp"

#include <cmath>
#include <string>

#include "cora/kernels.hpp"

namespace cora {
namespace {

void check_cutoff(double cutoff, int order) {
  if (!(cutoff > 0.0) || !std::isfinite(cutoff))
    throw Error(Errc::invalid_argument, "Butterworth cut-off rank must be positive");
  if (order < 1) throw Error(Errc::invalid_argument, "Butterworth order must be >= 1");
}

}  // namespace

ResidualFactorization factorize_residual(const DenseTensor& dw, std::size_t layer,
                                         const ConvGeometry& geometry) {
  if (dw.order() != 4) throw Error(Errc::order_mismatch, "residual must be m x n x k1 x k2");
  SvdTriple t = svd(matricize_mode1(dw));
  return ResidualFactorization{layer,
                               std::move(t.u),
                               std::move(t.s),
                               std::move(t.v),
                               {dw.dim(1), dw.dim(2), dw.dim(3)},
                               geometry};
}

LowRankAdapter build_adapter_weighted(const ResidualFactorization& f, std::span<const double> g) {
  const std::size_t rank = g.size();
  const std::size_t m = f.out_channels();
  const std::size_t taps = f.v.rows();
  if (rank == 0 || rank > f.max_rank())
    throw Error(Errc::out_of_range, "adapter width outside [1, R]");

  DenseTensor a({rank, f.fold_shape[0], f.fold_shape[1], f.fold_shape[2]});
  for (std::size_t i = 0; i < rank; ++i)
    for (std::size_t j = 0; j < taps; ++j) a[i * taps + j] = g[i] * f.v(j, i);

  DenseTensor b({m, rank, 1, 1});
  for (std::size_t o = 0; o < m; ++o)
    for (std::size_t i = 0; i < rank; ++i) b[o * rank + i] = f.u(o, i) * g[i];

  return LowRankAdapter{std::move(a), std::move(b), rank, f.geometry};
}

LowRankAdapter build_adapter_hard(const ResidualFactorization& f, std::size_t rank) {
  if (rank < 1 || rank > f.max_rank())
    throw Error(Errc::out_of_range, "rank " + std::to_string(rank) + " outside [1, " +
                                        std::to_string(f.max_rank()) + "]");
  std::vector<double> g(rank);
  for (std::size_t i = 0; i < rank; ++i) g[i] = std::sqrt(f.s[i]);
  return build_adapter_weighted(f, g);
}

std::vector<double> butterworth_mask(double cutoff, std::size_t max_rank, int order) {
  check_cutoff(cutoff, order);
  std::vector<double> phi(max_rank);
  for (std::size_t i = 0; i < max_rank; ++i) {
    const double t = std::pow(static_cast<double>(i + 1) / cutoff, 2 * order);
    phi[i] = 1.0 / std::sqrt(1.0 + t);
  }
  return phi;
}

std::vector<double> mask_gradient(double cutoff, std::size_t max_rank, int order) {
  check_cutoff(cutoff, order);
  std::vector<double> grad(max_rank);
  for (std::size_t i = 0; i < max_rank; ++i) {
    const double t = std::pow(static_cast<double>(i + 1) / cutoff, 2 * order);
    // Written as t / (1+t)^(3/2) via two bounded factors so large t stays finite.
    const double one_t = 1.0 + t;
    grad[i] = (order / cutoff) * (t / one_t) / std::sqrt(one_t);
  }
  return grad;
}

std::vector<double> soft_factor_weights(const ResidualFactorization& f, double cutoff, int order) {
  const std::vector<double> phi = butterworth_mask(cutoff, f.max_rank(), order);
  std::vector<double> root(f.max_rank());
  for (std::size_t i = 0; i < root.size(); ++i) root[i] = std::sqrt(f.s[i]);
  return hadamard(phi, root);
}

LowRankAdapter build_adapter_soft(const ResidualFactorization& f, double cutoff, int order) {
  return build_adapter_weighted(f, soft_factor_weights(f, cutoff, order));
}

Matrix compose(const LowRankAdapter& adapter) {
  const Matrix b = matricize_mode1(adapter.b);
  const Matrix a = matricize_mode1(adapter.a);
  return matmul(b, a);
}

}  // namespace cora
