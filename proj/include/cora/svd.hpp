#pragma once

#include <vector>

#include "cora/tensor.hpp"

namespace cora {

/// Thin singular value decomposition M = U diag(S) V^T of an m x q matrix.
/// U is m x p, V is q x p with p = min(m, q); S is sorted descending.
struct SvdTriple {
  Matrix u;
  std::vector<double> s;
  Matrix v;
};

/// One-sided Jacobi SVD. Each left singular vector is signed so that its
/// largest-magnitude component is positive, which makes the result a pure
/// function of the input. Throws Errc::numeric on non-finite input.
SvdTriple svd(const Matrix& m);

}  // namespace cora
