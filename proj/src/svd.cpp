#include "cora/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cora {
namespace {

constexpr int kMaxSweeps = 80;
constexpr double kOrthoTol = 1e-15;
// Columns whose norm falls below this fraction of the largest are treated as
// numerically null; their directions are rebuilt by Gram-Schmidt completion.
constexpr double kNullFraction = 1e-13;

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void rotate(double* a, double* b, std::size_t n, double c, double s) {
  for (std::size_t i = 0; i < n; ++i) {
    const double ai = a[i];
    const double bi = b[i];
    a[i] = c * ai - s * bi;
    b[i] = s * ai + c * bi;
  }
}

// Column-major block of `count` columns, each of length `len`.
struct Columns {
  std::size_t len;
  std::size_t count;
  std::vector<double> data;
  double* col(std::size_t k) { return data.data() + k * len; }
  const double* col(std::size_t k) const { return data.data() + k * len; }
};

// Orthonormalizes the flagged columns of q against all others.
void complete_basis(Columns& q, const std::vector<bool>& valid_in) {
  std::vector<bool> valid = valid_in;
  std::size_t next_candidate = 0;
  std::vector<double> v(q.len);
  for (std::size_t k = 0; k < q.count; ++k) {
    if (valid[k]) continue;
    while (next_candidate < q.len) {
      std::fill(v.begin(), v.end(), 0.0);
      v[next_candidate++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < q.count; ++j) {
          if (!valid[j]) continue;
          const double proj = dot(q.col(j), v.data(), q.len);
          for (std::size_t i = 0; i < q.len; ++i) v[i] -= proj * q.col(j)[i];
        }
      }
      const double norm = std::sqrt(dot(v.data(), v.data(), q.len));
      if (norm > 1e-6) {
        for (std::size_t i = 0; i < q.len; ++i) q.col(k)[i] = v[i] / norm;
        valid[k] = true;
        break;
      }
    }
  }
}

}  // namespace

SvdTriple svd(const Matrix& m) {
  if (m.rows() == 0 || m.cols() == 0) throw Error(Errc::shape_mismatch, "svd of empty matrix");
  if (!m.all_finite()) throw Error(Errc::numeric, "svd input contains non-finite values");

  // Work on a tall matrix X (len >= count) so that count = min(rows, cols).
  const bool transpose = m.rows() < m.cols();
  const std::size_t len = transpose ? m.cols() : m.rows();
  const std::size_t count = transpose ? m.rows() : m.cols();

  Columns x{len, count, std::vector<double>(len * count)};
  for (std::size_t k = 0; k < count; ++k)
    for (std::size_t i = 0; i < len; ++i) x.col(k)[i] = transpose ? m(k, i) : m(i, k);

  Columns rot{count, count, std::vector<double>(count * count, 0.0)};
  for (std::size_t k = 0; k < count; ++k) rot.col(k)[k] = 1.0;

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < count; ++i) {
      for (std::size_t j = i + 1; j < count; ++j) {
        const double alpha = dot(x.col(i), x.col(i), len);
        const double beta = dot(x.col(j), x.col(j), len);
        const double gamma = dot(x.col(i), x.col(j), len);
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= kOrthoTol * std::sqrt(alpha * beta)) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(x.col(i), x.col(j), len, c, s);
        rotate(rot.col(i), rot.col(j), count, c, s);
        rotated = true;
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(count);
  for (std::size_t k = 0; k < count; ++k) sigma[k] = std::sqrt(dot(x.col(k), x.col(k), len));

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  const double sigma_max = count ? sigma[order.front()] : 0.0;
  Columns tall{len, count, std::vector<double>(len * count, 0.0)};
  Columns small{count, count, std::vector<double>(count * count)};
  std::vector<double> s(count);
  std::vector<bool> valid(count, false);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t src = order[k];
    s[k] = sigma[src];
    std::copy_n(rot.col(src), count, small.col(k));
    if (sigma[src] > kNullFraction * sigma_max && sigma[src] > 0.0) {
      for (std::size_t i = 0; i < len; ++i) tall.col(k)[i] = x.col(src)[i] / sigma[src];
      valid[k] = true;
    } else {
      s[k] = 0.0;
    }
  }
  complete_basis(tall, valid);

  // X = tall * diag(s) * small^T. M = X (not transposed) or M = X^T.
  const Columns& left = transpose ? small : tall;
  const Columns& right = transpose ? tall : small;

  SvdTriple out{Matrix(m.rows(), count), std::move(s), Matrix(m.cols(), count)};
  for (std::size_t k = 0; k < count; ++k) {
    const double* lc = left.col(k);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < m.rows(); ++i)
      if (std::abs(lc[i]) > std::abs(lc[arg])) arg = i;
    const double sign = lc[arg] < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < m.rows(); ++i) out.u(i, k) = sign * lc[i];
    for (std::size_t i = 0; i < m.cols(); ++i) out.v(i, k) = sign * right.col(k)[i];
  }
  return out;
}

}  // namespace cora
