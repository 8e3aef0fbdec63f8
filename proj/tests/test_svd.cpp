#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>

#include "cora/svd.hpp"
#include "helpers.hpp"

using namespace cora;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  return Matrix(r, c, testing_util::normal_values(r * c, rng));
}

// Singular values from the eigenvalues of the smaller Gram matrix.
std::vector<double> gram_singular_values(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  const Eigen::MatrixXd gram = m.rows() <= m.cols() ? Eigen::MatrixXd(e * e.transpose())
                                                    : Eigen::MatrixXd(e.transpose() * e);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
  std::vector<double> s;
  for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i)
    s.push_back(std::sqrt(std::max(0.0, solver.eigenvalues()(i))));
  std::sort(s.rbegin(), s.rend());
  return s;
}

void check_invariants(const Matrix& m, const SvdTriple& t) {
  const std::size_t p = std::min(m.rows(), m.cols());
  ASSERT_EQ(t.s.size(), p);
  ASSERT_EQ(t.u.rows(), m.rows());
  ASSERT_EQ(t.u.cols(), p);
  ASSERT_EQ(t.v.rows(), m.cols());
  ASSERT_EQ(t.v.cols(), p);
  for (std::size_t i = 0; i < p; ++i) {
    EXPECT_GE(t.s[i], 0.0);
    if (i) {
      EXPECT_LE(t.s[i], t.s[i - 1]);
    }
  }
  const Matrix utu = matmul(t.u.transposed(), t.u);
  const Matrix vtv = matmul(t.v.transposed(), t.v);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      EXPECT_NEAR(utu(i, j), i == j ? 1.0 : 0.0, 1e-5);
      EXPECT_NEAR(vtv(i, j), i == j ? 1.0 : 0.0, 1e-5);
    }
  Matrix us = t.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < p; ++j) us(i, j) *= t.s[j];
  const Matrix rec = matmul(us, t.v.transposed());
  EXPECT_LE(testing_util::rel_diff(rec.data(), m.data()), 1e-4);
}

}  // namespace

TEST(Svd, Identity) {
  const SvdTriple t = svd(Matrix::identity(3));
  EXPECT_EQ(t.s, (std::vector<double>{1, 1, 1}));
  check_invariants(Matrix::identity(3), t);
}

TEST(Svd, DiagonalGivesSignedPermutation) {
  const Matrix d(3, 3, {1, 0, 0, 0, 3, 0, 0, 0, 2});
  const SvdTriple t = svd(d);
  EXPECT_NEAR(t.s[0], 3.0, 1e-14);
  EXPECT_NEAR(t.s[1], 2.0, 1e-14);
  EXPECT_NEAR(t.s[2], 1.0, 1e-14);
  check_invariants(d, t);
  for (std::size_t j = 0; j < 3; ++j) {
    int nonzero = 0;
    for (std::size_t i = 0; i < 3; ++i) nonzero += std::abs(t.u(i, j)) > 1e-12;
    EXPECT_EQ(nonzero, 1);
  }
}

TEST(Svd, RandomWideMatchesGramEigenvalues) {
  std::mt19937_64 rng(21);
  const Matrix m = random_matrix(8, 20, rng);
  const SvdTriple t = svd(m);
  check_invariants(m, t);
  const auto oracle = gram_singular_values(m);
  for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(t.s[i], oracle[i], 1e-6 * oracle[i]);
}

TEST(Svd, TallAndSquareShapes) {
  std::mt19937_64 rng(22);
  for (auto [r, c] : {std::pair{20, 6}, std::pair{12, 12}, std::pair{1, 9}, std::pair{9, 1}}) {
    const Matrix m = random_matrix(r, c, rng);
    const SvdTriple t = svd(m);
    check_invariants(m, t);
    const auto oracle = gram_singular_values(m);
    for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(t.s[i], oracle[i], 1e-6 * oracle[0]);
  }
}

TEST(Svd, RankDeficientKeepsOrthonormalBases) {
  std::mt19937_64 rng(23);
  const Matrix a = random_matrix(10, 2, rng), b = random_matrix(2, 15, rng);
  const Matrix m = matmul(a, b);
  const SvdTriple t = svd(m);
  check_invariants(m, t);
  for (std::size_t i = 2; i < t.s.size(); ++i) EXPECT_LE(t.s[i], 1e-10 * t.s[0]);
  const SvdTriple z = svd(Matrix(4, 6));
  check_invariants(Matrix(4, 6), z);
  for (double s : z.s) EXPECT_EQ(s, 0.0);
}

TEST(Svd, SignConventionAndDeterminism) {
  std::mt19937_64 rng(24);
  const Matrix m = random_matrix(7, 11, rng);
  const SvdTriple t1 = svd(m), t2 = svd(m);
  EXPECT_EQ(t1.u.data()[0], t2.u.data()[0]);
  EXPECT_TRUE(std::equal(t1.v.data().begin(), t1.v.data().end(), t2.v.data().begin()));
  for (std::size_t j = 0; j < t1.u.cols(); ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < t1.u.rows(); ++i)
      if (std::abs(t1.u(i, j)) > std::abs(t1.u(best, j))) best = i;
    EXPECT_GT(t1.u(best, j), 0.0);
  }
}

TEST(Svd, NonFiniteInputIsRejected) {
  Matrix m(2, 2, {1, 2, std::nan(""), 4});
  try {
    svd(m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::numeric);
  }
}
