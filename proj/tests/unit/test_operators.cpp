#include <cmath>
#include <numbers>

#include "helpers.hpp"

using namespace cola;
using namespace testing_util;

TEST(Leaves, ScalarDiagonalDense) {
  EXPECT_EQ(mvm(make_scalar<double>(2, 2), Vec<double>{{1, 3}}), (Vec<double>{{2, 6}}));
  EXPECT_EQ(mvm(make_diagonal<double>(Vec<double>{{1, 0}}), Vec<double>{{5, 5}}), (Vec<double>{{5, 0}}));
  EXPECT_EQ(dense(make_dense<double>(Mat<double>{{0, 1}, {1, 0}})), (Mat<double>{{0, 1}, {1, 0}}));
  EXPECT_EQ(flatten_params(make_scalar<double>(2, 3)).values, (Vec<double>{{2}}));
  EXPECT_EQ(flatten_params(make_identity<double>(3)).values.size(), 0);
}

TEST(Leaves, EmptyPayloadRejected) {
  EXPECT_THROW(make_diagonal<double>(Vec<double>()), ConstructionError);
  EXPECT_THROW(make_identity<double>(0), ConstructionError);
  EXPECT_THROW(make_circulant<double>(Vec<double>()), ConstructionError);
}

CsrPayload<double> csr(std::vector<Index> rp, std::vector<Index> ci, std::vector<double> v) {
  CsrPayload<double> p;
  p.row_ptr = std::move(rp);
  p.col_idx = std::move(ci);
  p.values = Eigen::Map<Vec<double>>(v.data(), static_cast<Index>(v.size()));
  return p;
}

TEST(Sparse, Examples) {
  const auto D = make_sparse_csr<double>(csr({0, 1, 2}, {0, 1}, {2, 3}), Shape{2, 2});
  EXPECT_EQ(mvm(D, Vec<double>{{1, 1}}), (Vec<double>{{2, 3}}));
  const auto R = make_sparse_csr<double>(csr({0, 2, 2, 2}, {0, 2}, {1, 4}), Shape{3, 3});
  EXPECT_EQ(mvm(R, Vec<double>{{1, 1, 1}}), (Vec<double>{{5, 0, 0}}));
  const auto U = make_sparse_csr<double>(csr({0, 2, 3}, {0, 1, 1}, {1, 2, 3}), Shape{2, 2});
  EXPECT_EQ(mvm(U, Vec<double>{{1, 1}}), (Vec<double>{{3, 3}}));
}

TEST(Sparse, InvariantViolationsNameIndex) {
  // Column index out of range at position 1.
  try {
    make_sparse_csr<double>(csr({0, 2, 2}, {0, 5}, {1, 1}), Shape{2, 2});
    FAIL();
  } catch (const ConstructionError& e) {
    EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
  }
  EXPECT_THROW(make_sparse_csr<double>(csr({0, 2, 2}, {1, 0}, {1, 1}), Shape{2, 2}), ConstructionError);
  EXPECT_THROW(make_sparse_csr<double>(csr({0, 1}, {0}, {1}), Shape{2, 2}), ConstructionError);
  EXPECT_THROW(make_sparse_csr<double>(csr({1, 1, 1}, {}, {}), Shape{2, 2}), ConstructionError);
}

TEST(Sparse, MatchesDenseOnRandomPatterns) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    const Index n = 1 + static_cast<Index>(u(rng) * 127);
    const double density = 0.05 + 0.45 * u(rng);
    Mat<double> M = Mat<double>::Zero(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j)
        if (u(rng) < density) M(i, j) = u(rng) - 0.5;
    const auto A = make_sparse_from_dense<double>(M);
    const Vec<double> v = randv(n, rng);
    const Vec<double> want = M * v;
    EXPECT_LE((mvm(A, v) - want).norm(), 1e-12 * std::max(1.0, want.norm()));
  }
}

TEST(Circulant, Examples) {
  EXPECT_EQ(mvm(make_circulant<double>(Vec<double>{{1, 0, 0}}), Vec<double>{{7, 8, 9}}), (Vec<double>{{7, 8, 9}}));
  const Vec<double> shifted = mvm(make_circulant<double>(Vec<double>{{0, 1, 0}}), Vec<double>{{1, 2, 3}});
  EXPECT_LT((shifted - Vec<double>{{3, 1, 2}}).norm(), 1e-14);
  const Vec<double> y = mvm(make_circulant<double>(Vec<double>{{1, 2}}), Vec<double>{{3, 4}});
  EXPECT_LT((y - Vec<double>{{11, 10}}).norm(), 1e-14);
}

TEST(Circulant, DenseFormAndDftDiagonalization) {
  std::mt19937_64 rng(5);
  for (Index n : {1, 2, 5, 8, 13, 16}) {
    const Vec<double> a = randv(n, rng);
    const Mat<double> C = dense(make_circulant<double>(a));
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) EXPECT_NEAR(C(i, j), a[((i - j) % n + n) % n], 1e-12);
    // F^-1 Diag(F a) F with the unnormalized DFT matrix F.
    Eigen::MatrixXcd F(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) F(i, j) = std::polar(1.0, -2 * std::numbers::pi * double(i * j) / double(n));
    const Eigen::VectorXcd fa = F * a.cast<cdouble>();
    const Eigen::MatrixXcd rebuilt = F.inverse() * fa.asDiagonal() * F;
    EXPECT_LT((rebuilt - C.cast<cdouble>()).norm(), 1e-10);
  }
}

TEST(Triangular, TridiagonalPermutationExamples) {
  EXPECT_EQ(mvm(make_permutation<double>({1, 0}), Vec<double>{{4, 9}}), (Vec<double>{{9, 4}}));
  EXPECT_TRUE(make_permutation<double>({1, 0}).has(Annotation::Unitary));
  EXPECT_EQ(mvm(make_triangular<double>(Mat<double>{{1, 0}, {2, 3}}, true), Vec<double>{{1, 1}}), (Vec<double>{{1, 5}}));
  EXPECT_EQ(mvm(make_tridiagonal<double>(Vec<double>{{1}}, Vec<double>{{2, 2}}, Vec<double>{{1}}), Vec<double>{{1, 1}}),
            (Vec<double>{{3, 3}}));
  EXPECT_THROW(make_permutation<double>({0, 0}), ConstructionError);
  EXPECT_THROW(make_permutation<double>({0, 2}), ConstructionError);
  EXPECT_THROW(make_triangular<double>(Mat<double>{{1, 5}, {2, 3}}, true), ConstructionError);
  EXPECT_THROW(make_tridiagonal<double>(Vec<double>{{1, 1}}, Vec<double>{{2, 2}}, Vec<double>{{1}}), ConstructionError);
}

TEST(Permutation, OrthogonalUpTo64) {
  std::mt19937_64 rng(6);
  for (Index n : {1, 7, 32, 64}) {
    std::vector<Index> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), rng);
    const Mat<double> P = dense(make_permutation<double>(p));
    EXPECT_EQ(P * P.transpose(), Mat<double>::Identity(n, n));
    for (Index i = 0; i < n; ++i) EXPECT_EQ(P(i, p[i]), 1.0);
  }
}

TEST(Leaves, DenseFormFromUnitVectorsIsExact) {
  std::mt19937_64 rng(7);
  for (Index n = 1; n <= 16; ++n) {
    const Mat<double> M = randn(n, n, rng);
    EXPECT_EQ(dense(make_dense<double>(M)), M);
    const Vec<double> d = randv(n, rng);
    EXPECT_EQ(dense(make_diagonal<double>(d)), Mat<double>(d.asDiagonal()));
    const Mat<double> L = M.triangularView<Eigen::Lower>();
    EXPECT_EQ(dense(make_triangular<double>(L, true)), L);
    const Mat<double> Up = M.triangularView<Eigen::Upper>();
    EXPECT_EQ(dense(make_triangular<double>(Up, false)), Up);
    const Mat<double> Lr = randn(n, 2, rng), Rr = randn(2, n, rng);
    EXPECT_LT((dense(make_low_rank<double>(Lr, Rr)) - Lr * Rr).norm(), 1e-12);
    if (n > 1) {
      const Vec<double> lo = randv(n - 1, rng), mid = randv(n, rng), hi = randv(n - 1, rng);
      Mat<double> T = Mat<double>::Zero(n, n);
      T.diagonal() = mid;
      T.diagonal(-1) = lo;
      T.diagonal(1) = hi;
      EXPECT_EQ(dense(make_tridiagonal<double>(lo, mid, hi)), T);
    }
  }
}

TEST(FunctionOp, ClosureLeaf) {
  const auto F = make_function_op<double>([](const Vec<double>& v) { return Vec<double>(2 * v); }, Shape{3, 3});
  EXPECT_EQ(mvm(F, Vec<double>::Ones(3)), Vec<double>::Constant(3, 2));
  const Mat<double> M{{1, 2}, {3, 4}};
  const auto G = make_function_op<double>([M](const Vec<double>& v) { return Vec<double>(M * v); }, Shape{2, 2});
  EXPECT_EQ(dense(G), dense(make_dense<double>(M)));
}

TEST(FunctionOp, TransposeFallbackAndCap) {
  std::mt19937_64 rng(8);
  const Mat<double> M = randn(4, 4, rng);
  const auto F = make_function_op<double>([M](const Vec<double>& v) { return Vec<double>(M * v); }, Shape{4, 4});
  EXPECT_LT((dense(op_transpose(F)) - M.transpose()).norm(), 1e-14);
  const auto big = make_function_op<double>([](const Vec<double>& v) { return v; }, Shape{dense_cap() + 1, dense_cap() + 1});
  EXPECT_THROW(op_transpose(big), UnsupportedError);
  const auto with_adj = make_function_op<double>([](const Vec<double>& v) { return Vec<double>(3 * v); },
                                                 [](const Vec<double>& v) { return Vec<double>(5 * v); }, Shape{2, 2});
  EXPECT_EQ(mvm(op_transpose(with_adj), Vec<double>::Ones(2)), Vec<double>::Constant(2, 5));
}
