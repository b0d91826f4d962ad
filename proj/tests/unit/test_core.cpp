#include "helpers.hpp"

using namespace cola;
using namespace testing_util;

TEST(Mvm, DiagonalIdentityDense) {
  EXPECT_EQ(mvm(make_diagonal<double>(Vec<double>{{2, 3}}), Vec<double>{{1, 1}}), (Vec<double>{{2, 3}}));
  EXPECT_EQ(mvm(make_identity<double>(3), Vec<double>{{4, 5, 6}}), (Vec<double>{{4, 5, 6}}));
  EXPECT_EQ(mvm(make_dense<double>(Mat<double>{{1, 2}, {3, 4}}), Vec<double>{{1, 0}}), (Vec<double>{{1, 3}}));
}

TEST(Mvm, ShapeMismatchNamesBothShapes) {
  const auto A = make_dense<double>(Mat<double>::Ones(2, 3));
  try {
    mvm(A, Vec<double>::Ones(2));
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("2x1"), std::string::npos) << msg;
  }
}

TEST(Mvm, RealOperatorPromotesComplexInput) {
  const Mat<double> M{{1, 2}, {3, 4}};
  const Vec<cdouble> v{{cdouble(1, 1), cdouble(0, -2)}};
  const Vec<cdouble> got = mvm(make_dense<double>(M), v);
  EXPECT_LT((got - M.cast<cdouble>() * v).norm(), 1e-15);
}

TEST(MvmBlock, ColumnsMatchSingleMvm) {
  EXPECT_EQ(mvm_block(make_diagonal<double>(Vec<double>{{2, 3}}), Mat<double>(Mat<double>::Identity(2, 2))),
            (Mat<double>{{2, 0}, {0, 3}}));
  EXPECT_EQ(mvm_block(make_dense<double>(Mat<double>{{1, 2}, {3, 4}}), Mat<double>{{1, 1}, {0, 1}}),
            (Mat<double>{{1, 3}, {3, 7}}));
  const Mat<double> empty = mvm_block(make_dense<double>(Mat<double>::Ones(3, 2)), Mat<double>(2, 0));
  EXPECT_EQ(empty.rows(), 3);
  EXPECT_EQ(empty.cols(), 0);
}

TEST(Dense, UnitVectorColumns) {
  EXPECT_EQ(dense(make_diagonal<double>(Vec<double>{{5, 7}})), (Mat<double>{{5, 0}, {0, 7}}));
  const auto K = op_kron<double>(make_diagonal<double>(Vec<double>{{1, 2}}), make_identity<double>(2));
  EXPECT_EQ(dense(K), Vec<double>({{1, 1, 2, 2}}).asDiagonal().toDenseMatrix());
  const auto S2 = op_sum<double>({make_identity<double>(2), make_identity<double>(2)});
  EXPECT_EQ(dense(S2), (Mat<double>{{2, 0}, {0, 2}}));
}

TEST(Dense, MatchesMvmWithinBound) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1 + trial % 9;
    const Mat<double> a = randn(n, n, rng), b = randn(n, n, rng);
    const auto A = op_sum<double>({op_product<double>({make_dense<double>(a), make_dense<double>(b)}),
                                   make_diagonal<double>(randv(n, rng))});
    const Mat<double> D = dense(A);
    const Vec<double> v = randv(n, rng);
    const double bound = 1e-12 * (1 + v.cwiseAbs().maxCoeff() * D.cwiseAbs().rowwise().sum().maxCoeff());
    EXPECT_LE((D * v - mvm(A, v)).cwiseAbs().maxCoeff(), bound);
  }
}

TEST(Annotate, UnionAndIdempotent) {
  const auto D = make_diagonal<double>(Vec<double>{{1, 2}});
  const auto P = annotate(D, Annotation::PSD);
  EXPECT_EQ(mvm(P, Vec<double>{{1, 1}}), (Vec<double>{{1, 2}}));
  EXPECT_TRUE(P.has(Annotation::PSD));
  EXPECT_TRUE(P.has(Annotation::SelfAdjoint));  // PSD implies SelfAdjoint
  const auto PP = annotate(P, Annotation::PSD);
  EXPECT_EQ(PP.annotations(), P.annotations());
  EXPECT_EQ(dense(PP), dense(D));
  EXPECT_TRUE(annotate(P, Annotation::Unitary).annotations().contains(Annotation::PSD | Annotation::Unitary));
}

TEST(Params, FlattenOrderAndValues) {
  EXPECT_EQ(flatten_params(make_diagonal<double>(Vec<double>{{3, 4}})).values, (Vec<double>{{3, 4}}));
  const auto K = op_kron<double>(make_diagonal<double>(Vec<double>{{1.5}}), make_circulant<double>(Vec<double>{{2, 3}}));
  const auto theta = flatten_params(K);
  EXPECT_EQ(theta.values, (Vec<double>{{1.5, 2, 3}}));
  ASSERT_EQ(theta.layout.size(), 2u);
  EXPECT_EQ(theta.layout[0].extent, 1);
  EXPECT_EQ(theta.layout[1].extent, 2);
  const auto F = make_function_op<double>([](const Vec<double>& v) { return Vec<double>(2 * v); }, Shape{3, 3});
  EXPECT_EQ(flatten_params(F).values.size(), 0);
}

TEST(Params, UnflattenReplacesLeaves) {
  const auto Z = make_diagonal<double>(Vec<double>::Zero(2));
  const auto D = unflatten_params(Z, Vec<double>{{3, 4}});
  EXPECT_EQ(mvm(D, Vec<double>{{1, 1}}), (Vec<double>{{3, 4}}));
  EXPECT_THROW(unflatten_params(Z, Vec<double>{{1, 2, 3}}), ParamError);
}

TEST(Params, RoundTripIsExact) {
  std::mt19937_64 rng(2);
  const auto A = op_sum<double>(
      {op_kron<double>(make_dense<double>(randn(3, 3, rng)), make_triangular<double>(randn(2, 2, rng).triangularView<Eigen::Lower>(), true)),
       make_low_rank<double>(randn(6, 2, rng), randn(2, 6, rng)),
       op_scale<double>(0.5, make_tridiagonal<double>(randv(5, rng), randv(6, rng), randv(5, rng)))});
  const auto theta = flatten_params(A);
  Index total = 0;
  for (const auto& r : theta.layout) total += r.extent;
  EXPECT_EQ(total, theta.values.size());
  const auto B = unflatten_params(A, theta);
  EXPECT_EQ(B.kind(), A.kind());
  EXPECT_EQ(dense(B), dense(A));
}

TEST(Params, LayoutMismatchRejected) {
  const auto A = make_diagonal<double>(Vec<double>{{1, 2}});
  auto theta = flatten_params(make_dense<double>(Mat<double>::Ones(1, 2)));
  EXPECT_THROW(unflatten_params(A, theta), ParamError);
}

TEST(Instrument, CountsOnlyThroughWrapper) {
  auto counter = std::make_shared<MvmCounter>();
  const auto D = make_diagonal<double>(Vec<double>{{1, 2}});
  const auto C = instrument(D, counter);
  mvm(D, Vec<double>{{1, 1}});
  EXPECT_EQ(counter->value(), 0);
  mvm(C, Vec<double>{{1, 1}});
  mvm_block(C, Mat<double>(Mat<double>::Ones(2, 3)));
  EXPECT_EQ(counter->value(), 4);  // block MVMs count once per column
  EXPECT_EQ(C.unwrap().kind(), Kind::Diagonal);
}

TEST(Shape, ComplexDenseAdjointHermitian) {
  std::mt19937_64 rng(3);
  const Mat<cdouble> M = randc(3, 3, rng);
  const auto A = make_dense<cdouble>(M);
  EXPECT_LT((dense(op_adjoint(A)) - M.adjoint()).norm(), 1e-15);
}
