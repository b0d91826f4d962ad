#include "cola/grad.hpp"
#include "cola/problems.hpp"

#include <Eigen/Eigenvalues>

#include "../grad_sweep.hpp"
#include "../vjp_memory.hpp"
#include "helpers.hpp"

using namespace cola;
using namespace testing_util;
using namespace gradsweep;

namespace {

void expect_ok(const gradsweep::Report& r) {
  EXPECT_GT(r.checks, 0);
  EXPECT_EQ(r.failed, 0) << r.rule << ": " << r.first_failure;
}

}  // namespace

TEST(ParamVjp, Examples) {
  const auto D = make_diagonal<double>(Vec<double>{{1, 1}});
  EXPECT_EQ(param_vjp_mvm(D, Vec<double>{{1, 2}}, Vec<double>{{3, 4}}).values, (Vec<double>{{3, 8}}));
  const Vec<double> u{{1, 2}}, v{{3, 4}};
  const auto g = param_vjp_mvm(make_dense<double>(Mat<double>::Zero(2, 2)), u, v);
  const Mat<double> uv = u * v.transpose();
  EXPECT_EQ(g.values, Eigen::Map<const Vec<double>>(uv.data(), 4));
}

TEST(ParamVjp, KronDiagonalMatchesFd) {
  Rng rng(1);
  const auto A = op_kron<double>(make_diagonal<double>(randv(3, rng)), make_diagonal<double>(randv(3, rng)));
  const Vec<double> u = randv(9, rng), v = randv(9, rng);
  const auto g = param_vjp_mvm(A, u, v);
  auto f = over(A, [&](const Mat<double>& M) { return u.dot(M * v); });
  EXPECT_TRUE(fd_check(f, flatten_params(A), g, 1e-5, 1e-6).pass);
}

TEST(ParamVjp, MatchesFdAcrossSeeds) { expect_ok(mvm_sweep()); }

TEST(ParamVjp, EveryLeafMatchesFd) {
  Rng rng(2);
  for (const auto& [name, A] : general_family(6, rng)) {
    const Vec<double> u = randv(6, rng), v = randv(6, rng);
    auto f = over(A, [&](const Mat<double>& M) { return u.dot(M * v); });
    const auto r = fd_check(f, flatten_params(A), param_vjp_mvm(A, u, v), 1e-5, 1e-6);
    EXPECT_TRUE(r.pass) << name << " deviation " << r.max_deviation;
  }
}

TEST(ParamVjp, LinearInU) {
  Rng rng(3);
  for (const auto& [name, A] : general_family(6, rng)) {
    const Vec<double> u1 = randv(6, rng), u2 = randv(6, rng), v = randv(6, rng);
    const double a = 1.7;
    const Vec<double> lhs = param_vjp_mvm(A, Vec<double>(a * u1 + u2), v).values;
    const Vec<double> rhs = a * param_vjp_mvm(A, u1, v).values + param_vjp_mvm(A, u2, v).values;
    EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, rhs.cwiseAbs().maxCoeff())) << name;
  }
}

TEST(ParamVjp, ClosureLeavesContributeNothing) {
  const auto F = make_function_op<double>([](const Vec<double>& v) { return v; }, Shape{2, 2});
  const auto A = op_sum<double>({F, make_diagonal<double>(Vec<double>{{1, 2}})});
  EXPECT_EQ(param_vjp_mvm(A, Vec<double>{{1, 1}}, Vec<double>{{2, 3}}).values, (Vec<double>{{2, 3}}));
}

TEST(VjpSolve, IdentityClosedForm) {
  const auto D = make_diagonal<double>(Vec<double>::Ones(3));
  const Vec<double> b{{1, 2, 3}}, w{{4, 5, 6}};
  const auto r = vjp_solve(D, b, w, tight());
  EXPECT_LE((r.db - w).norm(), 1e-12);
  EXPECT_LE((r.dtheta.values + w.cwiseProduct(b)).norm(), 1e-12);
}

TEST(VjpSolve, MatchesFdAcrossSeeds) { expect_ok(solve_sweep()); }

TEST(VjpSolve, PeakMemoryIndependentOfIterations) {
  const Index n = 3000;
  const auto m = vjpmem::measure(n);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_LT(m[0].iterations, m[2].iterations);
  EXPECT_GE(m[2].iterations, 1000);
  for (const auto& s : m) {
    EXPECT_EQ(s.peak_bytes, m[0].peak_bytes) << s.max_iter;
    EXPECT_EQ(s.peak_blocks, m[0].peak_blocks) << s.max_iter;
  }
  EXPECT_LT(m[2].peak_bytes, 64LL * n * 8);  // a handful of length-n vectors
}

TEST(VjpEigvals, DiagonalGivesW) {
  const auto D = annotate(make_diagonal<double>(Vec<double>{{3, 1, 2}}), Annotations(Annotation::SelfAdjoint));
  // Ascending eigenvalues 1, 2, 3 belong to entries 1, 2, 0.
  const Vec<double> w{{10, 20, 30}};
  const auto r = vjp_eigvals(D, w);
  EXPECT_LE((r.dtheta.values - Vec<double>{{30, 10, 20}}).norm(), 1e-12);
  EXPECT_FALSE(r.degenerate);
}

TEST(VjpEigvals, MatchesFdAcrossSeeds) { expect_ok(eigvals_sweep()); }

TEST(VjpEigvals, GeneralDiagonalizable) {
  Rng rng(4);
  const Mat<double> V = Mat<double>::Identity(6, 6) + 0.3 * randn(6, 6, rng);
  const Mat<double> M = V * spread(6, rng, 1).asDiagonal() * V.inverse();
  const auto A = make_dense<double>(M);
  const Vec<double> w = randv(6, rng);
  auto f = over(A, [&](const Mat<double>& X) { return w.dot(sorted_eig(X).first); });
  EXPECT_TRUE(fd_check(f, flatten_params(A), vjp_eigvals(A, w).dtheta).pass);
}

TEST(VjpEigvals, DegenerateFlagged) {
  const auto D = annotate(make_diagonal<double>(Vec<double>{{1, 1, 2}}), Annotations(Annotation::SelfAdjoint));
  EXPECT_TRUE(vjp_eigvals(D, Vec<double>(Vec<double>::Ones(3))).degenerate);
}

TEST(VjpEigvec, DiagonalIsZero) {
  const auto D = annotate(make_diagonal<double>(Vec<double>{{1, 2, 3}}), Annotations(Annotation::SelfAdjoint));
  const auto r = vjp_eigvec(D, 1, Vec<double>{{1, 2, 3}}, tight());
  EXPECT_LE(r.dtheta.values.norm(), 1e-12);
}

TEST(VjpEigvec, TwoByTwoMatchesFd) {
  const Mat<double> M{{2, 0.5}, {0.5, 1}};
  const auto A = annotate(make_dense<double>(M), Annotations(Annotation::SelfAdjoint));
  const Vec<double> w{{0.3, -1.2}};
  for (Index i = 0; i < 2; ++i) {
    auto f = over(A, [&](const Mat<double>& X) { return w.dot(gauge(sorted_eig(X).second.col(i))); });
    const auto rep = fd_check(f, flatten_params(A), vjp_eigvec(A, i, w, tight()).dtheta, 1e-5, 1e-5);
    EXPECT_TRUE(rep.pass) << i << " deviation " << rep.max_deviation;
  }
}

TEST(VjpEigvec, MatchesFdAcrossSeeds) { expect_ok(eigvec_sweep()); }

TEST(VjpEigvec, DirectionAlongEigvecIgnored) {
  Rng rng(5);
  const Mat<double> S = sym(6, rng);
  const auto A = annotate(make_dense<double>(S), Annotations(Annotation::SelfAdjoint));
  const auto v = gauge(sorted_eig(S).second.col(2));
  EXPECT_LE(vjp_eigvec(A, 2, v, tight()).dtheta.values.norm(), 1e-10);
}

TEST(VjpLogdet, DiagonalIsReciprocal) {
  const Vec<double> d{{2, 4, 5}};
  EXPECT_LE((vjp_logdet(make_diagonal<double>(d)).values - d.cwiseInverse()).norm(), 1e-12);
}

TEST(VjpLogdet, MatchesFdAcrossSeeds) { expect_ok(logdet_sweep()); }

TEST(VjpLogdet, EstimateIsUnbiased) {
  Rng rng(6);
  const auto A = annotate(make_dense<double>(spd(6, rng)), Annotations(Annotation::PSD));
  const Vec<double> exact = vjp_logdet(A, Mode::Exact, {}, tight()).values;
  const int batches = 20;
  std::vector<Vec<double>> est;
  for (int k = 0; k < batches; ++k) {
    ProbeConfig pc;
    pc.n_probes = 500;
    pc.seed = 1000 + k;
    est.push_back(vjp_logdet(A, Mode::Estimate, pc, tight()).values);
  }
  Vec<double> mean = Vec<double>::Zero(exact.size());
  for (const auto& e : est) mean += e / batches;
  Vec<double> var = Vec<double>::Zero(exact.size());
  for (const auto& e : est) var += (e - mean).cwiseAbs2() / (batches - 1);
  const Vec<double> se = (var / batches).cwiseSqrt();
  for (Index i = 0; i < exact.size(); ++i) EXPECT_LE(std::abs(mean[i] - exact[i]), 5 * se[i] + 1e-12) << i;
}

TEST(VjpLogdet, EstimateNeedsPsd) {
  Rng rng(7);
  EXPECT_THROW(vjp_logdet(make_dense<double>(spd(4, rng)), Mode::Estimate), DomainError);
}

TEST(VjpDiag, Examples) {
  const Vec<double> w{{1, -2, 3}};
  EXPECT_EQ(vjp_diag(make_diagonal<double>(Vec<double>{{5, 6, 7}}), w).values, w);
  const Vec<double> g = vjp_diag(make_dense<double>(Mat<double>::Zero(3, 3)), w).values;
  const Mat<double> G = Eigen::Map<const Mat<double>>(g.data(), 3, 3);
  EXPECT_EQ(G, Mat<double>(w.asDiagonal()));
}

TEST(VjpDiag, MatchesFdAcrossSeeds) { expect_ok(diag_sweep()); }

TEST(FdCheck, QuadraticAndNegativeControl) {
  const Mat<double> Q{{3, 1}, {1, 2}};
  auto f = [&](const Vec<double>& t) { return 0.5 * t.dot(Q * t); };
  const Vec<double> t0{{0.7, -1.3}};
  EXPECT_LE(fd_check(f, t0, Q * t0).max_deviation, 1e-10);
  const auto bad = fd_check(f, t0, Vec<double>(2 * Q * t0));
  EXPECT_FALSE(bad.pass);
  EXPECT_THROW(fd_check(f, t0, Vec<double>(3)), ShapeError);
}

TEST(Cotangent, Additive) {
  Rng rng(8);
  const auto A = general_family(6, rng)[7].second;
  const Vec<double> w1 = randv(6, rng), w2 = randv(6, rng);
  const auto sum = vjp_diag(A, w1) + vjp_diag(A, w2);
  EXPECT_LE((sum.values - vjp_diag(A, Vec<double>(w1 + w2)).values).norm(), 1e-12);
}
