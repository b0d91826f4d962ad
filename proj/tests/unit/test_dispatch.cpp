#include "cola/dispatch.hpp"
#include "cola/problems.hpp"

#include <Eigen/Eigenvalues>

#include "../dispatch_sweep.hpp"
#include "helpers.hpp"

using namespace cola;
using namespace sweep;

namespace {

void expect_all(const std::vector<RuleReport>& reports) {
  for (const auto& r : reports) {
    EXPECT_TRUE(r.failure.empty()) << r.op << "/" << r.rule << ": " << r.failure;
    EXPECT_EQ(r.selected, r.instances) << r.op << "/" << r.rule;
    EXPECT_LE(r.max_err, 1e-8) << r.op << "/" << r.rule;
  }
}

}  // namespace

// -- registry mechanics --------------------------------------------------------------

TEST(Registry, DiagonalRuleExample) {
  auto r = solve(make_diagonal<double>(Vec<double>{{2, 4}}), Vec<double>{{2, 4}});
  EXPECT_EQ(r.x, (Vec<double>{{1, 1}}));
  EXPECT_EQ(r.stats.algorithm, "diagonal-invert");
}

TEST(Registry, LaterRuleWinsTie) {
  auto reg = Registry<double>::with_builtins();
  reg.register_rule(solve_op, "mine", Pattern<double>::of(Kind::Diagonal),
                    [](const Operator<double>&, const Mat<double>& B, const SolveParams<double>&, IterStats&,
                       const Registry<double>&) { return Mat<double>(B * 0.5); });
  const auto A = make_diagonal<double>(Vec<double>{{2, 2}});
  EXPECT_EQ(reg.which_rule(solve_op, A), "mine");
  auto r = solve(reg, A, Vec<double>{{2, 4}});
  EXPECT_EQ(r.stats.algorithm, "mine");
  EXPECT_EQ(r.x, (Vec<double>{{1, 2}}));
  // The default registry is untouched.
  EXPECT_EQ(default_registry<double>().which_rule(solve_op, A), "diagonal-invert");
}

TEST(Registry, MoreSpecificBeatsLater) {
  auto reg = Registry<double>::with_builtins();
  reg.register_rule(solve_op, "late-generic", Pattern<double>::any(),
                    [](const Operator<double>&, const Mat<double>& B, const SolveParams<double>&, IterStats&,
                       const Registry<double>&) { return B; });
  EXPECT_EQ(reg.which_rule(solve_op, make_diagonal<double>(Vec<double>{{2}})), "diagonal-invert");
  EXPECT_EQ(reg.which_rule(solve_op, closure(Mat<double>::Identity(2, 2))), "late-generic");
}

TEST(Registry, FrozenAfterFirstCompute) {
  auto reg = Registry<double>::with_builtins();
  solve(reg, make_identity<double>(2), Vec<double>{{1, 2}});
  EXPECT_TRUE(reg.frozen());
  EXPECT_THROW(reg.register_rule(diag_op, "late", Pattern<double>::any(),
                                 [](const Operator<double>& A, Mode, const ProbeConfig&, const Registry<double>&) {
                                   return Vec<double>(Vec<double>::Zero(A.rows()));
                                 }),
               StateError);
}

TEST(Registry, UnknownOverrideRejected) {
  auto p = tight();
  p.algorithm_override = "no-such-rule";
  EXPECT_THROW(solve(make_identity<double>(2), Vec<double>{{1, 1}}, p), ParamError);
}

TEST(Registry, SelectionIsDeterministic) {
  Rng rng(1);
  const auto A = op_sum<double>({make_low_rank<double>(randn(5, 2, rng), randn(2, 5, rng)),
                                 make_diagonal<double>(Vec<double>::Constant(5, 3))});
  const std::string first = default_registry<double>().which_rule(solve_op, A);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(default_registry<double>().which_rule(solve_op, A), first);
  EXPECT_EQ(first, "woodbury");
}

TEST(Pattern, SpecificityCountsConstrainedNodes) {
  using P = Pattern<double>;
  EXPECT_EQ(P::any().specificity(), 0);
  EXPECT_EQ(P::of(Kind::Diagonal).specificity(), 1);
  EXPECT_EQ(P::of(Kind::Sum).operands({P::of(Kind::LowRank), P::of(Kind::Diagonal)}).specificity(), 3);
  EXPECT_EQ(P::of(Kind::Sum).operands({P::of(Kind::LowRank), P::any()}).specificity(), 2);
  auto unordered = P::of(Kind::Sum).operands({P::of(Kind::LowRank), P::of(Kind::Diagonal)}, true);
  Rng rng(2);
  const auto D = make_diagonal<double>(Vec<double>::Ones(3));
  const auto L = make_low_rank<double>(randn(3, 1, rng), randn(1, 3, rng));
  EXPECT_TRUE(unordered.matches(op_sum<double>({D, L})));
  EXPECT_TRUE(unordered.matches(op_sum<double>({L, D})));
  EXPECT_FALSE(P::of(Kind::Sum).operands({P::of(Kind::LowRank), P::of(Kind::Diagonal)}).matches(op_sum<double>({D, L})));
}

// -- solve ------------------------------------------------------------------------------

TEST(Solve, RulesMatchDenseOracle) {
  const auto reports = solve_sweep();
  expect_all(reports);
  for (const auto& name : uncovered(solve_op, reports)) ADD_FAILURE() << "solve rule without oracle cases: " << name;
}

TEST(Solve, KronMatchesDenseAt4x4) {
  Rng rng(3);
  const Mat<double> a = well(4, rng), b = well(4, rng);
  const Vec<double> rhs = randv(16, rng);
  auto res = solve(op_kron<double>(make_dense<double>(a), make_dense<double>(b)), rhs, tight());
  EXPECT_EQ(res.stats.algorithm, "kron");
  EXPECT_LE(rel(res.x, kron(a, b).lu().solve(rhs)), 1e-10);
}

TEST(Solve, WoodburyRunsNoIterations) {
  const Vec<double> u = Vec<double>::Ones(3) * 0.5;
  const auto A = op_sum<double>({make_diagonal<double>(Vec<double>::Ones(3)), make_low_rank<double>(u, u.transpose())});
  const Vec<double> b{{1, 2, 3}};
  auto res = solve(A, b, tight());
  EXPECT_EQ(res.stats.algorithm, "woodbury");
  EXPECT_EQ(res.stats.iterations, 0);
  const Mat<double> M = Mat<double>::Identity(3, 3) + u * u.transpose();
  EXPECT_LE(rel(res.x, M.lu().solve(b)), 1e-10);
}

TEST(Solve, FallbackOnFunctionOpIsGmres) {
  Rng rng(4);
  auto res = solve(closure(well(6, rng)), randv(6, rng));
  EXPECT_EQ(res.stats.algorithm, "gmres");
}

TEST(Solve, AnnotationsSteerKrylovChoice) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Index n = size_in(rng, 2, 12);
    const Mat<double> S = spd(n, rng);
    const std::vector<Operator<double>> psd_ops = {
        closure(S, Annotation::PSD), annotate(op_sum<double>({closure(S), closure(S)}), Annotations(Annotation::PSD)),
        annotate(op_scale<double>(2.0, closure(S)), Annotations(Annotation::PSD))};
    for (const auto& A : psd_ops) EXPECT_NE(solve(A, randv(n, rng)).stats.algorithm, "gmres") << describe(A);
    const Mat<double> W = well(n, rng);
    const std::vector<Operator<double>> plain = {closure(W), op_sum<double>({closure(W), closure(W)}),
                                                 op_product<double>({closure(W), closure(W)})};
    for (const auto& A : plain) {
      IterStats st = solve(A, randv(n, rng)).stats;
      EXPECT_NE(st.algorithm, "cg") << describe(A);
    }
  }
}

TEST(Solve, ProductSplittingNeedsFewerLeafMvms) {
  const auto L = problems::laplacian_1d_csr(256);
  const auto B = annotate(op_product<double>({L, L}), Annotations(Annotation::PSD));
  const Vec<double> b = Vec<double>::Ones(256);
  auto p = tight();
  p.tol = 1e-10;
  p.max_iter = 100000;
  const auto split = solve(B, b, p);
  EXPECT_EQ(split.stats.algorithm, "product");
  p.algorithm_override = "cg";
  const auto mono = solve(B, b, p);
  EXPECT_EQ(mono.stats.algorithm, "cg");
  EXPECT_LT(split.stats.mvm_count, mono.stats.mvm_count);
  EXPECT_GT(split.stats.mvm_count, 0);
}

TEST(Solve, ErrorsAndNonConvergence) {
  EXPECT_THROW(solve(make_dense<double>(Mat<double>::Ones(2, 3)), Vec<double>(Vec<double>::Ones(2))), ShapeError);
  EXPECT_THROW(solve(make_identity<double>(3), Vec<double>(Vec<double>::Ones(2))), ShapeError);
  EXPECT_THROW(solve(make_diagonal<double>(Vec<double>{{1, 0}}), Vec<double>(Vec<double>::Ones(2))), SingularError);
  Rng rng(6);
  SolveParams<double> p;
  p.tol = 1e-14;
  p.max_iter = 1;
  auto res = solve(closure(well(20, rng)), randv(20, rng), p);
  EXPECT_FALSE(res.stats.converged);
  EXPECT_GT(res.stats.residual, 1e-14);
}

TEST(Inverse, Examples) {
  EXPECT_EQ(dense(inverse(make_identity<double>(3))), Mat<double>::Identity(3, 3));
  EXPECT_LE((dense(inverse(make_diagonal<double>(Vec<double>{{2, 5}}))) - Mat<double>(Vec<double>{{0.5, 0.2}}.asDiagonal())).norm(), 1e-15);
  Rng rng(7);
  const Mat<double> S = spd(8, rng);
  const auto Ai = inverse(annotate(closure(S), Annotations(Annotation::PSD)), tight());
  EXPECT_LE((dense(Ai) * S - Mat<double>::Identity(8, 8)).norm(), 1e-8);
}

TEST(Jacobi, InvertsDiagonal) {
  Rng rng(8);
  const Mat<double> S = spd(6, rng);
  const Mat<double> J = dense(jacobi_preconditioner(make_dense<double>(S)));
  EXPECT_LE((J.diagonal() - S.diagonal().cwiseInverse()).norm(), 1e-14);
  EXPECT_THROW(jacobi_preconditioner(make_diagonal<double>(Vec<double>{{1, 0}})), SingularError);
}

// -- eig ---------------------------------------------------------------------------------

TEST(Eig, RulesMatchDenseOracle) {
  const auto reports = eig_sweep();
  expect_all(reports);
  for (const auto& name : uncovered(eig_op, reports)) ADD_FAILURE() << "eig rule without oracle cases: " << name;
}

TEST(Eig, Examples) {
  auto r = eig(make_diagonal<double>(Vec<double>{{3, 1, 2}}));
  EXPECT_EQ(r.real_eigvals(), (Vec<double>{{1, 2, 3}}));
  auto k = eig(op_kron<double>(make_diagonal<double>(Vec<double>{{1, 2}}), make_diagonal<double>(Vec<double>{{3, 4}})));
  EXPECT_LE((k.real_eigvals() - Vec<double>{{3, 4, 6, 8}}).norm(), 1e-12);
  Rng rng(9);
  const Vec<double> d1 = randv(3, rng), d2 = randv(3, rng);
  auto ks = eig(op_kron_sum<double>(make_diagonal<double>(d1), make_diagonal<double>(d2)));
  std::vector<double> want;
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) want.push_back(d1[i] + d2[j]);
  std::sort(want.begin(), want.end());
  for (Index i = 0; i < 9; ++i) EXPECT_NEAR(ks.eigvals[i].real(), want[i], 1e-12);
}

TEST(Eig, SelectionAndErrors) {
  const auto D = make_diagonal<double>(Vec<double>{{5, -1, 3, 0.5}});
  EXPECT_EQ(eig(D, 2, Which::Largest).real_eigvals(), (Vec<double>{{5, 3}}));
  EXPECT_EQ(eig(D, 1, Which::Smallest).real_eigvals(), (Vec<double>{{-1}}));
  EXPECT_THROW(eig(D, 5), ParamError);
  EXPECT_THROW(eig(make_dense<double>(Mat<double>::Ones(2, 3))), ShapeError);
  Rng rng(10);
  const Mat<double> S = spd(12, rng);
  auto r = eig(closure(S, Annotation::SelfAdjoint), 3, Which::Largest, tight());
  EXPECT_EQ(r.stats.algorithm, "lanczos");
  const Mat<double> V = dense(r.eigvecs);
  for (Index j = 0; j < 3; ++j) EXPECT_LE((S * V.col(j) - r.eigvals[j].real() * V.col(j)).norm(), 1e-8);
}

TEST(Eig, FallbackOnFunctionOp) {
  Rng rng(11);
  const Mat<double> M = real_spectrum(6, rng).M;
  EXPECT_EQ(eig(closure(M)).stats.algorithm, "dense-eig");
}

// -- diag / trace --------------------------------------------------------------------------

TEST(Diag, RulesMatchDenseOracle) {
  const auto reports = diag_sweep();
  expect_all(reports);
  for (const auto& name : uncovered(diag_op, reports)) ADD_FAILURE() << "diag rule without oracle cases: " << name;
}

TEST(Diag, Examples) {
  EXPECT_EQ(diag(op_kron<double>(make_diagonal<double>(Vec<double>{{1, 2}}), make_diagonal<double>(Vec<double>{{3, 4}}))),
            (Vec<double>{{3, 4, 6, 8}}));
  EXPECT_EQ(diag(op_sum<double>({make_identity<double>(4), make_identity<double>(4)})), Vec<double>::Constant(4, 2));
  Rng rng(12);
  const auto B = op_block_2x2<double>(make_diagonal<double>(Vec<double>{{1, 2}}), make_dense<double>(randn(2, 2, rng)),
                                      make_dense<double>(randn(2, 2, rng)), make_diagonal<double>(Vec<double>{{3, 4}}));
  EXPECT_EQ(diag(B), (Vec<double>{{1, 2, 3, 4}}));
}

TEST(Diag, EstimateModeAndErrors) {
  Rng rng(13);
  const Mat<double> S = spd(10, rng);
  ProbeConfig pc;
  pc.n_probes = 20000;
  pc.seed = 3;
  const Vec<double> est = diag(closure(S), Mode::Estimate, pc);
  EXPECT_LE((est - S.diagonal()).cwiseAbs().maxCoeff(), 0.1 * S.diagonal().maxCoeff());
  pc.n_probes = 0;
  EXPECT_THROW(diag(closure(S), Mode::Estimate, pc), ParamError);
}

TEST(Trace, RulesMatchDenseOracle) {
  const auto reports = trace_sweep();
  expect_all(reports);
  for (const auto& name : uncovered(trace_op, reports)) ADD_FAILURE() << "trace rule without oracle cases: " << name;
}

TEST(Trace, Examples) {
  EXPECT_EQ(trace(make_identity<double>(5)), 5.0);
  Rng rng(14);
  const Mat<double> a = randn(3, 3, rng), b = randn(3, 3, rng);
  EXPECT_NEAR(trace(op_kron<double>(make_dense<double>(a), make_dense<double>(b))), a.trace() * b.trace(), 1e-12);
  Vec<double> d = Vec<double>::LinSpaced(100, 1, 100);
  ProbeConfig pc;
  pc.n_probes = 10000;
  pc.seed = 5;
  const double t = trace(closure(Mat<double>(d.asDiagonal())), Mode::Estimate, pc);
  EXPECT_LE(std::abs(t - 5050), 3 * std::sqrt(2 * d.squaredNorm() / 10000));
}

// -- logdet ------------------------------------------------------------------------------

TEST(Logdet, RulesMatchDenseOracle) {
  const auto reports = logdet_sweep();
  expect_all(reports);
  for (const auto& name : uncovered(logdet_op, reports)) ADD_FAILURE() << "logdet rule without oracle cases: " << name;
}

TEST(Logdet, Examples) {
  EXPECT_EQ(logdet(make_identity<double>(7)), 0.0);
  const Mat<double> a{{2, 0.5}, {0.5, 1}}, b{{3, 1}, {1, 2}};
  const double want = 2 * std::log(a.determinant()) + 2 * std::log(b.determinant());
  EXPECT_NEAR(logdet(op_kron<double>(make_dense<double>(a), make_dense<double>(b))), want, 1e-12);
}

TEST(Logdet, EstimateWithinTwoPercent) {
  Rng rng(15);
  const Mat<double> S = problems::random_spd(500, 1, 10, rng);
  ProbeConfig pc;
  pc.n_probes = 25;
  pc.lanczos_iters = 30;
  pc.seed = 1;
  pc.distribution = ProbeDistribution::Rademacher;
  const double want = S.llt().matrixL().toDenseMatrix().diagonal().array().log().sum() * 2;
  const double got = logdet(annotate(closure(S), Annotations(Annotation::PSD)), Mode::Estimate, pc);
  EXPECT_LE(std::abs(got - want), 0.02 * std::abs(want));
}

TEST(Logdet, EstimateRejectsUnannotated) {
  Rng rng(16);
  ProbeConfig pc;
  EXPECT_THROW(logdet(closure(well(5, rng)), Mode::Estimate, pc), DomainError);
}

// -- pinv ---------------------------------------------------------------------------------

TEST(Pinv, RulesMatchDenseOracle) {
  const auto reports = pinv_sweep();
  expect_all(reports);
  for (const auto& name : uncovered(pinv_op, reports)) ADD_FAILURE() << "pinv rule without oracle cases: " << name;
}

TEST(Pinv, Examples) {
  const Vec<double> b{{1, -2, 3}};
  EXPECT_EQ(pinv_apply(make_identity<double>(3), b).x, b);
  Rng rng(17);
  const Mat<double> Q = orthonormal(4, rng);
  const Vec<double> v = randv(4, rng);
  EXPECT_LE((pinv_apply(make_dense<double>(Q), v).x - Q.transpose() * v).norm(), 1e-12);
  const Mat<double> T = randn(12, 4, rng);
  const Vec<double> y = randv(12, rng);
  const Vec<double> want = T.completeOrthogonalDecomposition().solve(y);
  EXPECT_LE((pinv_apply(make_dense<double>(T), y).x - want).norm(), 1e-8);
  const auto P = pinv(make_dense<double>(T));
  EXPECT_EQ(P.rows(), 4);
  EXPECT_LE((mvm(P, y) - want).norm(), 1e-8);
}

// -- matrix functions -------------------------------------------------------------------

TEST(Fn, RulesMatchDenseOracle) {
  const auto reports = fn_sweep();
  expect_all(reports);
  for (const auto& name : uncovered(fn_op, reports)) ADD_FAILURE() << "fn rule without oracle cases: " << name;
}

TEST(Fn, Examples) {
  EXPECT_LE((dense(sqrt_op(make_diagonal<double>(Vec<double>{{4, 9}}))) - Mat<double>(Vec<double>{{2, 3}}.asDiagonal())).norm(), 1e-15);
  EXPECT_EQ(dense(exp_op(make_zero<double>(3, 3))), Mat<double>::Identity(3, 3));
  Rng rng(18);
  const Mat<double> S = spd(6, rng);
  const Mat<double> R = dense(sqrt_op(annotate(make_dense<double>(S), Annotations(Annotation::PSD))));
  EXPECT_LE((R * R - S).norm(), 1e-8);
  EXPECT_THROW(log_op(make_diagonal<double>(Vec<double>{{1, -1}})), DomainError);
  EXPECT_THROW(sqrt_op(make_diagonal<double>(Vec<double>{{0, 1}})), DomainError);
}

// -- fallback totality -----------------------------------------------------------------

TEST(Fallback, EveryOperationTerminatesOnFunctionOp) {
  Rng rng(19);
  const Mat<double> S = spd(6, rng);
  const auto F = closure(S);
  const Vec<double> b = randv(6, rng);
  EXPECT_NO_THROW(solve(F, b));
  EXPECT_NO_THROW(eig(F));
  EXPECT_NO_THROW(diag(F));
  EXPECT_NO_THROW(trace(F));
  EXPECT_NO_THROW(logdet(F));
  EXPECT_NO_THROW(pinv_apply(F, b));
  EXPECT_NO_THROW(dense(exp_op(F)));
  EXPECT_LE(std::abs(logdet(F) - std::log(S.determinant())), 1e-10);
}
