#include "cola/krylov.hpp"

#include <Eigen/Dense>

#include "helpers.hpp"

using namespace cola;
using namespace testing_util;

namespace {

Operator<double> dense_op(const Mat<double>& m) { return make_dense<double>(m); }

// Symmetric matrix with the given spectrum and a random eigenbasis.
Mat<double> with_spectrum(const Vec<double>& lam, std::mt19937_64& rng) {
  const Mat<double> Q = orthonormal(lam.size(), rng);
  return Q * lam.asDiagonal() * Q.transpose();
}

double true_residual(const Mat<double>& A, const Vec<double>& x, const Vec<double>& b) { return (A * x - b).norm() / b.norm(); }

Mat<double> hilbert(Index n) {
  Mat<double> h(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) h(i, j) = 1.0 / double(i + j + 1);
  return h;
}

}  // namespace

TEST(Cg, IdentityOneIteration) {
  const Vec<double> b{{1, 2, 3}};
  auto r = cg(make_identity<double>(3), b);
  EXPECT_EQ(r.stats.iterations, 1);
  EXPECT_TRUE(r.stats.converged);
  EXPECT_LT((r.x - b).norm(), 1e-15);
  EXPECT_EQ(r.stats.algorithm, "cg");
}

TEST(Cg, FiniteTerminationThreeEigenvalues) {
  Vec<double> d(30);
  for (Index i = 0; i < 30; ++i) d[i] = 1 + i % 3;
  std::mt19937_64 rng(1);
  SolveParams<double> p;
  p.tol = 1e-10;
  auto r = cg(make_diagonal<double>(d), randv(30, rng), p);
  EXPECT_TRUE(r.stats.converged);
  EXPECT_LE(r.stats.iterations, 3);
}

TEST(Cg, RandomSpdMatchesDense) {
  std::mt19937_64 rng(2);
  const Mat<double> A = spd(64, rng);
  const Vec<double> b = randv(64, rng);
  SolveParams<double> p;
  p.tol = 1e-10;
  auto r = cg(dense_op(A), b, p);
  ASSERT_TRUE(r.stats.converged);
  EXPECT_LT((r.x - A.llt().solve(b)).norm(), 1e-8 * A.llt().solve(b).norm());
  EXPECT_NEAR(r.stats.residual, true_residual(A, r.x, b), 1e-12);
  EXPECT_LE(r.stats.residual_history.back(), p.tol);
}

TEST(Cg, JacobiPreconditionerHelps) {
  std::mt19937_64 rng(3);
  Vec<double> scale(80);
  for (Index i = 0; i < 80; ++i) scale[i] = std::pow(10.0, 3.0 * i / 79.0);
  const Mat<double> A = scale.asDiagonal() * spd(80, rng) * scale.asDiagonal();
  const Vec<double> b = randv(80, rng);
  SolveParams<double> p;
  p.tol = 1e-10;
  p.max_iter = 2000;
  auto plain = cg(dense_op(A), b, p);
  p.preconditioner = make_diagonal<double>(Vec<double>(A.diagonal().cwiseInverse()));
  auto pre = cg(dense_op(A), b, p);
  ASSERT_TRUE(pre.stats.converged);
  EXPECT_LT(pre.stats.iterations, plain.stats.iterations);
  EXPECT_LT(true_residual(A, pre.x, b), 1e-10);
}

TEST(Cg, NanRaisesWithIteration) {
  const auto bad = make_function_op<double>(
      [](const Vec<double>& v) { return Vec<double>(v * std::numeric_limits<double>::quiet_NaN()); }, Shape{3, 3});
  try {
    cg(bad, Vec<double>(Vec<double>::Ones(3)));
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration"), std::string::npos) << e.what();
  }
}

TEST(Minres, Examples) {
  auto r = minres(make_diagonal<double>(Vec<double>{{1, -1}}), Vec<double>{{1, 1}});
  EXPECT_LT((r.x - Vec<double>{{1, -1}}).norm(), 1e-12);
  auto id = minres(make_identity<double>(4), Vec<double>(Vec<double>::Ones(4)));
  EXPECT_EQ(id.stats.iterations, 1);
  std::mt19937_64 rng(4);
  const Mat<double> g = randn(32, 32, rng);
  const Mat<double> S = g + g.transpose();
  const Vec<double> b = randv(32, rng);
  SolveParams<double> p;
  p.tol = 1e-12;
  auto s = minres(dense_op(S), b, p);
  ASSERT_TRUE(s.stats.converged);
  const Vec<double> want = S.lu().solve(b);
  EXPECT_LT((s.x - want).norm(), 1e-8 * want.norm());
  EXPECT_NEAR(s.stats.residual, true_residual(S, s.x, b), 1e-12);
}

TEST(Gmres, Examples) {
  auto id = gmres(make_identity<double>(5), Vec<double>(Vec<double>::Ones(5)));
  EXPECT_EQ(id.stats.iterations, 1);
  std::mt19937_64 rng(5);
  const Mat<double> A = randn(48, 48, rng) + 8 * Mat<double>::Identity(48, 48);
  const Vec<double> b = randv(48, rng);
  SolveParams<double> p;
  p.tol = 1e-10;
  auto r = gmres(dense_op(A), b, p);
  ASSERT_TRUE(r.stats.converged);
  const Vec<double> want = A.lu().solve(b);
  EXPECT_LT((r.x - want).norm(), 1e-8 * want.norm());
  EXPECT_NEAR(r.stats.residual, true_residual(A, r.x, b), 1e-12);
}

TEST(Gmres, FiniteTerminationFourEigenvalues) {
  std::mt19937_64 rng(6);
  Vec<double> lam(40);
  for (Index i = 0; i < 40; ++i) lam[i] = 1 + i % 4;
  const Mat<double> V = randn(40, 40, rng) + 6 * Mat<double>::Identity(40, 40);
  const Mat<double> A = V * lam.asDiagonal() * V.inverse();
  SolveParams<double> p;
  p.tol = 1e-10;
  auto r = gmres(dense_op(A), randv(40, rng), p);
  EXPECT_TRUE(r.stats.converged);
  EXPECT_LE(r.stats.iterations, 4);
}

TEST(Gmres, RestartAndHouseholderVariants) {
  std::mt19937_64 rng(7);
  const Mat<double> A = randn(60, 60, rng) + 10 * Mat<double>::Identity(60, 60);
  const Vec<double> b = randv(60, rng);
  SolveParams<double> p;
  p.tol = 1e-10;
  p.restart = 10;
  auto r = gmres(dense_op(A), b, p);
  EXPECT_TRUE(r.stats.converged);
  EXPECT_LT(true_residual(A, r.x, b), 1e-10);
  p.restart = 0;
  p.orthogonalization = Orthogonalization::Householder;
  auto h = gmres(dense_op(A), b, p);
  EXPECT_TRUE(h.stats.converged);
  EXPECT_LT(true_residual(A, h.x, b), 1e-10);
}

TEST(Gmres, NonConvergenceReportsResidual) {
  std::mt19937_64 rng(8);
  const Mat<double> A = randn(30, 30, rng) + 3 * Mat<double>::Identity(30, 30);
  SolveParams<double> p;
  p.tol = 1e-14;
  p.max_iter = 2;
  auto r = gmres(dense_op(A), randv(30, rng), p);
  EXPECT_FALSE(r.stats.converged);
  EXPECT_GT(r.stats.residual, p.tol);
}

TEST(KrylovFiniteTermination, FiftySeeds) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const int k = 1 + static_cast<int>(seed % 8);
    Vec<double> vals(k);
    for (int i = 0; i < k; ++i) vals[i] = 1.0 + 1.5 * i;
    Vec<double> lam(24);
    for (Index i = 0; i < 24; ++i) lam[i] = vals[i % k];
    const Mat<double> A = with_spectrum(lam, rng);
    const Vec<double> b = randv(24, rng);
    SolveParams<double> p;
    p.tol = 1e-10;
    auto c = cg(dense_op(A), b, p);
    auto g = gmres(dense_op(A), b, p);
    EXPECT_TRUE(c.stats.converged && g.stats.converged) << seed;
    EXPECT_LE(c.stats.iterations, k) << seed;
    EXPECT_LE(g.stats.iterations, k) << seed;
  }
}

TEST(Arnoldi, IdentityBreaksDownImmediately) {
  const Vec<double> q0 = Vec<double>::Ones(4) / 2.0;
  auto f = arnoldi(make_identity<double>(4), q0, 3);
  ASSERT_TRUE(f.breakdown_index.has_value());
  EXPECT_EQ(*f.breakdown_index, 0);
  EXPECT_EQ(f.square_H().rows(), 1);
  EXPECT_NEAR(f.square_H()(0, 0), 1.0, 1e-15);
}

TEST(Arnoldi, RitzValuesOfDiagonal) {
  const Vec<double> q0 = Vec<double>::Ones(3) / std::sqrt(3.0);
  auto f = arnoldi(make_diagonal<double>(Vec<double>{{1, 2, 3}}), q0, 3);
  Eigen::EigenSolver<Mat<double>> es(f.square_H());
  std::vector<double> ev;
  for (Index i = 0; i < es.eigenvalues().size(); ++i) ev.push_back(es.eigenvalues()[i].real());
  std::sort(ev.begin(), ev.end());
  ASSERT_EQ(ev.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(ev[i], i + 1, 1e-10);
}

TEST(Arnoldi, RelationAndOrthogonality) {
  std::mt19937_64 rng(9);
  const Mat<double> A = randn(32, 32, rng);
  Vec<double> q0 = randv(32, rng);
  q0.normalize();
  for (auto orth : {Orthogonalization::Classical, Orthogonalization::Modified}) {
    auto f = arnoldi(dense_op(A), q0, 20, 1e-12, orth);
    const Index T = f.steps();
    const Mat<double> lhs = A * f.Q.leftCols(T);
    const Mat<double> rhs = f.Q * f.H;
    const double anorm = Eigen::JacobiSVD<Mat<double>>(A).singularValues()[0];
    EXPECT_LE((lhs - rhs).colwise().norm().maxCoeff(), 1e-8 * anorm);
    EXPECT_LE((f.Q.transpose() * f.Q - Mat<double>::Identity(f.Q.cols(), f.Q.cols())).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Arnoldi, ClampedWhenTExceedsN) {
  std::mt19937_64 rng(10);
  Vec<double> q0 = randv(5, rng);
  q0.normalize();
  auto f = arnoldi(dense_op(randn(5, 5, rng)), q0, 9);
  EXPECT_TRUE(f.clamped);
  EXPECT_LE(f.steps(), 5);
}

TEST(Householder, ReflectorIsUnitary) {
  std::mt19937_64 rng(11);
  Vec<double> u = randv(20, rng);
  u.normalize();
  const Mat<double> R = Mat<double>::Identity(20, 20) - 2 * u * u.transpose();
  EXPECT_LE((R * R.transpose() - Mat<double>::Identity(20, 20)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Householder, RobustOnHilbertWhereMgsIsNot) {
  const Mat<double> A = hilbert(100);
  const Vec<double> v0 = Vec<double>::Ones(100);
  auto h = householder_arnoldi(dense_op(A), v0, 40, 0.0);
  auto m = arnoldi(dense_op(A), Vec<double>(v0.normalized()), 40, 0.0, Orthogonalization::Modified);
  auto ortho = [](const Mat<double>& Q) {
    return (Q.transpose() * Q - Mat<double>::Identity(Q.cols(), Q.cols())).cwiseAbs().maxCoeff();
  };
  EXPECT_LE(ortho(h.Q), 1e-12);
  EXPECT_GT(ortho(m.Q), 1e-8);
}

TEST(Householder, MatchesClassicalHOnWellConditioned) {
  std::mt19937_64 rng(12);
  const Mat<double> A = randn(16, 16, rng) + 4 * Mat<double>::Identity(16, 16);
  Vec<double> q0 = randv(16, rng);
  q0.normalize();
  auto a = arnoldi(dense_op(A), q0, 10);
  auto h = householder_arnoldi(dense_op(A), q0, 10);
  ASSERT_EQ(a.H.rows(), h.H.rows());
  EXPECT_LE((a.H - h.H).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_THROW(householder_arnoldi(dense_op(A), Vec<double>(Vec<double>::Zero(16)), 3), ParamError);
}

TEST(Lanczos, Examples) {
  Vec<double> d(8);
  for (Index i = 0; i < 8; ++i) d[i] = double(i + 1);
  const Vec<double> q0 = Vec<double>::Ones(8) / std::sqrt(8.0);
  auto f = lanczos(make_diagonal<double>(d), q0, 8);
  Eigen::SelfAdjointEigenSolver<Mat<double>> es(f.square_H());
  ASSERT_EQ(es.eigenvalues().size(), 8);
  for (Index i = 0; i < 8; ++i) EXPECT_NEAR(es.eigenvalues()[i], d[i], 1e-10);

  auto g = lanczos(make_identity<double>(5), Vec<double>(Vec<double>::Ones(5) / std::sqrt(5.0)), 4);
  ASSERT_TRUE(g.breakdown_index.has_value());
  EXPECT_EQ(g.square_H().rows(), 1);
  EXPECT_NEAR(g.square_H()(0, 0), 1.0, 1e-15);
}

TEST(Lanczos, TridiagonalAndRelation) {
  std::mt19937_64 rng(13);
  const Mat<double> g = randn(64, 64, rng);
  const Mat<double> S = g + g.transpose();
  Vec<double> q0 = randv(64, rng);
  q0.normalize();
  auto f = lanczos(dense_op(S), q0, 30);
  for (Index i = 0; i < f.H.rows(); ++i) {
    for (Index j = 0; j < f.H.cols(); ++j) {
      if (std::abs(i - j) > 1) {
        EXPECT_LE(std::abs(f.H(i, j)), 1e-10);
      }
    }
  }
  const double snorm = Eigen::SelfAdjointEigenSolver<Mat<double>>(S).eigenvalues().cwiseAbs().maxCoeff();
  EXPECT_LE((S * f.Q.leftCols(f.steps()) - f.Q * f.H).colwise().norm().maxCoeff(), 1e-8 * snorm);
}

TEST(Power, Examples) {
  auto r = power_iteration(make_diagonal<double>(Vec<double>{{3, 1}}), 1e-7);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.lambda, 3, 1e-6);
  EXPECT_NEAR(std::abs(r.v[0]), 1, 1e-6);
  auto id = power_iteration(make_identity<double>(6));
  EXPECT_EQ(id.iterations, 1);
  EXPECT_NEAR(id.lambda, 1, 1e-15);
  std::mt19937_64 rng(14);
  const Mat<double> A = spd(32, rng);
  auto s = power_iteration(dense_op(A), 1e-9, 5000, 1);
  EXPECT_TRUE(s.converged);
  const double lmax = Eigen::SelfAdjointEigenSolver<Mat<double>>(A).eigenvalues().maxCoeff();
  EXPECT_NEAR(s.lambda, lmax, 1e-5 * lmax);
}

TEST(Slq, Examples) {
  EXPECT_NEAR(slq_logdet(make_identity<double>(10), 5, 10, 0), 0.0, 1e-14);
  const double e = std::exp(1.0);
  EXPECT_NEAR(slq_logdet(make_diagonal<double>(Vec<double>{{e, e}}), 3, 2, 0, ProbeDistribution::Rademacher), 2.0, 1e-12);
  EXPECT_THROW(slq_logdet(make_diagonal<double>(Vec<double>{{1, -1}}), 3, 2, 0), DomainError);
}

TEST(Slq, Spd500WithinTwoPercent) {
  std::mt19937_64 rng(15);
  const Mat<double> A = spd(500, rng);
  const double exact = 2 * Mat<double>(A.llt().matrixL()).diagonal().array().log().sum();
  const double est = slq_logdet(dense_op(A), 25, 30, 1);
  EXPECT_LE(std::abs(est - exact) / std::abs(exact), 0.02);
}

TEST(Rsvd, Examples) {
  std::mt19937_64 rng(16);
  const Mat<double> L = randn(40, 3, rng), R = randn(3, 30, rng);
  auto s = randomized_svd(dense_op(L * R), 3, 2, 0);
  const Mat<double> rec = s.U * s.sigma.asDiagonal() * s.V.transpose();
  EXPECT_LE((rec - L * R).norm(), 1e-8 * (L * R).norm());
  EXPECT_LE((s.U.transpose() * s.U - Mat<double>::Identity(3, 3)).norm(), 1e-10);

  auto z = randomized_svd(dense_op(Mat<double>::Zero(10, 10)), 2, 1, 0);
  EXPECT_EQ(z.sigma.norm(), 0.0);

  const Mat<double> G = randn(64, 32, rng);
  Vec<double> sv = Eigen::JacobiSVD<Mat<double>>(G).singularValues();
  // Give the spectrum a decay so a 10-term sketch resolves it.
  Eigen::JacobiSVD<Mat<double>> svd(G, Eigen::ComputeThinU | Eigen::ComputeThinV);
  for (Index i = 0; i < sv.size(); ++i) sv[i] = std::pow(0.5, double(i));
  const Mat<double> Gd = svd.matrixU() * sv.asDiagonal() * svd.matrixV().transpose();
  auto r = randomized_svd(dense_op(Gd), 10, 5, 3, 4);
  for (Index i = 0; i < 10; ++i) EXPECT_NEAR(r.sigma[i], sv[i], 1e-6 * sv[i]);
}

TEST(Determinism, SameSeedSameStats) {
  std::mt19937_64 rng(17);
  const Mat<double> A = randn(30, 30, rng) + 5 * Mat<double>::Identity(30, 30);
  const Vec<double> b = randv(30, rng);
  auto r1 = gmres(dense_op(A), b);
  auto r2 = gmres(dense_op(A), b);
  EXPECT_EQ(r1.stats.residual_history, r2.stats.residual_history);
  EXPECT_EQ(r1.x, r2.x);
  const auto S = dense_op(spd(20, rng));
  EXPECT_EQ(slq_logdet(S, 4, 8, 9), slq_logdet(S, 4, 8, 9));
}
