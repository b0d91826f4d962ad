#pragma once

// Seeded synthetic problems for the benchmarks and PDE demos.

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "cola/dispatch.hpp"

namespace cola::problems {

// -- sums of PSD terms ---------------------------------------------------------

/// m Dense PSD terms G_i G_i^T / rank with Gaussian G_i (n x rank).
inline std::vector<Operator<double>> random_psd_terms(int m, Index n, Index rank, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<Operator<double>> out;
  out.reserve(m);
  for (int i = 0; i < m; ++i) {
    Mat<double> G(n, rank);
    for (Index c = 0; c < rank; ++c)
      for (Index r = 0; r < n; ++r) G(r, c) = g(rng);
    out.push_back(annotate(make_dense<double>(Mat<double>(G * G.transpose() / static_cast<double>(rank))),
                           Annotations(Annotation::PSD)));
  }
  return out;
}

/// Random SPD matrix Q diag(λ) Q^T with λ log-uniform in [lo, hi].
inline Mat<double> random_spd(Index n, double lo, double hi, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  Mat<double> G(n, n);
  for (Index c = 0; c < n; ++c)
    for (Index r = 0; r < n; ++r) G(r, c) = g(rng);
  Eigen::HouseholderQR<Mat<double>> qr(G);
  const Mat<double> Q = qr.householderQ();
  Vec<double> lam(n);
  for (Index i = 0; i < n; ++i) lam[i] = std::exp(u(rng));
  Mat<double> A = Q * lam.asDiagonal() * Q.transpose();
  return (A + A.transpose()) / 2;
}

// -- random-feature ridge regression -------------------------------------------

inline constexpr const char* kRffGenerator = "rff-v1";

struct RffProblem {
  std::vector<Operator<double>> terms;  // A_i = Φ_i^T Φ_i / batch + ridge I
  Vec<double> b;                        // right-hand side of the mean system
  double ridge = 0;
};

/// Random Fourier features of Gaussian inputs x ∈ R^d: φ(x) = sqrt(2/N) cos(W x + c),
/// W ~ N(0, 1/ell²), c ~ U[0, 2π); targets sin(x_0) + 0.1 noise. Each term is
/// the Gram matrix of a mini-batch of `batch` points. The mean system
/// (1/M) Σ A_i w = b is the ridge normal equation.
inline RffProblem rff_normal_equations(int M, Index N, double ridge, std::uint64_t seed, int batch = 20, int d = 5,
                                       double ell = 2.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);
  Mat<double> W(N, d);
  for (Index i = 0; i < N; ++i)
    for (int j = 0; j < d; ++j) W(i, j) = g(rng) / ell;
  Vec<double> c(N);
  for (Index i = 0; i < N; ++i) c[i] = phase(rng);
  const double amp = std::sqrt(2.0 / static_cast<double>(N));
  RffProblem out;
  out.ridge = ridge;
  out.b = Vec<double>::Zero(N);
  for (int t = 0; t < M; ++t) {
    Mat<double> Phi(batch, N);
    Vec<double> y(batch);
    for (int r = 0; r < batch; ++r) {
      Vec<double> x(d);
      for (int j = 0; j < d; ++j) x[j] = g(rng);
      Phi.row(r) = (amp * (W * x + c).array().cos()).matrix().transpose();
      y[r] = std::sin(x[0]) + 0.1 * g(rng);
    }
    out.b += Phi.transpose() * y;
    const Operator<double> gram =
        op_scale(1.0 / batch, op_product<double>({make_dense<double>(Mat<double>(Phi.transpose())), make_dense<double>(Phi)}));
    out.terms.push_back(annotate(op_sum<double>({gram, make_scalar<double>(ridge, N)}), Annotations(Annotation::PSD)));
  }
  out.b /= static_cast<double>(M) * batch;
  return out;
}

// -- Kronecker ladder --------------------------------------------------------

inline constexpr const char* kKronGenerator = "kron-dtd-v1";

/// Kron(dense, Kron(diagonal, triangular)) with well-conditioned factors:
/// dense = I + 0.1 G / sqrt(n), diagonal in [1, 2], lower triangular with unit-to-two
/// diagonal and 0.1 / sqrt(n) off-diagonal noise.
inline Operator<double> kron_ladder(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(1.0, 2.0);
  const double s = 0.1 / std::sqrt(static_cast<double>(n));
  Mat<double> D = Mat<double>::Identity(n, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) D(i, j) += s * g(rng);
  Vec<double> dg(n);
  for (Index i = 0; i < n; ++i) dg[i] = u(rng);
  Mat<double> T = Mat<double>::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    T(j, j) = u(rng);
    for (Index i = j + 1; i < n; ++i) T(i, j) = s * g(rng);
  }
  return op_kron<double>(make_dense<double>(D),
                         op_kron<double>(make_diagonal<double>(dg), make_triangular<double>(T, true)));
}

// -- finite differences ----------------------------------------------------------

/// 1-D Dirichlet Laplacian -u'' on n interior points of (0, 1), PSD.
inline Operator<double> laplacian_1d(Index n) {
  const double h2 = 1.0 / ((n + 1.0) * (n + 1.0));
  Vec<double> off = Vec<double>::Constant(n - 1, -1.0 / h2);
  Vec<double> mid = Vec<double>::Constant(n, 2.0 / h2);
  return annotate(make_tridiagonal<double>(off, mid, off), Annotations(Annotation::PSD));
}

/// Same operator stored as CSR.
inline Operator<double> laplacian_1d_csr(Index n) {
  const double h2 = 1.0 / ((n + 1.0) * (n + 1.0));
  CsrPayload<double> p;
  p.row_ptr.push_back(0);
  std::vector<double> vals;
  for (Index i = 0; i < n; ++i) {
    if (i > 0) {
      p.col_idx.push_back(i - 1);
      vals.push_back(-1.0 / h2);
    }
    p.col_idx.push_back(i);
    vals.push_back(2.0 / h2);
    if (i + 1 < n) {
      p.col_idx.push_back(i + 1);
      vals.push_back(-1.0 / h2);
    }
    p.row_ptr.push_back(static_cast<Index>(p.col_idx.size()));
  }
  p.values = Eigen::Map<Vec<double>>(vals.data(), static_cast<Index>(vals.size()));
  return annotate(make_sparse_csr<double>(std::move(p), Shape{n, n}), Annotations(Annotation::PSD));
}

/// 2-D Dirichlet Laplacian on an n x n interior grid: L ⊕ L.
inline Operator<double> laplacian_2d(Index n) {
  return op_kron_sum<double>(laplacian_1d(n), laplacian_1d(n));
}

/// Bi-Laplacian Δ² as the product of two Laplacians (the split-friendly form).
inline Operator<double> bilaplacian_2d(Index n) {
  const Operator<double> L = laplacian_2d(n);
  return annotate(op_product<double>({L, L}), Annotations(Annotation::PSD));
}

// -- minimal surface ---------------------------------------------------------------

/// Boundary data z = g(x, y) on the unit square.
using BoundaryFn = std::function<double(double, double)>;

struct MinSurfResult {
  Vec<double> z;                  // interior values, x fastest
  std::vector<double> residuals;  // h²-scaled ‖f‖_∞ after each Newton step (index 0 = initial)
  std::vector<int> gmres_iterations;
  int steps = 0;
  bool converged = false;
};

namespace detail {

struct Grid2 {
  Index n;
  double h;
  BoundaryFn g;
  double at(const Vec<double>& z, Index i, Index j) const {  // i, j in [0, n+1]
    if (i == 0 || j == 0 || i == n + 1 || j == n + 1) return g(i * h, j * h);
    return z[(j - 1) * n + (i - 1)];
  }
};

// h² f(z) with f = (1 + z_x²) z_yy − 2 z_x z_y z_xy + (1 + z_y²) z_xx.
inline Vec<double> minsurf_residual(const Grid2& G, const Vec<double>& z) {
  const Index n = G.n;
  Vec<double> f(n * n);
  const double h = G.h;
  for (Index j = 1; j <= n; ++j)
    for (Index i = 1; i <= n; ++i) {
      const double c = G.at(z, i, j);
      const double zx = (G.at(z, i + 1, j) - G.at(z, i - 1, j)) / (2 * h);
      const double zy = (G.at(z, i, j + 1) - G.at(z, i, j - 1)) / (2 * h);
      const double zxx = G.at(z, i + 1, j) - 2 * c + G.at(z, i - 1, j);
      const double zyy = G.at(z, i, j + 1) - 2 * c + G.at(z, i, j - 1);
      const double zxy = (G.at(z, i + 1, j + 1) - G.at(z, i - 1, j + 1) - G.at(z, i + 1, j - 1) + G.at(z, i - 1, j - 1)) / 4;
      f[(j - 1) * n + (i - 1)] = (1 + zx * zx) * zyy - 2 * zx * zy * zxy + (1 + zy * zy) * zxx;
    }
  return f;
}

// Exact linearization of minsurf_residual at z applied to v (v vanishes on the boundary).
inline Vec<double> minsurf_jacobian_apply(const Grid2& G, const Vec<double>& z, const Vec<double>& v) {
  const Index n = G.n;
  const double h = G.h;
  Grid2 V{n, h, [](double, double) { return 0.0; }};
  Vec<double> out(n * n);
  for (Index j = 1; j <= n; ++j)
    for (Index i = 1; i <= n; ++i) {
      const double c = G.at(z, i, j);
      const double zx = (G.at(z, i + 1, j) - G.at(z, i - 1, j)) / (2 * h);
      const double zy = (G.at(z, i, j + 1) - G.at(z, i, j - 1)) / (2 * h);
      const double zxx = G.at(z, i + 1, j) - 2 * c + G.at(z, i - 1, j);
      const double zyy = G.at(z, i, j + 1) - 2 * c + G.at(z, i, j - 1);
      const double zxy = (G.at(z, i + 1, j + 1) - G.at(z, i - 1, j + 1) - G.at(z, i + 1, j - 1) + G.at(z, i - 1, j - 1)) / 4;
      const double vc = V.at(v, i, j);
      const double vx = (V.at(v, i + 1, j) - V.at(v, i - 1, j)) / (2 * h);
      const double vy = (V.at(v, i, j + 1) - V.at(v, i, j - 1)) / (2 * h);
      const double vxx = V.at(v, i + 1, j) - 2 * vc + V.at(v, i - 1, j);
      const double vyy = V.at(v, i, j + 1) - 2 * vc + V.at(v, i, j - 1);
      const double vxy = (V.at(v, i + 1, j + 1) - V.at(v, i - 1, j + 1) - V.at(v, i + 1, j - 1) + V.at(v, i - 1, j - 1)) / 4;
      out[(j - 1) * n + (i - 1)] = 2 * zx * vx * zyy + (1 + zx * zx) * vyy - 2 * (vx * zy + zx * vy) * zxy -
                                   2 * zx * zy * vxy + 2 * zy * vy * zxx + (1 + zy * zy) * vxx;
    }
  return out;
}

}  // namespace detail

/// Newton's method z <- z - J^-1 f(z) on an n x n interior grid, starting
/// from the discrete harmonic extension of the boundary data. J is a
/// matrix-free operator; each step is a dispatch solve (GMRES).
inline MinSurfResult minimal_surface(Index n, const BoundaryFn& g, double tol = 1e-10, int max_newton = 20,
                                     double lin_tol = 1e-12) {
  if (n < 1) throw ParamError("minimal_surface: grid must have at least one interior point");
  const double h = 1.0 / (n + 1.0);
  detail::Grid2 G{n, h, g};
  // Harmonic initial guess: -Δ_h z = boundary contributions.
  const Operator<double> L = laplacian_2d(n);
  Vec<double> rhs = Vec<double>::Zero(n * n);
  const double ih2 = 1.0 / (h * h);
  for (Index j = 1; j <= n; ++j)
    for (Index i = 1; i <= n; ++i) {
      double s = 0;
      if (i == 1) s += g(0, j * h);
      if (i == n) s += g((n + 1) * h, j * h);
      if (j == 1) s += g(i * h, 0);
      if (j == n) s += g(i * h, (n + 1) * h);
      rhs[(j - 1) * n + (i - 1)] = s * ih2;
    }
  SolveParams<double> lp;
  lp.tol = 1e-13;
  lp.max_iter = 20 * static_cast<int>(n * n);
  lp.record_history = false;
  MinSurfResult out;
  out.z = rhs.norm() > 0 ? solve(L, rhs, lp).x : Vec<double>(Vec<double>::Zero(n * n));
  Vec<double> f = detail::minsurf_residual(G, out.z);
  out.residuals.push_back(f.cwiseAbs().maxCoeff());
  SolveParams<double> np;
  np.tol = lin_tol;
  np.max_iter = static_cast<int>(n * n) + 10;
  np.record_history = false;
  for (int step = 1; step <= max_newton; ++step) {
    const Vec<double> zk = out.z;
    const detail::Grid2 Gk = G;
    const Operator<double> J = make_function_op<double>(
        [Gk, zk](const Vec<double>& v) { return detail::minsurf_jacobian_apply(Gk, zk, v); }, Shape{n * n, n * n});
    if (f.norm() > 0) {
      SolveResult<double> s = solve(J, Vec<double>(-f), np);
      out.gmres_iterations.push_back(s.stats.iterations);
      out.z += s.x;
    } else {
      out.gmres_iterations.push_back(0);
    }
    out.steps = step;
    f = detail::minsurf_residual(G, out.z);
    const double r = f.cwiseAbs().maxCoeff();
    out.residuals.push_back(r);
    if (!std::isfinite(r)) break;
    if (r <= tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

// -- compactified 1-D Schrödinger operator -----------------------------------------------

/// H = -½ d²/dx² + ½ x² under x = tan(π ξ / 2), discretized by central
/// differences on n interior points of ξ ∈ (-xi_max, xi_max) with Dirichlet
/// ends. The coordinate change makes the tridiagonal matrix nonsymmetric.
inline Operator<double> schrodinger_1d(Index n, double xi_max = 0.9) {
  if (n < 3) throw ParamError("schrodinger_1d: need at least 3 grid points");
  const double pi = std::numbers::pi;
  const double h = 2 * xi_max / (n + 1.0);
  Vec<double> sub(n - 1), mid(n), sup(n - 1);
  for (Index i = 0; i < n; ++i) {
    const double xi = -xi_max + (i + 1) * h;
    const double a = pi * xi / 2;
    const double gd = (pi / 2) / (std::cos(a) * std::cos(a));           // dx/dξ
    const double gdd = (pi * pi / 2) * std::tan(a) / (std::cos(a) * std::cos(a));  // d²x/dξ²
    const double x = std::tan(a);
    // d²/dx² = (1/g²) d²/dξ² − (g'/g³) d/dξ
    const double c2 = -0.5 / (gd * gd * h * h);
    const double c1 = 0.5 * gdd / (gd * gd * gd) / (2 * h);
    mid[i] = -2 * c2 + 0.5 * x * x;
    if (i > 0) sub[i - 1] = c2 - c1;
    if (i + 1 < n) sup[i] = c2 + c1;
  }
  return make_tridiagonal<double>(sub, mid, sup);
}

struct SchrodingerResult {
  Vec<double> energies;  // ascending
  IterStats stats;
};

/// Smallest k eigenvalues by Arnoldi on H^-1 (the inner solves dispatch to the
/// tridiagonal rule).
inline SchrodingerResult schrodinger_lowest(const Operator<double>& H, Index k, double tol = 1e-10,
                                            std::uint64_t seed = 0) {
  SolveParams<double> inner;
  inner.tol = 1e-13;
  inner.record_history = false;
  SolveParams<double> p;
  p.tol = tol;
  p.rng_seed = seed;
  p.algorithm_override = "arnoldi";
  EigResult<double> e = eig(inverse(H, inner), k, Which::Largest, p);
  SchrodingerResult out;
  out.stats = e.stats;
  out.energies.resize(e.eigvals.size());
  for (Index i = 0; i < e.eigvals.size(); ++i) out.energies[i] = 1.0 / e.eigvals[i].real();
  std::sort(out.energies.data(), out.energies.data() + out.energies.size());
  return out;
}

}  // namespace cola::problems
