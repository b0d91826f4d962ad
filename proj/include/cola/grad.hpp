#pragma once

// Parameter cotangents: u^T (dA/dθ) v for every leaf parameter, closed-form
// pullbacks for solve, eigenvalues, eigenvectors, logdet and diag, and a
// central finite-difference checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "cola/dispatch.hpp"

namespace cola {

namespace detail {

template <class S>
Index leaf_param_count(const Operator<S>& A) {
  Index n = 0;
  for (const auto& [name, v] : leaf_params(A)) n += v.size();
  return n;
}

template <class S>
Vec<S> circular_correlation(const Vec<S>& u, const Vec<S>& v) {
  // g[m] = sum_i u[i] v[(i - m) mod n]
  const Index n = u.size();
  Eigen::VectorXcd fu = dft(u.template cast<cdouble>().eval(), false);
  Eigen::VectorXcd fv = dft(v.template cast<cdouble>().eval(), true) * static_cast<double>(n);
  Eigen::VectorXcd g = dft(Eigen::VectorXcd(fu.cwiseProduct(fv)), true);
  Vec<S> out(n);
  for (Index i = 0; i < n; ++i) out[i] = from_complex<S>(g[i]);
  return out;
}

// Writes sum_k U(:,k)^T (dA/dθ) V(:,k) into out[offset...] in flatten order.
template <class S>
void vjp_into(const Operator<S>& A, const Mat<S>& U, const Mat<S>& V, Vec<S>& out, Index& offset) {
  const Node<S>& n = A.node();
  switch (A.kind()) {
    case Kind::Dense: {
      const Mat<S> G = U * V.transpose();
      out.segment(offset, G.size()) += flat<S>(G);
      offset += G.size();
      return;
    }
    case Kind::Diagonal: {
      out.segment(offset, A.rows()) += U.cwiseProduct(V).rowwise().sum();
      offset += A.rows();
      return;
    }
    case Kind::ScalarMul:
      out[offset++] += U.cwiseProduct(V).sum();
      return;
    case Kind::Sparse: {
      const auto& c = A.template payload<CsrPayload<S>>();
      for (Index i = 0; i < A.rows(); ++i)
        for (Index k = c.row_ptr[i]; k < c.row_ptr[i + 1]; ++k) out[offset + k] += U.row(i).cwiseProduct(V.row(c.col_idx[k])).sum();
      offset += static_cast<Index>(c.col_idx.size());
      return;
    }
    case Kind::Circulant: {
      Vec<S> g = Vec<S>::Zero(A.rows());
      for (Index k = 0; k < U.cols(); ++k) g += circular_correlation<S>(U.col(k), V.col(k));
      out.segment(offset, g.size()) += g;
      offset += g.size();
      return;
    }
    case Kind::Triangular: {
      const auto& t = A.template payload<TriangularData<S>>();
      const Vec<S> g = triangle_entries<S>(Mat<S>(U * V.transpose()), t.lower);
      out.segment(offset, g.size()) += g;
      offset += g.size();
      return;
    }
    case Kind::Tridiagonal: {
      const Index m = A.rows();
      for (Index i = 0; i + 1 < m; ++i) out[offset + i] += U.row(i + 1).cwiseProduct(V.row(i)).sum();
      offset += m - 1;
      for (Index i = 0; i < m; ++i) out[offset + i] += U.row(i).cwiseProduct(V.row(i)).sum();
      offset += m;
      for (Index i = 0; i + 1 < m; ++i) out[offset + i] += U.row(i).cwiseProduct(V.row(i + 1)).sum();
      offset += m - 1;
      return;
    }
    case Kind::LowRank: {
      // A = L R: dA = dL R + L dR.
      const auto& lr = A.template payload<LowRankPayload<S>>();
      const Mat<S> GL = U * (lr.V * V).transpose();
      const Mat<S> GR = (lr.U.transpose() * U) * V.transpose();
      out.segment(offset, GL.size()) += flat<S>(GL);
      offset += GL.size();
      out.segment(offset, GR.size()) += flat<S>(GR);
      offset += GR.size();
      return;
    }
    case Kind::Sum:
      for (const auto& c : n.children) vjp_into(c, U, V, out, offset);
      return;
    case Kind::Counted:
      vjp_into(n.children[0], U, V, out, offset);
      return;
    case Kind::Scale:
      vjp_into(n.children[0], Mat<S>(n.coef * U), V, out, offset);
      return;
    case Kind::Product: {
      // Child k sees left = (A_1..A_{k-1})^T U and right = A_{k+1}..A_m V.
      const auto& fs = n.children;
      const std::size_t m = fs.size();
      std::vector<Mat<S>> right(m);
      right[m - 1] = V;
      for (std::size_t k = m - 1; k > 0; --k) right[k - 1] = fs[k].apply_block(right[k]);
      Mat<S> left = U;
      for (std::size_t k = 0; k < m; ++k) {
        vjp_into(fs[k], left, right[k], out, offset);
        if (k + 1 < m) left = op_transpose(fs[k]).apply_block(left);
      }
      return;
    }
    case Kind::Kron:
    case Kind::KronSum: {
      // With v = vec(X), u = vec(Y) (X, Y of shape nB x nA):
      //   u^T (dA ⊗ B) v = <dA, Y^T (B X)>,  u^T (A ⊗ dB) v = <dB, Y (A X^T)^T>.
      const bool ksum = A.kind() == Kind::KronSum;
      const Operator<S>& Af = n.children[0];
      const Operator<S>& Bf = n.children[1];
      const Index ar = Af.rows(), ac = Af.cols(), br = Bf.rows(), bc = Bf.cols();
      const Index k = U.cols();
      Mat<S> UA(ar, br * k), VA(ac, br * k), UB(br, ar * k), VB(bc, ar * k);
      for (Index j = 0; j < k; ++j) {
        const Mat<S> X = unvec<S>(V.col(j), bc, ac);
        const Mat<S> Y = unvec<S>(U.col(j), br, ar);
        const Mat<S> BX = ksum ? X : Mat<S>(Bf.apply_block(X));
        const Mat<S> AXt = ksum ? Mat<S>(X.transpose()) : Mat<S>(Af.apply_block(Mat<S>(X.transpose())));
        UA.middleCols(j * br, br) = Y.transpose();
        VA.middleCols(j * br, br) = BX.transpose();
        UB.middleCols(j * ar, ar) = Y;
        VB.middleCols(j * ar, ar) = AXt.transpose();
      }
      vjp_into(Af, UA, VA, out, offset);
      vjp_into(Bf, UB, VB, out, offset);
      return;
    }
    case Kind::BlockDiag: {
      Index r = 0, c = 0;
      for (const auto& b : n.children) {
        vjp_into(b, Mat<S>(U.middleRows(r, b.rows())), Mat<S>(V.middleRows(c, b.cols())), out, offset);
        r += b.rows();
        c += b.cols();
      }
      return;
    }
    case Kind::Block2x2: {
      const Index r1 = n.children[0].rows(), c1 = n.children[0].cols();
      const Index r2 = A.rows() - r1, c2 = A.cols() - c1;
      const Mat<S> Ut = U.topRows(r1), Ub = U.bottomRows(r2), Vt = V.topRows(c1), Vb = V.bottomRows(c2);
      vjp_into(n.children[0], Ut, Vt, out, offset);
      vjp_into(n.children[1], Ut, Vb, out, offset);
      vjp_into(n.children[2], Ub, Vt, out, offset);
      vjp_into(n.children[3], Ub, Vb, out, offset);
      return;
    }
    case Kind::Concat: {
      Index off = 0;
      for (const auto& b : n.children) {
        if (n.axis == Axis::Rows) {
          vjp_into(b, Mat<S>(U.middleRows(off, b.rows())), V, out, offset);
          off += b.rows();
        } else {
          vjp_into(b, U, Mat<S>(V.middleRows(off, b.cols())), out, offset);
          off += b.cols();
        }
      }
      return;
    }
    default:
      // Closure-backed leaves declare no parameters.
      offset += leaf_param_count(A);
      return;
  }
}

}  // namespace detail

/// sum_k U(:,k)^T (dA/dθ) V(:,k) over the flattened parameters of A.
template <class S>
ParamCotangent<S> param_vjp_block(const Operator<S>& A, const Mat<S>& U, const Mat<S>& V) {
  if (U.rows() != A.rows() || V.rows() != A.cols() || U.cols() != V.cols()) {
    throw ShapeError("param_vjp: operator " + A.shape().str() + " with blocks " + Shape{U.rows(), U.cols()}.str() +
                     " and " + Shape{V.rows(), V.cols()}.str());
  }
  ParamCotangent<S> out;
  out.layout = flatten_params(A).layout;
  Index total = 0;
  for (const auto& r : out.layout) total += r.extent;
  out.values = Vec<S>::Zero(total);
  Index offset = 0;
  detail::vjp_into(A, U, V, out.values, offset);
  return out;
}

/// u^T (dA/dθ) v.
template <class S>
ParamCotangent<S> param_vjp_mvm(const Operator<S>& A, const Vec<S>& u, const Vec<S>& v) {
  return param_vjp_block(A, Mat<S>(u), Mat<S>(v));
}

template <class S>
struct VjpSolveResult {
  ParamCotangent<S> dtheta;
  Vec<S> db;
  IterStats stats;  // merged stats of the two inner solves
};

/// Pullback of y = A^-1 b against w: dθ = -(A^-T w)^T dA y, db = A^-T w.
/// Only two solves and two vectors are kept alive, whatever the iteration count.
template <class S>
VjpSolveResult<S> vjp_solve(const Operator<S>& A, const Vec<S>& b, const Vec<S>& w, SolveParams<S> p = {}) {
  if (w.size() != A.rows()) throw ShapeError("vjp_solve: cotangent length does not match the operator");
  p.record_history = false;
  VjpSolveResult<S> out;
  SolveResult<S> s = solve(op_transpose(A), w, p);
  SolveResult<S> y = solve(A, b, p);
  out.stats = s.stats;
  out.stats.merge(y.stats);
  out.stats.mvm_count = s.stats.mvm_count + y.stats.mvm_count;
  out.dtheta = S(-1) * param_vjp_mvm(A, s.x, y.x);
  out.db = std::move(s.x);
  return out;
}

template <class S>
struct VjpEigResult {
  ParamCotangent<S> dtheta;
  bool degenerate = false;  // some eigen-gap below 1e-8: derivative ill-defined
};

namespace detail {

inline bool has_small_gap(const Vec<double>& sorted, double thresh = 1e-8) {
  for (Index i = 0; i + 1 < sorted.size(); ++i)
    if (sorted[i + 1] - sorted[i] < thresh) return true;
  return false;
}

// Full eigendecomposition in ascending order (dense within the cap).
template <class S>
EigResult<S> full_eig(const Operator<S>& A, const SolveParams<S>& p) {
  SolveParams<S> q = p;
  if (within_cap(A)) q.algorithm_override = "dense-eig";
  return eig(A, kAll, Which::Smallest, q);
}

/// Sign gauge: the entry of largest magnitude is made real positive.
template <class S>
Vec<S> fix_gauge(Vec<S> v) {
  Index imax = 0;
  v.cwiseAbs().maxCoeff(&imax);
  const S e = v[imax];
  if (std::abs(e) > 0) v *= std::abs(e) / e;
  return v;
}

}  // namespace detail

/// Pullback of the eigenvalues (ascending order) against w.
template <class S>
VjpEigResult<S> vjp_eigvals(const Operator<S>& A, const Vec<S>& w, const SolveParams<S>& p = {}) {
  if (!A.shape().square()) throw ShapeError("vjp_eigvals: operator " + A.shape().str() + " is not square");
  if (w.size() != A.rows()) throw ShapeError("vjp_eigvals: cotangent length does not match the operator");
  EigResult<S> e = detail::full_eig(A, p);
  VjpEigResult<S> out;
  out.degenerate = detail::has_small_gap(e.eigvals.real());
  if (!e.eigvecs) throw DomainError("vjp_eigvals: complex spectrum of a real operator");
  const Mat<S> Vr = dense(e.eigvecs);
  if (A.has(Annotation::SelfAdjoint)) {
    out.dtheta = param_vjp_block(A, Mat<S>(Vr.conjugate() * w.asDiagonal()), Vr);
  } else {
    // Left eigenvectors are the rows of V^-1.
    const Mat<S> L = Vr.inverse();
    out.dtheta = param_vjp_block(A, Mat<S>(L.transpose() * w.asDiagonal()), Vr);
  }
  return out;
}

/// Pullback of the gauge-fixed eigenvector v_i (ascending index) against w:
/// dθ = ((λ_i I - A)^+ w)^T dA v_i, with the pseudo-inverse applied by MINRES
/// on the complement of v_i.
template <class S>
VjpEigResult<S> vjp_eigvec(const Operator<S>& A, Index i, const Vec<S>& w, const SolveParams<S>& p = {}) {
  if (!A.has(Annotation::SelfAdjoint)) throw ParamError("vjp_eigvec: operator must be annotated SelfAdjoint");
  if (w.size() != A.rows()) throw ShapeError("vjp_eigvec: cotangent length does not match the operator");
  if (i < 0 || i >= A.rows()) throw ParamError("vjp_eigvec: eigen index out of range");
  EigResult<S> e = detail::full_eig(A, p);
  const Vec<double> lam = e.eigvals.real();
  VjpEigResult<S> out;
  const double gl = i > 0 ? lam[i] - lam[i - 1] : std::numeric_limits<double>::infinity();
  const double gr = i + 1 < lam.size() ? lam[i + 1] - lam[i] : std::numeric_limits<double>::infinity();
  out.degenerate = std::min(gl, gr) < 1e-8;
  Vec<S> ei = Vec<S>::Zero(A.rows());
  ei[i] = S(1);
  const Vec<S> v = detail::fix_gauge<S>(e.eigvecs.apply(ei));
  const double l = lam[i];
  auto project = [v](const Vec<S>& x) -> Vec<S> { return x - v * v.dot(x); };
  const Operator<S> Aop = A;
  const Operator<S> shifted = annotate(
      make_function_op<S>([Aop, l, project](const Vec<S>& x) {
        const Vec<S> px = project(x);
        return project(Vec<S>(S(l) * px - Aop.apply(px)));
      }, A.shape()),
      Annotations(Annotation::SelfAdjoint));
  // w^T (λI - A)^+ = conj((λI - A)^+ conj(w))^T for self-adjoint A.
  const Vec<S> rhs = project(Vec<S>(w.conjugate()));
  Vec<S> s = Vec<S>::Zero(A.rows());
  // A residue at roundoff level would only feed noise to MINRES.
  if (rhs.norm() > 64 * std::numeric_limits<double>::epsilon() * w.norm()) s = project(minres<S>(shifted, rhs, p).x);
  out.dtheta = param_vjp_mvm(A, Vec<S>(s.conjugate()), v);
  return out;
}

/// Gradient of log|det A|: Tr(A^-1 dA). Exact mode runs one solve per unit
/// vector; estimate mode averages Hutchinson probes z: (A^-T z)^T dA z.
template <class S>
ParamCotangent<S> vjp_logdet(const Operator<S>& A, Mode mode = Mode::Exact, const ProbeConfig& probes = {},
                             SolveParams<S> p = {}) {
  if (!A.shape().square()) throw ShapeError("vjp_logdet: operator " + A.shape().str() + " is not square");
  p.record_history = false;
  const Index n = A.rows();
  const Operator<S> At = op_transpose(A);
  const Registry<S>& reg = default_registry<S>();
  reg.freeze();
  auto solve_t = [&](const Mat<S>& B) {
    IterStats st;
    Mat<S> X = detail::solve_block(reg, At, B, p, st);
    if (!st.converged) throw NumericalError("vjp_logdet: inner " + st.algorithm + " solve did not converge");
    return X;
  };
  if (mode == Mode::Exact) {
    ParamCotangent<S> out = param_vjp_block(A, Mat<S>(Mat<S>::Zero(n, 0)), Mat<S>(Mat<S>::Zero(n, 0)));
    const Index chunk = 64;
    for (Index s = 0; s < n; s += chunk) {
      const Index c = std::min(chunk, n - s);
      Mat<S> E = Mat<S>::Zero(n, c);
      for (Index j = 0; j < c; ++j) E(s + j, j) = S(1);
      out += param_vjp_block(A, solve_t(E), E);
    }
    return out;
  }
  if (!A.has(Annotation::PSD)) throw DomainError("vjp_logdet: estimate mode needs a PSD operator");
  probes.validate();
  std::mt19937_64 rng(probes.seed);
  Mat<S> Z(n, probes.n_probes);
  for (int j = 0; j < probes.n_probes; ++j) Z.col(j) = detail::random_vec<S>(n, rng, probes.distribution);
  ParamCotangent<S> out = param_vjp_block(A, solve_t(Z), Z);
  out.values /= static_cast<double>(probes.n_probes);
  return out;
}

/// Pullback of diag(A) against w: sum_i w_i e_i^T dA e_i.
template <class S>
ParamCotangent<S> vjp_diag(const Operator<S>& A, const Vec<S>& w) {
  if (!A.shape().square()) throw ShapeError("vjp_diag: operator " + A.shape().str() + " is not square");
  if (w.size() != A.rows()) throw ShapeError("vjp_diag: cotangent length does not match the operator");
  const Index n = A.rows();
  ParamCotangent<S> out = param_vjp_block(A, Mat<S>(Mat<S>::Zero(n, 0)), Mat<S>(Mat<S>::Zero(n, 0)));
  const Index chunk = 64;
  for (Index s = 0; s < n; s += chunk) {
    const Index c = std::min(chunk, n - s);
    Mat<S> E = Mat<S>::Zero(n, c);
    Mat<S> W = Mat<S>::Zero(n, c);
    for (Index j = 0; j < c; ++j) {
      E(s + j, j) = S(1);
      W(s + j, j) = w[s + j];
    }
    out += param_vjp_block(A, W, E);
  }
  return out;
}

// -- finite-difference oracle ------------------------------------------------------

struct FdReport {
  double max_deviation = 0;  // max_i |fd_i - g_i| / max(‖fd‖_∞, ‖g‖_∞)
  Index worst_index = -1;
  bool pass = false;
  Vec<double> fd;
};

/// Central differences of `objective` at θ0 with steps step·max(1, |θ_i|).
inline FdReport fd_check(const std::function<double(const Vec<double>&)>& objective, const Vec<double>& theta0,
                         const Vec<double>& analytic, double step = 1e-5, double tol = 1e-5) {
  if (analytic.size() != theta0.size()) {
    throw ShapeError("fd_check: gradient has length " + std::to_string(analytic.size()) + ", expected " +
                     std::to_string(theta0.size()));
  }
  if (!(step > 0)) throw ParamError("fd_check: step must be positive");
  FdReport r;
  r.fd.resize(theta0.size());
  Vec<double> t = theta0;
  for (Index i = 0; i < t.size(); ++i) {
    const double h = step * std::max(1.0, std::abs(theta0[i]));
    t[i] = theta0[i] + h;
    const double fp = objective(t);
    t[i] = theta0[i] - h;
    const double fm = objective(t);
    t[i] = theta0[i];
    r.fd[i] = (fp - fm) / (2 * h);
  }
  const double scale = std::max({r.fd.cwiseAbs().maxCoeff(), analytic.cwiseAbs().maxCoeff(), 1e-300});
  for (Index i = 0; i < t.size(); ++i) {
    const double d = std::abs(r.fd[i] - analytic[i]) / scale;
    if (d > r.max_deviation || r.worst_index < 0) {
      r.max_deviation = std::max(r.max_deviation, d);
      r.worst_index = i;
    }
  }
  r.pass = r.max_deviation <= tol;
  return r;
}

inline FdReport fd_check(const std::function<double(const Vec<double>&)>& objective, const ParamVector<double>& theta0,
                  const ParamCotangent<double>& analytic, double step = 1e-5, double tol = 1e-5) {
  if (theta0.layout != analytic.layout) throw ParamError("fd_check: cotangent layout does not match the parameters");
  return fd_check(objective, theta0.values, analytic.values, step, tol);
}

}  // namespace cola
