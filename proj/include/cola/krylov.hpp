#pragma once

// Matrix-free base cases: CG, MINRES, GMRES, Arnoldi (classical, modified
// and Householder), Lanczos, power iteration, SLQ and randomized SVD.

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cola/compose.hpp"

namespace cola {

enum class Orthogonalization { Classical, Modified, Householder };
enum class ProbeDistribution { Gaussian, Rademacher };

template <class S>
struct SolveParams {
  double tol = 1e-8;
  int max_iter = 1000;
  Operator<S> preconditioner;  // approximates A^-1; CG only
  std::uint64_t rng_seed = 0;
  std::string algorithm_override;
  int restart = 0;  // GMRES cycle length, 0 = no restart
  Orthogonalization orthogonalization = Orthogonalization::Modified;
  bool record_history = true;

  void validate() const {
    if (!(tol > 0 && tol < 1)) throw ParamError("tol must lie in (0, 1)");
    if (max_iter < 1) throw ParamError("max_iter must be >= 1");
    if (restart < 0) throw ParamError("restart must be >= 0");
  }
};

struct IterStats {
  std::string algorithm;
  int iterations = 0;
  std::int64_t mvm_count = 0;
  std::vector<double> residual_history;
  bool converged = false;
  double residual = 0.0;  // final relative residual
  std::string note;

  void merge(const IterStats& o) {
    iterations += o.iterations;
    converged = converged && o.converged;
    residual = std::max(residual, o.residual);
    if (note.empty()) note = o.note;
  }
};

template <class S>
struct SolveResult {
  Vec<S> x;
  IterStats stats;
};

namespace detail {

template <class S>
Vec<S> random_vec(Index n, std::mt19937_64& rng, ProbeDistribution dist = ProbeDistribution::Gaussian) {
  Vec<S> v(n);
  if (dist == ProbeDistribution::Rademacher) {
    std::bernoulli_distribution coin(0.5);
    for (Index i = 0; i < n; ++i) v[i] = coin(rng) ? S(1) : S(-1);
    return v;
  }
  std::normal_distribution<double> g(0.0, 1.0);
  for (Index i = 0; i < n; ++i) {
    if constexpr (is_complex_v<S>) {
      const double re = g(rng), im = g(rng);
      v[i] = S(re, im) / std::sqrt(2.0);
    } else {
      v[i] = g(rng);
    }
  }
  return v;
}

template <class S>
Mat<S> random_mat(Index rows, Index cols, std::mt19937_64& rng) {
  Mat<S> m(rows, cols);
  for (Index j = 0; j < cols; ++j) m.col(j) = random_vec<S>(rows, rng);
  return m;
}

inline void check_finite(double x, const char* algo, int iter) {
  if (!std::isfinite(x)) {
    throw NumericalError(std::string(algo) + ": non-finite value at iteration " + std::to_string(iter));
  }
}

template <class S>
double rel_residual(const Operator<S>& A, const Vec<S>& x, const Vec<S>& b) {
  const double bn = b.norm();
  if (bn == 0) return x.norm() == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return (b - A.apply(x)).norm() / bn;
}

// Outer loop shared by CG and MINRES: run the inner method on the current
// residual, add the correction, recompute the true residual and repeat if the
// recurrence was optimistic.
template <class S, class Inner>
SolveResult<S> refine(const Operator<S>& A, const Vec<S>& b, const SolveParams<S>& p, const char* name, Inner inner) {
  p.validate();
  if (!A.shape().square() || A.rows() != b.size()) {
    throw ShapeError(std::string(name) + ": operator " + A.shape().str() + " incompatible with rhs of length " +
                     std::to_string(b.size()));
  }
  SolveResult<S> out;
  out.stats.algorithm = name;
  out.x = Vec<S>::Zero(b.size());
  const double bn = b.norm();
  if (bn == 0) {
    out.stats.converged = true;
    return out;
  }
  Vec<S> r = b;
  double rel = 1.0, prev = std::numeric_limits<double>::infinity();
  for (int round = 0; round < 8; ++round) {
    const int budget = p.max_iter - out.stats.iterations;
    if (budget <= 0) break;
    // Inner tolerance relative to the current residual.
    const double inner_tol = std::min(0.5, p.tol * bn / r.norm());
    Vec<S> d = inner(r, inner_tol, budget, bn, out.stats);
    out.x += d;
    r = b - A.apply(out.x);
    rel = r.norm() / bn;
    check_finite(rel, name, out.stats.iterations);
    if (rel <= p.tol) break;
    if (!out.stats.note.empty()) break;
    // Refinement has stalled at the rounding floor.
    if (rel > 0.5 * prev) break;
    prev = rel;
  }
  out.stats.residual = rel;
  out.stats.converged = rel <= p.tol;
  return out;
}

}  // namespace detail

/// Preconditioned conjugate gradients from x0 = 0.
template <class S>
SolveResult<S> cg(const Operator<S>& A0, const Vec<S>& b, const SolveParams<S>& p = {}) {
  auto counter = std::make_shared<MvmCounter>();
  const Operator<S> A = instrument(A0, counter);
  const Operator<S> M = p.preconditioner;
  auto inner = [&](const Vec<S>& rhs, double tol, int budget, double bn, IterStats& st) -> Vec<S> {
    Vec<S> x = Vec<S>::Zero(rhs.size());
    Vec<S> r = rhs;
    Vec<S> z = M ? M.apply(r) : r;
    Vec<S> d = z;
    S rz = r.dot(z);
    const double r0 = rhs.norm();
    for (int k = 0; k < budget; ++k) {
      Vec<S> Ad = A.apply(d);
      const S dAd = d.dot(Ad);
      ++st.iterations;
      if (std::abs(dAd) == 0) {
        st.note = "breakdown: zero curvature direction";
        break;
      }
      const S alpha = rz / dAd;
      x += alpha * d;
      r -= alpha * Ad;
      const double rn = r.norm();
      detail::check_finite(rn, "cg", st.iterations);
      if (p.record_history) st.residual_history.push_back(rn / bn);
      if (rn <= tol * r0) break;
      z = M ? M.apply(r) : r;
      const S rz_new = r.dot(z);
      d = z + (rz_new / rz) * d;
      rz = rz_new;
    }
    return x;
  };
  SolveResult<S> out = detail::refine<S>(A, b, p, "cg", inner);
  out.stats.mvm_count = counter->value();
  return out;
}

/// MINRES for self-adjoint, possibly indefinite operators.
template <class S>
SolveResult<S> minres(const Operator<S>& A0, const Vec<S>& b, const SolveParams<S>& p = {}) {
  auto counter = std::make_shared<MvmCounter>();
  const Operator<S> A = instrument(A0, counter);
  auto inner = [&](const Vec<S>& rhs, double tol, int budget, double bn, IterStats& st) -> Vec<S> {
    const Index n = rhs.size();
    Vec<S> x = Vec<S>::Zero(n);
    const double beta1 = rhs.norm();
    Vec<S> r1 = rhs, r2 = rhs, y = rhs;
    Vec<S> w = Vec<S>::Zero(n), w1(n), w2 = Vec<S>::Zero(n);
    double oldb = 0, beta = beta1, dbar = 0, epsln = 0, phibar = beta1, cs = -1, sn = 0;
    for (int itn = 1; itn <= budget; ++itn) {
      const Vec<S> v = y / beta;
      y = A.apply(v);
      ++st.iterations;
      if (itn >= 2) y -= (beta / oldb) * r1;
      const double alfa = detail::real_part(v.dot(y));
      y -= (alfa / beta) * r2;
      r1 = r2;
      r2 = y;
      oldb = beta;
      beta = r2.norm();
      const double oldeps = epsln;
      const double delta = cs * dbar + sn * alfa;
      const double gbar = sn * dbar - cs * alfa;
      epsln = sn * beta;
      dbar = -cs * beta;
      double gamma = std::hypot(gbar, beta);
      gamma = std::max(gamma, std::numeric_limits<double>::epsilon());
      cs = gbar / gamma;
      sn = beta / gamma;
      const double phi = cs * phibar;
      phibar = sn * phibar;
      w1 = w2;
      w2 = w;
      w = (v - oldeps * w1 - delta * w2) / gamma;
      x += phi * w;
      detail::check_finite(phibar, "minres", st.iterations);
      if (p.record_history) st.residual_history.push_back(phibar / bn);
      if (phibar <= tol * beta1 || beta == 0) break;
    }
    return x;
  };
  SolveResult<S> out = detail::refine<S>(A, b, p, "minres", inner);
  out.stats.mvm_count = counter->value();
  return out;
}

// -- Arnoldi ------------------------------------------------------------------

/// Q (N x (T+1)) and H ((T+1) x T). After a breakdown at step j, Q has j+1
/// columns and H is (j+1) x (j+1).
template <class S>
struct KrylovFactorization {
  Mat<S> Q;
  Mat<S> H;
  std::optional<Index> breakdown_index;
  bool clamped = false;  // requested T exceeded N

  Index steps() const { return H.cols(); }
  Mat<S> square_H() const { return H.topLeftCorner(H.cols(), H.cols()); }
};

/// Incremental Arnoldi process; the basis is stored column by column so
/// memory grows with the number of steps actually taken.
template <class S>
class ArnoldiProcess {
 public:
  ArnoldiProcess(Operator<S> A, const Vec<S>& v0, Orthogonalization orth) : A_(std::move(A)), orth_(orth) {
    const Index n = v0.size();
    if (v0.norm() == 0) throw ParamError("arnoldi: start vector must be nonzero");
    if (orth_ == Orthogonalization::Householder) {
      Vec<S> x = v0;
      const S alpha = reflect(x, 0);
      beta_ = std::abs(alpha);
      phases_.push_back(alpha / beta_);
      Vec<S> e = Vec<S>::Zero(n);
      e[0] = S(1);
      q_.push_back(phases_[0] * apply_reflectors(e, 0));
    } else {
      beta_ = v0.norm();
      q_.push_back(v0 / beta_);
    }
  }

  double beta() const { return beta_; }
  Index size() const { return static_cast<Index>(q_.size()); }
  const Vec<S>& q(Index i) const { return q_[i]; }

  /// Extends the basis by one vector. Returns H column j (length j+2).
  Vec<S> step() {
    const Index j = size() - 1;
    const Index n = q_[0].size();
    Vec<S> h = Vec<S>::Zero(j + 2);
    if (orth_ == Orthogonalization::Householder) {
      // Work in the raw (phase-free) basis, then rotate phases so the output
      // matches the Gram-Schmidt convention h_{j+1,j} > 0.
      Vec<S> z = A_.apply(q_[j] / phases_[j]);
      for (Index i = 0; i <= j; ++i) apply_reflector(z, i);
      S alpha(0);
      if (j + 1 < n) {
        alpha = reflect(z, j + 1);
      }
      Vec<S> hraw = z.head(j + 2);
      if (j + 1 < n) hraw[j + 1] = alpha;
      const double sub = std::abs(hraw[j + 1]);
      const S next_phase = sub > 0 ? phases_[j] * hraw[j + 1] / sub : S(1);
      phases_.push_back(next_phase);
      for (Index i = 0; i <= j + 1; ++i) h[i] = detail::conj(phases_[i]) * phases_[j] * hraw[i];
      if (j + 1 < n) {
        Vec<S> e = Vec<S>::Zero(n);
        e[j + 1] = S(1);
        q_.push_back(next_phase * apply_reflectors(e, j + 1));
      } else {
        q_.push_back(Vec<S>::Zero(n));
      }
      return h;
    }
    Vec<S> w = A_.apply(q_[j]);
    if (orth_ == Orthogonalization::Classical) {
      // h_ij = q_i^* (A q_j) against the unmodified product, then subtract.
      for (Index i = 0; i <= j; ++i) h[i] = q_[i].dot(w);
      for (Index i = 0; i <= j; ++i) w -= h[i] * q_[i];
    } else {
      for (Index i = 0; i <= j; ++i) {
        h[i] = q_[i].dot(w);
        w -= h[i] * q_[i];
      }
    }
    const double nw = w.norm();
    h[j + 1] = nw;
    q_.push_back(nw > 0 ? Vec<S>(w / nw) : Vec<S>(Vec<S>::Zero(n)));
    return h;
  }

  Mat<S> basis(Index k) const {
    Mat<S> Q(q_[0].size(), k);
    for (Index i = 0; i < k; ++i) Q.col(i) = q_[i];
    return Q;
  }

 private:
  // Builds the reflector that zeroes x[k+1:], stores it and returns the new x[k].
  S reflect(Vec<S>& x, Index k) {
    const Index m = x.size() - k;
    Vec<S> w = x.tail(m);
    const double nrm = w.norm();
    S alpha;
    // u = w - alpha e_1 with alpha = -phase(w_1) |w|: the sign that avoids
    // cancellation. Any unimodular choice gives an exact reflector.
    const double a0 = std::abs(w[0]);
    const S phase = a0 > 0 ? w[0] / a0 : S(1);
    alpha = -phase * nrm;
    Vec<S> u = w;
    u[0] -= alpha;
    const double un = u.norm();
    if (un > 0) u /= un;
    us_.push_back(u);
    x.tail(m).setZero();
    x[k] = alpha;
    return alpha;
  }

  void apply_reflector(Vec<S>& y, Index i) const {
    const Vec<S>& u = us_[i];
    const Index m = u.size();
    const S c = u.dot(y.tail(m));
    y.tail(m) -= S(2) * c * u;
  }

  // P_0 ... P_k y.
  Vec<S> apply_reflectors(Vec<S> y, Index k) const {
    for (Index i = k; i >= 0; --i) apply_reflector(y, i);
    return y;
  }

  Operator<S> A_;
  Orthogonalization orth_;
  double beta_ = 0;
  std::vector<Vec<S>> q_;
  std::vector<Vec<S>> us_;
  std::vector<S> phases_;
};

namespace detail {

template <class S>
KrylovFactorization<S> run_arnoldi(const Operator<S>& A, const Vec<S>& v0, Index T, double eps, Orthogonalization orth) {
  if (!A.shape().square()) throw ShapeError("arnoldi: operator must be square, got " + A.shape().str());
  if (v0.size() != A.cols()) throw ShapeError("arnoldi: start vector length mismatch");
  if (T < 1) throw ParamError("arnoldi: T must be >= 1");
  KrylovFactorization<S> f;
  const Index n = A.rows();
  if (T > n) {
    T = n;
    f.clamped = true;
  }
  ArnoldiProcess<S> proc(A, v0, orth);
  Mat<S> H = Mat<S>::Zero(T + 1, T);
  Index j = 0;
  for (; j < T; ++j) {
    Vec<S> h = proc.step();
    H.col(j).head(j + 2) = h;
    if (std::abs(h[j + 1]) < eps) {
      f.breakdown_index = j;
      break;
    }
  }
  if (f.breakdown_index) {
    const Index m = *f.breakdown_index + 1;
    f.H = H.topLeftCorner(m, m);
    f.Q = proc.basis(m);
  } else {
    f.H = H;
    f.Q = proc.basis(T + 1);
  }
  return f;
}

}  // namespace detail

/// Arnoldi iteration with Gram-Schmidt orthogonalization. The default is the
/// classical form h_ij = q_i^*(A q_j); Modified recomputes against the
/// partially orthogonalized vector.
template <class S>
KrylovFactorization<S> arnoldi(const Operator<S>& A, const Vec<S>& q0, Index T, double eps = 1e-12,
                               Orthogonalization orth = Orthogonalization::Classical) {
  if (std::abs(q0.norm() - 1.0) > 1e-10) throw ParamError("arnoldi: q0 must have unit norm");
  return detail::run_arnoldi(A, q0, T, eps, orth == Orthogonalization::Householder ? Orthogonalization::Classical : orth);
}

/// Arnoldi with Householder reflectors R_k = I - 2 u_k u_k^*.
template <class S>
KrylovFactorization<S> householder_arnoldi(const Operator<S>& A, const Vec<S>& v0, Index T, double eps = -1) {
  if (v0.norm() == 0) throw ParamError("householder_arnoldi: start vector must be nonzero");
  if (eps < 0) eps = 1e-12 * v0.norm();
  return detail::run_arnoldi(A, v0, T, eps, Orthogonalization::Householder);
}

// -- GMRES --------------------------------------------------------------------

namespace detail {

// Complex Givens rotation [[c, s], [-conj(s), c]] with real c, mapping (a, b) to (r, 0).
template <class S>
void givens(const S& a, const S& b, double& c, S& s) {
  const double aa = std::abs(a), ab = std::abs(b);
  if (ab == 0) {
    c = 1;
    s = S(0);
    return;
  }
  if (aa == 0) {
    c = 0;
    s = detail::conj(b) / ab;
    return;
  }
  const double r = std::hypot(aa, ab);
  c = aa / r;
  s = (a / aa) * detail::conj(b) / r;
}

}  // namespace detail

template <class S>
SolveResult<S> gmres(const Operator<S>& A0, const Vec<S>& b, const SolveParams<S>& p = {}) {
  auto counter = std::make_shared<MvmCounter>();
  const Operator<S> A = instrument(A0, counter);
  p.validate();
  if (!A.shape().square() || A.rows() != b.size()) {
    throw ShapeError("gmres: operator " + A.shape().str() + " incompatible with rhs of length " + std::to_string(b.size()));
  }
  SolveResult<S> out;
  auto& st = out.stats;
  st.algorithm = "gmres";
  const Index n = b.size();
  out.x = Vec<S>::Zero(n);
  const double bn = b.norm();
  if (bn == 0) {
    st.converged = true;
    return out;
  }
  const Orthogonalization orth =
      p.orthogonalization == Orthogonalization::Householder ? Orthogonalization::Householder : Orthogonalization::Modified;
  const Index cycle = p.restart > 0 ? std::min<Index>(p.restart, n) : std::min<Index>(p.max_iter, n);
  Vec<S> r = b;
  double rel = 1.0;
  bool first = true;
  while (true) {
    if (!first) r = b - A.apply(out.x);
    first = false;
    rel = r.norm() / bn;
    detail::check_finite(rel, "gmres", st.iterations);
    if (rel <= p.tol || st.iterations >= p.max_iter) break;

    ArnoldiProcess<S> proc(A, r, orth);
    Mat<S> R = Mat<S>::Zero(cycle + 1, cycle);
    std::vector<double> cs;
    std::vector<S> sn;
    Vec<S> g = Vec<S>::Zero(cycle + 1);
    g[0] = S(proc.beta());
    Index k = 0;
    const double start = rel;
    double est = rel;
    while (k < cycle && st.iterations < p.max_iter) {
      Vec<S> h = proc.step();
      ++st.iterations;
      const double hnorm = h.norm();
      const bool lucky = std::abs(h[k + 1]) <= 1e-14 * hnorm;
      for (Index i = 0; i < k; ++i) {
        const S t = cs[i] * h[i] + sn[i] * h[i + 1];
        h[i + 1] = -detail::conj(sn[i]) * h[i] + cs[i] * h[i + 1];
        h[i] = t;
      }
      double c;
      S s;
      detail::givens(h[k], h[k + 1], c, s);
      h[k] = c * h[k] + s * h[k + 1];
      h[k + 1] = S(0);
      cs.push_back(c);
      sn.push_back(s);
      g[k + 1] = -detail::conj(s) * g[k];
      g[k] = c * g[k];
      R.col(k).head(k + 1) = h.head(k + 1);
      ++k;
      est = std::abs(g[k]) / bn;
      if (p.record_history) st.residual_history.push_back(est);
      if (est <= p.tol || lucky) break;
    }
    Vec<S> y = R.topLeftCorner(k, k).template triangularView<Eigen::Upper>().solve(g.head(k));
    for (Index i = 0; i < k; ++i) out.x += y[i] * proc.q(i);
    if (start - est <= 1e-14 * start) {
      st.note = "stagnation: residual reduction below 1e-14 over a full cycle";
      r = b - A.apply(out.x);
      rel = r.norm() / bn;
      break;
    }
  }
  st.residual = rel;
  st.converged = rel <= p.tol;
  st.mvm_count = counter->value();
  return out;
}

// -- Lanczos ------------------------------------------------------------------

enum class Reorth { None, Full };

/// Symmetric Lanczos. H is tridiagonal ((T+1) x T, or square after breakdown).
template <class S>
KrylovFactorization<S> lanczos(const Operator<S>& A, const Vec<S>& q0, Index T, Reorth reorth = Reorth::Full,
                               double eps = 1e-12) {
  if (!A.shape().square()) throw ShapeError("lanczos: operator must be square");
  if (q0.size() != A.cols()) throw ShapeError("lanczos: start vector length mismatch");
  if (std::abs(q0.norm() - 1.0) > 1e-10) throw ParamError("lanczos: q0 must have unit norm");
  KrylovFactorization<S> f;
  const Index n = A.rows();
  if (T > n) {
    T = n;
    f.clamped = true;
  }
  std::vector<Vec<S>> Q{q0};
  Mat<S> H = Mat<S>::Zero(T + 1, T);
  double beta_prev = 0;
  Index j = 0;
  for (; j < T; ++j) {
    Vec<S> w = A.apply(Q[j]);
    if (j > 0) w -= beta_prev * Q[j - 1];
    const double alpha = detail::real_part(Q[j].dot(w));
    w -= alpha * Q[j];
    if (reorth == Reorth::Full) {
      for (int pass = 0; pass < 2; ++pass)
        for (const auto& q : Q) w -= q.dot(w) * q;
    }
    const double beta = w.norm();
    H(j, j) = alpha;
    H(j + 1, j) = beta;
    if (j + 1 < T) H(j, j + 1) = beta;
    if (beta < eps) {
      f.breakdown_index = j;
      break;
    }
    Q.push_back(w / beta);
    beta_prev = beta;
  }
  const Index m = f.breakdown_index ? *f.breakdown_index + 1 : T;
  f.H = f.breakdown_index ? Mat<S>(H.topLeftCorner(m, m)) : H;
  const Index qcols = f.breakdown_index ? m : T + 1;
  f.Q.resize(n, qcols);
  for (Index i = 0; i < qcols; ++i) f.Q.col(i) = Q[i];
  return f;
}

// -- power iteration -------------------------------------------------------

template <class S>
struct PowerResult {
  double lambda = 0;  // Rayleigh quotient, real part
  Vec<S> v;
  int iterations = 0;
  bool converged = false;
};

enum class PowerStop { Residual, RelativeChange };

/// Dominant eigenpair. Stops when ||Av - λv|| <= tol |λ| (default) or when
/// successive estimates change by less than tol relative.
template <class S>
PowerResult<S> power_iteration(const Operator<S>& A, double tol = 1e-7, int max_iter = 300, std::uint64_t seed = 0,
                               PowerStop stop = PowerStop::Residual) {
  if (!A.shape().square()) throw ShapeError("power_iteration: operator must be square");
  std::mt19937_64 rng(seed);
  PowerResult<S> out;
  Vec<S> v = detail::random_vec<S>(A.rows(), rng);
  v.normalize();
  double prev = 0;
  for (int k = 1; k <= max_iter; ++k) {
    Vec<S> w = A.apply(v);
    const S rq = v.dot(w);
    const double lam = detail::real_part(rq);
    out.iterations = k;
    out.lambda = lam;
    bool done = false;
    if (stop == PowerStop::Residual) {
      done = (w - rq * v).norm() <= tol * std::abs(rq);
    } else {
      done = k > 1 && std::abs(lam - prev) <= tol * std::abs(lam);
    }
    prev = lam;
    const double wn = w.norm();
    if (done || wn == 0) {
      out.v = v;
      out.converged = done;
      return out;
    }
    v = w / wn;
  }
  out.v = v;
  return out;
}

// -- SLQ ------------------------------------------------------------------------

/// Stochastic Lanczos quadrature estimate of log det A for PSD A. Rademacher
/// probes by default: they drop the diagonal's share of the variance.
template <class S>
double slq_logdet(const Operator<S>& A, int n_probes, int lanczos_iters, std::uint64_t seed,
                  ProbeDistribution dist = ProbeDistribution::Rademacher) {
  if (n_probes < 1) throw ParamError("slq_logdet: n_probes must be >= 1");
  if (lanczos_iters < 1) throw ParamError("slq_logdet: lanczos_iters must be >= 1");
  std::mt19937_64 rng(seed);
  double total = 0;
  for (int j = 0; j < n_probes; ++j) {
    Vec<S> z = detail::random_vec<S>(A.rows(), rng, dist);
    const double zn2 = z.squaredNorm();
    auto f = lanczos<S>(A, z / std::sqrt(zn2), lanczos_iters, Reorth::Full);
    Mat<double> Tm = f.square_H().real();
    Eigen::SelfAdjointEigenSolver<Mat<double>> es(Tm);
    const auto& theta = es.eigenvalues();
    double quad = 0;
    for (Index k = 0; k < theta.size(); ++k) {
      if (theta[k] <= 0) {
        throw DomainError("slq_logdet: nonpositive Ritz value " + std::to_string(theta[k]) + "; operator is not PSD");
      }
      const double tau = es.eigenvectors()(0, k);
      quad += tau * tau * std::log(theta[k]);
    }
    total += zn2 * quad;
  }
  return total / n_probes;
}

// -- randomized SVD -------------------------------------------------------------

template <class S>
struct SvdResult {
  Mat<S> U;
  Vec<double> sigma;
  Mat<S> V;
};

/// Randomized range finder with `power_iters` subspace iterations.
template <class S>
SvdResult<S> randomized_svd(const Operator<S>& A, Index rank, Index oversample, std::uint64_t seed, int power_iters = 2) {
  const Index l = rank + oversample;
  if (rank < 1 || l > std::min(A.rows(), A.cols())) {
    throw ParamError("randomized_svd: need 1 <= rank and rank + oversample <= min(rows, cols)");
  }
  std::mt19937_64 rng(seed);
  const Operator<S> At = op_adjoint(A);
  auto orth = [](const Mat<S>& Y) {
    Eigen::HouseholderQR<Mat<S>> qr(Y);
    return Mat<S>(qr.householderQ() * Mat<S>::Identity(Y.rows(), Y.cols()));
  };
  Mat<S> Q = orth(A.apply_block(detail::random_mat<S>(A.cols(), l, rng)));
  for (int i = 0; i < power_iters; ++i) {
    Mat<S> Z = orth(At.apply_block(Q));
    Q = orth(A.apply_block(Z));
  }
  Mat<S> B = At.apply_block(Q).adjoint();  // l x cols
  Eigen::JacobiSVD<Mat<S>> svd(B, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult<S> out;
  out.U = (Q * svd.matrixU()).leftCols(rank);
  out.sigma = svd.singularValues().head(rank);
  out.V = svd.matrixV().leftCols(rank);
  return out;
}

}  // namespace cola
