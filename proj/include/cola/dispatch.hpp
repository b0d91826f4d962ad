#pragma once

// Structural dispatch: patterns, the rule registry, the builtin rule tables
// and the public functional API (solve, eig, diag, trace, logdet, apply_fn,
// pinv).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cola/stochastic.hpp"

namespace cola {

enum class Which { Smallest, Largest };
enum class Mode { Exact, Estimate };
inline constexpr Index kAll = -1;

// -- patterns -------------------------------------------------------------------

/// Structural matcher. A node constrains the kind, required annotations and
/// an optional named predicate; children patterns constrain the operands.
template <class S>
struct Pattern {
  std::optional<Kind> kind;
  Annotations required;
  std::function<bool(const Operator<S>&)> predicate;
  std::string predicate_name;
  std::vector<Pattern> children;
  bool unordered = false;

  static Pattern any() { return {}; }
  static Pattern of(Kind k) {
    Pattern p;
    p.kind = k;
    return p;
  }
  static Pattern tagged(Annotations a) {
    Pattern p;
    p.required = a;
    return p;
  }
  Pattern& with(Annotations a) {
    required = required | a;
    return *this;
  }
  Pattern& where(std::string name, std::function<bool(const Operator<S>&)> pred) {
    predicate_name = std::move(name);
    predicate = std::move(pred);
    return *this;
  }
  Pattern& operands(std::vector<Pattern> ch, bool any_order = false) {
    children = std::move(ch);
    unordered = any_order;
    return *this;
  }

  bool constrains() const { return kind.has_value() || !required.empty() || static_cast<bool>(predicate); }

  /// Number of non-wildcard pattern nodes.
  int specificity() const {
    int s = constrains() ? 1 : 0;
    for (const auto& c : children) s += c.specificity();
    return s;
  }

  bool matches(const Operator<S>& A) const {
    const Operator<S>& u = A.unwrap();
    if (kind && u.kind() != *kind) return false;
    if (!u.annotations().contains(required)) return false;
    if (predicate && !predicate(u)) return false;
    if (children.empty()) return true;
    const auto& ch = u.children();
    if (ch.size() != children.size()) return false;
    if (!unordered) {
      for (std::size_t i = 0; i < ch.size(); ++i)
        if (!children[i].matches(ch[i])) return false;
      return true;
    }
    std::vector<std::size_t> perm(ch.size());
    std::iota(perm.begin(), perm.end(), 0);
    do {
      bool ok = true;
      for (std::size_t i = 0; i < ch.size() && ok; ++i) ok = children[i].matches(ch[perm[i]]);
      if (ok) return true;
    } while (std::next_permutation(perm.begin(), perm.end()));
    return false;
  }
};

// -- results and procedure signatures ------------------------------------------

/// Eigenvalues ordered by real part (ascending for Smallest, descending for
/// Largest) and the matching eigenvectors as an operator. For real operators
/// with a complex spectrum the eigenvector operator is empty.
template <class S>
struct EigResult {
  Eigen::VectorXcd eigvals;
  Operator<S> eigvecs;
  IterStats stats;

  Vec<double> real_eigvals() const { return eigvals.real(); }
};

template <class S>
struct LogDet {
  double logabs = 0;
  std::optional<S> sign;  // empty when the rule does not track it
};

/// Scalar function for apply_fn. positive_domain demands a strictly positive spectrum.
struct FnSpec {
  std::string name;
  std::function<cdouble(cdouble)> f;
  bool positive_domain = false;
};

template <class S>
class Registry;

template <class S>
using SolveProc =
    std::function<Mat<S>(const Operator<S>&, const Mat<S>&, const SolveParams<S>&, IterStats&, const Registry<S>&)>;
template <class S>
using EigProc = std::function<EigResult<S>(const Operator<S>&, Index, Which, const SolveParams<S>&, const Registry<S>&)>;
template <class S>
using DiagProc = std::function<Vec<S>(const Operator<S>&, Mode, const ProbeConfig&, const Registry<S>&)>;
template <class S>
using TraceProc = std::function<S(const Operator<S>&, Mode, const ProbeConfig&, const Registry<S>&)>;
template <class S>
using LogDetProc = std::function<LogDet<S>(const Operator<S>&, Mode, const ProbeConfig&, const Registry<S>&)>;
template <class S>
using FnProc = std::function<Operator<S>(const Operator<S>&, const FnSpec&, const SolveParams<S>&, const Registry<S>&)>;

struct solve_op_t {};
struct eig_op_t {};
struct diag_op_t {};
struct trace_op_t {};
struct logdet_op_t {};
struct pinv_op_t {};
struct fn_op_t {};
inline constexpr solve_op_t solve_op{};
inline constexpr eig_op_t eig_op{};
inline constexpr diag_op_t diag_op{};
inline constexpr trace_op_t trace_op{};
inline constexpr logdet_op_t logdet_op{};
inline constexpr pinv_op_t pinv_op{};
inline constexpr fn_op_t fn_op{};

template <class S, class Proc>
struct Rule {
  std::string name;
  Pattern<S> pattern;
  Proc proc;
  int index = 0;
};

template <class S, class Proc>
class RuleTable {
 public:
  void add(Rule<S, Proc> r) { rules_.push_back(std::move(r)); }

  /// Maximal specificity wins; ties go to the later registration.
  const Rule<S, Proc>* select(const Operator<S>& A) const {
    const Rule<S, Proc>* best = nullptr;
    int best_spec = -1;
    for (const auto& r : rules_) {
      if (!r.pattern.matches(A)) continue;
      const int s = r.pattern.specificity();
      if (s > best_spec || (s == best_spec && r.index > best->index)) {
        best = &r;
        best_spec = s;
      }
    }
    return best;
  }

  const Rule<S, Proc>* by_name(const std::string& name) const {
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it)
      if (it->name == name) return &*it;
    return nullptr;
  }

  const std::vector<Rule<S, Proc>>& rules() const { return rules_; }

 private:
  std::vector<Rule<S, Proc>> rules_;
};

struct BuiltinConfig {
  int svrg_min_terms = 8;  // Sum size at which PSD solves switch to SVRG
};

template <class S>
class Registry {
 public:
  Registry() = default;
  Registry(const Registry& o)
      : solve_(o.solve_),
        eig_(o.eig_),
        diag_(o.diag_),
        trace_(o.trace_),
        logdet_(o.logdet_),
        pinv_(o.pinv_),
        fn_(o.fn_),
        next_index_(o.next_index_) {}
  Registry& operator=(const Registry&) = delete;

  /// Fresh, unfrozen registry holding the builtin rules.
  static Registry with_builtins(BuiltinConfig cfg = {});

  int register_rule(solve_op_t, std::string name, Pattern<S> pat, SolveProc<S> proc) {
    return add(solve_, std::move(name), std::move(pat), std::move(proc));
  }
  int register_rule(eig_op_t, std::string name, Pattern<S> pat, EigProc<S> proc) {
    return add(eig_, std::move(name), std::move(pat), std::move(proc));
  }
  int register_rule(diag_op_t, std::string name, Pattern<S> pat, DiagProc<S> proc) {
    return add(diag_, std::move(name), std::move(pat), std::move(proc));
  }
  int register_rule(trace_op_t, std::string name, Pattern<S> pat, TraceProc<S> proc) {
    return add(trace_, std::move(name), std::move(pat), std::move(proc));
  }
  int register_rule(logdet_op_t, std::string name, Pattern<S> pat, LogDetProc<S> proc) {
    return add(logdet_, std::move(name), std::move(pat), std::move(proc));
  }
  int register_rule(pinv_op_t, std::string name, Pattern<S> pat, SolveProc<S> proc) {
    return add(pinv_, std::move(name), std::move(pat), std::move(proc));
  }
  int register_rule(fn_op_t, std::string name, Pattern<S> pat, FnProc<S> proc) {
    return add(fn_, std::move(name), std::move(pat), std::move(proc));
  }

  /// After freezing, registration throws and the registry is safe to share.
  void freeze() const { frozen_.store(true); }
  bool frozen() const { return frozen_.load(); }

  const RuleTable<S, SolveProc<S>>& table(solve_op_t) const { return solve_; }
  const RuleTable<S, EigProc<S>>& table(eig_op_t) const { return eig_; }
  const RuleTable<S, DiagProc<S>>& table(diag_op_t) const { return diag_; }
  const RuleTable<S, TraceProc<S>>& table(trace_op_t) const { return trace_; }
  const RuleTable<S, LogDetProc<S>>& table(logdet_op_t) const { return logdet_; }
  const RuleTable<S, SolveProc<S>>& table(pinv_op_t) const { return pinv_; }
  const RuleTable<S, FnProc<S>>& table(fn_op_t) const { return fn_; }

  /// Name of the rule that would run, or "" when nothing matches.
  template <class Tag>
  std::string which_rule(Tag tag, const Operator<S>& A) const {
    const auto* r = table(tag).select(A);
    return r ? r->name : std::string();
  }

 private:
  template <class Proc>
  int add(RuleTable<S, Proc>& t, std::string name, Pattern<S> pat, Proc proc) {
    if (frozen()) throw StateError("cannot register rule '" + name + "': registry is frozen");
    const int idx = next_index_++;
    t.add({std::move(name), std::move(pat), std::move(proc), idx});
    return idx;
  }

  RuleTable<S, SolveProc<S>> solve_;
  RuleTable<S, EigProc<S>> eig_;
  RuleTable<S, DiagProc<S>> diag_;
  RuleTable<S, TraceProc<S>> trace_;
  RuleTable<S, LogDetProc<S>> logdet_;
  RuleTable<S, SolveProc<S>> pinv_;
  RuleTable<S, FnProc<S>> fn_;
  int next_index_ = 0;
  mutable std::atomic<bool> frozen_{false};
};

/// Process-wide registry with the builtin rules; frozen on first use.
template <class S>
const Registry<S>& default_registry() {
  static const Registry<S> reg = Registry<S>::with_builtins();
  return reg;
}

// -- dispatch cores ------------------------------------------------------------

namespace detail {

template <class Table>
auto pick_rule(const Table& t, const std::string& override_name, const char* op, const auto& A) {
  if (!override_name.empty()) {
    const auto* r = t.by_name(override_name);
    if (!r) throw ParamError(std::string(op) + ": unknown algorithm '" + override_name + "'");
    return r;
  }
  const auto* r = t.select(A);
  if (!r) throw UnsupportedError(std::string(op) + ": no rule matches " + describe(A));
  return r;
}

inline void absorb(IterStats& into, const IterStats& from) {
  into.iterations += from.iterations;
  into.converged = into.converged && from.converged;
  into.residual = std::max(into.residual, from.residual);
  if (into.note.empty()) into.note = from.note;
}

template <class S>
Mat<S> solve_block(const Registry<S>& reg, const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p,
                   IterStats& st) {
  const auto* rule = pick_rule(reg.table(solve_op), p.algorithm_override, "solve", A);
  SolveParams<S> q = p;
  q.algorithm_override.clear();
  st.algorithm = rule->name;
  st.converged = true;
  st.residual = 0;
  return rule->proc(A, B, q, st, reg);
}

/// Solve nested inside a rule at tolerance `tol`; stats fold into `st`.
template <class S>
Mat<S> sub_solve(const Registry<S>& reg, const Operator<S>& A, const Mat<S>& B, SolveParams<S> p, double tol,
                 IterStats& st) {
  p.tol = std::clamp(tol, 1e-14, 0.5);
  IterStats child;
  Mat<S> X = solve_block(reg, A, B, p, child);
  absorb(st, child);
  return X;
}

template <class S>
EigResult<S> eig_dispatch(const Registry<S>& reg, const Operator<S>& A, Index k, Which which, const SolveParams<S>& p) {
  const auto* rule = pick_rule(reg.table(eig_op), p.algorithm_override, "eig", A);
  SolveParams<S> q = p;
  q.algorithm_override.clear();
  EigResult<S> r = rule->proc(A, k, which, q, reg);
  r.stats.algorithm = rule->name;
  return r;
}

template <class S>
Vec<S> diag_dispatch(const Registry<S>& reg, const Operator<S>& A, Mode mode, const ProbeConfig& pc) {
  return pick_rule(reg.table(diag_op), std::string(), "diag", A)->proc(A, mode, pc, reg);
}

template <class S>
S trace_dispatch(const Registry<S>& reg, const Operator<S>& A, Mode mode, const ProbeConfig& pc) {
  return pick_rule(reg.table(trace_op), std::string(), "trace", A)->proc(A, mode, pc, reg);
}

template <class S>
LogDet<S> logdet_dispatch(const Registry<S>& reg, const Operator<S>& A, Mode mode, const ProbeConfig& pc) {
  return pick_rule(reg.table(logdet_op), std::string(), "logdet", A)->proc(A, mode, pc, reg);
}

template <class S>
Mat<S> pinv_block(const Registry<S>& reg, const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p,
                  IterStats& st) {
  const auto* rule = pick_rule(reg.table(pinv_op), p.algorithm_override, "pinv", A);
  SolveParams<S> q = p;
  q.algorithm_override.clear();
  st.algorithm = rule->name;
  st.converged = true;
  st.residual = 0;
  return rule->proc(A, B, q, st, reg);
}

template <class S>
Mat<S> sub_pinv(const Registry<S>& reg, const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p,
                IterStats& st) {
  IterStats child;
  Mat<S> X = pinv_block(reg, A, B, p, child);
  absorb(st, child);
  return X;
}

template <class S>
Operator<S> fn_dispatch(const Registry<S>& reg, const Operator<S>& A, const FnSpec& f, const SolveParams<S>& p) {
  return pick_rule(reg.table(fn_op), p.algorithm_override, "apply_fn", A)->proc(A, f, p, reg);
}

// -- small helpers -------------------------------------------------------------

template <class S>
bool all_square(const Operator<S>& A) {
  for (const auto& c : A.children())
    if (!c.shape().square()) return false;
  return true;
}

template <class S>
bool is_zero_op(const Operator<S>& A) {
  return A.unwrap().kind() == Kind::Zero;
}

template <class S>
S to_scalar(cdouble z) {
  return from_complex<S>(z);
}

template <class S>
Mat<S> mat_from_complex(const Eigen::MatrixXcd& m) {
  if constexpr (is_complex_v<S>) {
    return m;
  } else {
    return m.real();
  }
}

template <class S>
double mat_rel_residual(const Mat<S>& M, const Mat<S>& X, const Mat<S>& B) {
  double worst = 0;
  for (Index j = 0; j < B.cols(); ++j) {
    const double bn = B.col(j).norm();
    const double rn = (M * X.col(j) - B.col(j)).norm();
    worst = std::max(worst, bn > 0 ? rn / bn : rn);
  }
  return worst;
}

template <class S>
Mat<S> lu_solve(const Mat<S>& M, const Mat<S>& B, const char* who) {
  Eigen::PartialPivLU<Mat<S>> lu(M);
  const auto& U = lu.matrixLU();
  for (Index i = 0; i < U.rows(); ++i)
    if (U(i, i) == S(0)) throw SingularError(std::string(who) + ": matrix is singular (zero pivot " + std::to_string(i) + ")");
  return lu.solve(B);
}

// Column-wise application of a Krylov solver to a block right-hand side.
template <class S, class Solver>
Mat<S> krylov_block(const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, Solver solver) {
  Mat<S> X(A.cols(), B.cols());
  for (Index j = 0; j < B.cols(); ++j) {
    SolveResult<S> r = solver(A, Vec<S>(B.col(j)), p);
    X.col(j) = r.x;
    st.iterations += r.stats.iterations;
    st.converged = st.converged && r.stats.converged;
    st.residual = std::max(st.residual, r.stats.residual);
    if (st.note.empty()) st.note = r.stats.note;
    if (p.record_history) {
      st.residual_history.insert(st.residual_history.end(), r.stats.residual_history.begin(),
                                 r.stats.residual_history.end());
    }
  }
  return X;
}

// Tridiagonal solve with partial pivoting (LAPACK gtsv scheme).
template <class S>
Mat<S> tridiagonal_solve(const TridiagonalData<S>& t, Mat<S> B) {
  const Index n = t.main.size();
  Vec<S> dl = t.sub, d = t.main, du = t.super;
  Vec<S> du2 = Vec<S>::Zero(std::max<Index>(n - 2, 0));
  for (Index i = 0; i + 1 < n; ++i) {
    if (std::abs(d[i]) >= std::abs(dl[i])) {
      if (d[i] == S(0)) throw SingularError("tridiagonal: zero pivot at row " + std::to_string(i));
      const S f = dl[i] / d[i];
      d[i + 1] -= f * du[i];
      B.row(i + 1) -= f * B.row(i);
      if (i + 2 < n) du2[i] = S(0);
    } else {
      const S f = d[i] / dl[i];
      d[i] = dl[i];
      const S tmp = d[i + 1];
      d[i + 1] = du[i] - f * tmp;
      du[i] = tmp;
      if (i + 2 < n) {
        du2[i] = du[i + 1];
        du[i + 1] = -f * du2[i];
      }
      B.row(i).swap(B.row(i + 1));
      B.row(i + 1) -= f * B.row(i);
    }
  }
  if (d[n - 1] == S(0)) throw SingularError("tridiagonal: zero pivot at row " + std::to_string(n - 1));
  for (Index j = 0; j < B.cols(); ++j) {
    B(n - 1, j) /= d[n - 1];
    if (n > 1) B(n - 2, j) = (B(n - 2, j) - du[n - 2] * B(n - 1, j)) / d[n - 2];
    for (Index i = n - 3; i >= 0; --i) B(i, j) = (B(i, j) - du[i] * B(i + 1, j) - du2[i] * B(i + 2, j)) / d[i];
  }
  return B;
}

// Reshape helpers for the vec identity (column-major).
template <class S>
Mat<S> unvec(const Vec<S>& v, Index rows, Index cols) {
  return Eigen::Map<const Mat<S>>(v.data(), rows, cols);
}

template <class S>
Vec<S> vec(const Mat<S>& m) {
  return Eigen::Map<const Vec<S>>(m.data(), m.size());
}

// Applies the factorwise maps X -> fB(X) then X -> fA(X^T)^T to each column of B
// viewed as an (nB x nA) matrix: (A ⊗ B)-style operators with arbitrary block maps.
template <class S, class FA, class FB>
Mat<S> kron_apply(const Mat<S>& B, Index nA_in, Index nB_in, Index nA_out, Index nB_out, FA fA, FB fB) {
  Mat<S> out(nA_out * nB_out, B.cols());
  for (Index j = 0; j < B.cols(); ++j) {
    Mat<S> X = unvec<S>(B.col(j), nB_in, nA_in);
    Mat<S> Y = fB(X);                             // nB_out x nA_in
    Mat<S> Z = fA(Mat<S>(Y.transpose())).transpose();  // nB_out x nA_out
    out.col(j) = vec<S>(Z);
  }
  return out;
}

inline std::vector<Index> eig_order(const Eigen::VectorXcd& v, Which which) {
  std::vector<Index> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (which == Which::Smallest) {
    std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) {
      if (v[a].real() != v[b].real()) return v[a].real() < v[b].real();
      return v[a].imag() < v[b].imag();
    });
  } else {
    std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) {
      if (v[a].real() != v[b].real()) return v[a].real() > v[b].real();
      return v[a].imag() > v[b].imag();
    });
  }
  return idx;
}

inline Index resolve_k(Index k, Index n) {
  if (k == kAll) return n;
  if (k < 1 || k > n) throw ParamError("eig: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  return k;
}

/// Selection operator (m x k) with column j = e_{order[j]}; a Permutation when k = m.
template <class S>
Operator<S> selection(const std::vector<Index>& order, Index m, Index k) {
  if (k == m) {
    std::vector<Index> perm(m);
    for (Index j = 0; j < m; ++j) perm[order[j]] = j;
    return make_permutation<S>(std::move(perm));
  }
  CsrPayload<S> p;
  p.row_ptr.assign(m + 1, 0);
  std::vector<Index> col_of(m, -1);
  for (Index j = 0; j < k; ++j) col_of[order[j]] = j;
  Vec<S> vals(k);
  for (Index i = 0; i < m; ++i) {
    p.row_ptr[i + 1] = p.row_ptr[i];
    if (col_of[i] >= 0) {
      p.col_idx.push_back(col_of[i]);
      vals[p.row_ptr[i + 1]++] = S(1);
    }
  }
  p.values = vals;
  return make_sparse_csr<S>(std::move(p), Shape{m, k});
}

/// Orders values per `which`, keeps k, and composes vecs with the selection.
template <class S>
EigResult<S> select_eigs(const Eigen::VectorXcd& values, const Operator<S>& vecs, Index k, Which which) {
  const Index m = values.size();
  k = std::min(k, m);
  auto order = eig_order(values, which);
  EigResult<S> r;
  r.eigvals.resize(k);
  for (Index j = 0; j < k; ++j) r.eigvals[j] = values[order[j]];
  if (vecs) {
    const bool identity_order = k == m && std::is_sorted(order.begin(), order.end());
    r.eigvecs = identity_order ? vecs : op_product<S>({vecs, selection<S>(order, m, k)});
  }
  r.stats.converged = true;
  return r;
}

struct SmallEig {
  Eigen::VectorXcd values;
  Eigen::MatrixXcd vectors;
};

template <class S>
SmallEig small_eig(const Mat<S>& M, bool selfadjoint) {
  SmallEig out;
  if (selfadjoint) {
    Eigen::SelfAdjointEigenSolver<Mat<S>> es(M);
    out.values = es.eigenvalues().template cast<cdouble>();
    out.vectors = es.eigenvectors().template cast<cdouble>();
  } else if constexpr (is_complex_v<S>) {
    Eigen::ComplexEigenSolver<Mat<S>> es(M);
    out.values = es.eigenvalues();
    out.vectors = es.eigenvectors();
  } else {
    Eigen::EigenSolver<Mat<S>> es(M);
    out.values = es.eigenvalues();
    out.vectors = es.eigenvectors();
  }
  return out;
}

// Columns `cols` of V as an operator of the field S, or empty when a real
// operator has a complex eigenvector among them.
template <class S>
Operator<S> vec_columns(const Eigen::MatrixXcd& V, const Eigen::VectorXcd& values, const std::vector<Index>& cols) {
  Eigen::MatrixXcd sel(V.rows(), static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if constexpr (!is_complex_v<S>) {
      if (values[cols[j]].imag() != 0.0) return {};
    }
    sel.col(static_cast<Index>(j)) = V.col(cols[j]);
  }
  return make_dense<S>(mat_from_complex<S>(sel));
}

template <class S>
EigResult<S> dense_eig_result(const Mat<S>& M, bool selfadjoint, Index k, Which which) {
  SmallEig e = small_eig<S>(M, selfadjoint);
  auto order = eig_order(e.values, which);
  order.resize(k);
  EigResult<S> r;
  r.eigvals.resize(k);
  for (Index j = 0; j < k; ++j) r.eigvals[j] = e.values[order[j]];
  r.eigvecs = vec_columns<S>(e.vectors, e.values, order);
  r.stats.converged = true;
  return r;
}

// Krylov eigensolver: grows the subspace until the wanted Ritz pairs converge.
template <class S>
EigResult<S> krylov_eig(const Operator<S>& A, Index k, Which which, const SolveParams<S>& p, bool symmetric) {
  const Index n = A.rows();
  k = resolve_k(k, n);
  std::mt19937_64 rng(p.rng_seed);
  Vec<S> q0 = random_vec<S>(n, rng);
  q0.normalize();
  Index m = std::min<Index>(n, std::max<Index>(2 * k + 20, 40));
  EigResult<S> r;
  int steps = 0;
  while (true) {
    KrylovFactorization<S> f = symmetric ? lanczos<S>(A, q0, m, Reorth::Full, 1e-12)
                                         : detail::run_arnoldi<S>(A, q0, m, 1e-12, Orthogonalization::Modified);
    const Index mm = f.H.cols();
    steps += static_cast<int>(mm);
    const Mat<S> Hs = f.square_H();
    const double tail = f.breakdown_index ? 0.0 : std::abs(f.H(mm, mm - 1));
    SmallEig e = symmetric ? small_eig<S>(Mat<S>(Hs), true) : small_eig<S>(Mat<S>(Hs), false);
    auto order = eig_order(e.values, which);
    const Index kk = std::min(k, mm);
    order.resize(kk);
    const double scale = std::max(e.values.cwiseAbs().maxCoeff(), 1e-300);
    double worst = 0;
    for (Index j = 0; j < kk; ++j) {
      const auto y = e.vectors.col(order[j]);
      worst = std::max(worst, tail * std::abs(y[mm - 1]) / y.norm() / scale);
    }
    const bool ok = kk == k && worst <= p.tol;
    if (ok || mm >= n || f.breakdown_index || m >= n) {
      r.eigvals.resize(kk);
      for (Index j = 0; j < kk; ++j) r.eigvals[j] = e.values[order[j]];
      if (symmetric) {
        for (Index j = 0; j < kk; ++j) r.eigvals[j] = r.eigvals[j].real();
      }
      const Eigen::MatrixXcd Qc = f.Q.leftCols(mm).template cast<cdouble>();
      r.eigvecs = vec_columns<S>(Eigen::MatrixXcd(Qc * e.vectors), e.values, order);
      r.stats.iterations = steps;
      r.stats.residual = worst;
      r.stats.converged = ok;
      if (kk < k) r.stats.note = "partial: Krylov space exhausted before k Ritz pairs";
      return r;
    }
    m = std::min(n, 2 * m);
  }
}

// Greedy nearest-value matching of `target` to the candidates in `values`.
inline std::vector<Index> match_values(const Eigen::VectorXcd& target, const Eigen::VectorXcd& values) {
  std::vector<Index> out(target.size());
  std::vector<char> used(values.size(), 0);
  for (Index i = 0; i < target.size(); ++i) {
    Index best = -1;
    double bd = std::numeric_limits<double>::infinity();
    for (Index j = 0; j < values.size(); ++j) {
      if (used[j]) continue;
      const double d = std::abs(values[j] - target[i]);
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    used[best] = 1;
    out[i] = best;
  }
  return out;
}

template <class S>
Vec<S> diag_sweep(const Operator<S>& A) {
  const Index n = A.rows();
  Vec<S> d(n);
  const Index chunk = 64;
  for (Index s = 0; s < n; s += chunk) {
    const Index c = std::min(chunk, n - s);
    Mat<S> E = Mat<S>::Zero(n, c);
    for (Index j = 0; j < c; ++j) E(s + j, j) = S(1);
    const Mat<S> Y = A.apply_block(E);
    for (Index j = 0; j < c; ++j) d[s + j] = Y(s + j, j);
  }
  return d;
}

inline int permutation_sign(const std::vector<Index>& perm) {
  std::vector<char> seen(perm.size(), 0);
  int sign = 1;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (seen[i]) continue;
    std::size_t len = 0;
    for (std::size_t j = i; !seen[j]; j = static_cast<std::size_t>(perm[j])) {
      seen[j] = 1;
      ++len;
    }
    if (len % 2 == 0) sign = -sign;
  }
  return sign;
}

template <class S>
LogDet<S> lu_logdet(const Mat<S>& M) {
  Eigen::PartialPivLU<Mat<S>> lu(M);
  LogDet<S> out;
  S sign = S(lu.permutationP().determinant());
  for (Index i = 0; i < M.rows(); ++i) {
    const S u = lu.matrixLU()(i, i);
    const double a = std::abs(u);
    if (a == 0) {
      out.logabs = -std::numeric_limits<double>::infinity();
      out.sign = S(0);
      return out;
    }
    out.logabs += std::log(a);
    sign *= u / a;
  }
  out.sign = sign;
  return out;
}

template <class S>
LogDet<S> combine(const LogDet<S>& a, const LogDet<S>& b) {
  LogDet<S> out;
  out.logabs = a.logabs + b.logabs;
  if (a.sign && b.sign) out.sign = *a.sign * *b.sign;
  return out;
}

template <class S>
Operator<S> scalar_identity(S c, Index n) {
  return make_scalar<S>(c, n);
}

template <class S>
void check_domain(const Eigen::VectorXcd& lam, const FnSpec& f) {
  if (!f.positive_domain) return;
  const double scale = std::max(1.0, lam.cwiseAbs().maxCoeff());
  for (Index i = 0; i < lam.size(); ++i) {
    if (!(lam[i].real() > 0) || std::abs(lam[i].imag()) > 1e-12 * scale) {
      throw DomainError(f.name + ": spectrum must be strictly positive, found eigenvalue (" +
                        std::to_string(lam[i].real()) + ", " + std::to_string(lam[i].imag()) + ")");
    }
  }
}

template <class S>
Vec<S> apply_scalar_fn(const Vec<S>& d, const FnSpec& f) {
  Vec<S> out(d.size());
  for (Index i = 0; i < d.size(); ++i) out[i] = from_complex<S>(f.f(cdouble(d[i])));
  return out;
}

}  // namespace detail

// -- public API -------------------------------------------------------------------

template <class S>
SolveResult<S> solve(const Registry<S>& reg, const Operator<S>& A, const Vec<S>& b, const SolveParams<S>& p = {}) {
  reg.freeze();
  p.validate();
  if (!A.shape().square()) throw ShapeError("solve: operator " + A.shape().str() + " is not square");
  if (b.size() != A.rows()) {
    throw ShapeError("solve: operator " + A.shape().str() + " incompatible with rhs of length " + std::to_string(b.size()));
  }
  auto counter = std::make_shared<MvmCounter>();
  const Operator<S> Ai = instrument_leaves(A, counter);
  SolveResult<S> out;
  Mat<S> X = detail::solve_block(reg, Ai, Mat<S>(b), p, out.stats);
  out.x = X.col(0);
  out.stats.mvm_count = counter->value();
  return out;
}

/// A x = b through the most specific rule. ‖Ax − b‖/‖b‖ ≤ tol on convergence.
template <class S>
SolveResult<S> solve(const Operator<S>& A, const Vec<S>& b, const SolveParams<S>& p = {}) {
  return solve(default_registry<S>(), A, b, p);
}

/// Lazy inverse: every MVM is a solve. Non-convergence throws NumericalError.
template <class S>
Operator<S> inverse(const Registry<S>& reg, const Operator<S>& A, const SolveParams<S>& p = {}) {
  if (!A.shape().square()) throw ShapeError("inverse: operator " + A.shape().str() + " is not square");
  reg.freeze();
  const Registry<S>* r = &reg;
  auto make_apply = [r, p](Operator<S> op) -> VecFn<S> {
    return [r, p, op](const Vec<S>& v) {
      SolveResult<S> s = solve(*r, op, v, p);
      if (!s.stats.converged) {
        throw NumericalError("inverse: inner " + s.stats.algorithm + " solve did not converge (residual " +
                             std::to_string(s.stats.residual) + ")");
      }
      return s.x;
    };
  };
  VecFn<S> adj;
  try {
    adj = make_apply(op_adjoint(A));
  } catch (const UnsupportedError&) {
  }
  Node<S> n;
  n.kind = Kind::Inverse;
  n.shape = A.shape();
  n.annotations = A.annotations();
  n.payload = std::make_shared<const Payload<S>>(FunctionData<S>{make_apply(A), std::move(adj)});
  n.children = {A};
  return make_node(std::move(n));
}

template <class S>
Operator<S> inverse(const Operator<S>& A, const SolveParams<S>& p = {}) {
  return inverse(default_registry<S>(), A, p);
}

template <class S>
EigResult<S> eig(const Registry<S>& reg, const Operator<S>& A, Index k = kAll, Which which = Which::Smallest,
                 const SolveParams<S>& p = {}) {
  reg.freeze();
  if (!A.shape().square()) throw ShapeError("eig: operator " + A.shape().str() + " is not square");
  detail::resolve_k(k, A.rows());
  auto counter = std::make_shared<MvmCounter>();
  EigResult<S> r = detail::eig_dispatch(reg, instrument_leaves(A, counter), k, which, p);
  r.stats.mvm_count = counter->value();
  return r;
}

template <class S>
EigResult<S> eig(const Operator<S>& A, Index k = kAll, Which which = Which::Smallest, const SolveParams<S>& p = {}) {
  return eig(default_registry<S>(), A, k, which, p);
}

template <class S>
Vec<S> diag(const Registry<S>& reg, const Operator<S>& A, Mode mode = Mode::Exact, const ProbeConfig& probes = {}) {
  reg.freeze();
  if (!A.shape().square()) throw ShapeError("diag: operator " + A.shape().str() + " is not square");
  if (mode == Mode::Estimate) probes.validate();
  return detail::diag_dispatch(reg, A, mode, probes);
}

template <class S>
Vec<S> diag(const Operator<S>& A, Mode mode = Mode::Exact, const ProbeConfig& probes = {}) {
  return diag(default_registry<S>(), A, mode, probes);
}

template <class S>
S trace(const Registry<S>& reg, const Operator<S>& A, Mode mode = Mode::Exact, const ProbeConfig& probes = {}) {
  reg.freeze();
  if (!A.shape().square()) throw ShapeError("trace: operator " + A.shape().str() + " is not square");
  if (mode == Mode::Estimate) probes.validate();
  return detail::trace_dispatch(reg, A, mode, probes);
}

template <class S>
S trace(const Operator<S>& A, Mode mode = Mode::Exact, const ProbeConfig& probes = {}) {
  return trace(default_registry<S>(), A, mode, probes);
}

/// log|det A| together with the sign (a unit phase for complex operators) when tracked.
template <class S>
LogDet<S> slogdet(const Registry<S>& reg, const Operator<S>& A, Mode mode = Mode::Exact, const ProbeConfig& probes = {}) {
  reg.freeze();
  if (!A.shape().square()) throw ShapeError("logdet: operator " + A.shape().str() + " is not square");
  if (mode == Mode::Estimate) probes.validate();
  return detail::logdet_dispatch(reg, A, mode, probes);
}

template <class S>
LogDet<S> slogdet(const Operator<S>& A, Mode mode = Mode::Exact, const ProbeConfig& probes = {}) {
  return slogdet(default_registry<S>(), A, mode, probes);
}

template <class S>
double logdet(const Registry<S>& reg, const Operator<S>& A, Mode mode = Mode::Exact, const ProbeConfig& probes = {}) {
  return slogdet(reg, A, mode, probes).logabs;
}

template <class S>
double logdet(const Operator<S>& A, Mode mode = Mode::Exact, const ProbeConfig& probes = {}) {
  return slogdet(default_registry<S>(), A, mode, probes).logabs;
}

template <class S>
Operator<S> apply_fn(const Registry<S>& reg, const Operator<S>& A, const FnSpec& f, const SolveParams<S>& p = {}) {
  reg.freeze();
  if (!A.shape().square()) throw ShapeError("apply_fn: operator " + A.shape().str() + " is not square");
  return detail::fn_dispatch(reg, A, f, p);
}

template <class S>
Operator<S> apply_fn(const Operator<S>& A, const FnSpec& f, const SolveParams<S>& p = {}) {
  return apply_fn(default_registry<S>(), A, f, p);
}

inline FnSpec sqrt_fn() {
  return {"sqrt", [](cdouble z) { return std::sqrt(z); }, true};
}
inline FnSpec exp_fn() {
  return {"exp", [](cdouble z) { return std::exp(z); }, false};
}
inline FnSpec log_fn() {
  return {"log", [](cdouble z) { return std::log(z); }, true};
}

template <class S>
Operator<S> sqrt_op(const Operator<S>& A, const SolveParams<S>& p = {}) {
  return apply_fn(A, sqrt_fn(), p);
}
template <class S>
Operator<S> exp_op(const Operator<S>& A, const SolveParams<S>& p = {}) {
  return apply_fn(A, exp_fn(), p);
}
template <class S>
Operator<S> log_op(const Operator<S>& A, const SolveParams<S>& p = {}) {
  return apply_fn(A, log_fn(), p);
}

template <class S>
SolveResult<S> pinv_apply(const Registry<S>& reg, const Operator<S>& A, const Vec<S>& b, const SolveParams<S>& p = {}) {
  reg.freeze();
  p.validate();
  if (b.size() != A.rows()) {
    throw ShapeError("pinv_apply: operator " + A.shape().str() + " incompatible with vector of length " +
                     std::to_string(b.size()));
  }
  auto counter = std::make_shared<MvmCounter>();
  SolveResult<S> out;
  Mat<S> X = detail::pinv_block(reg, instrument_leaves(A, counter), Mat<S>(b), p, out.stats);
  out.x = X.col(0);
  out.stats.mvm_count = counter->value();
  return out;
}

/// A⁺ b.
template <class S>
SolveResult<S> pinv_apply(const Operator<S>& A, const Vec<S>& b, const SolveParams<S>& p = {}) {
  return pinv_apply(default_registry<S>(), A, b, p);
}

/// Lazy pseudo-inverse operator.
template <class S>
Operator<S> pinv(const Registry<S>& reg, const Operator<S>& A, const SolveParams<S>& p = {}) {
  reg.freeze();
  const Registry<S>* r = &reg;
  auto make_apply = [r, p](Operator<S> op) -> VecFn<S> {
    return [r, p, op](const Vec<S>& v) { return pinv_apply(*r, op, v, p).x; };
  };
  VecFn<S> adj;
  try {
    adj = make_apply(op_adjoint(A));
  } catch (const UnsupportedError&) {
  }
  Node<S> n;
  n.kind = Kind::PseudoInverse;
  n.shape = Shape{A.cols(), A.rows()};
  n.annotations = A.annotations();
  n.payload = std::make_shared<const Payload<S>>(FunctionData<S>{make_apply(A), std::move(adj)});
  n.children = {A};
  return make_node(std::move(n));
}

template <class S>
Operator<S> pinv(const Operator<S>& A, const SolveParams<S>& p = {}) {
  return pinv(default_registry<S>(), A, p);
}

/// Jacobi preconditioner: Diagonal(1 / diag(A)).
template <class S>
Operator<S> jacobi_preconditioner(const Operator<S>& A) {
  Vec<S> d = diag(A);
  for (Index i = 0; i < d.size(); ++i) {
    if (d[i] == S(0)) throw SingularError("jacobi_preconditioner: zero diagonal entry at " + std::to_string(i));
    d[i] = S(1) / d[i];
  }
  return make_diagonal<S>(std::move(d));
}

// -- builtin rules ------------------------------------------------------------------

namespace detail {

template <class S>
Pattern<S> kind_where(Kind k, std::string name, std::function<bool(const Operator<S>&)> pred) {
  Pattern<S> p = Pattern<S>::of(k);
  p.where(std::move(name), std::move(pred));
  return p;
}

template <class S>
bool within_cap(const Operator<S>& A) {
  const Index cap = dense_cap();
  return A.rows() <= cap && A.cols() <= cap;
}

template <class S>
bool scalar_like(const Operator<S>& A) {
  const Kind k = A.kind();
  return k == Kind::Identity || k == Kind::ScalarMul || k == Kind::Zero;
}

template <class S>
S scalar_value(const Operator<S>& u) {
  switch (u.kind()) {
    case Kind::Identity: return S(1);
    case Kind::Zero: return S(0);
    default: return u.template payload<ScalarData<S>>().c;
  }
}

template <class S>
void register_solve_rules(Registry<S>& reg, const BuiltinConfig& cfg) {
  using P = Pattern<S>;
  auto tagged = [](Annotation a) { return P::tagged(a); };

  reg.register_rule(solve_op, "gmres", P::any(), [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>&) {
    return krylov_block<S>(A, B, p, st, [](const Operator<S>& a, const Vec<S>& b, const SolveParams<S>& q) { return gmres<S>(a, b, q); });
  });
  reg.register_rule(solve_op, "minres", tagged(Annotation::SelfAdjoint),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>&) {
                      return krylov_block<S>(A, B, p, st,
                                             [](const Operator<S>& a, const Vec<S>& b, const SolveParams<S>& q) { return minres<S>(a, b, q); });
                    });
  // Dense LU: a Dense leaf within the cap, or any operator when forced by name.
  reg.register_rule(solve_op, "dense", kind_where<S>(Kind::Dense, "within dense cap", within_cap<S>),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats& st, const Registry<S>&) {
                      const auto& u = A.unwrap();
                      const Mat<S> M = u.kind() == Kind::Dense ? u.template payload<DenseData<S>>().m : dense(A);
                      Mat<S> X = lu_solve<S>(M, B, "dense");
                      st.residual = mat_rel_residual<S>(M, X, B);
                      return X;
                    });
  reg.register_rule(solve_op, "cg", tagged(Annotation::PSD), [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>&) {
    return krylov_block<S>(A, B, p, st, [](const Operator<S>& a, const Vec<S>& b, const SolveParams<S>& q) { return cg<S>(a, b, q); });
  });
  reg.register_rule(solve_op, "unitary-adjoint", tagged(Annotation::Unitary),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) {
                      return Mat<S>(op_adjoint(A).apply_block(B));
                    });
  reg.register_rule(solve_op, "diagonal-invert", P::of(Kind::Diagonal),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) {
                      const Vec<S>& d = A.unwrap().template payload<DiagonalData<S>>().d;
                      for (Index i = 0; i < d.size(); ++i)
                        if (d[i] == S(0)) throw SingularError("diagonal-invert: zero diagonal entry at index " + std::to_string(i));
                      return Mat<S>(d.cwiseInverse().asDiagonal() * B);
                    });
  reg.register_rule(solve_op, "identity", P::of(Kind::Identity),
                    [](const Operator<S>&, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) { return Mat<S>(B); });
  reg.register_rule(solve_op, "scalar", P::of(Kind::ScalarMul), [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) {
    const S c = A.unwrap().template payload<ScalarData<S>>().c;
    if (c == S(0)) throw SingularError("scalar: zero scalar operator");
    return Mat<S>(B / c);
  });
  reg.register_rule(solve_op, "triangular", P::of(Kind::Triangular),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats& st, const Registry<S>&) {
                      const auto& t = A.unwrap().template payload<TriangularData<S>>();
                      for (Index i = 0; i < t.m.rows(); ++i)
                        if (t.m(i, i) == S(0)) throw SingularError("triangular: zero diagonal entry at index " + std::to_string(i));
                      Mat<S> X = t.lower ? Mat<S>(t.m.template triangularView<Eigen::Lower>().solve(B))
                                         : Mat<S>(t.m.template triangularView<Eigen::Upper>().solve(B));
                      Mat<S> M = t.lower ? Mat<S>(t.m.template triangularView<Eigen::Lower>())
                                         : Mat<S>(t.m.template triangularView<Eigen::Upper>());
                      st.residual = mat_rel_residual<S>(M, X, B);
                      return X;
                    });
  reg.register_rule(solve_op, "tridiagonal", P::of(Kind::Tridiagonal),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) {
                      return tridiagonal_solve<S>(A.unwrap().template payload<TridiagonalData<S>>(), B);
                    });
  reg.register_rule(solve_op, "permutation", P::of(Kind::Permutation),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) {
                      const auto& perm = A.unwrap().template payload<PermutationData>().perm;
                      Mat<S> X(B.rows(), B.cols());
                      for (std::size_t i = 0; i < perm.size(); ++i) X.row(perm[i]) = B.row(static_cast<Index>(i));
                      return X;
                    });
  reg.register_rule(solve_op, "circulant", P::of(Kind::Circulant),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) {
                      const auto& c = A.unwrap().template payload<CirculantPayload<S>>();
                      for (Index i = 0; i < c.spectrum.size(); ++i)
                        if (c.spectrum[i] == cdouble(0)) throw SingularError("circulant: zero Fourier coefficient " + std::to_string(i));
                      Mat<S> X(B.rows(), B.cols());
                      for (Index j = 0; j < B.cols(); ++j) {
                        Eigen::VectorXcd f = dft(B.col(j).template cast<cdouble>().eval(), false);
                        f.array() /= c.spectrum.array();
                        f = dft(f, true);
                        for (Index i = 0; i < f.size(); ++i) X(i, j) = from_complex<S>(f[i]);
                      }
                      return X;
                    });
  reg.register_rule(solve_op, "scale", P::of(Kind::Scale),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      const auto& u = A.unwrap();
                      const S c = u.node().coef;
                      if (c == S(0)) throw SingularError("scale: zero coefficient");
                      return Mat<S>(sub_solve<S>(r, u.child(0), B, p, p.tol, st) / c);
                    });
  reg.register_rule(solve_op, "inverse-apply",
                    kind_where<S>(Kind::Inverse, "holds operand", [](const Operator<S>& u) { return !u.children().empty(); }),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) {
                      return Mat<S>(A.unwrap().child(0).apply_block(B));
                    });
  // (A_1 ... A_M)^-1 b: solve against A_1 first. Each sub-solve runs at tol/M;
  // the true residual is checked and refined because errors amplify by the
  // conditioning of the later factors.
  reg.register_rule(solve_op, "product", kind_where<S>(Kind::Product, "square factors", all_square<S>),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      const auto& fs = A.unwrap().children();
                      const double sub = p.tol / static_cast<double>(fs.size());
                      auto pass = [&](const Mat<S>& R) {
                        Mat<S> Y = R;
                        for (const auto& f : fs) Y = sub_solve<S>(r, f, Y, p, sub, st);
                        return Y;
                      };
                      Mat<S> X = pass(B);
                      double res = 0, prev = std::numeric_limits<double>::infinity();
                      for (int round = 0; round < 4; ++round) {
                        const Mat<S> R = B - A.apply_block(X);
                        res = 0;
                        for (Index j = 0; j < B.cols(); ++j) {
                          const double bn = B.col(j).norm();
                          res = std::max(res, bn > 0 ? R.col(j).norm() / bn : R.col(j).norm());
                        }
                        // Stop at the rounding floor: another pass would not halve the residual.
                        if (res <= p.tol || round == 3 || res > 0.5 * prev) break;
                        prev = res;
                        X += pass(R);
                      }
                      st.residual = res;
                      st.converged = res <= p.tol;
                      return X;
                    });
  // (A ⊗ B) vec(X) = vec(B X A^T): block solves against B, then against A.
  reg.register_rule(solve_op, "kron", kind_where<S>(Kind::Kron, "square factors", all_square<S>),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      const auto& u = A.unwrap();
                      const auto& Af = u.child(0);
                      const auto& Bf = u.child(1);
                      const Index na = Af.rows(), nb = Bf.rows();
                      const double sub = p.tol / 2;
                      // Stack all columns so each factor sees one block solve.
                      Mat<S> C(nb, na * B.cols());
                      for (Index j = 0; j < B.cols(); ++j) C.middleCols(j * na, na) = unvec<S>(B.col(j), nb, na);
                      Mat<S> Y = sub_solve<S>(r, Bf, C, p, sub, st);
                      Mat<S> Yt(na, nb * B.cols());
                      for (Index j = 0; j < B.cols(); ++j) Yt.middleCols(j * nb, nb) = Y.middleCols(j * na, na).transpose();
                      Mat<S> Z = sub_solve<S>(r, Af, Yt, p, sub, st);
                      Mat<S> X(na * nb, B.cols());
                      for (Index j = 0; j < B.cols(); ++j) X.col(j) = vec<S>(Mat<S>(Z.middleCols(j * nb, nb).transpose()));
                      return X;
                    });
  reg.register_rule(solve_op, "block-diag", kind_where<S>(Kind::BlockDiag, "square blocks", all_square<S>),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      Mat<S> X(B.rows(), B.cols());
                      Index off = 0;
                      for (const auto& blk : A.unwrap().children()) {
                        X.middleRows(off, blk.rows()) = sub_solve<S>(r, blk, B.middleRows(off, blk.rows()), p, p.tol, st);
                        off += blk.rows();
                      }
                      return X;
                    });
  auto diag_blocks_square = [](const Operator<S>& u) {
    return u.child(0).shape().square() && u.child(3).shape().square();
  };
  // General [[A, B], [C, D]] through the Schur complement S = D - C A^-1 B.
  reg.register_rule(solve_op, "schur", kind_where<S>(Kind::Block2x2, "square diagonal blocks", diag_blocks_square),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      const auto& u = A.unwrap();
                      const auto &A11 = u.child(0), &A12 = u.child(1), &A21 = u.child(2), &A22 = u.child(3);
                      const Index n1 = A11.rows(), n2 = A22.rows();
                      const double inner_tol = std::max(1e-14, p.tol * 1e-3);
                      SolveParams<S> ip = p;
                      ip.tol = inner_tol;
                      ip.record_history = false;
                      const Registry<S>* rp = &r;
                      auto schur_apply = [rp, A11, A12, A21, A22, ip](const Vec<S>& v) -> Vec<S> {
                        IterStats tmp;
                        Mat<S> w = sub_solve<S>(*rp, A11, Mat<S>(A12.apply(v)), ip, ip.tol, tmp);
                        return A22.apply(v) - A21.apply(Vec<S>(w.col(0)));
                      };
                      const Operator<S> Sc = make_function_op<S>(schur_apply, Shape{n2, n2});
                      Mat<S> Y1 = sub_solve<S>(r, A11, B.topRows(n1), p, inner_tol, st);
                      Mat<S> rhs2 = B.bottomRows(n2) - A21.apply_block(Y1);
                      Mat<S> X2 = sub_solve<S>(r, Sc, rhs2, p, p.tol / 2, st);
                      Mat<S> X1 = Y1 - sub_solve<S>(r, A11, A12.apply_block(X2), p, inner_tol, st);
                      Mat<S> X(n1 + n2, B.cols());
                      X.topRows(n1) = X1;
                      X.bottomRows(n2) = X2;
                      return X;
                    });
  auto block_triangular = [diag_blocks_square](const Operator<S>& u) {
    return diag_blocks_square(u) && (is_zero_op(u.child(1)) || is_zero_op(u.child(2)));
  };
  reg.register_rule(solve_op, "block-triangular", kind_where<S>(Kind::Block2x2, "zero off-diagonal block", block_triangular),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      const auto& u = A.unwrap();
                      const auto &A11 = u.child(0), &A12 = u.child(1), &A21 = u.child(2), &A22 = u.child(3);
                      const Index n1 = A11.rows(), n2 = A22.rows();
                      const double sub = p.tol / 2;
                      Mat<S> X(n1 + n2, B.cols());
                      if (is_zero_op(A21)) {
                        X.bottomRows(n2) = sub_solve<S>(r, A22, B.bottomRows(n2), p, sub, st);
                        X.topRows(n1) = sub_solve<S>(r, A11, Mat<S>(B.topRows(n1) - A12.apply_block(X.bottomRows(n2))), p, sub, st);
                      } else {
                        X.topRows(n1) = sub_solve<S>(r, A11, B.topRows(n1), p, sub, st);
                        X.bottomRows(n2) = sub_solve<S>(r, A22, Mat<S>(B.bottomRows(n2) - A21.apply_block(X.topRows(n1))), p, sub, st);
                      }
                      return X;
                    });

  // Low-rank updates. The LowRank child may sit in either position.
  auto split_low_rank = [](const Operator<S>& u) -> std::pair<Operator<S>, Operator<S>> {
    const auto& a = u.child(0);
    const auto& b = u.child(1);
    if (a.unwrap().kind() == Kind::LowRank) return {a, b};
    return {b, a};
  };
  auto lowrank_any = P::of(Kind::Sum).operands({P::of(Kind::LowRank), P::any()}, true);
  // (K + U V)^-1 = K^-1 - K^-1 U (I + V K^-1 U)^-1 V K^-1.
  reg.register_rule(solve_op, "kailath", lowrank_any,
                    [split_low_rank](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      auto [L, K] = split_low_rank(A.unwrap());
                      const auto& lr = L.unwrap().template payload<LowRankPayload<S>>();
                      const Index rk = lr.U.cols();
                      Mat<S> rhs(B.rows(), B.cols() + rk);
                      rhs << B, lr.U;
                      Mat<S> Z = sub_solve<S>(r, K, rhs, p, p.tol / 4, st);
                      const Mat<S> KiB = Z.leftCols(B.cols());
                      const Mat<S> KiU = Z.rightCols(rk);
                      const Mat<S> cap = Mat<S>::Identity(rk, rk) + lr.V * KiU;
                      return Mat<S>(KiB - KiU * lu_solve<S>(cap, Mat<S>(lr.V * KiB), "kailath"));
                    });
  auto rank_one = kind_where<S>(Kind::LowRank, "rank one",
                                [](const Operator<S>& u) { return u.template payload<LowRankPayload<S>>().U.cols() == 1; });
  // (K + u v^T)^-1 b = K^-1 b - K^-1 u (v^T K^-1 b) / (1 + v^T K^-1 u).
  reg.register_rule(solve_op, "sherman-morrison", P::of(Kind::Sum).operands({rank_one, P::any()}, true),
                    [split_low_rank](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      auto [L, K] = split_low_rank(A.unwrap());
                      const auto& lr = L.unwrap().template payload<LowRankPayload<S>>();
                      Mat<S> rhs(B.rows(), B.cols() + 1);
                      rhs << B, lr.U;
                      Mat<S> Z = sub_solve<S>(r, K, rhs, p, p.tol / 4, st);
                      const Vec<S> Kiu = Z.col(B.cols());
                      const S denom = S(1) + (lr.V.row(0) * Kiu)(0);
                      if (denom == S(0)) throw SingularError("sherman-morrison: 1 + v^T K^-1 u is zero");
                      const Mat<S> KiB = Z.leftCols(B.cols());
                      return Mat<S>(KiB - Kiu * ((lr.V.row(0) * KiB) / denom));
                    });
  reg.register_rule(solve_op, "woodbury", P::of(Kind::Sum).operands({P::of(Kind::LowRank), P::of(Kind::Diagonal)}, true),
                    [split_low_rank](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats& st, const Registry<S>&) {
                      auto [L, D] = split_low_rank(A.unwrap());
                      const auto& lr = L.unwrap().template payload<LowRankPayload<S>>();
                      const Vec<S>& d = D.unwrap().template payload<DiagonalData<S>>().d;
                      for (Index i = 0; i < d.size(); ++i)
                        if (d[i] == S(0)) throw SingularError("woodbury: zero diagonal entry at index " + std::to_string(i));
                      const Vec<S> di = d.cwiseInverse();
                      const Mat<S> DiB = di.asDiagonal() * B;
                      const Mat<S> DiU = di.asDiagonal() * lr.U;
                      const Mat<S> cap = Mat<S>::Identity(lr.U.cols(), lr.U.cols()) + lr.V * DiU;
                      Mat<S> X = DiB - DiU * lu_solve<S>(cap, Mat<S>(lr.V * DiB), "woodbury");
                      st.residual = 0;
                      return X;
                    });
  const int min_terms = cfg.svrg_min_terms;
  Pattern<S> svrg_pat = P::of(Kind::Sum);
  svrg_pat.with(Annotation::PSD).where("at least " + std::to_string(min_terms) + " terms",
                                       [min_terms](const Operator<S>& u) {
                                         return static_cast<int>(u.children().size()) >= min_terms;
                                       });
  // (sum_i A_i) x = b is the mean system with right-hand side b / M.
  reg.register_rule(solve_op, "svrg", svrg_pat, [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>&) {
    const auto& terms = A.unwrap().children();
    const double M = static_cast<double>(terms.size());
    SvrgParams sp;
    sp.tol = p.tol;
    sp.seed = p.rng_seed;
    sp.epochs = p.max_iter;
    sp.record_history = p.record_history;
    Mat<S> X(B.rows(), B.cols());
    for (Index j = 0; j < B.cols(); ++j) {
      SolveResult<S> res = svrg_solve<S>(terms, Vec<S>(B.col(j) / M), sp);
      X.col(j) = res.x;
      absorb(st, res.stats);
      if (p.record_history) st.residual_history = res.stats.residual_history;
    }
    return X;
  });
}

template <class S>
void register_eig_rules(Registry<S>& reg) {
  using P = Pattern<S>;
  reg.register_rule(eig_op, "arnoldi", P::any(), [](const Operator<S>& A, Index k, Which w, const SolveParams<S>& p, const Registry<S>&) {
    return krylov_eig<S>(A, k, w, p, false);
  });
  reg.register_rule(eig_op, "dense-eig", P::any().where("within dense cap", within_cap<S>),
                    [](const Operator<S>& A, Index k, Which w, const SolveParams<S>&, const Registry<S>&) {
                      const auto& u = A.unwrap();
                      const Mat<S> M = u.kind() == Kind::Dense ? u.template payload<DenseData<S>>().m : dense(A);
                      return dense_eig_result<S>(M, A.has(Annotation::SelfAdjoint), resolve_k(k, A.rows()), w);
                    });
  reg.register_rule(eig_op, "lanczos", P::tagged(Annotation::SelfAdjoint),
                    [](const Operator<S>& A, Index k, Which w, const SolveParams<S>& p, const Registry<S>&) { return krylov_eig<S>(A, k, w, p, true); });
  reg.register_rule(eig_op, "power", P::any().where("by name only", [](const Operator<S>&) { return false; }),
                    [](const Operator<S>& A, Index k, Which w, const SolveParams<S>& p, const Registry<S>&) {
                      if (resolve_k(k, A.rows()) != 1 || w != Which::Largest) {
                        throw ParamError("power: only k = 1 with Which::Largest is supported");
                      }
                      auto pw = power_iteration<S>(A, p.tol, p.max_iter, p.rng_seed);
                      EigResult<S> r;
                      r.eigvals = Eigen::VectorXcd::Constant(1, cdouble(pw.lambda));
                      r.eigvecs = make_dense<S>(Mat<S>(pw.v));
                      r.stats.iterations = pw.iterations;
                      r.stats.converged = pw.converged;
                      return r;
                    });
  reg.register_rule(eig_op, "diagonal", P::of(Kind::Diagonal), [](const Operator<S>& A, Index k, Which w, const SolveParams<S>&, const Registry<S>&) {
    const Vec<S>& d = A.unwrap().template payload<DiagonalData<S>>().d;
    const Index n = d.size();
    const Eigen::VectorXcd vals = d.template cast<cdouble>();
    auto order = eig_order(vals, w);
    k = resolve_k(k, n);
    EigResult<S> r;
    r.eigvals.resize(k);
    for (Index j = 0; j < k; ++j) r.eigvals[j] = vals[order[j]];
    r.eigvecs = selection<S>(order, n, k);
    r.stats.converged = true;
    return r;
  });
  reg.register_rule(eig_op, "scalar", P::any().where("identity, scalar or zero", scalar_like<S>),
                    [](const Operator<S>& A, Index k, Which w, const SolveParams<S>&, const Registry<S>&) {
                      const Index n = A.rows();
                      k = resolve_k(k, n);
                      const S c = scalar_value<S>(A.unwrap());
                      std::vector<Index> order(n);
                      std::iota(order.begin(), order.end(), 0);
                      EigResult<S> r;
                      r.eigvals = Eigen::VectorXcd::Constant(k, cdouble(c));
                      r.eigvecs = k == n ? make_identity<S>(n) : selection<S>(order, n, k);
                      r.stats.converged = true;
                      (void)w;
                      return r;
                    });
  // Eigenvalues are the diagonal; eigenvectors come from the dense path.
  reg.register_rule(eig_op, "triangular", P::of(Kind::Triangular), [](const Operator<S>& A, Index k, Which w, const SolveParams<S>&, const Registry<S>&) {
    const auto& t = A.unwrap().template payload<TriangularData<S>>();
    const Index n = t.m.rows();
    k = resolve_k(k, n);
    const Eigen::VectorXcd vals = t.m.diagonal().template cast<cdouble>();
    auto order = eig_order(vals, w);
    order.resize(k);
    EigResult<S> r;
    r.eigvals.resize(k);
    for (Index j = 0; j < k; ++j) r.eigvals[j] = vals[order[j]];
    r.stats.converged = true;
    if (within_cap(A)) {
      const Mat<S> M = t.lower ? Mat<S>(t.m.template triangularView<Eigen::Lower>()) : Mat<S>(t.m.template triangularView<Eigen::Upper>());
      SmallEig e = small_eig<S>(M, false);
      auto idx = match_values(r.eigvals, e.values);
      r.eigvecs = vec_columns<S>(e.vectors, e.values, idx);
    } else {
      r.stats.note = "eigenvectors unavailable above the dense cap";
    }
    return r;
  });
  reg.register_rule(eig_op, "kron", kind_where<S>(Kind::Kron, "square factors", all_square<S>),
                    [](const Operator<S>& A, Index k, Which w, const SolveParams<S>& p, const Registry<S>& r) {
                      const auto& u = A.unwrap();
                      EigResult<S> ea = eig_dispatch(r, u.child(0), kAll, Which::Smallest, p);
                      EigResult<S> eb = eig_dispatch(r, u.child(1), kAll, Which::Smallest, p);
                      const Index na = ea.eigvals.size(), nb = eb.eigvals.size();
                      Eigen::VectorXcd vals(na * nb);
                      for (Index i = 0; i < na; ++i)
                        for (Index j = 0; j < nb; ++j) vals[i * nb + j] = ea.eigvals[i] * eb.eigvals[j];
                      Operator<S> V;
                      if (ea.eigvecs && eb.eigvecs) V = op_kron<S>(ea.eigvecs, eb.eigvecs);
                      EigResult<S> res = select_eigs<S>(vals, V, resolve_k(k, A.rows()), w);
                      res.stats.iterations = ea.stats.iterations + eb.stats.iterations;
                      res.stats.converged = ea.stats.converged && eb.stats.converged;
                      return res;
                    });
  reg.register_rule(eig_op, "kronsum", P::of(Kind::KronSum), [](const Operator<S>& A, Index k, Which w, const SolveParams<S>& p, const Registry<S>& r) {
    const auto& u = A.unwrap();
    EigResult<S> ea = eig_dispatch(r, u.child(0), kAll, Which::Smallest, p);
    EigResult<S> eb = eig_dispatch(r, u.child(1), kAll, Which::Smallest, p);
    const Index na = ea.eigvals.size(), nb = eb.eigvals.size();
    Eigen::VectorXcd vals(na * nb);
    for (Index i = 0; i < na; ++i)
      for (Index j = 0; j < nb; ++j) vals[i * nb + j] = ea.eigvals[i] + eb.eigvals[j];
    Operator<S> V;
    if (ea.eigvecs && eb.eigvecs) V = op_kron<S>(ea.eigvecs, eb.eigvecs);
    EigResult<S> res = select_eigs<S>(vals, V, resolve_k(k, A.rows()), w);
    res.stats.iterations = ea.stats.iterations + eb.stats.iterations;
    res.stats.converged = ea.stats.converged && eb.stats.converged;
    return res;
  });
  reg.register_rule(eig_op, "block-diag", kind_where<S>(Kind::BlockDiag, "square blocks", all_square<S>),
                    [](const Operator<S>& A, Index k, Which w, const SolveParams<S>& p, const Registry<S>& r) {
                      const auto& blocks = A.unwrap().children();
                      std::vector<Eigen::VectorXcd> vs;
                      std::vector<Operator<S>> vecs;
                      bool have_vecs = true, conv = true;
                      int iters = 0;
                      Index total = 0;
                      for (const auto& b : blocks) {
                        EigResult<S> e = eig_dispatch(r, b, kAll, Which::Smallest, p);
                        total += e.eigvals.size();
                        vs.push_back(e.eigvals);
                        have_vecs = have_vecs && static_cast<bool>(e.eigvecs);
                        vecs.push_back(e.eigvecs);
                        conv = conv && e.stats.converged;
                        iters += e.stats.iterations;
                      }
                      Eigen::VectorXcd vals(total);
                      Index off = 0;
                      for (const auto& v : vs) {
                        vals.segment(off, v.size()) = v;
                        off += v.size();
                      }
                      Operator<S> V;
                      if (have_vecs) V = op_block_diag<S>(vecs);
                      EigResult<S> res = select_eigs<S>(vals, V, resolve_k(k, A.rows()), w);
                      res.stats.iterations = iters;
                      res.stats.converged = conv;
                      return res;
                    });
}

template <class S>
void register_diag_rules(Registry<S>& reg) {
  using P = Pattern<S>;
  reg.register_rule(diag_op, "diag-base", P::any(), [](const Operator<S>& A, Mode mode, const ProbeConfig& pc, const Registry<S>&) {
    if (mode == Mode::Exact) return diag_sweep<S>(A);
    return Vec<S>(hutchinson_diag<S>(A, pc).estimate);
  });
  reg.register_rule(diag_op, "diagonal", P::of(Kind::Diagonal), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    return Vec<S>(A.unwrap().template payload<DiagonalData<S>>().d);
  });
  reg.register_rule(diag_op, "scalar", P::any().where("identity, scalar or zero", scalar_like<S>),
                    [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
                      return Vec<S>(Vec<S>::Constant(A.rows(), scalar_value<S>(A.unwrap())));
                    });
  reg.register_rule(diag_op, "dense", P::of(Kind::Dense), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    return Vec<S>(A.unwrap().template payload<DenseData<S>>().m.diagonal());
  });
  reg.register_rule(diag_op, "sparse", P::of(Kind::Sparse), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    const auto& c = A.unwrap().template payload<CsrPayload<S>>();
    Vec<S> d = Vec<S>::Zero(A.rows());
    for (Index i = 0; i < A.rows(); ++i)
      for (Index k = c.row_ptr[i]; k < c.row_ptr[i + 1]; ++k)
        if (c.col_idx[k] == i) d[i] = c.values[k];
    return d;
  });
  reg.register_rule(diag_op, "circulant", P::of(Kind::Circulant), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    return Vec<S>(Vec<S>::Constant(A.rows(), A.unwrap().template payload<CirculantPayload<S>>().filter[0]));
  });
  reg.register_rule(diag_op, "triangular", P::of(Kind::Triangular), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    return Vec<S>(A.unwrap().template payload<TriangularData<S>>().m.diagonal());
  });
  reg.register_rule(diag_op, "tridiagonal", P::of(Kind::Tridiagonal), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    return Vec<S>(A.unwrap().template payload<TridiagonalData<S>>().main);
  });
  reg.register_rule(diag_op, "permutation", P::of(Kind::Permutation), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    const auto& perm = A.unwrap().template payload<PermutationData>().perm;
    Vec<S> d(A.rows());
    for (Index i = 0; i < A.rows(); ++i) d[i] = perm[i] == i ? S(1) : S(0);
    return d;
  });
  reg.register_rule(diag_op, "low-rank", P::of(Kind::LowRank), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    const auto& lr = A.unwrap().template payload<LowRankPayload<S>>();
    return Vec<S>(lr.U.cwiseProduct(lr.V.transpose()).rowwise().sum());
  });
  reg.register_rule(diag_op, "scale", P::of(Kind::Scale), [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
    const auto& u = A.unwrap();
    return Vec<S>(u.node().coef * diag_dispatch(r, u.child(0), m, pc));
  });
  // Estimate mode on a Sum uses the doubly stochastic estimator; it targets the
  // mean of the terms, hence the factor M.
  reg.register_rule(diag_op, "sum", P::of(Kind::Sum), [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
    const auto& terms = A.unwrap().children();
    if (m == Mode::Estimate) {
      return Vec<S>(static_cast<double>(terms.size()) * doubly_stochastic_diag<S>(terms, pc).estimate);
    }
    Vec<S> d = diag_dispatch(r, terms.front(), m, pc);
    for (std::size_t i = 1; i < terms.size(); ++i) d += diag_dispatch(r, terms[i], m, pc);
    return d;
  });
  reg.register_rule(diag_op, "kron", kind_where<S>(Kind::Kron, "square factors", all_square<S>),
                    [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
                      const auto& u = A.unwrap();
                      const Vec<S> da = diag_dispatch(r, u.child(0), m, pc);
                      const Vec<S> db = diag_dispatch(r, u.child(1), m, pc);
                      Vec<S> d(da.size() * db.size());
                      for (Index i = 0; i < da.size(); ++i) d.segment(i * db.size(), db.size()) = da[i] * db;
                      return d;
                    });
  reg.register_rule(diag_op, "kronsum", P::of(Kind::KronSum), [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
    const auto& u = A.unwrap();
    const Vec<S> da = diag_dispatch(r, u.child(0), m, pc);
    const Vec<S> db = diag_dispatch(r, u.child(1), m, pc);
    Vec<S> d(da.size() * db.size());
    for (Index i = 0; i < da.size(); ++i) d.segment(i * db.size(), db.size()) = db.array() + da[i];
    return d;
  });
  reg.register_rule(diag_op, "block-diag", kind_where<S>(Kind::BlockDiag, "square blocks", all_square<S>),
                    [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
                      Vec<S> d(A.rows());
                      Index off = 0;
                      for (const auto& b : A.unwrap().children()) {
                        d.segment(off, b.rows()) = diag_dispatch(r, b, m, pc);
                        off += b.rows();
                      }
                      return d;
                    });
  reg.register_rule(diag_op, "block-2x2",
                    kind_where<S>(Kind::Block2x2, "square diagonal blocks",
                                  [](const Operator<S>& u) { return u.child(0).shape().square() && u.child(3).shape().square(); }),
                    [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
                      const auto& u = A.unwrap();
                      Vec<S> d(A.rows());
                      d << diag_dispatch(r, u.child(0), m, pc), diag_dispatch(r, u.child(3), m, pc);
                      return d;
                    });
}

template <class S>
void register_trace_rules(Registry<S>& reg) {
  using P = Pattern<S>;
  reg.register_rule(trace_op, "trace-diag", P::any(), [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
    return S(diag_dispatch(r, A, m, pc).sum());
  });
  reg.register_rule(trace_op, "kron", kind_where<S>(Kind::Kron, "square factors", all_square<S>),
                    [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
                      const auto& u = A.unwrap();
                      return S(trace_dispatch(r, u.child(0), m, pc) * trace_dispatch(r, u.child(1), m, pc));
                    });
  reg.register_rule(trace_op, "kronsum", P::of(Kind::KronSum), [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
    const auto& u = A.unwrap();
    const double na = static_cast<double>(u.child(0).rows()), nb = static_cast<double>(u.child(1).rows());
    return S(nb * trace_dispatch(r, u.child(0), m, pc) + na * trace_dispatch(r, u.child(1), m, pc));
  });
}

template <class S>
void register_logdet_rules(Registry<S>& reg) {
  using P = Pattern<S>;
  reg.register_rule(logdet_op, "logdet-base", P::any(), [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>&) {
    if (m == Mode::Estimate) {
      if (!A.has(Annotation::PSD)) {
        throw DomainError("logdet: the stochastic estimate needs a PSD operator; use exact mode within the dense cap");
      }
      LogDet<S> out;
      out.logabs = slq_logdet<S>(A, pc.n_probes, pc.lanczos_iters, pc.seed, pc.distribution);
      out.sign = S(1);
      return out;
    }
    if (!within_cap(A)) {
      throw UnsupportedError("logdet: exact mode above the dense cap needs structure; use estimate mode for PSD operators");
    }
    const auto& u = A.unwrap();
    return lu_logdet<S>(u.kind() == Kind::Dense ? u.template payload<DenseData<S>>().m : dense(A));
  });
  reg.register_rule(logdet_op, "diagonal", P::of(Kind::Diagonal), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    const Vec<S>& d = A.unwrap().template payload<DiagonalData<S>>().d;
    return lu_logdet<S>(Mat<S>(d.asDiagonal()));
  });
  reg.register_rule(logdet_op, "scalar", P::any().where("identity, scalar or zero", scalar_like<S>),
                    [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
                      const S c = scalar_value<S>(A.unwrap());
                      const double n = static_cast<double>(A.rows());
                      LogDet<S> out;
                      if (c == S(0)) {
                        out.logabs = -std::numeric_limits<double>::infinity();
                        out.sign = S(0);
                        return out;
                      }
                      out.logabs = n * std::log(std::abs(c));
                      if constexpr (is_complex_v<S>) {
                        out.sign = std::pow(c / std::abs(c), n);
                      } else {
                        out.sign = (c < 0 && A.rows() % 2 == 1) ? S(-1) : S(1);
                      }
                      return out;
                    });
  reg.register_rule(logdet_op, "triangular", P::of(Kind::Triangular), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    return lu_logdet<S>(Mat<S>(A.unwrap().template payload<TriangularData<S>>().m.diagonal().asDiagonal()));
  });
  reg.register_rule(logdet_op, "tridiagonal", P::of(Kind::Tridiagonal), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    // Pivoted elimination as in the tridiagonal solve; det = sign * prod(pivots).
    const auto& t = A.unwrap().template payload<TridiagonalData<S>>();
    const Index n = t.main.size();
    Vec<S> dl = t.sub, d = t.main, du = t.super;
    LogDet<S> out;
    S sign(1);
    for (Index i = 0; i + 1 < n; ++i) {
      if (std::abs(d[i]) >= std::abs(dl[i])) {
        if (d[i] == S(0)) {
          out.logabs = -std::numeric_limits<double>::infinity();
          out.sign = S(0);
          return out;
        }
        d[i + 1] -= dl[i] / d[i] * du[i];
      } else {
        const S f = d[i] / dl[i];
        d[i] = dl[i];
        const S tmp = d[i + 1];
        d[i + 1] = du[i] - f * tmp;
        if (i + 2 < n) du[i + 1] = -f * du[i + 1];
        du[i] = tmp;
        sign = -sign;
      }
      out.logabs += std::log(std::abs(d[i]));
      sign *= d[i] / std::abs(d[i]);
    }
    if (d[n - 1] == S(0)) {
      out.logabs = -std::numeric_limits<double>::infinity();
      out.sign = S(0);
      return out;
    }
    out.logabs += std::log(std::abs(d[n - 1]));
    sign *= d[n - 1] / std::abs(d[n - 1]);
    out.sign = sign;
    return out;
  });
  reg.register_rule(logdet_op, "unitary", P::tagged(Annotation::Unitary), [](const Operator<S>&, Mode, const ProbeConfig&, const Registry<S>&) {
    return LogDet<S>{0.0, std::nullopt};
  });
  reg.register_rule(logdet_op, "permutation", P::of(Kind::Permutation), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    return LogDet<S>{0.0, S(permutation_sign(A.unwrap().template payload<PermutationData>().perm))};
  });
  reg.register_rule(logdet_op, "circulant", P::of(Kind::Circulant), [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
    const auto& sp = A.unwrap().template payload<CirculantPayload<S>>().spectrum;
    LogDet<S> out;
    cdouble phase(1);
    for (Index i = 0; i < sp.size(); ++i) {
      const double a = std::abs(sp[i]);
      if (a == 0) {
        out.logabs = -std::numeric_limits<double>::infinity();
        out.sign = S(0);
        return out;
      }
      out.logabs += std::log(a);
      phase *= sp[i] / a;
    }
    out.sign = from_complex<S>(phase);
    if constexpr (!is_complex_v<S>) out.sign = phase.real() < 0 ? S(-1) : S(1);
    return out;
  });
  reg.register_rule(logdet_op, "dense", kind_where<S>(Kind::Dense, "within dense cap", within_cap<S>),
                    [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
                      return lu_logdet<S>(A.unwrap().template payload<DenseData<S>>().m);
                    });
  reg.register_rule(logdet_op, "scale", P::of(Kind::Scale), [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
    const auto& u = A.unwrap();
    LogDet<S> c = logdet_dispatch(r, u.child(0), m, pc);
    const S coef = u.node().coef;
    const double n = static_cast<double>(A.rows());
    c.logabs += n * std::log(std::abs(coef));
    if (c.sign) {
      if constexpr (is_complex_v<S>) {
        c.sign = *c.sign * std::pow(coef / std::abs(coef), n);
      } else {
        if (coef < 0 && A.rows() % 2 == 1) c.sign = -*c.sign;
      }
    }
    return c;
  });
  // log det(A ⊗ B) = N_B log det A + N_A log det B.
  reg.register_rule(logdet_op, "kron", kind_where<S>(Kind::Kron, "square factors", all_square<S>),
                    [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
                      const auto& u = A.unwrap();
                      const LogDet<S> a = logdet_dispatch(r, u.child(0), m, pc);
                      const LogDet<S> b = logdet_dispatch(r, u.child(1), m, pc);
                      const Index na = u.child(0).rows(), nb = u.child(1).rows();
                      LogDet<S> out;
                      out.logabs = static_cast<double>(nb) * a.logabs + static_cast<double>(na) * b.logabs;
                      if (a.sign && b.sign) {
                        if constexpr (is_complex_v<S>) {
                          out.sign = std::pow(*a.sign, static_cast<double>(nb)) * std::pow(*b.sign, static_cast<double>(na));
                        } else {
                          out.sign = ((nb % 2 == 1 && *a.sign < 0) != (na % 2 == 1 && *b.sign < 0)) ? S(-1) : S(1);
                        }
                      }
                      return out;
                    });
  reg.register_rule(logdet_op, "product", kind_where<S>(Kind::Product, "square factors", all_square<S>),
                    [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
                      LogDet<S> out{0.0, S(1)};
                      for (const auto& f : A.unwrap().children()) out = combine(out, logdet_dispatch(r, f, m, pc));
                      return out;
                    });
  reg.register_rule(logdet_op, "block-diag", kind_where<S>(Kind::BlockDiag, "square blocks", all_square<S>),
                    [](const Operator<S>& A, Mode m, const ProbeConfig& pc, const Registry<S>& r) {
                      LogDet<S> out{0.0, S(1)};
                      for (const auto& f : A.unwrap().children()) out = combine(out, logdet_dispatch(r, f, m, pc));
                      return out;
                    });
  // det(D + U V) = det(D) det(I + V D^-1 U).
  reg.register_rule(logdet_op, "determinant-lemma",
                    P::of(Kind::Sum).operands({P::of(Kind::LowRank), P::of(Kind::Diagonal)}, true),
                    [](const Operator<S>& A, Mode, const ProbeConfig&, const Registry<S>&) {
                      const auto& u = A.unwrap();
                      const bool first = u.child(0).unwrap().kind() == Kind::LowRank;
                      const auto& lr = u.child(first ? 0 : 1).unwrap().template payload<LowRankPayload<S>>();
                      const Vec<S>& d = u.child(first ? 1 : 0).unwrap().template payload<DiagonalData<S>>().d;
                      const LogDet<S> ld = lu_logdet<S>(Mat<S>(d.asDiagonal()));
                      if (ld.sign && *ld.sign == S(0)) {
                        // D singular: fall back to the full dense determinant.
                        return lu_logdet<S>(Mat<S>(Mat<S>(d.asDiagonal()) + lr.U * lr.V));
                      }
                      const Mat<S> cap = Mat<S>::Identity(lr.U.cols(), lr.U.cols()) + lr.V * d.cwiseInverse().asDiagonal() * lr.U;
                      return combine(ld, lu_logdet<S>(cap));
                    });
}

template <class S>
void register_pinv_rules(Registry<S>& reg) {
  using P = Pattern<S>;
  // Normal equations with CG: A^* A x = A^* b when tall, x = A^* (A A^*)^-1 b when wide.
  reg.register_rule(pinv_op, "pinv-cg", P::any(), [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>&) {
    const Operator<S> At = op_adjoint(A);
    if (A.rows() >= A.cols()) {
      const Operator<S> N = annotate(op_product<S>({At, A}), Annotations(Annotation::PSD));
      return krylov_block<S>(N, Mat<S>(At.apply_block(B)), p, st,
                             [](const Operator<S>& a, const Vec<S>& b, const SolveParams<S>& q) { return cg<S>(a, b, q); });
    }
    const Operator<S> N = annotate(op_product<S>({A, At}), Annotations(Annotation::PSD));
    const Mat<S> Y = krylov_block<S>(N, B, p, st, [](const Operator<S>& a, const Vec<S>& b, const SolveParams<S>& q) { return cg<S>(a, b, q); });
    return Mat<S>(At.apply_block(Y));
  });
  reg.register_rule(pinv_op, "pinv-solve", P::tagged(Annotation::SelfAdjoint),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      return sub_solve<S>(r, A, B, p, p.tol, st);
                    });
  reg.register_rule(pinv_op, "pinv-svd", P::any().where("within dense cap", within_cap<S>),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) {
                      const auto& u = A.unwrap();
                      const Mat<S> M = u.kind() == Kind::Dense ? u.template payload<DenseData<S>>().m : dense(A);
                      Eigen::CompleteOrthogonalDecomposition<Mat<S>> cod(M);
                      return Mat<S>(cod.solve(B));
                    });
  reg.register_rule(pinv_op, "pinv-unitary", P::tagged(Annotation::Unitary),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) { return Mat<S>(op_adjoint(A).apply_block(B)); });
  reg.register_rule(pinv_op, "pinv-diagonal", P::of(Kind::Diagonal), [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>&, IterStats&, const Registry<S>&) {
    Vec<S> d = A.unwrap().template payload<DiagonalData<S>>().d;
    for (Index i = 0; i < d.size(); ++i) d[i] = d[i] == S(0) ? S(0) : S(1) / d[i];
    return Mat<S>(d.asDiagonal() * B);
  });
  // (A ⊗ B)^+ = A^+ ⊗ B^+ through the vec identity.
  reg.register_rule(pinv_op, "pinv-kron", P::of(Kind::Kron), [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
    const auto& u = A.unwrap();
    const auto& Af = u.child(0);
    const auto& Bf = u.child(1);
    return kron_apply<S>(
        B, Af.rows(), Bf.rows(), Af.cols(), Bf.cols(), [&](const Mat<S>& X) { return sub_pinv<S>(r, Af, X, p, st); },
        [&](const Mat<S>& X) { return sub_pinv<S>(r, Bf, X, p, st); });
  });
  reg.register_rule(pinv_op, "pinv-blockdiag", P::of(Kind::BlockDiag),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      Mat<S> X(A.cols(), B.cols());
                      Index ro = 0, co = 0;
                      for (const auto& b : A.unwrap().children()) {
                        X.middleRows(co, b.cols()) = sub_pinv<S>(r, b, B.middleRows(ro, b.rows()), p, st);
                        ro += b.rows();
                        co += b.cols();
                      }
                      return X;
                    });
  // (A B)^+ = (A^+ A B)^+ (A B B^+)^+, with A the first factor and B the rest.
  reg.register_rule(pinv_op, "pinv-product",
                    kind_where<S>(Kind::Product, "two or more factors", [](const Operator<S>& u) { return u.children().size() >= 2; }),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats& st, const Registry<S>& r) {
                      const auto& fs = A.unwrap().children();
                      const Operator<S> F = fs.front();
                      const Operator<S> G = fs.size() == 2 ? fs[1] : op_product<S>(std::vector<Operator<S>>(fs.begin() + 1, fs.end()));
                      const Operator<S> Ft = op_adjoint(F), Gt = op_adjoint(G);
                      const Registry<S>* rp = &r;
                      SolveParams<S> ip = p;
                      ip.tol = std::max(1e-14, p.tol * 1e-2);
                      ip.record_history = false;
                      auto pv = [rp, ip](const Operator<S>& op, const Vec<S>& v) {
                        IterStats tmp;
                        return Vec<S>(sub_pinv<S>(*rp, op, Mat<S>(v), ip, tmp).col(0));
                      };
                      // C1 = F^+ F G and C2 = F G G^+; both projectors F^+F and G G^+ are self-adjoint.
                      auto c1 = [F, G, pv](const Vec<S>& v) { return pv(F, F.apply(G.apply(v))); };
                      auto c1t = [F, Gt, pv](const Vec<S>& v) { return Gt.apply(pv(F, F.apply(v))); };
                      auto c2 = [F, G, pv](const Vec<S>& v) { return F.apply(G.apply(pv(G, v))); };
                      auto c2t = [G, Ft, pv](const Vec<S>& v) { return G.apply(pv(G, Ft.apply(v))); };
                      const Operator<S> C1 = make_function_op<S>(c1, c1t, Shape{F.cols(), G.cols()});
                      const Operator<S> C2 = make_function_op<S>(c2, c2t, Shape{F.rows(), F.cols()});
                      const Mat<S> Y = sub_pinv<S>(r, C2, B, p, st);
                      return sub_pinv<S>(r, C1, Y, p, st);
                    });
  // Randomized SVD route, selected by name only.
  reg.register_rule(pinv_op, "rsvd", P::any().where("by name only", [](const Operator<S>&) { return false; }),
                    [](const Operator<S>& A, const Mat<S>& B, const SolveParams<S>& p, IterStats&, const Registry<S>&) {
                      const Index mn = std::min(A.rows(), A.cols());
                      const Index over = std::min<Index>(5, mn - 1);
                      const Index rank = std::max<Index>(1, mn - over);
                      SvdResult<S> svd = randomized_svd<S>(A, rank, over, p.rng_seed, 2);
                      const double cut = svd.sigma.size() ? svd.sigma[0] * 1e-12 * static_cast<double>(mn) : 0.0;
                      Vec<S> inv(svd.sigma.size());
                      for (Index i = 0; i < inv.size(); ++i) inv[i] = svd.sigma[i] > cut ? S(1.0 / svd.sigma[i]) : S(0);
                      return Mat<S>(svd.V * (inv.asDiagonal() * (svd.U.adjoint() * B)));
                    });
}

template <class S>
void register_fn_rules(Registry<S>& reg) {
  using P = Pattern<S>;
  reg.register_rule(fn_op, "fn-dense", P::any(), [](const Operator<S>& A, const FnSpec& f, const SolveParams<S>&, const Registry<S>&) {
    if (!within_cap(A)) throw UnsupportedError(f.name + ": no structural rule and the operator exceeds the dense cap");
    const Mat<S> M = dense(A);
    SmallEig e = small_eig<S>(M, A.has(Annotation::SelfAdjoint));
    check_domain<S>(e.values, f);
    Eigen::VectorXcd fl(e.values.size());
    for (Index i = 0; i < fl.size(); ++i) fl[i] = f.f(e.values[i]);
    const Eigen::MatrixXcd V = e.vectors;
    Eigen::MatrixXcd R;
    if (A.has(Annotation::SelfAdjoint)) {
      R = V * fl.asDiagonal() * V.adjoint();
    } else {
      R = V * fl.asDiagonal() * V.inverse();
    }
    return make_dense<S>(mat_from_complex<S>(R));
  });
  // f(A) = V f(Λ) V^*, kept as a product.
  reg.register_rule(fn_op, "fn-eig", P::tagged(Annotation::SelfAdjoint), [](const Operator<S>& A, const FnSpec& f, const SolveParams<S>& p, const Registry<S>& r) {
    SolveParams<S> q = p;
    if (within_cap(A)) q.algorithm_override = "dense-eig";
    EigResult<S> e = eig_dispatch(r, A, kAll, Which::Smallest, q);
    check_domain<S>(e.eigvals, f);
    if (!e.eigvecs || e.eigvals.size() != A.rows()) throw NumericalError(f.name + ": incomplete eigendecomposition");
    Vec<S> fl(e.eigvals.size());
    for (Index i = 0; i < fl.size(); ++i) fl[i] = from_complex<S>(f.f(cdouble(e.eigvals[i].real(), 0)));
    return annotate(op_product<S>({e.eigvecs, make_diagonal<S>(fl), op_adjoint(e.eigvecs)}), Annotations(Annotation::SelfAdjoint));
  });
  reg.register_rule(fn_op, "fn-diagonal", P::of(Kind::Diagonal), [](const Operator<S>& A, const FnSpec& f, const SolveParams<S>&, const Registry<S>&) {
    const Vec<S>& d = A.unwrap().template payload<DiagonalData<S>>().d;
    check_domain<S>(d.template cast<cdouble>(), f);
    return make_diagonal<S>(apply_scalar_fn<S>(d, f));
  });
  reg.register_rule(fn_op, "fn-scalar", P::any().where("identity, scalar or zero", scalar_like<S>),
                    [](const Operator<S>& A, const FnSpec& f, const SolveParams<S>&, const Registry<S>&) {
                      const S c = scalar_value<S>(A.unwrap());
                      check_domain<S>(Eigen::VectorXcd::Constant(1, cdouble(c)), f);
                      return make_scalar<S>(from_complex<S>(f.f(cdouble(c))), A.rows());
                    });
  reg.register_rule(fn_op, "fn-blockdiag", kind_where<S>(Kind::BlockDiag, "square blocks", all_square<S>),
                    [](const Operator<S>& A, const FnSpec& f, const SolveParams<S>& p, const Registry<S>& r) {
                      std::vector<Operator<S>> out;
                      for (const auto& b : A.unwrap().children()) out.push_back(fn_dispatch(r, b, f, p));
                      return op_block_diag<S>(std::move(out));
                    });
}

}  // namespace detail

template <class S>
Registry<S> Registry<S>::with_builtins(BuiltinConfig cfg) {
  Registry<S> reg;
  detail::register_solve_rules(reg, cfg);
  detail::register_eig_rules(reg);
  detail::register_diag_rules(reg);
  detail::register_trace_rules(reg);
  detail::register_logdet_rules(reg);
  detail::register_pinv_rules(reg);
  detail::register_fn_rules(reg);
  return reg;
}

}  // namespace cola
