#pragma once

// Hutchinson and doubly stochastic diagonal/trace estimators, and the SVRG
// family for operators given as sums of terms.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "cola/krylov.hpp"

namespace cola {

struct ProbeConfig {
  int n_probes = 100;
  int batch = 0;  // sum terms sampled per probe, 0 = all terms
  ProbeDistribution distribution = ProbeDistribution::Gaussian;
  std::uint64_t seed = 0;
  int lanczos_iters = 30;  // SLQ only

  void validate() const {
    if (n_probes < 1) throw ParamError("probe count must be >= 1");
    if (batch < 0) throw ParamError("probe batch must be >= 0");
  }
};

template <class S>
struct DiagEstimate {
  Vec<S> estimate;
  Vec<double> std_error;
};

template <class S>
struct TraceEstimate {
  S estimate{};
  double std_error = 0;
};

namespace detail {

template <class S>
void check_terms(const std::vector<Operator<S>>& terms) {
  if (terms.empty()) throw ParamError("estimator needs at least one term");
  const Shape s = terms.front().shape();
  if (!s.square()) throw ShapeError("estimator terms must be square");
  for (const auto& t : terms)
    if (t.shape() != s) throw ShapeError("estimator terms must share one shape");
}

// Sample mean and standard error over per-probe columns.
template <class S>
DiagEstimate<S> summarize(const Mat<S>& samples) {
  const Index n = samples.cols();
  DiagEstimate<S> out;
  out.estimate = samples.rowwise().mean();
  out.std_error = Vec<double>::Zero(samples.rows());
  if (n > 1) {
    for (Index i = 0; i < samples.rows(); ++i) {
      const double var = (samples.row(i).array() - out.estimate[i]).abs2().sum() / static_cast<double>(n - 1);
      out.std_error[i] = std::sqrt(var / static_cast<double>(n));
    }
  }
  return out;
}

template <class S>
TraceEstimate<S> summarize_scalar(const Vec<S>& samples) {
  const Index n = samples.size();
  TraceEstimate<S> out;
  out.estimate = samples.mean();
  if (n > 1) {
    const double var = (samples.array() - out.estimate).abs2().sum() / static_cast<double>(n - 1);
    out.std_error = std::sqrt(var / static_cast<double>(n));
  }
  return out;
}

// Column j holds probe j's sample of z ⊙ A z, averaged over the sampled terms.
template <class S>
Mat<S> doubly_stochastic_samples(const std::vector<Operator<S>>& terms, const ProbeConfig& probes) {
  probes.validate();
  check_terms(terms);
  const Index N = terms.front().rows();
  const auto M = static_cast<int>(terms.size());
  const int m = probes.batch == 0 ? M : probes.batch;
  if (m > M) throw ParamError("probe batch exceeds the number of sum terms");
  std::mt19937_64 rng(probes.seed);
  std::vector<int> idx(M);
  Mat<S> samples(N, probes.n_probes);
  for (int j = 0; j < probes.n_probes; ++j) {
    std::iota(idx.begin(), idx.end(), 0);
    if (m < M) {
      // Partial Fisher-Yates: the first m entries are a uniform sample without replacement.
      for (int k = 0; k < m; ++k) {
        std::uniform_int_distribution<int> pick(k, M - 1);
        std::swap(idx[k], idx[pick(rng)]);
      }
    }
    Vec<S> acc = Vec<S>::Zero(N);
    for (int k = 0; k < m; ++k) {
      const Vec<S> z = random_vec<S>(N, rng, probes.distribution);
      acc += (z.conjugate().array() * terms[idx[k]].apply(z).array()).matrix();
    }
    samples.col(j) = acc / static_cast<double>(m);
  }
  return samples;
}

}  // namespace detail

/// Hutchinson: mean over probes of z ⊙ A z.
template <class S>
DiagEstimate<S> hutchinson_diag(const Operator<S>& A, const ProbeConfig& probes) {
  return detail::summarize<S>(detail::doubly_stochastic_samples<S>({A}, probes));
}

template <class S>
TraceEstimate<S> hutchinson_trace(const Operator<S>& A, const ProbeConfig& probes) {
  const Mat<S> s = detail::doubly_stochastic_samples<S>({A}, probes);
  return detail::summarize_scalar<S>(s.colwise().sum().transpose());
}

/// Estimates Diag of the mean of the terms, drawing an independent probe for
/// every sampled term (normalization 1/(n m)).
template <class S>
DiagEstimate<S> doubly_stochastic_diag(const std::vector<Operator<S>>& terms, const ProbeConfig& probes) {
  return detail::summarize<S>(detail::doubly_stochastic_samples<S>(terms, probes));
}

/// Trace of the mean of the terms.
template <class S>
TraceEstimate<S> doubly_stochastic_trace(const std::vector<Operator<S>>& terms, const ProbeConfig& probes) {
  const Mat<S> s = detail::doubly_stochastic_samples<S>(terms, probes);
  return detail::summarize_scalar<S>(s.colwise().sum().transpose());
}

// -- SVRG ---------------------------------------------------------------------

struct SvrgParams {
  double step_size = 0;  // 0 = 1 / (2 L) with L from power iteration on the mean
  int epochs = 200;
  int batch = 1;
  int inner_steps = 0;  // 0 = M / batch, so the inner loop costs one pass
  double tol = 1e-8;
  std::uint64_t seed = 0;
  bool record_history = true;

  void validate(std::size_t M) const {
    if (step_size < 0) throw ParamError("svrg: step size must be positive");
    if (epochs < 1) throw ParamError("svrg: epochs must be >= 1");
    if (batch < 1 || static_cast<std::size_t>(batch) > M) throw ParamError("svrg: batch must lie in [1, M]");
    if (!(tol > 0)) throw ParamError("svrg: tol must be positive");
  }
};

namespace detail {

template <class S>
Vec<S> mean_apply(const std::vector<Operator<S>>& terms, const Vec<S>& w) {
  Vec<S> out = terms.front().apply(w);
  for (std::size_t i = 1; i < terms.size(); ++i) out += terms[i].apply(w);
  return out / static_cast<double>(terms.size());
}

template <class S>
Mat<S> mean_apply_block(const std::vector<Operator<S>>& terms, const Mat<S>& W) {
  Mat<S> out = terms.front().apply_block(W);
  for (std::size_t i = 1; i < terms.size(); ++i) out += terms[i].apply_block(W);
  return out / static_cast<double>(terms.size());
}

// Power iteration on the mean of a random subsample of at most 64 terms, so
// the estimate of L costs a few passes at most.
template <class S>
double svrg_step(const std::vector<Operator<S>>& terms, const SvrgParams& sp, std::int64_t* mvms = nullptr) {
  if (sp.step_size > 0) return sp.step_size;
  std::vector<Operator<S>> sub = terms;
  if (sub.size() > 64) {
    std::mt19937_64 rng(sp.seed + 2);
    std::shuffle(sub.begin(), sub.end(), rng);
    sub.resize(64);
  }
  auto mean = make_function_op<S>([&sub](const Vec<S>& v) { return mean_apply<S>(sub, v); },
                                  Shape{terms.front().rows(), terms.front().cols()});
  const auto pw = power_iteration<S>(mean, 1e-2, 50, sp.seed, PowerStop::RelativeChange);
  if (!(pw.lambda > 0)) throw DomainError("svrg: mean operator has no positive dominant eigenvalue");
  if (mvms) *mvms += static_cast<std::int64_t>(sub.size()) * pw.iterations;
  return 1.0 / (2.0 * pw.lambda);
}

inline int inner_steps(const SvrgParams& sp, std::size_t M) {
  return sp.inner_steps > 0 ? sp.inner_steps : std::max<int>(1, static_cast<int>(M) / sp.batch);
}

}  // namespace detail

/// Solves (mean of terms) w = b with gradients g_i(w) = A_i w - b.
/// Each epoch costs two passes over the terms: the anchor gradient and the
/// inner corrections A_i (w - w0).
template <class S>
SolveResult<S> svrg_solve(const std::vector<Operator<S>>& terms, const Vec<S>& b, const SvrgParams& sp = {}) {
  detail::check_terms(terms);
  sp.validate(terms.size());
  if (b.size() != terms.front().rows()) throw ShapeError("svrg_solve: rhs length mismatch");
  const auto M = static_cast<int>(terms.size());
  SolveResult<S> out;
  auto& st = out.stats;
  st.algorithm = "svrg";
  // Element MVMs spent estimating the step size are charged to the solve.
  const double eta = detail::svrg_step(terms, sp, &st.mvm_count);
  const int steps = detail::inner_steps(sp, terms.size());
  std::mt19937_64 rng(sp.seed + 1);
  std::uniform_int_distribution<int> pick(0, M - 1);

  Vec<S> w = Vec<S>::Zero(b.size());
  const double bn = b.norm();
  if (bn == 0) {
    st.converged = true;
    out.x = w;
    return out;
  }
  double prev = std::numeric_limits<double>::infinity();
  for (int epoch = 0; epoch <= sp.epochs; ++epoch) {
    const Vec<S> w0 = w;
    const Vec<S> g0 = detail::mean_apply<S>(terms, w0) - b;
    st.mvm_count += M;
    const double rel = g0.norm() / bn;
    detail::check_finite(rel, "svrg", epoch);
    if (sp.record_history) st.residual_history.push_back(rel);
    st.residual = rel;
    if (rel <= sp.tol) {
      st.converged = true;
      break;
    }
    if (rel > 10 * prev) throw ParamError("svrg: residual grew tenfold over an epoch; reduce the step size");
    prev = std::min(prev, rel);
    if (epoch == sp.epochs) break;
    for (int t = 0; t < steps; ++t) {
      Vec<S> d = w - w0;
      Vec<S> v = Vec<S>::Zero(b.size());
      for (int k = 0; k < sp.batch; ++k) v += terms[pick(rng)].apply(d);
      st.mvm_count += sp.batch;
      w -= eta * (v / static_cast<double>(sp.batch) + g0);
    }
    ++st.iterations;
  }
  out.x = w;
  return out;
}

template <class S>
struct SubspaceResult {
  Mat<S> W;
  Vec<double> eigvals;
  IterStats stats;
};

namespace detail {

template <class S>
Mat<S> orthonormalize(const Mat<S>& W) {
  Eigen::HouseholderQR<Mat<S>> qr(W);
  return qr.householderQ() * Mat<S>::Identity(W.rows(), W.cols());
}

}  // namespace detail

/// Top-k eigenvectors of the mean of symmetric PSD terms, with the
/// variance-reduced gradient -A_i W + W W^T W.
template <class S>
SubspaceResult<S> svrg_topk_eigs(const std::vector<Operator<S>>& terms, Index k, const SvrgParams& sp = {}) {
  detail::check_terms(terms);
  sp.validate(terms.size());
  const Index N = terms.front().rows();
  if (k < 1 || k > N) throw ParamError("svrg_topk_eigs: k must lie in [1, N]");
  const auto M = static_cast<int>(terms.size());
  const double eta = detail::svrg_step(terms, sp);
  const int steps = detail::inner_steps(sp, terms.size());
  std::mt19937_64 rng(sp.seed + 1);
  std::uniform_int_distribution<int> pick(0, M - 1);

  // The cubic term steepens the landscape near the fixed point; a quarter of
  // the default step keeps the iteration stable.
  const double step = sp.step_size > 0 ? eta : eta / 4;

  SubspaceResult<S> out;
  auto& st = out.stats;
  st.algorithm = "svrg-eigs";
  Mat<S> W = detail::orthonormalize<S>(detail::random_mat<S>(N, k, rng));
  // Scale so that W^T W matches the fixed point of the gradient flow (W^T W = Λ).
  double anorm = 1.0 / (2.0 * eta);
  W *= std::sqrt(anorm);
  for (int epoch = 0; epoch <= sp.epochs; ++epoch) {
    const Mat<S> W0 = W;
    const Mat<S> AW0 = detail::mean_apply_block<S>(terms, W0);
    const Mat<S> G0 = -AW0 + W0 * (W0.adjoint() * W0);
    // Invariant-subspace residual of the orthonormalized iterate.
    const Mat<S> Q = detail::orthonormalize<S>(W0);
    const Mat<S> AQ = detail::mean_apply_block<S>(terms, Q);
    const Mat<S> R = AQ - Q * (Q.adjoint() * AQ);
    const double rel = R.norm() / std::max(anorm, 1e-300);
    if (sp.record_history) st.residual_history.push_back(rel);
    st.residual = rel;
    if (rel <= sp.tol || epoch == sp.epochs) {
      st.converged = rel <= sp.tol;
      Eigen::SelfAdjointEigenSolver<Mat<S>> es(Q.adjoint() * AQ);
      out.eigvals = es.eigenvalues().reverse();
      out.W = Q * es.eigenvectors().rowwise().reverse();
      return out;
    }
    for (int t = 0; t < steps; ++t) {
      const Mat<S> D = W - W0;
      Mat<S> V = Mat<S>::Zero(N, k);
      for (int j = 0; j < sp.batch; ++j) V += terms[pick(rng)].apply_block(D);
      const Mat<S> G = -V / static_cast<double>(sp.batch) + W * (W.adjoint() * W) - W0 * (W0.adjoint() * W0) + G0;
      W -= step * G;
    }
    ++st.iterations;
  }
  return out;
}

/// Orthonormal basis of a k-dimensional nullspace of the mean of PSD terms,
/// by variance-reduced descent on the gradient A_i W with a QR step per epoch.
template <class S>
SubspaceResult<S> svrg_nullspace(const std::vector<Operator<S>>& terms, Index k, const SvrgParams& sp = {}) {
  detail::check_terms(terms);
  sp.validate(terms.size());
  const Index N = terms.front().rows();
  if (k < 1 || k > N) throw ParamError("svrg_nullspace: k must lie in [1, N]");
  const auto M = static_cast<int>(terms.size());
  const double eta = detail::svrg_step(terms, sp);
  const int steps = detail::inner_steps(sp, terms.size());
  std::mt19937_64 rng(sp.seed + 1);
  std::uniform_int_distribution<int> pick(0, M - 1);

  SubspaceResult<S> out;
  auto& st = out.stats;
  st.algorithm = "svrg-nullspace";
  Mat<S> W = detail::orthonormalize<S>(detail::random_mat<S>(N, k, rng));
  double best = std::numeric_limits<double>::infinity();
  int stalled = 0;
  for (int epoch = 0; epoch <= sp.epochs; ++epoch) {
    W = detail::orthonormalize<S>(W);
    const Mat<S> W0 = W;
    const Mat<S> G0 = detail::mean_apply_block<S>(terms, W0);
    const double rel = G0.norm() / W0.norm();
    if (sp.record_history) st.residual_history.push_back(rel);
    st.residual = rel;
    if (rel <= sp.tol) {
      st.converged = true;
      break;
    }
    // Nullity below k shows up as a residual that stops decreasing. Stochastic
    // epochs are noisy, so only a long plateau counts.
    if (rel < best * 0.99) {
      best = rel;
      stalled = 0;
    } else if (++stalled >= 50) {
      st.note = "partial: residual stalled, nullity may be below k";
      break;
    }
    if (epoch == sp.epochs) break;
    for (int t = 0; t < steps; ++t) {
      const Mat<S> D = W - W0;
      Mat<S> V = Mat<S>::Zero(N, k);
      for (int j = 0; j < sp.batch; ++j) V += terms[pick(rng)].apply_block(D);
      W -= eta * (V / static_cast<double>(sp.batch) + G0);
    }
    ++st.iterations;
  }
  out.W = detail::orthonormalize<S>(W);
  const Mat<S> AW = detail::mean_apply_block<S>(terms, out.W);
  Eigen::SelfAdjointEigenSolver<Mat<S>> es(out.W.adjoint() * AW);
  out.eigvals = es.eigenvalues();
  return out;
}

}  // namespace cola
