#pragma once

// Composite operators and the transpose/adjoint rewrite rules.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "cola/operators.hpp"

namespace cola {

namespace detail {

inline constexpr unsigned kSelfAdjointPsd =
    static_cast<unsigned>(Annotation::SelfAdjoint) | static_cast<unsigned>(Annotation::PSD);

template <class S>
Annotations common_annotations(const std::vector<Operator<S>>& ops, unsigned mask) {
  unsigned bits = mask;
  for (const auto& op : ops) bits &= op.annotations().bits();
  return Annotations::from_bits(bits);
}

template <class S>
Operator<S> composite(Kind kind, Shape shape, std::vector<Operator<S>> children, Annotations ann = {}) {
  for (const auto& c : children)
    if (!c) throw ConstructionError(std::string(kind_name(kind)) + ": null child operator");
  Node<S> n;
  n.kind = kind;
  n.shape = shape;
  n.annotations = ann;
  n.children = std::move(children);
  return make_node(std::move(n));
}

}  // namespace detail

template <class S>
Operator<S> op_sum(std::vector<Operator<S>> terms) {
  if (terms.empty()) throw ConstructionError("op_sum: at least one term is required");
  const Shape shape = terms.front().shape();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    if (terms[i].shape() != shape) {
      throw ShapeError("op_sum: term " + std::to_string(i) + " has shape " + terms[i].shape().str() + ", expected " +
                       shape.str());
    }
  }
  auto ann = detail::common_annotations(terms, detail::kSelfAdjointPsd);
  return detail::composite(Kind::Sum, shape, std::move(terms), ann);
}

template <class S>
Operator<S> op_product(std::vector<Operator<S>> factors) {
  if (factors.empty()) throw ConstructionError("op_product: at least one factor is required");
  for (std::size_t i = 0; i + 1 < factors.size(); ++i) {
    if (factors[i].cols() != factors[i + 1].rows()) {
      throw ShapeError("op_product: factor " + std::to_string(i) + " " + factors[i].shape().str() +
                       " does not chain with factor " + std::to_string(i + 1) + " " + factors[i + 1].shape().str());
    }
  }
  const Shape shape{factors.front().rows(), factors.back().cols()};
  auto ann = detail::common_annotations(factors, static_cast<unsigned>(Annotation::Unitary));
  return detail::composite(Kind::Product, shape, std::move(factors), ann);
}

template <class S>
Operator<S> op_kron(Operator<S> A, Operator<S> B) {
  const Shape shape{A.rows() * B.rows(), A.cols() * B.cols()};
  std::vector<Operator<S>> ch{std::move(A), std::move(B)};
  auto ann = detail::common_annotations(ch, 7u);
  return detail::composite(Kind::Kron, shape, std::move(ch), ann);
}

/// A ⊕ B = A ⊗ I + I ⊗ B.
template <class S>
Operator<S> op_kron_sum(Operator<S> A, Operator<S> B) {
  if (!A.shape().square() || !B.shape().square()) {
    throw ShapeError("op_kron_sum: children must be square, got " + A.shape().str() + " and " + B.shape().str());
  }
  const Index n = A.rows() * B.rows();
  std::vector<Operator<S>> ch{std::move(A), std::move(B)};
  auto ann = detail::common_annotations(ch, detail::kSelfAdjointPsd);
  return detail::composite(Kind::KronSum, Shape{n, n}, std::move(ch), ann);
}

template <class S>
Operator<S> op_block_diag(std::vector<Operator<S>> blocks) {
  if (blocks.empty()) throw ConstructionError("op_block_diag: at least one block is required");
  Shape shape{0, 0};
  for (const auto& b : blocks) {
    shape.rows += b.rows();
    shape.cols += b.cols();
  }
  auto ann = detail::common_annotations(blocks, 7u);
  return detail::composite(Kind::BlockDiag, shape, std::move(blocks), ann);
}

/// [[A, B], [C, D]].
template <class S>
Operator<S> op_block_2x2(Operator<S> A, Operator<S> B, Operator<S> C, Operator<S> D) {
  if (A.rows() != B.rows() || C.rows() != D.rows() || A.cols() != C.cols() || B.cols() != D.cols()) {
    throw ShapeError("op_block_2x2: blocks not conformable: A" + A.shape().str() + " B" + B.shape().str() + " C" +
                     C.shape().str() + " D" + D.shape().str());
  }
  const Shape shape{A.rows() + C.rows(), A.cols() + B.cols()};
  return detail::composite<S>(Kind::Block2x2, shape, {std::move(A), std::move(B), std::move(C), std::move(D)});
}

/// Axis::Rows stacks blocks vertically; Axis::Cols places them side by side.
template <class S>
Operator<S> op_concat(std::vector<Operator<S>> blocks, Axis axis) {
  if (blocks.empty()) throw ConstructionError("op_concat: at least one block is required");
  Shape shape = blocks.front().shape();
  for (std::size_t i = 1; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    if (axis == Axis::Rows) {
      if (b.cols() != shape.cols) throw ShapeError("op_concat: block " + std::to_string(i) + " has wrong column count");
      shape.rows += b.rows();
    } else {
      if (b.rows() != shape.rows) throw ShapeError("op_concat: block " + std::to_string(i) + " has wrong row count");
      shape.cols += b.cols();
    }
  }
  Node<S> n;
  n.kind = Kind::Concat;
  n.shape = shape;
  n.axis = axis;
  n.children = std::move(blocks);
  return make_node(std::move(n));
}

/// c * A.
template <class S>
Operator<S> op_scale(S c, Operator<S> A) {
  unsigned bits = 0;
  const auto a = A.annotations();
  if (std::abs(c) == 1.0 && a.has(Annotation::Unitary)) bits |= static_cast<unsigned>(Annotation::Unitary);
  if constexpr (!is_complex_v<S>) {
    if (a.has(Annotation::SelfAdjoint)) bits |= static_cast<unsigned>(Annotation::SelfAdjoint);
    if (a.has(Annotation::PSD) && c >= 0) bits |= static_cast<unsigned>(Annotation::PSD);
  } else {
    if (c.imag() == 0.0) {
      if (a.has(Annotation::SelfAdjoint)) bits |= static_cast<unsigned>(Annotation::SelfAdjoint);
      if (a.has(Annotation::PSD) && c.real() >= 0) bits |= static_cast<unsigned>(Annotation::PSD);
    }
  }
  Node<S> n;
  n.kind = Kind::Scale;
  n.shape = A.shape();
  n.annotations = Annotations::from_bits(bits);
  n.coef = c;
  n.children = {std::move(A)};
  return make_node(std::move(n));
}

template <class S>
Operator<S> operator+(const Operator<S>& A, const Operator<S>& B) {
  return op_sum<S>({A, B});
}
template <class S>
Operator<S> operator*(const Operator<S>& A, const Operator<S>& B) {
  return op_product<S>({A, B});
}

// -- transpose / adjoint -----------------------------------------------------

namespace detail {

template <class S>
Vec<S> conj_vec(const Vec<S>& v) {
  if constexpr (is_complex_v<S>) {
    return v.conjugate();
  } else {
    return v;
  }
}

template <class S>
Operator<S> flip(const Operator<S>& A, bool conjugate);

template <class S>
Operator<S> flip_leaf(const Operator<S>& A, bool conjugate) {
  const auto& p = *A.node().payload;
  auto cj = [&](const Vec<S>& v) { return conjugate ? conj_vec<S>(v) : v; };
  const Annotations ann = A.annotations();
  Operator<S> out;
  switch (A.kind()) {
    case Kind::Dense: {
      const auto& m = std::get<DenseData<S>>(p).m;
      out = make_dense<S>(conjugate ? Mat<S>(m.adjoint()) : Mat<S>(m.transpose()));
      break;
    }
    case Kind::Diagonal:
      out = make_diagonal<S>(cj(std::get<DiagonalData<S>>(p).d));
      break;
    case Kind::Identity:
      return A;
    case Kind::Zero:
      return make_zero<S>(A.cols(), A.rows());
    case Kind::ScalarMul: {
      S c = std::get<ScalarData<S>>(p).c;
      out = make_scalar<S>(conjugate ? detail::conj(c) : c, A.rows());
      break;
    }
    case Kind::Sparse: {
      const auto& c = std::get<CsrPayload<S>>(p);
      const Index rows = A.rows(), cols = A.cols();
      CsrPayload<S> t;
      t.row_ptr.assign(cols + 1, 0);
      for (Index j : c.col_idx) ++t.row_ptr[j + 1];
      for (Index j = 0; j < cols; ++j) t.row_ptr[j + 1] += t.row_ptr[j];
      t.col_idx.resize(c.col_idx.size());
      t.values.resize(c.values.size());
      std::vector<Index> next(t.row_ptr.begin(), t.row_ptr.end() - 1);
      for (Index i = 0; i < rows; ++i)
        for (Index k = c.row_ptr[i]; k < c.row_ptr[i + 1]; ++k) {
          const Index dst = next[c.col_idx[k]]++;
          t.col_idx[dst] = i;
          t.values[dst] = conjugate ? detail::conj(c.values[k]) : c.values[k];
        }
      out = make_sparse_csr<S>(std::move(t), Shape{cols, rows});
      break;
    }
    case Kind::Circulant: {
      const auto& f = std::get<CirculantPayload<S>>(p).filter;
      const Index n = f.size();
      Vec<S> g(n);
      for (Index k = 0; k < n; ++k) g[k] = f[(n - k) % n];
      out = make_circulant<S>(cj(g));
      break;
    }
    case Kind::Triangular: {
      const auto& t = std::get<TriangularData<S>>(p);
      out = make_triangular<S>(conjugate ? Mat<S>(t.m.adjoint()) : Mat<S>(t.m.transpose()), !t.lower);
      break;
    }
    case Kind::Tridiagonal: {
      const auto& t = std::get<TridiagonalData<S>>(p);
      out = make_tridiagonal<S>(cj(t.super), cj(t.main), cj(t.sub));
      break;
    }
    case Kind::Permutation: {
      const auto& perm = std::get<PermutationData>(p).perm;
      std::vector<Index> inv(perm.size());
      for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<Index>(i);
      out = make_permutation<S>(std::move(inv));
      break;
    }
    case Kind::LowRank: {
      const auto& lr = std::get<LowRankPayload<S>>(p);
      if (conjugate) {
        out = make_low_rank<S>(lr.V.adjoint(), lr.U.adjoint());
      } else {
        out = make_low_rank<S>(lr.V.transpose(), lr.U.transpose());
      }
      break;
    }
    case Kind::Function:
    case Kind::Inverse:
    case Kind::PseudoInverse: {
      const auto& f = std::get<FunctionData<S>>(p);
      const Shape tshape{A.cols(), A.rows()};
      if (f.apply_adjoint) {
        VecFn<S> fwd, bwd;
        if (conjugate || !is_complex_v<S>) {
          fwd = f.apply_adjoint;
          bwd = f.apply;
        } else {
          // A^T v = conj(A^* conj(v)).
          auto adj = f.apply_adjoint;
          auto app = f.apply;
          fwd = [adj](const Vec<S>& v) { return conj_vec<S>(adj(conj_vec<S>(v))); };
          bwd = [app](const Vec<S>& v) { return conj_vec<S>(app(conj_vec<S>(v))); };
        }
        Node<S> n = A.node();
        n.shape = tshape;
        n.payload = std::make_shared<const Payload<S>>(FunctionData<S>{std::move(fwd), std::move(bwd)});
        if (!n.children.empty()) {
          // Inverse nodes keep their operand; it flips along with them.
          try {
            n.children[0] = flip(n.children[0], conjugate);
          } catch (const UnsupportedError&) {
            n.children.clear();
            n.kind = Kind::Function;
          }
        }
        return make_node(std::move(n));
      }
      const Index cap = dense_cap();
      if (A.rows() > cap || A.cols() > cap) {
        throw UnsupportedError("transpose of a " + A.shape().str() +
                               " function operator needs apply_adjoint (above the dense fallback cap)");
      }
      Mat<S> m = dense(A);
      out = make_dense<S>(conjugate ? Mat<S>(m.adjoint()) : Mat<S>(m.transpose()));
      break;
    }
    default:
      throw UnsupportedError(std::string("transpose: unhandled leaf ") + kind_name(A.kind()));
  }
  return ann.empty() ? out : annotate(out, ann);
}

template <class S>
Operator<S> flip(const Operator<S>& A, bool conjugate) {
  // A^* = A for self-adjoint A; for real scalars that also covers A^T.
  if (A.has(Annotation::SelfAdjoint) && (conjugate || !is_complex_v<S>)) return A;
  if (is_leaf(A.kind())) return flip_leaf(A, conjugate);

  const auto& ch = A.children();
  std::vector<Operator<S>> t;
  t.reserve(ch.size());
  for (const auto& c : ch) t.push_back(flip(c, conjugate));
  const Annotations ann = A.annotations();
  Operator<S> out;
  switch (A.kind()) {
    case Kind::Sum:
      out = op_sum<S>(std::move(t));
      break;
    case Kind::Product:
      std::reverse(t.begin(), t.end());
      out = op_product<S>(std::move(t));
      break;
    case Kind::Kron:
      out = op_kron<S>(t[0], t[1]);
      break;
    case Kind::KronSum:
      out = op_kron_sum<S>(t[0], t[1]);
      break;
    case Kind::BlockDiag:
      out = op_block_diag<S>(std::move(t));
      break;
    case Kind::Block2x2:
      out = op_block_2x2<S>(t[0], t[2], t[1], t[3]);
      break;
    case Kind::Concat:
      out = op_concat<S>(std::move(t), A.node().axis == Axis::Rows ? Axis::Cols : Axis::Rows);
      break;
    case Kind::Scale:
      out = op_scale<S>(conjugate ? detail::conj(A.node().coef) : A.node().coef, t[0]);
      break;
    case Kind::Counted:
      return instrument(t[0], A.node().counter);
    default:
      throw UnsupportedError(std::string("transpose: unhandled composite ") + kind_name(A.kind()));
  }
  return ann.empty() ? out : annotate(out, ann);
}

}  // namespace detail

/// A^T, by recursive rewriting. Composites never get a wrapper node.
template <class S>
Operator<S> op_transpose(const Operator<S>& A) {
  return detail::flip(A, false);
}

/// Conjugate transpose A^*.
template <class S>
Operator<S> op_adjoint(const Operator<S>& A) {
  return detail::flip(A, true);
}

/// Debug-only check that dense(A) agrees with its annotations. Costs a dense eigensolve.
template <class S>
bool verify_annotations(const Operator<S>& A, double tol = 1e-10) {
  const Mat<S> M = dense(A);
  const double scale = 1.0 + M.cwiseAbs().maxCoeff();
  if (A.has(Annotation::Unitary)) {
    if (!A.shape().square() || (M.adjoint() * M - Mat<S>::Identity(M.cols(), M.cols())).cwiseAbs().maxCoeff() > tol) {
      return false;
    }
  }
  if (A.has(Annotation::SelfAdjoint)) {
    if (!A.shape().square() || (M - M.adjoint()).cwiseAbs().maxCoeff() > tol * scale) return false;
  }
  if (A.has(Annotation::PSD)) {
    Eigen::SelfAdjointEigenSolver<Mat<S>> es(M, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -tol * scale) return false;
  }
  return true;
}

}  // namespace cola
