#pragma once

// Leaf operators. Each constructor validates its payload and returns an
// immutable Operator.

#include <string>
#include <vector>

#include "cola/core.hpp"

namespace cola {

namespace detail {

template <class S>
Node<S> leaf_node(Kind kind, Shape shape, Payload<S> payload, Annotations ann = {}) {
  Node<S> n;
  n.kind = kind;
  n.shape = shape;
  n.annotations = ann;
  n.payload = std::make_shared<const Payload<S>>(std::move(payload));
  return n;
}

}  // namespace detail

template <class S>
Operator<S> make_dense(Mat<S> m) {
  if (m.size() == 0) throw ConstructionError("make_dense: empty matrix");
  const Shape shape{m.rows(), m.cols()};
  return make_node(detail::leaf_node<S>(Kind::Dense, shape, DenseData<S>{std::move(m)}));
}

template <class S>
Operator<S> make_diagonal(Vec<S> d) {
  if (d.size() == 0) throw ConstructionError("make_diagonal: empty diagonal");
  const Shape shape{d.size(), d.size()};
  return make_node(detail::leaf_node<S>(Kind::Diagonal, shape, DiagonalData<S>{std::move(d)}));
}

template <class S = double>
Operator<S> make_identity(Index n) {
  if (n < 1) throw ConstructionError("make_identity: size must be >= 1");
  return make_node(detail::leaf_node<S>(Kind::Identity, {n, n}, std::monostate{}, Annotation::PSD | Annotation::Unitary));
}

/// c * I_n.
template <class S>
Operator<S> make_scalar(S c, Index n) {
  if (n < 1) throw ConstructionError("make_scalar: size must be >= 1");
  return make_node(detail::leaf_node<S>(Kind::ScalarMul, {n, n}, ScalarData<S>{c}));
}

template <class S = double>
Operator<S> make_zero(Index rows, Index cols) {
  if (rows < 1 || cols < 1) throw ConstructionError("make_zero: shape must be at least 1x1");
  return make_node(detail::leaf_node<S>(Kind::Zero, {rows, cols}, std::monostate{}));
}

/// Throws ConstructionError naming the first index that breaks the CSR invariants.
template <class S>
void validate_csr(const CsrPayload<S>& p, Shape shape) {
  const auto nnz = static_cast<Index>(p.col_idx.size());
  if (static_cast<Index>(p.row_ptr.size()) != shape.rows + 1) {
    throw ConstructionError("csr: row_ptr has length " + std::to_string(p.row_ptr.size()) + ", expected " +
                            std::to_string(shape.rows + 1));
  }
  if (p.values.size() != nnz) throw ConstructionError("csr: values and col_idx lengths differ");
  if (p.row_ptr[0] != 0) throw ConstructionError("csr: row_ptr[0] must be 0");
  if (p.row_ptr[shape.rows] != nnz) throw ConstructionError("csr: row_ptr[rows] must equal nnz");
  for (Index i = 0; i < shape.rows; ++i) {
    if (p.row_ptr[i + 1] < p.row_ptr[i]) {
      throw ConstructionError("csr: row_ptr decreases at index " + std::to_string(i + 1));
    }
    for (Index k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) {
      if (p.col_idx[k] < 0 || p.col_idx[k] >= shape.cols) {
        throw ConstructionError("csr: col_idx[" + std::to_string(k) + "] = " + std::to_string(p.col_idx[k]) +
                                " out of range");
      }
      if (k > p.row_ptr[i] && p.col_idx[k] <= p.col_idx[k - 1]) {
        throw ConstructionError("csr: col_idx not strictly increasing at index " + std::to_string(k));
      }
    }
  }
}

template <class S>
Operator<S> make_sparse_csr(CsrPayload<S> p, Shape shape) {
  if (shape.rows < 1 || shape.cols < 1) throw ConstructionError("make_sparse_csr: empty shape");
  validate_csr(p, shape);
  return make_node(detail::leaf_node<S>(Kind::Sparse, shape, std::move(p)));
}

/// CSR from a dense matrix, dropping exact zeros.
template <class S>
Operator<S> make_sparse_from_dense(const Mat<S>& m) {
  CsrPayload<S> p;
  p.row_ptr.push_back(0);
  std::vector<S> vals;
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j)
      if (m(i, j) != S(0)) {
        p.col_idx.push_back(j);
        vals.push_back(m(i, j));
      }
    p.row_ptr.push_back(static_cast<Index>(p.col_idx.size()));
  }
  p.values = Eigen::Map<Vec<S>>(vals.data(), static_cast<Index>(vals.size()));
  return make_sparse_csr(std::move(p), {m.rows(), m.cols()});
}

/// Circulant matrix whose first column is `filter`: entry (i,j) = filter[(i-j) mod N].
template <class S>
Operator<S> make_circulant(Vec<S> filter) {
  if (filter.size() == 0) throw ConstructionError("make_circulant: empty filter");
  const Index n = filter.size();
  auto spectrum = detail::circulant_spectrum<S>(filter);
  return make_node(detail::leaf_node<S>(Kind::Circulant, {n, n}, CirculantPayload<S>{std::move(filter), spectrum}));
}

/// Square triangular operator; entries outside the triangle must be zero.
template <class S>
Operator<S> make_triangular(Mat<S> m, bool lower) {
  if (m.size() == 0 || m.rows() != m.cols()) throw ConstructionError("make_triangular: matrix must be square and nonempty");
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) {
      const bool excluded = lower ? (i < j) : (i > j);
      if (excluded && m(i, j) != S(0)) {
        throw ConstructionError("make_triangular: nonzero entry at (" + std::to_string(i) + "," + std::to_string(j) +
                                ") outside the " + (lower ? "lower" : "upper") + " triangle");
      }
    }
  const Shape shape{m.rows(), m.cols()};
  return make_node(detail::leaf_node<S>(Kind::Triangular, shape, TriangularData<S>{std::move(m), lower}));
}

template <class S>
Operator<S> make_tridiagonal(Vec<S> sub, Vec<S> main, Vec<S> super) {
  const Index n = main.size();
  if (n == 0) throw ConstructionError("make_tridiagonal: empty main diagonal");
  if (sub.size() != n - 1 || super.size() != n - 1) {
    throw ConstructionError("make_tridiagonal: band lengths must be N-1, N, N-1");
  }
  return make_node(detail::leaf_node<S>(Kind::Tridiagonal, {n, n},
                                        TridiagonalData<S>{std::move(sub), std::move(main), std::move(super)}));
}

/// (P v)_i = v_{perm[i]}. Annotated Unitary.
template <class S = double>
Operator<S> make_permutation(std::vector<Index> perm) {
  const auto n = static_cast<Index>(perm.size());
  if (n == 0) throw ConstructionError("make_permutation: empty permutation");
  std::vector<char> seen(perm.size(), 0);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] < 0 || perm[i] >= n || seen[perm[i]]) {
      throw ConstructionError("make_permutation: not a bijection at index " + std::to_string(i));
    }
    seen[perm[i]] = 1;
  }
  return make_node(detail::leaf_node<S>(Kind::Permutation, {n, n}, PermutationData{std::move(perm)}, Annotation::Unitary));
}

/// U * V with U (rows x r) and V (r x cols).
template <class S>
Operator<S> make_low_rank(Mat<S> U, Mat<S> V) {
  if (U.size() == 0 || V.size() == 0) throw ConstructionError("make_low_rank: empty factor");
  if (U.cols() != V.rows()) throw ConstructionError("make_low_rank: inner dimensions differ");
  const Shape shape{U.rows(), V.cols()};
  return make_node(detail::leaf_node<S>(Kind::LowRank, shape, LowRankPayload<S>{std::move(U), std::move(V)}));
}

/// Matrix-free leaf backed by closures. Closures must be safe to call concurrently.
template <class S>
Operator<S> make_function_op(VecFn<S> apply, VecFn<S> apply_adjoint, Shape shape, Annotations ann = {}) {
  if (!apply) throw ConstructionError("make_function_op: apply closure is required");
  return make_node(detail::leaf_node<S>(Kind::Function, shape, FunctionData<S>{std::move(apply), std::move(apply_adjoint)}, ann));
}

template <class S>
Operator<S> make_function_op(VecFn<S> apply, Shape shape, Annotations ann = {}) {
  return make_function_op<S>(std::move(apply), VecFn<S>{}, shape, ann);
}

}  // namespace cola
