#pragma once

// Operator expression tree, the MVM contract, structure annotations and
// parameter flattening. Everything else in cola builds on these types.

#include <algorithm>
#include <atomic>
#include <bit>
#include <complex>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "cola/detail/fft.hpp"

namespace cola {

using Index = Eigen::Index;
using cdouble = std::complex<double>;

template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <class S>
inline constexpr bool is_complex_v = false;
template <class T>
inline constexpr bool is_complex_v<std::complex<T>> = true;

// -- errors -----------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class ParamError : public Error {
 public:
  using Error::Error;
};
class SingularError : public Error {
 public:
  using Error::Error;
};
class DomainError : public Error {
 public:
  using Error::Error;
};
class UnsupportedError : public Error {
 public:
  using Error::Error;
};
class StateError : public Error {
 public:
  using Error::Error;
};
class NumericalError : public Error {
 public:
  using Error::Error;
};
class ConstructionError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <class S>
S conj(S x) {
  if constexpr (is_complex_v<S>) {
    return std::conj(x);
  } else {
    return x;
  }
}

template <class S>
double real_part(S x) {
  if constexpr (is_complex_v<S>) {
    return x.real();
  } else {
    return static_cast<double>(x);
  }
}

template <class S>
S from_complex(cdouble z) {
  if constexpr (is_complex_v<S>) {
    return S(z);
  } else {
    return z.real();
  }
}

}  // namespace detail

/// Size limit for materializing fallbacks (dense solve/eig, dense transpose).
/// COLA_DENSE_CAP overrides the default of 512.
inline Index dense_cap() {
  if (const char* env = std::getenv("COLA_DENSE_CAP")) {
    try {
      return static_cast<Index>(std::stoll(env));
    } catch (const std::exception&) {
    }
  }
  return 512;
}

// -- shape, annotations -----------------------------------------------------

struct Shape {
  Index rows = 0;
  Index cols = 0;

  bool square() const { return rows == cols; }
  Index size() const { return rows * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const { return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")"; }
};

enum class Annotation : unsigned { SelfAdjoint = 1u, PSD = 2u, Unitary = 4u };

/// Set over {SelfAdjoint, PSD, Unitary}. PSD implies SelfAdjoint.
class Annotations {
 public:
  constexpr Annotations() = default;
  constexpr Annotations(Annotation a) : bits_(static_cast<unsigned>(a)) {}  // NOLINT

  static constexpr Annotations from_bits(unsigned bits) {
    Annotations a;
    a.bits_ = bits;
    return a;
  }

  constexpr bool has(Annotation a) const { return (effective_bits() & static_cast<unsigned>(a)) != 0; }
  constexpr bool contains(Annotations other) const {
    return (effective_bits() & other.effective_bits()) == other.effective_bits();
  }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr unsigned bits() const { return effective_bits(); }
  constexpr int count() const { return std::popcount(effective_bits()); }

  constexpr Annotations operator|(Annotations o) const { return from_bits(effective_bits() | o.effective_bits()); }
  constexpr Annotations operator&(Annotations o) const { return from_bits(effective_bits() & o.effective_bits()); }
  friend constexpr bool operator==(Annotations a, Annotations b) { return a.effective_bits() == b.effective_bits(); }

  std::string str() const {
    std::string s;
    auto add = [&](const char* name) { s += s.empty() ? name : std::string(",") + name; };
    if (has(Annotation::SelfAdjoint)) add("SelfAdjoint");
    if (has(Annotation::PSD)) add("PSD");
    if (has(Annotation::Unitary)) add("Unitary");
    return "{" + s + "}";
  }

 private:
  constexpr unsigned effective_bits() const {
    unsigned b = bits_;
    if (b & static_cast<unsigned>(Annotation::PSD)) b |= static_cast<unsigned>(Annotation::SelfAdjoint);
    return b;
  }
  unsigned bits_ = 0;
};

constexpr Annotations operator|(Annotation a, Annotation b) { return Annotations(a) | Annotations(b); }

// -- expression tree ----------------------------------------------------------

enum class Kind {
  Dense,
  Diagonal,
  Identity,
  ScalarMul,
  Zero,
  Sparse,
  Circulant,
  Triangular,
  Tridiagonal,
  Permutation,
  LowRank,
  Function,
  Sum,
  Product,
  Kron,
  KronSum,
  BlockDiag,
  Block2x2,
  Concat,
  Scale,
  Counted,
  Inverse,
  PseudoInverse,
};

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::Dense: return "Dense";
    case Kind::Diagonal: return "Diagonal";
    case Kind::Identity: return "Identity";
    case Kind::ScalarMul: return "ScalarMul";
    case Kind::Zero: return "Zero";
    case Kind::Sparse: return "Sparse";
    case Kind::Circulant: return "Circulant";
    case Kind::Triangular: return "Triangular";
    case Kind::Tridiagonal: return "Tridiagonal";
    case Kind::Permutation: return "Permutation";
    case Kind::LowRank: return "LowRank";
    case Kind::Function: return "Function";
    case Kind::Sum: return "Sum";
    case Kind::Product: return "Product";
    case Kind::Kron: return "Kron";
    case Kind::KronSum: return "KronSum";
    case Kind::BlockDiag: return "BlockDiag";
    case Kind::Block2x2: return "Block2x2";
    case Kind::Concat: return "Concat";
    case Kind::Scale: return "Scale";
    case Kind::Counted: return "Counted";
    case Kind::Inverse: return "Inverse";
    case Kind::PseudoInverse: return "PseudoInverse";
  }
  return "?";
}

inline bool is_leaf(Kind k) {
  switch (k) {
    case Kind::Sum:
    case Kind::Product:
    case Kind::Kron:
    case Kind::KronSum:
    case Kind::BlockDiag:
    case Kind::Block2x2:
    case Kind::Concat:
    case Kind::Scale:
    case Kind::Counted:
      return false;
    default:
      return true;
  }
}

enum class Axis { Rows, Cols };

template <class S>
struct DenseData {
  Mat<S> m;
};
template <class S>
struct DiagonalData {
  Vec<S> d;
};
template <class S>
struct ScalarData {
  S c;
};

/// Compressed sparse row storage.
template <class S>
struct CsrPayload {
  std::vector<Index> row_ptr;
  std::vector<Index> col_idx;
  Vec<S> values;
};

/// Circulant matrix given by its first column; the spectrum is cached.
template <class S>
struct CirculantPayload {
  Vec<S> filter;
  Eigen::VectorXcd spectrum;
};

template <class S>
struct TriangularData {
  Mat<S> m;
  bool lower = true;
};
template <class S>
struct TridiagonalData {
  Vec<S> sub, main, super;
};
struct PermutationData {
  std::vector<Index> perm;
};

/// Operator U * V.
template <class S>
struct LowRankPayload {
  Mat<S> U;
  Mat<S> V;
};

template <class S>
using VecFn = std::function<Vec<S>(const Vec<S>&)>;

template <class S>
struct FunctionData {
  VecFn<S> apply;
  VecFn<S> apply_adjoint;  // may be empty
};

template <class S>
using Payload = std::variant<std::monostate, DenseData<S>, DiagonalData<S>, ScalarData<S>, CsrPayload<S>,
                             CirculantPayload<S>, TriangularData<S>, TridiagonalData<S>, PermutationData,
                             LowRankPayload<S>, FunctionData<S>>;

/// Shared MVM counter used by the instrumentation wrapper.
struct MvmCounter {
  std::atomic<std::int64_t> count{0};
  std::int64_t value() const { return count.load(); }
  void reset() { count.store(0); }
};

template <class S>
struct Node;

/// Immutable handle to an operator expression tree node.
template <class S>
class Operator {
 public:
  using scalar_type = S;

  Operator() = default;
  explicit Operator(std::shared_ptr<const Node<S>> node) : node_(std::move(node)) {}

  explicit operator bool() const { return static_cast<bool>(node_); }
  const Node<S>& node() const { return *node_; }
  const std::shared_ptr<const Node<S>>& ptr() const { return node_; }

  Kind kind() const;
  Shape shape() const;
  Index rows() const { return shape().rows; }
  Index cols() const { return shape().cols; }
  Annotations annotations() const;
  bool has(Annotation a) const { return annotations().has(a); }
  const std::vector<Operator<S>>& children() const;
  const Operator<S>& child(std::size_t i) const { return children().at(i); }

  /// First node below any instrumentation wrappers.
  const Operator<S>& unwrap() const;

  template <class T>
  const T& payload() const {
    return std::get<T>(*node().payload);
  }

  Vec<S> apply(const Vec<S>& v) const;
  Mat<S> apply_block(const Mat<S>& V) const;

 private:
  std::shared_ptr<const Node<S>> node_;
};

template <class S>
struct Node {
  Kind kind = Kind::Dense;
  Shape shape;
  Annotations annotations;
  std::shared_ptr<const Payload<S>> payload = std::make_shared<const Payload<S>>();
  std::vector<Operator<S>> children;
  S coef = S(1);
  Axis axis = Axis::Rows;
  std::shared_ptr<MvmCounter> counter;
};

template <class S>
Kind Operator<S>::kind() const {
  return node_->kind;
}
template <class S>
Shape Operator<S>::shape() const {
  return node_->shape;
}
template <class S>
Annotations Operator<S>::annotations() const {
  return node_->annotations;
}
template <class S>
const std::vector<Operator<S>>& Operator<S>::children() const {
  return node_->children;
}
template <class S>
const Operator<S>& Operator<S>::unwrap() const {
  const Operator<S>* op = this;
  while (op->kind() == Kind::Counted) op = &op->node_->children.front();
  return *op;
}

template <class S>
Operator<S> make_node(Node<S> n) {
  if (n.shape.rows < 1 || n.shape.cols < 1) {
    throw ConstructionError(std::string(kind_name(n.kind)) + ": shape " + n.shape.str() + " must be at least 1x1");
  }
  return Operator<S>(std::make_shared<const Node<S>>(std::move(n)));
}

// -- MVM kernels ------------------------------------------------------------

namespace detail {

template <class S>
Mat<S> circulant_apply(const CirculantPayload<S>& c, const Mat<S>& X) {
  const Index n = c.filter.size();
  Mat<S> Y(n, X.cols());
  if (is_power_of_two(n)) {
    for (Index j = 0; j < X.cols(); ++j) {
      Eigen::VectorXcd x = X.col(j).template cast<cdouble>();
      fft_radix2(x, false);
      x.array() *= c.spectrum.array();
      fft_radix2(x, true);
      for (Index i = 0; i < n; ++i) Y(i, j) = from_complex<S>(x[i]);
    }
    return Y;
  }
  Y.setZero();
  for (Index j = 0; j < X.cols(); ++j)
    for (Index i = 0; i < n; ++i) {
      S acc(0);
      for (Index k = 0; k < n; ++k) acc += c.filter[(i - k + n) % n] * X(k, j);
      Y(i, j) = acc;
    }
  return Y;
}

template <class S>
Mat<S> csr_apply(const CsrPayload<S>& p, Index rows, const Mat<S>& X) {
  Mat<S> Y = Mat<S>::Zero(rows, X.cols());
  for (Index i = 0; i < rows; ++i)
    for (Index k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) Y.row(i) += p.values[k] * X.row(p.col_idx[k]);
  return Y;
}

template <class S>
Mat<S> function_apply(const VecFn<S>& f, Index rows, const Mat<S>& X) {
  Mat<S> Y(rows, X.cols());
  for (Index j = 0; j < X.cols(); ++j) {
    Vec<S> y = f(X.col(j));
    if (y.size() != rows) throw ShapeError("function operator returned length " + std::to_string(y.size()) +
                                           ", expected " + std::to_string(rows));
    Y.col(j) = y;
  }
  return Y;
}

template <class S>
Mat<S> apply_node(const Node<S>& n, const Mat<S>& X) {
  const Index rows = n.shape.rows;
  switch (n.kind) {
    case Kind::Dense:
      return std::get<DenseData<S>>(*n.payload).m * X;
    case Kind::Diagonal:
      return std::get<DiagonalData<S>>(*n.payload).d.asDiagonal() * X;
    case Kind::Identity:
      return X;
    case Kind::ScalarMul:
      return std::get<ScalarData<S>>(*n.payload).c * X;
    case Kind::Zero:
      return Mat<S>::Zero(rows, X.cols());
    case Kind::Sparse:
      return csr_apply(std::get<CsrPayload<S>>(*n.payload), rows, X);
    case Kind::Circulant:
      return circulant_apply(std::get<CirculantPayload<S>>(*n.payload), X);
    case Kind::Triangular: {
      const auto& t = std::get<TriangularData<S>>(*n.payload);
      if (t.lower) return t.m.template triangularView<Eigen::Lower>() * X;
      return t.m.template triangularView<Eigen::Upper>() * X;
    }
    case Kind::Tridiagonal: {
      const auto& t = std::get<TridiagonalData<S>>(*n.payload);
      Mat<S> Y = t.main.asDiagonal() * X;
      const Index m = t.main.size();
      if (m > 1) {
        Y.bottomRows(m - 1) += t.sub.asDiagonal() * X.topRows(m - 1);
        Y.topRows(m - 1) += t.super.asDiagonal() * X.bottomRows(m - 1);
      }
      return Y;
    }
    case Kind::Permutation: {
      const auto& p = std::get<PermutationData>(*n.payload).perm;
      Mat<S> Y(rows, X.cols());
      for (Index i = 0; i < rows; ++i) Y.row(i) = X.row(p[i]);
      return Y;
    }
    case Kind::LowRank: {
      const auto& lr = std::get<LowRankPayload<S>>(*n.payload);
      return lr.U * (lr.V * X);
    }
    case Kind::Function:
    case Kind::Inverse:
    case Kind::PseudoInverse:
      return function_apply(std::get<FunctionData<S>>(*n.payload).apply, rows, X);
    case Kind::Sum: {
      Mat<S> Y = n.children.front().apply_block(X);
      for (std::size_t i = 1; i < n.children.size(); ++i) Y += n.children[i].apply_block(X);
      return Y;
    }
    case Kind::Product: {
      Mat<S> Y = X;
      for (auto it = n.children.rbegin(); it != n.children.rend(); ++it) Y = it->apply_block(Y);
      return Y;
    }
    case Kind::Kron: {
      // (A kron B) vec(X) = vec(B X A^T), column-major vec.
      const auto& A = n.children[0];
      const auto& B = n.children[1];
      Mat<S> Y(rows, X.cols());
      for (Index j = 0; j < X.cols(); ++j) {
        Eigen::Map<const Mat<S>> Xj(X.col(j).data(), B.cols(), A.cols());
        Mat<S> BX = B.apply_block(Xj);
        Mat<S> ABXt = A.apply_block(BX.transpose());
        Eigen::Map<Mat<S>>(Y.col(j).data(), B.rows(), A.rows()) = ABXt.transpose();
      }
      return Y;
    }
    case Kind::KronSum: {
      // (A kron I + I kron B) vec(X) = vec(X A^T + B X).
      const auto& A = n.children[0];
      const auto& B = n.children[1];
      Mat<S> Y(rows, X.cols());
      for (Index j = 0; j < X.cols(); ++j) {
        Eigen::Map<const Mat<S>> Xj(X.col(j).data(), B.rows(), A.rows());
        Mat<S> R = B.apply_block(Xj);
        R += A.apply_block(Xj.transpose()).transpose();
        Y.col(j) = Eigen::Map<const Vec<S>>(R.data(), R.size());
      }
      return Y;
    }
    case Kind::BlockDiag: {
      Mat<S> Y(rows, X.cols());
      Index r = 0, c = 0;
      for (const auto& b : n.children) {
        Y.middleRows(r, b.rows()) = b.apply_block(X.middleRows(c, b.cols()));
        r += b.rows();
        c += b.cols();
      }
      return Y;
    }
    case Kind::Block2x2: {
      const auto& A = n.children[0];
      const auto& B = n.children[1];
      const auto& C = n.children[2];
      const auto& D = n.children[3];
      Mat<S> X1 = X.topRows(A.cols());
      Mat<S> X2 = X.bottomRows(B.cols());
      Mat<S> Y(rows, X.cols());
      Y.topRows(A.rows()) = A.apply_block(X1) + B.apply_block(X2);
      Y.bottomRows(C.rows()) = C.apply_block(X1) + D.apply_block(X2);
      return Y;
    }
    case Kind::Concat: {
      if (n.axis == Axis::Rows) {
        Mat<S> Y(rows, X.cols());
        Index r = 0;
        for (const auto& b : n.children) {
          Y.middleRows(r, b.rows()) = b.apply_block(X);
          r += b.rows();
        }
        return Y;
      }
      Mat<S> Y = Mat<S>::Zero(rows, X.cols());
      Index c = 0;
      for (const auto& b : n.children) {
        Y += b.apply_block(X.middleRows(c, b.cols()));
        c += b.cols();
      }
      return Y;
    }
    case Kind::Scale:
      return n.coef * n.children.front().apply_block(X);
    case Kind::Counted:
      n.counter->count.fetch_add(X.cols());
      return n.children.front().apply_block(X);
  }
  throw UnsupportedError("unknown operator kind");
}

}  // namespace detail

template <class S>
Mat<S> Operator<S>::apply_block(const Mat<S>& V) const {
  if (V.rows() != cols()) {
    throw ShapeError(std::string("mvm shape mismatch: operator ") + kind_name(kind()) + shape().str() +
                     " applied to block " + Shape{V.rows(), V.cols()}.str());
  }
  if (V.cols() == 0) return Mat<S>(rows(), 0);
  return detail::apply_node(*node_, V);
}

template <class S>
Vec<S> Operator<S>::apply(const Vec<S>& v) const {
  if (v.size() != cols()) {
    throw ShapeError(std::string("mvm shape mismatch: operator ") + kind_name(kind()) + shape().str() +
                     " applied to vector " + Shape{v.size(), 1}.str());
  }
  Mat<S> Y = detail::apply_node(*node_, Mat<S>(v));
  return Y.col(0);
}

/// A * v.
template <class S>
Vec<S> mvm(const Operator<S>& A, const Vec<S>& v) {
  return A.apply(v);
}

/// Real operator applied to a complex vector (field promotion).
inline Vec<cdouble> mvm(const Operator<double>& A, const Vec<cdouble>& v) {
  Vec<double> re = A.apply(v.real());
  Vec<double> im = A.apply(v.imag());
  Vec<cdouble> out(re.size());
  for (Index i = 0; i < re.size(); ++i) out[i] = cdouble(re[i], im[i]);
  return out;
}

template <class S>
Mat<S> mvm_block(const Operator<S>& A, const Mat<S>& V) {
  return A.apply_block(V);
}

/// Materialize A column by column from unit-vector MVMs.
template <class S>
Mat<S> dense(const Operator<S>& A) {
  return A.apply_block(Mat<S>::Identity(A.cols(), A.cols()));
}

/// Union of the node's annotations with `tags`. MVM is unchanged.
template <class S>
Operator<S> annotate(const Operator<S>& A, Annotations tags) {
  if (A.annotations().contains(tags)) return A;
  Node<S> n = A.node();
  n.annotations = n.annotations | tags;
  return make_node(std::move(n));
}

/// Wrap A so every application adds its column count to `counter`.
template <class S>
Operator<S> instrument(const Operator<S>& A, std::shared_ptr<MvmCounter> counter) {
  Node<S> n;
  n.kind = Kind::Counted;
  n.shape = A.shape();
  n.annotations = A.annotations();
  n.children = {A};
  n.counter = std::move(counter);
  return make_node(std::move(n));
}

/// Rebuild the tree with every leaf wrapped in an instrumentation node.
template <class S>
Operator<S> instrument_leaves(const Operator<S>& A, const std::shared_ptr<MvmCounter>& counter) {
  if (A.kind() == Kind::Counted) {
    // Keep the caller's wrapper so its counter still sees whole-operator MVMs.
    Node<S> n = A.node();
    n.children[0] = instrument_leaves(A.child(0), counter);
    return make_node(std::move(n));
  }
  if (is_leaf(A.kind())) return instrument(A, counter);
  Node<S> n = A.node();
  for (auto& c : n.children) c = instrument_leaves(c, counter);
  return make_node(std::move(n));
}

// -- parameters -------------------------------------------------------------

struct ParamRecord {
  std::vector<std::size_t> path;  // child indices from the root
  std::string name;
  Index extent = 0;

  friend bool operator==(const ParamRecord&, const ParamRecord&) = default;
};

using ParamLayout = std::vector<ParamRecord>;

/// Flat concatenation of every differentiable leaf-parameter array.
template <class S>
struct ParamVector {
  Vec<S> values;
  ParamLayout layout;

  Index size() const { return values.size(); }
};

/// Gradient of a scalar objective with respect to a ParamVector.
template <class S>
struct ParamCotangent {
  Vec<S> values;
  ParamLayout layout;

  Index size() const { return values.size(); }

  ParamCotangent& operator+=(const ParamCotangent& o) {
    if (o.layout != layout) throw ParamError("cotangent layouts differ");
    values += o.values;
    return *this;
  }
  friend ParamCotangent operator+(ParamCotangent a, const ParamCotangent& b) { return a += b; }
  friend ParamCotangent operator*(S c, ParamCotangent a) {
    a.values *= c;
    return a;
  }
};

namespace detail {

template <class S>
Vec<S> flat(const Mat<S>& m) {
  return Eigen::Map<const Vec<S>>(m.data(), m.size());
}

template <class S>
Vec<S> triangle_entries(const Mat<S>& m, bool lower) {
  const Index n = m.rows();
  Vec<S> out(n * (n + 1) / 2);
  Index k = 0;
  for (Index j = 0; j < n; ++j)
    for (Index i = lower ? j : 0; i < (lower ? n : j + 1); ++i) out[k++] = m(i, j);
  return out;
}

template <class S>
Mat<S> triangle_from_entries(const Vec<S>& v, Index n, bool lower) {
  Mat<S> m = Mat<S>::Zero(n, n);
  Index k = 0;
  for (Index j = 0; j < n; ++j)
    for (Index i = lower ? j : 0; i < (lower ? n : j + 1); ++i) m(i, j) = v[k++];
  return m;
}

/// Named parameter arrays a leaf declares, in a fixed order.
template <class S>
std::vector<std::pair<std::string, Vec<S>>> leaf_params(const Operator<S>& A) {
  const auto& p = *A.node().payload;
  switch (A.kind()) {
    case Kind::Dense:
      return {{"matrix", flat<S>(std::get<DenseData<S>>(p).m)}};
    case Kind::Diagonal:
      return {{"diag", std::get<DiagonalData<S>>(p).d}};
    case Kind::ScalarMul: {
      Vec<S> c(1);
      c[0] = std::get<ScalarData<S>>(p).c;
      return {{"scalar", c}};
    }
    case Kind::Sparse:
      return {{"values", std::get<CsrPayload<S>>(p).values}};
    case Kind::Circulant:
      return {{"filter", std::get<CirculantPayload<S>>(p).filter}};
    case Kind::Triangular: {
      const auto& t = std::get<TriangularData<S>>(p);
      return {{"triangle", triangle_entries<S>(t.m, t.lower)}};
    }
    case Kind::Tridiagonal: {
      const auto& t = std::get<TridiagonalData<S>>(p);
      return {{"sub", t.sub}, {"main", t.main}, {"super", t.super}};
    }
    case Kind::LowRank: {
      const auto& lr = std::get<LowRankPayload<S>>(p);
      return {{"U", flat<S>(lr.U)}, {"V", flat<S>(lr.V)}};
    }
    default:
      return {};
  }
}

template <class S>
Eigen::VectorXcd circulant_spectrum(const Vec<S>& filter) {
  return dft(filter.template cast<cdouble>().eval(), false);
}

template <class S>
Operator<S> rebuild_leaf(const Operator<S>& A, const std::vector<Vec<S>>& v) {
  Node<S> n = A.node();
  const auto& p = *A.node().payload;
  switch (A.kind()) {
    case Kind::Dense: {
      const auto& m = std::get<DenseData<S>>(p).m;
      n.payload = std::make_shared<const Payload<S>>(DenseData<S>{Eigen::Map<const Mat<S>>(v[0].data(), m.rows(), m.cols())});
      break;
    }
    case Kind::Diagonal:
      n.payload = std::make_shared<const Payload<S>>(DiagonalData<S>{v[0]});
      break;
    case Kind::ScalarMul:
      n.payload = std::make_shared<const Payload<S>>(ScalarData<S>{v[0][0]});
      break;
    case Kind::Sparse: {
      CsrPayload<S> c = std::get<CsrPayload<S>>(p);
      c.values = v[0];
      n.payload = std::make_shared<const Payload<S>>(std::move(c));
      break;
    }
    case Kind::Circulant:
      n.payload = std::make_shared<const Payload<S>>(CirculantPayload<S>{v[0], circulant_spectrum<S>(v[0])});
      break;
    case Kind::Triangular: {
      const auto& t = std::get<TriangularData<S>>(p);
      n.payload = std::make_shared<const Payload<S>>(
          TriangularData<S>{triangle_from_entries<S>(v[0], t.m.rows(), t.lower), t.lower});
      break;
    }
    case Kind::Tridiagonal:
      n.payload = std::make_shared<const Payload<S>>(TridiagonalData<S>{v[0], v[1], v[2]});
      break;
    case Kind::LowRank: {
      const auto& lr = std::get<LowRankPayload<S>>(p);
      n.payload = std::make_shared<const Payload<S>>(
          LowRankPayload<S>{Eigen::Map<const Mat<S>>(v[0].data(), lr.U.rows(), lr.U.cols()),
                            Eigen::Map<const Mat<S>>(v[1].data(), lr.V.rows(), lr.V.cols())});
      break;
    }
    default:
      return A;
  }
  return make_node(std::move(n));
}

// Lazy nodes (inverse, pseudo-inverse) are opaque: their children are not
// visited because the node's closures were built from the original child.
inline bool descends(Kind k) { return !is_leaf(k); }

template <class S>
void flatten_into(const Operator<S>& A, std::vector<std::size_t>& path, std::vector<Vec<S>>& chunks,
                  ParamLayout& layout) {
  if (descends(A.kind())) {
    for (std::size_t i = 0; i < A.children().size(); ++i) {
      path.push_back(i);
      flatten_into(A.children()[i], path, chunks, layout);
      path.pop_back();
    }
    return;
  }
  for (auto& [name, values] : leaf_params(A)) {
    layout.push_back({path, name, values.size()});
    chunks.push_back(std::move(values));
  }
}

template <class S>
Operator<S> unflatten_from(const Operator<S>& A, const Vec<S>& values, Index& offset) {
  if (descends(A.kind())) {
    Node<S> n = A.node();
    for (auto& c : n.children) c = unflatten_from(c, values, offset);
    return make_node(std::move(n));
  }
  auto params = leaf_params(A);
  if (params.empty()) return A;
  std::vector<Vec<S>> fresh;
  for (const auto& [name, old] : params) {
    fresh.push_back(values.segment(offset, old.size()));
    offset += old.size();
  }
  return rebuild_leaf(A, fresh);
}

}  // namespace detail

/// Depth-first, left-to-right concatenation of all leaf parameters.
template <class S>
ParamVector<S> flatten_params(const Operator<S>& A) {
  std::vector<std::size_t> path;
  std::vector<Vec<S>> chunks;
  ParamVector<S> out;
  detail::flatten_into(A, path, chunks, out.layout);
  Index total = 0;
  for (const auto& c : chunks) total += c.size();
  out.values.resize(total);
  Index off = 0;
  for (const auto& c : chunks) {
    out.values.segment(off, c.size()) = c;
    off += c.size();
  }
  return out;
}

template <class S>
Operator<S> unflatten_params(const Operator<S>& A, const ParamVector<S>& theta) {
  const ParamVector<S> ref = flatten_params(A);
  if (ref.layout != theta.layout) throw ParamError("parameter layout does not match the operator tree");
  if (theta.values.size() != ref.values.size()) {
    throw ParamError("parameter vector has length " + std::to_string(theta.values.size()) + ", expected " +
                     std::to_string(ref.values.size()));
  }
  Index offset = 0;
  return detail::unflatten_from(A, theta.values, offset);
}

/// Replace the parameter values of A, keeping its own layout.
template <class S>
Operator<S> unflatten_params(const Operator<S>& A, const Vec<S>& values) {
  ParamVector<S> theta{values, flatten_params(A).layout};
  return unflatten_params(A, theta);
}

/// Printable one-line structure of the tree.
template <class S>
std::string describe(const Operator<S>& A) {
  std::string s = kind_name(A.kind());
  if (!A.annotations().empty()) s += A.annotations().str();
  if (!is_leaf(A.kind())) {
    s += "[";
    for (std::size_t i = 0; i < A.children().size(); ++i) s += (i ? ", " : "") + describe(A.children()[i]);
    s += "]";
  }
  return s;
}

}  // namespace cola
