#pragma once

// Matrix Market (.mtx) reader and writer. Coordinate files become CSR leaves,
// array files become Dense leaves.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cola/compose.hpp"

namespace cola {

/// Malformed input; line() is 1-based.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& msg)
      : Error(source + ":" + std::to_string(line) + ": " + msg), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

struct MtxHeader {
  std::string format;    // coordinate | array
  std::string field;     // real | complex | integer | pattern
  std::string symmetry;  // general | symmetric | skew-symmetric | hermitian
};

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline std::vector<std::string> tokens(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string t;
  while (is >> t) out.push_back(t);
  return out;
}

inline bool parse_index(const std::string& t, long long& out) {
  const char* b = t.data();
  const char* e = b + t.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e;
}

inline bool parse_real(const std::string& t, double& out) {
  const char* b = t.data();
  const char* e = b + t.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e;
}

class LineReader {
 public:
  LineReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  bool next(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }
  // Next line that is neither blank nor a comment.
  bool next_content(std::string& line) {
    while (next(line)) {
      const auto pos = line.find_first_not_of(" \t");
      if (pos == std::string::npos || line[pos] == '%') continue;
      return true;
    }
    return false;
  }
  [[noreturn]] void fail(const std::string& msg, std::size_t line = 0) const {
    throw ParseError(source_, line ? line : line_no_, msg);
  }
  std::size_t line_no() const { return line_no_; }

 private:
  std::istream& in_;
  std::string source_;
  std::size_t line_no_ = 0;
};

inline MtxHeader parse_banner(LineReader& rd) {
  std::string line;
  if (!rd.next(line)) rd.fail("empty file, expected %%MatrixMarket banner", 1);
  auto t = tokens(line);
  if (t.empty() || t[0] != "%%MatrixMarket") rd.fail("missing %%MatrixMarket banner");
  if (t.size() != 5) rd.fail("banner must read '%%MatrixMarket matrix <format> <field> <symmetry>'");
  if (lower(t[1]) != "matrix") rd.fail("unsupported object '" + t[1] + "', expected 'matrix'");
  MtxHeader h{lower(t[2]), lower(t[3]), lower(t[4])};
  if (h.format != "coordinate" && h.format != "array") rd.fail("unknown format '" + t[2] + "'");
  if (h.field != "real" && h.field != "complex" && h.field != "integer" && h.field != "pattern") {
    rd.fail("unknown field '" + t[3] + "'");
  }
  if (h.symmetry != "general" && h.symmetry != "symmetric" && h.symmetry != "skew-symmetric" &&
      h.symmetry != "hermitian") {
    rd.fail("unknown symmetry '" + t[4] + "'");
  }
  if (h.format == "array" && h.field == "pattern") rd.fail("pattern field is only valid for coordinate format");
  if (h.symmetry == "hermitian" && h.field != "complex") rd.fail("hermitian symmetry requires the complex field");
  return h;
}

template <class S>
S parse_value(LineReader& rd, const MtxHeader& h, const std::vector<std::string>& t, std::size_t first) {
  if (h.field == "pattern") {
    if (t.size() != first) rd.fail("pattern entry must not carry a value");
    return S(1);
  }
  const std::size_t want = h.field == "complex" ? 2 : 1;
  if (t.size() != first + want) {
    rd.fail("expected " + std::to_string(first + want) + " fields, found " + std::to_string(t.size()));
  }
  double re = 0, im = 0;
  if (h.field == "integer") {
    long long v = 0;
    if (!parse_index(t[first], v)) rd.fail("invalid integer value '" + t[first] + "'");
    re = static_cast<double>(v);
  } else if (!parse_real(t[first], re)) {
    rd.fail("invalid numeric value '" + t[first] + "'");
  }
  if (want == 2) {
    if (!parse_real(t[first + 1], im)) rd.fail("invalid numeric value '" + t[first + 1] + "'");
    if constexpr (!is_complex_v<S>) {
      rd.fail("complex entries cannot be read into a real operator");
    } else {
      return S(re, im);
    }
  }
  return S(re);
}

template <class S>
S mirror(const MtxHeader& h, S v) {
  if (h.symmetry == "skew-symmetric") return -v;
  if (h.symmetry == "hermitian") return conj(v);
  return v;
}

}  // namespace detail

template <class S>
Operator<S> parse_matrix_market(std::istream& in, const std::string& source = "<stream>") {
  detail::LineReader rd(in, source);
  const detail::MtxHeader h = detail::parse_banner(rd);
  std::string line;
  if (!rd.next_content(line)) rd.fail("missing size line", rd.line_no() + 1);
  const auto st = detail::tokens(line);
  const bool coord = h.format == "coordinate";
  if (st.size() != (coord ? 3u : 2u)) {
    rd.fail(coord ? "size line must hold 'rows cols nnz'" : "size line must hold 'rows cols'");
  }
  long long rows = 0, cols = 0, nnz = 0;
  if (!detail::parse_index(st[0], rows) || !detail::parse_index(st[1], cols) || (coord && !detail::parse_index(st[2], nnz))) {
    rd.fail("size line has a non-integer field");
  }
  if (rows < 1 || cols < 1) rd.fail("matrix dimensions must be positive");
  if (nnz < 0) rd.fail("entry count must be non-negative");
  const bool symmetric = h.symmetry != "general";
  if (symmetric && rows != cols) rd.fail("symmetric storage requires a square matrix");

  Annotations ann;
  if (h.symmetry == "hermitian" || (h.symmetry == "symmetric" && !is_complex_v<S>)) ann = Annotation::SelfAdjoint;

  if (!coord) {
    Mat<S> m = Mat<S>::Zero(rows, cols);
    // Column-major; symmetric variants list only the lower triangle
    // (strictly lower for skew-symmetric).
    for (Index j = 0; j < cols; ++j) {
      const Index start = !symmetric ? 0 : (h.symmetry == "skew-symmetric" ? j + 1 : j);
      for (Index i = start; i < rows; ++i) {
        if (!rd.next_content(line)) rd.fail("truncated entry list: expected more values", rd.line_no() + 1);
        const S v = detail::parse_value<S>(rd, h, detail::tokens(line), 0);
        m(i, j) = v;
        if (symmetric && i != j) m(j, i) = detail::mirror(h, v);
      }
    }
    if (rd.next_content(line)) rd.fail("unexpected data after the last entry");
    Operator<S> A = make_dense<S>(std::move(m));
    return ann.empty() ? A : annotate(A, ann);
  }

  std::map<std::pair<Index, Index>, S> entries;
  for (long long k = 0; k < nnz; ++k) {
    if (!rd.next_content(line)) {
      rd.fail("truncated entry list: " + std::to_string(k) + " of " + std::to_string(nnz) + " entries read",
              rd.line_no() + 1);
    }
    const auto t = detail::tokens(line);
    if (t.size() < 2) rd.fail("entry line needs row and column indices");
    long long i = 0, j = 0;
    if (!detail::parse_index(t[0], i) || !detail::parse_index(t[1], j)) rd.fail("entry indices must be integers");
    if (i < 1 || i > rows || j < 1 || j > cols) {
      rd.fail("index (" + std::to_string(i) + ", " + std::to_string(j) + ") outside " + std::to_string(rows) + "x" +
              std::to_string(cols));
    }
    const S v = detail::parse_value<S>(rd, h, t, 2);
    if (h.symmetry == "skew-symmetric" && i == j) rd.fail("skew-symmetric storage cannot hold diagonal entries");
    // Mirroring an upper entry could silently double a value stored twice.
    if (symmetric && i < j) {
      rd.fail(h.symmetry + " storage lists the lower triangle only; got (" + std::to_string(i) + ", " +
              std::to_string(j) + ")");
    }
    entries[{i - 1, j - 1}] += v;
    if (symmetric && i != j) entries[{j - 1, i - 1}] += detail::mirror(h, v);
  }
  if (rd.next_content(line)) rd.fail("more entries than the declared count " + std::to_string(nnz));

  CsrPayload<S> p;
  p.row_ptr.assign(rows + 1, 0);
  p.values.resize(static_cast<Index>(entries.size()));
  Index k = 0;
  for (const auto& [ij, v] : entries) {
    ++p.row_ptr[ij.first + 1];
    p.col_idx.push_back(ij.second);
    p.values[k++] = v;
  }
  for (Index i = 0; i < rows; ++i) p.row_ptr[i + 1] += p.row_ptr[i];
  Operator<S> A = make_sparse_csr<S>(std::move(p), Shape{rows, cols});
  return ann.empty() ? A : annotate(A, ann);
}

template <class S>
Operator<S> read_matrix_market(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open file");
  return parse_matrix_market<S>(in, path);
}

/// Canonical coordinate output: general symmetry, entries sorted by (col, row),
/// 17 significant digits.
template <class S>
void write_matrix_market(const Operator<S>& A, std::ostream& out) {
  const Operator<S>& u = A.unwrap();
  std::vector<std::tuple<Index, Index, S>> ent;
  if (u.kind() == Kind::Sparse) {
    const auto& c = u.template payload<CsrPayload<S>>();
    for (Index i = 0; i < u.rows(); ++i)
      for (Index k = c.row_ptr[i]; k < c.row_ptr[i + 1]; ++k) ent.emplace_back(c.col_idx[k], i, c.values[k]);
  } else {
    const Index cap = dense_cap();
    if (u.kind() != Kind::Dense && (A.rows() > cap || A.cols() > cap)) {
      throw UnsupportedError("write_matrix_market: " + describe(A) + " is neither CSR nor Dense and exceeds the dense cap");
    }
    const Mat<S> m = u.kind() == Kind::Dense ? u.template payload<DenseData<S>>().m : dense(A);
    for (Index j = 0; j < m.cols(); ++j)
      for (Index i = 0; i < m.rows(); ++i)
        if (m(i, j) != S(0)) ent.emplace_back(j, i, m(i, j));
  }
  std::sort(ent.begin(), ent.end(), [](const auto& a, const auto& b) {
    return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
  });
  out << "%%MatrixMarket matrix coordinate " << (is_complex_v<S> ? "complex" : "real") << " general\n";
  out << A.rows() << ' ' << A.cols() << ' ' << ent.size() << '\n';
  char buf[128];
  for (const auto& [j, i, v] : ent) {
    if constexpr (is_complex_v<S>) {
      std::snprintf(buf, sizeof buf, "%lld %lld %.17g %.17g\n", static_cast<long long>(i + 1),
                    static_cast<long long>(j + 1), v.real(), v.imag());
    } else {
      std::snprintf(buf, sizeof buf, "%lld %lld %.17g\n", static_cast<long long>(i + 1), static_cast<long long>(j + 1),
                    static_cast<double>(v));
    }
    out << buf;
  }
  if (!out) throw Error("write_matrix_market: write failed");
}

template <class S>
void write_matrix_market(const Operator<S>& A, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("write_matrix_market: cannot open '" + path + "' for writing");
  write_matrix_market(A, static_cast<std::ostream&>(out));
  out.flush();
  if (!out) throw Error("write_matrix_market: write to '" + path + "' failed");
}

}  // namespace cola
