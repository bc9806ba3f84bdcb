#pragma once

// Dense linear algebra for small matrices: Cholesky with a jitter ladder,
// thin SVD (one-sided Jacobi), Kronecker products and log-determinants.
//
// Conventions pinned here and inherited by all curvature/prediction code:
//   * vec() stacks COLUMNS: vec(X)[j*rows + i] = X(i, j).
//   * Under that convention, (A (x) B) vec(X) = vec(B X A^T) with X shaped
//     cols(B) x cols(A).
//   * Kronecker-factored precisions are written (small (x) large); the
//     matching parameter flattening keeps the large dimension contiguous.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace adacal {

class Error : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class NonSquareError : public Error {
  using Error::Error;
};
class NotPositiveDefiniteError : public Error {
  using Error::Error;
};
class KTooLargeError : public Error {
  using Error::Error;
};
class DimTooLargeError : public Error {
  using Error::Error;
};
class DimMismatchError : public Error {
  using Error::Error;
};
class NonFiniteError : public Error {
  using Error::Error;
};

// Scoped cap on dense allocations. While a guard is alive on this thread,
// any Matrix allocation larger than the cap throws. The KFAC accumulator
// uses this to enforce that no d x d large-factor matrix is ever formed.
class AllocationGuard {
 public:
  explicit AllocationGuard(std::size_t max_entries) : previous_(cap()) {
    cap() = max_entries;
  }
  ~AllocationGuard() { cap() = previous_; }
  AllocationGuard(const AllocationGuard&) = delete;
  AllocationGuard& operator=(const AllocationGuard&) = delete;

  static void check(std::size_t entries) {
    if (cap() != 0 && entries > cap()) {
      throw Error("allocation of " + std::to_string(entries) +
                  " entries exceeds active guard cap of " +
                  std::to_string(cap()));
    }
  }

 private:
  static std::size_t& cap() {
    thread_local std::size_t value = 0;  // 0 = unlimited
    return value;
  }
  std::size_t previous_;
};

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c) {
    AllocationGuard::check(r * c);
    data.assign(r * c, 0.0);
  }
  Matrix(std::size_t r, std::size_t c, std::initializer_list<double> init)
      : rows(r), cols(c), data(init) {
    if (data.size() != r * c) throw DimMismatchError("initializer size mismatch");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  bool empty() const { return rows == 0 || cols == 0; }
  std::size_t size() const { return rows * cols; }
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw DimMismatchError("matmul: inner dims differ");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
    }
  }
  return c;
}

// a^T * b without materializing the transpose
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw DimMismatchError("matmul_tn: inner dims differ");
  Matrix c(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aki * b(k, j);
    }
  }
  return c;
}

// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw DimMismatchError("matmul_nt: inner dims differ");
  Matrix c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(j, k);
      c(i, j) = s;
    }
  return c;
}

inline std::vector<double> matvec(const Matrix& m, std::span<const double> v) {
  if (m.cols != v.size()) throw DimMismatchError("matvec: dims differ");
  std::vector<double> out(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) s += m(i, j) * v[j];
    out[i] = s;
  }
  return out;
}

// m^T * v
inline std::vector<double> matvec_t(const Matrix& m, std::span<const double> v) {
  if (m.rows != v.size()) throw DimMismatchError("matvec_t: dims differ");
  std::vector<double> out(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    for (std::size_t j = 0; j < m.cols; ++j) out[j] += m(i, j) * vi;
  }
  return out;
}

// rank-1 update: m += w * u v^T
inline void add_outer(Matrix& m, double w, std::span<const double> u,
                      std::span<const double> v) {
  if (m.rows != u.size() || m.cols != v.size())
    throw DimMismatchError("add_outer: dims differ");
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) m(i, j) += w * u[i] * v[j];
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimMismatchError("dot: sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double x : m.data) s += x * x;
  return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw DimMismatchError("max_abs_diff: shapes differ");
  double d = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    d = std::max(d, std::abs(a.data[i] - b.data[i]));
  return d;
}

inline bool is_symmetric(const Matrix& m, double tol = 1e-8) {
  if (m.rows != m.cols) return false;
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = i + 1; j < m.cols; ++j)
      if (std::abs(m(i, j) - m(j, i)) > tol) return false;
  return true;
}

// Column-stacking vec and its inverse.
inline std::vector<double> vec(const Matrix& m) {
  std::vector<double> out(m.rows * m.cols);
  for (std::size_t j = 0; j < m.cols; ++j)
    for (std::size_t i = 0; i < m.rows; ++i) out[j * m.rows + i] = m(i, j);
  return out;
}

inline Matrix unvec(std::span<const double> v, std::size_t rows, std::size_t cols) {
  if (v.size() != rows * cols) throw DimMismatchError("unvec: size mismatch");
  Matrix m(rows, cols);
  for (std::size_t j = 0; j < cols; ++j)
    for (std::size_t i = 0; i < rows; ++i) m(i, j) = v[j * rows + i];
  return m;
}

struct CholeskyFactor {
  Matrix lower;            // lower-triangular, strictly positive diagonal
  double jitter_used = 0;  // diagonal shift actually applied

  std::size_t dim() const { return lower.rows; }
};

namespace detail {

// Plain Cholesky-Crout of m + jitter*I. Returns false if a pivot is not
// strictly positive.
inline bool try_cholesky(const Matrix& m, double jitter, Matrix& out) {
  const std::size_t n = m.rows;
  out = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j) + jitter;
    for (std::size_t k = 0; k < j; ++k) d -= out(j, k) * out(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    out(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j) + (i == j ? jitter : 0.0);
      for (std::size_t k = 0; k < j; ++k) s -= out(i, k) * out(j, k);
      out(i, j) = s / ljj;
    }
  }
  return true;
}

}  // namespace detail

// Cholesky factorization of m + jitter*I. When use_ladder is set and the
// requested jitter fails, retries with escalating shifts 1e-10 .. 1e-4
// before giving up. The shift that succeeded is recorded on the factor.
inline CholeskyFactor cholesky(const Matrix& m, double jitter = 0.0,
                               bool use_ladder = true) {
  if (m.rows != m.cols) throw NonSquareError("cholesky: matrix not square");
  if (!is_symmetric(m)) throw Error("cholesky: matrix not symmetric within 1e-8");
  CholeskyFactor f;
  if (detail::try_cholesky(m, jitter, f.lower)) {
    f.jitter_used = jitter;
    return f;
  }
  if (use_ladder) {
    for (double j = 1e-10; j <= 1.0001e-4; j *= 10.0) {
      if (j <= jitter) continue;
      if (detail::try_cholesky(m, j, f.lower)) {
        f.jitter_used = j;
        return f;
      }
    }
  }
  throw NotPositiveDefiniteError("cholesky: not positive definite (jitter ladder exhausted)");
}

// Solve (L L^T) x = b.
inline std::vector<double> chol_solve(const CholeskyFactor& f,
                                      std::span<const double> b) {
  const Matrix& l = f.lower;
  const std::size_t n = l.rows;
  if (b.size() != n) throw DimMismatchError("chol_solve: size mismatch");
  std::vector<double> x(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    double s = x[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x[k];
    x[i] = s / l(i, i);
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double s = x[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

// Solve (L L^T) X = B column-wise.
inline Matrix chol_solve(const CholeskyFactor& f, const Matrix& b) {
  Matrix x(b.rows, b.cols);
  std::vector<double> col(b.rows);
  for (std::size_t j = 0; j < b.cols; ++j) {
    for (std::size_t i = 0; i < b.rows; ++i) col[i] = b(i, j);
    auto sol = chol_solve(f, col);
    for (std::size_t i = 0; i < b.rows; ++i) x(i, j) = sol[i];
  }
  return x;
}

inline double logdet(const CholeskyFactor& f) {
  double s = 0.0;
  for (std::size_t i = 0; i < f.dim(); ++i) s += std::log(f.lower(i, i));
  return 2.0 * s;
}

// PSD matrix held as root * root^T, root is d x k with k <= d.
struct LowRankFactor {
  Matrix root;

  std::size_t dim() const { return root.rows; }
  std::size_t rank() const { return root.cols; }
};

struct Svd {
  Matrix u;               // orthonormal columns (left singular vectors)
  std::vector<double> s;  // singular values, descending
};

namespace detail {

// One-sided Jacobi on a matrix with rows >= cols: orthogonalizes columns of
// a working copy W by plane rotations, accumulating them in V, so that
// m = W_final * V^T with W_final having orthogonal columns.
inline void jacobi_onesided(Matrix& w, Matrix& v) {
  const std::size_t c = w.cols;
  v = Matrix::identity(c);
  const double eps = 1e-15;
  for (int sweep = 0; sweep < 64; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < c; ++p) {
      for (std::size_t q = p + 1; q < c; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < w.rows; ++i) {
          alpha += w(i, p) * w(i, p);
          beta += w(i, q) * w(i, q);
          gamma += w(i, p) * w(i, q);
        }
        if (std::abs(gamma) <= eps * std::sqrt(alpha * beta) || gamma == 0.0)
          continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        for (std::size_t i = 0; i < w.rows; ++i) {
          const double wp = w(i, p), wq = w(i, q);
          w(i, p) = cs * wp - sn * wq;
          w(i, q) = sn * wp + cs * wq;
        }
        for (std::size_t i = 0; i < c; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = cs * vp - sn * vq;
          v(i, q) = sn * vp + cs * vq;
        }
      }
    }
    if (!rotated) break;
  }
}

// Thin SVD of a matrix with rows >= cols. Returns U (rows x cols), s, V.
inline void svd_thin(const Matrix& m, Matrix& u, std::vector<double>& s, Matrix& v) {
  Matrix w = m;
  jacobi_onesided(w, v);
  const std::size_t c = m.cols;
  s.assign(c, 0.0);
  u = Matrix(m.rows, c);
  for (std::size_t j = 0; j < c; ++j) {
    double norm = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) norm += w(i, j) * w(i, j);
    norm = std::sqrt(norm);
    s[j] = norm;
    if (norm > 0.0) {
      for (std::size_t i = 0; i < m.rows; ++i) u(i, j) = w(i, j) / norm;
    }
  }
  // sort singular triplets descending
  std::vector<std::size_t> order(c);
  for (std::size_t i = 0; i < c; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  Matrix us(m.rows, c), vs(v.rows, c);
  std::vector<double> ss(c);
  for (std::size_t j = 0; j < c; ++j) {
    ss[j] = s[order[j]];
    for (std::size_t i = 0; i < m.rows; ++i) us(i, j) = u(i, order[j]);
    for (std::size_t i = 0; i < v.rows; ++i) vs(i, j) = v(i, order[j]);
  }
  u = std::move(us);
  v = std::move(vs);
  s = std::move(ss);
}

}  // namespace detail

// Top-k left singular factor. u has orthonormal columns for k <= rank(m);
// for k beyond the rank the trailing columns are zero.
inline Svd svd_topk(const Matrix& m, std::size_t k) {
  if (k > std::min(m.rows, m.cols))
    throw KTooLargeError("svd_topk: k exceeds min(rows, cols)");
  Matrix u, v;
  std::vector<double> s;
  if (m.rows >= m.cols) {
    detail::svd_thin(m, u, s, v);
  } else {
    // m = (V') S (U')^T where m^T = U' S V'^T
    Matrix ut;
    detail::svd_thin(transpose(m), ut, s, v);
    u = std::move(v);
  }
  Svd out;
  out.u = Matrix(m.rows, k);
  out.s.assign(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k));
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < m.rows; ++i) out.u(i, j) = u(i, j);
  return out;
}

// Standard Kronecker product. Guarded against accidental large results.
inline Matrix kron(const Matrix& a, const Matrix& b) {
  const std::size_t r = a.rows * b.rows;
  const std::size_t c = a.cols * b.cols;
  if (r > 4096 || c > 4096)
    throw DimTooLargeError("kron: product dims exceed 4096");
  Matrix out(r, c);
  for (std::size_t ia = 0; ia < a.rows; ++ia)
    for (std::size_t ja = 0; ja < a.cols; ++ja) {
      const double aij = a(ia, ja);
      if (aij == 0.0) continue;
      for (std::size_t ib = 0; ib < b.rows; ++ib)
        for (std::size_t jb = 0; jb < b.cols; ++jb)
          out(ia * b.rows + ib, ja * b.cols + jb) = aij * b(ib, jb);
    }
  return out;
}

}  // namespace adacal
