#pragma once

// Small dense linear algebra for design matrices with a handful of columns.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsm/error.hpp"

namespace fsm::linalg {

using Vector = std::vector<double>;

/// Relative pivot threshold used by every factorization in the library.
inline constexpr double kSingularPivot = 1e-12;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw DomainError("Matrix::from_rows: ragged initializer");
      std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  Vector column(std::size_t j) const {
    Vector out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
    return out;
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DomainError("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DomainError("matrix product: dimension mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

inline Vector multiply(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw DomainError("matrix-vector product: dimension mismatch");
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
  return y;
}

/// Symmetric matrix; symmetry is checked (absolute tolerance) on construction
/// and preserved by every mutating member.
class SymMatrix {
 public:
  explicit SymMatrix(Matrix m, double tol = 1e-10) : m_(std::move(m)) {
    if (m_.rows() == 0 || m_.rows() != m_.cols())
      throw DomainError("SymMatrix: must be square with dim >= 1");
    for (std::size_t i = 0; i < dim(); ++i)
      for (std::size_t j = i + 1; j < dim(); ++j) {
        if (!(std::abs(m_(i, j) - m_(j, i)) <= tol))
          throw DomainError("SymMatrix: input is not symmetric");
        const double avg = 0.5 * (m_(i, j) + m_(j, i));
        m_(i, j) = avg;
        m_(j, i) = avg;
      }
  }

  static SymMatrix zeros(std::size_t n) { return SymMatrix(Matrix(n, n)); }
  static SymMatrix identity(std::size_t n) { return SymMatrix(Matrix::identity(n)); }
  static SymMatrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return SymMatrix(std::move(m));
  }

  std::size_t dim() const noexcept { return m_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return m_(i, j); }
  const Matrix& matrix() const noexcept { return m_; }

  double max_abs_diagonal() const {
    double mx = 0.0;
    for (std::size_t i = 0; i < dim(); ++i) mx = std::max(mx, std::abs(m_(i, i)));
    return mx;
  }

  /// this += weight * x xᵀ
  void add_outer(std::span<const double> x, double weight = 1.0) {
    if (x.size() != dim()) throw DomainError("SymMatrix::add_outer: dimension mismatch");
    for (std::size_t i = 0; i < dim(); ++i) {
      const double wxi = weight * x[i];
      for (std::size_t j = 0; j < dim(); ++j) m_(i, j) += wxi * x[j];
    }
  }

  /// this += weight * other
  void add_scaled(const SymMatrix& other, double weight) {
    if (other.dim() != dim()) throw DomainError("SymMatrix::add_scaled: dimension mismatch");
    for (std::size_t i = 0; i < dim(); ++i)
      for (std::size_t j = 0; j < dim(); ++j) m_(i, j) += weight * other(i, j);
  }

  SymMatrix scaled(double w) const {
    SymMatrix out = *this;
    for (std::size_t i = 0; i < dim(); ++i)
      for (std::size_t j = 0; j < dim(); ++j) out.m_(i, j) *= w;
    return out;
  }

 private:
  Matrix m_;
};

/// XᵀX
inline SymMatrix cross_product(const Matrix& x) {
  SymMatrix q = SymMatrix::zeros(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) q.add_outer(x.row(i));
  return q;
}

/// Unpivoted LDLᵀ of a symmetric matrix. A pivot with
/// |d_k| < kSingularPivot * max|diag(A)| is recorded as singular, set to zero
/// and its column of L cleared, so solves yield a pseudo-solution.
struct Ldlt {
  Matrix lower;  // unit lower triangular
  Vector diag;
  std::size_t rank = 0;
  bool singular() const noexcept { return rank < diag.size(); }
};

inline Ldlt ldlt(const SymMatrix& a) {
  const std::size_t n = a.dim();
  Ldlt f{Matrix::identity(n), Vector(n, 0.0), 0};
  const double threshold = kSingularPivot * a.max_abs_diagonal();
  for (std::size_t k = 0; k < n; ++k) {
    double d = a(k, k);
    for (std::size_t m = 0; m < k; ++m) d -= f.lower(k, m) * f.lower(k, m) * f.diag[m];
    if (!(std::abs(d) >= threshold) || threshold == 0.0) {
      f.diag[k] = 0.0;
      continue;  // column of L stays zero
    }
    f.diag[k] = d;
    ++f.rank;
    for (std::size_t i = k + 1; i < n; ++i) {
      double s = a(i, k);
      for (std::size_t m = 0; m < k; ++m) s -= f.lower(i, m) * f.lower(k, m) * f.diag[m];
      f.lower(i, k) = s / d;
    }
  }
  return f;
}

inline bool is_singular(const SymMatrix& a) { return ldlt(a).singular(); }

/// Solves with a (possibly singular) factor; zero pivots contribute nothing.
inline Vector ldlt_solve(const Ldlt& f, std::span<const double> b) {
  const std::size_t n = f.diag.size();
  if (b.size() != n) throw DomainError("ldlt_solve: dimension mismatch");
  Vector z(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < i; ++m) z[i] -= f.lower(i, m) * z[m];
  for (std::size_t i = 0; i < n; ++i) z[i] = f.diag[i] == 0.0 ? 0.0 : z[i] / f.diag[i];
  for (std::size_t i = n; i-- > 0;)
    for (std::size_t m = i + 1; m < n; ++m) z[i] -= f.lower(m, i) * z[m];
  return z;
}

inline Vector sym_solve(const SymMatrix& a, std::span<const double> b) {
  const Ldlt f = ldlt(a);
  if (f.singular()) throw SingularMatrixError("sym_solve: matrix is numerically singular");
  return ldlt_solve(f, b);
}

/// Inverse of a symmetric matrix whose unpivoted LDLᵀ exists (SPD matrices
/// in particular). Throws SingularMatrixError on a small pivot.
inline SymMatrix sym_inverse(const SymMatrix& a) {
  const Ldlt f = ldlt(a);
  if (f.singular()) throw SingularMatrixError("sym_inverse: matrix is numerically singular");
  const std::size_t n = a.dim();
  Matrix inv(n, n);
  Vector e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    std::fill(e.begin(), e.end(), 0.0);
    e[j] = 1.0;
    const Vector col = ldlt_solve(f, e);
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
  }
  return SymMatrix(std::move(inv), std::numeric_limits<double>::infinity());
}

/// xᵀ Q⁻¹ x. By det(Q + xxᵀ) = det(Q)(1 + xᵀQ⁻¹x) this ranks candidates for
/// a greedy determinant increase without forming any determinant.
inline double leverage(const SymMatrix& q_inv, std::span<const double> x) {
  if (x.size() != q_inv.dim()) throw DomainError("leverage: dimension mismatch");
  const std::size_t n = x.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += q_inv(i, j) * x[j];
    s += x[i] * row;
  }
  return std::max(s, 0.0);
}

/// Replaces inverse = Q⁻¹ with (Q + xxᵀ)⁻¹.
inline void sherman_morrison_update(SymMatrix& inverse, std::span<const double> x) {
  const Vector u = multiply(inverse.matrix(), x);
  const double denom = 1.0 + dot(x, u);
  inverse.add_outer(u, -1.0 / denom);
}

struct OlsFit {
  Vector coefficients;
  std::optional<SymMatrix> coef_covariance;  // empty unless rank_ok and n > p
  std::optional<double> residual_variance;   // RSS / (n - p); empty when n <= p
  Vector residuals;
  std::size_t n_obs = 0;
  bool rank_ok = false;

  double standard_error(std::size_t j) const {
    if (!coef_covariance) throw DomainError("OlsFit: coefficient covariance is not available");
    return std::sqrt(std::max((*coef_covariance)(j, j), 0.0));
  }
};

/// Least squares through the normal equations, with columns equilibrated to
/// unit norm before factorization.
inline OlsFit ols_fit(const Matrix& x, std::span<const double> y) {
  const std::size_t n = x.rows();
  const std::size_t p = x.cols();
  if (n == 0 || p == 0) throw DomainError("ols_fit: need n >= 1 and p >= 1");
  if (y.size() != n) throw DomainError("ols_fit: response length does not match design rows");

  Vector scale(p, 1.0);
  for (std::size_t j = 0; j < p; ++j) {
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += x(i, j) * x(i, j);
    if (ss > 0.0) scale[j] = 1.0 / std::sqrt(ss);
  }
  Matrix xs(n, p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) xs(i, j) = x(i, j) * scale[j];

  const SymMatrix gram = cross_product(xs);
  Vector xty(p, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) xty[j] += xs(i, j) * y[i];

  const Ldlt f = ldlt(gram);
  Vector beta_s = ldlt_solve(f, xty);

  OlsFit fit;
  fit.n_obs = n;
  fit.rank_ok = !f.singular();
  fit.coefficients.resize(p);
  for (std::size_t j = 0; j < p; ++j) fit.coefficients[j] = beta_s[j] * scale[j];

  fit.residuals.resize(n);
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    fit.residuals[i] = y[i] - dot(x.row(i), fit.coefficients);
    rss += fit.residuals[i] * fit.residuals[i];
  }
  if (n > p) fit.residual_variance = rss / static_cast<double>(n - p);

  if (fit.rank_ok && fit.residual_variance) {
    const SymMatrix inv = sym_inverse(gram);
    Matrix cov(p, p);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j)
        cov(i, j) = *fit.residual_variance * inv(i, j) * scale[i] * scale[j];
    fit.coef_covariance = SymMatrix(std::move(cov), std::numeric_limits<double>::infinity());
  }
  return fit;
}

/// Sample covariance (denominator n - 1) of the columns of x.
inline SymMatrix sample_covariance(const Matrix& x) {
  const std::size_t n = x.rows();
  const std::size_t k = x.cols();
  if (n < 2) throw DomainError("sample_covariance: need at least two rows");
  Vector mean(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) mean[j] += x(i, j);
  for (double& m : mean) m /= static_cast<double>(n);
  SymMatrix c = SymMatrix::zeros(k);
  Vector d(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) d[j] = x(i, j) - mean[j];
    c.add_outer(d);
  }
  return c.scaled(1.0 / static_cast<double>(n - 1));
}

namespace detail {

struct PowerResult {
  Vector vec;
  double eigenvalue = 0.0;
  bool converged = false;
};

inline PowerResult power_iterate(const SymMatrix& c, Vector v) {
  constexpr int kMaxIter = 10000;
  constexpr double kTol = 1e-10;
  double nrm = std::sqrt(dot(v, v));
  for (double& e : v) e /= nrm;
  for (int it = 0; it < kMaxIter; ++it) {
    Vector w = multiply(c.matrix(), v);
    nrm = std::sqrt(dot(w, w));
    if (nrm == 0.0) return {v, 0.0, true};
    double diff = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] /= nrm;
      diff += (w[i] - v[i]) * (w[i] - v[i]);
    }
    v = std::move(w);
    if (std::sqrt(diff) < kTol) {
      const Vector cv = multiply(c.matrix(), v);
      return {v, dot(v, cv), true};
    }
  }
  return {v, 0.0, false};
}

}  // namespace detail

/// Leading eigenvector of the sample covariance of x by power iteration from
/// the normalized all-ones vector. Coordinate-axis starts are also run so a
/// start orthogonal to the leading eigenvector cannot pin the result to a
/// smaller eigenvalue. Sign convention: largest-magnitude entry positive.
inline Vector first_principal_component(const Matrix& x) {
  if (x.cols() == 0) throw DomainError("first_principal_component: need k >= 1");
  if (x.rows() < 2) throw DomainError("first_principal_component: need n >= 2");
  const std::size_t k = x.cols();
  const SymMatrix c = sample_covariance(x);

  std::optional<detail::PowerResult> best;
  auto consider = [&](Vector start) {
    detail::PowerResult r = detail::power_iterate(c, std::move(start));
    if (!r.converged) return;
    if (!best || r.eigenvalue > best->eigenvalue * (1.0 + 1e-12) + 1e-300) best = std::move(r);
  };
  consider(Vector(k, 1.0));
  if (k > 1) {
    for (std::size_t j = 0; j < k; ++j) {
      Vector e(k, 0.0);
      e[j] = 1.0;
      consider(std::move(e));
    }
  }
  if (!best) throw DomainError("first_principal_component: power iteration did not converge");

  Vector v = std::move(best->vec);
  std::size_t arg = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (std::abs(v[j]) > std::abs(v[arg]) + 1e-12) arg = j;
  if (v[arg] < 0.0)
    for (double& e : v) e = -e;
  return v;
}

}  // namespace fsm::linalg
