#pragma once

// Dense linear algebra on top of Eigen: the row-major matrix type used by
// every module, checked products, and a thin Householder QR with a
// positive-diagonal sign convention.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>

#include "calfuse/errors.hpp"

namespace calfuse {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const std::string& what) {
  if (!m.allFinite()) throw ValidationError(what + ": non-finite entry");
}

/// Exact equality including shape (Eigen's operator== asserts on shape mismatch).
template <typename A, typename B>
bool identical(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

template <typename Scalar>
void require_shape(const Matrix<Scalar>& m, Eigen::Index rows, Eigen::Index cols,
                   const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ValidationError(what + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                          ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

template <typename Scalar>
Matrix<Scalar> matmul(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ValidationError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                          std::to_string(b.rows()) + ")");
  }
  Matrix<Scalar> out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

template <typename Scalar>
Matrix<Scalar> transpose(const Matrix<Scalar>& a) {
  return a.transpose();
}

template <typename Scalar>
struct QRFactors {
  Matrix<Scalar> q;  // m x k, orthonormal columns
  Matrix<Scalar> r;  // k x n, upper triangular, diagonal >= 0
};

/// Pivot norms below this are treated as rank-deficient columns.
inline constexpr double kRankTolerance = 1e-12;

/// Thin QR by Householder reflections.
///
/// Columns whose remaining norm falls below kRankTolerance get an identity
/// reflector and a zero diagonal in R. After factorization every row of R
/// with a negative diagonal is negated together with the matching column of
/// Q, so the result is unique for full-column-rank input.
template <typename Scalar>
QRFactors<Scalar> qr_decompose(const Matrix<Scalar>& w) {
  if (w.rows() < 1 || w.cols() < 1) throw ValidationError("qr_decompose: empty matrix");
  require_finite(w, "qr_decompose");

  const Eigen::Index m = w.rows();
  const Eigen::Index n = w.cols();
  const Eigen::Index k = std::min(m, n);

  Matrix<Scalar> a = w;
  // Householder vectors, one column per reflector; a zero column means identity.
  Matrix<Scalar> vs = Matrix<Scalar>::Zero(m, k);

  for (Eigen::Index j = 0; j < k; ++j) {
    const Eigen::Index len = m - j;
    Vector<Scalar> x = a.block(j, j, len, 1);
    const Scalar norm = x.norm();
    if (norm < Scalar(kRankTolerance)) {
      a.block(j, j, len, 1).setZero();
      continue;
    }
    const Scalar alpha = x(0) >= Scalar(0) ? -norm : norm;
    Vector<Scalar> v = x;
    v(0) -= alpha;
    v /= v.norm();
    vs.block(j, j, len, 1) = v;

    auto trailing = a.block(j, j, len, n - j);
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> vt_a = v.transpose() * trailing;
    trailing.noalias() -= Scalar(2) * v * vt_a;
    a(j, j) = alpha;
    a.block(j + 1, j, len - 1, 1).setZero();
  }

  QRFactors<Scalar> out;
  out.r = a.topRows(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < std::min(i, n); ++j) out.r(i, j) = Scalar(0);
  }

  // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of the identity.
  out.q = Matrix<Scalar>::Identity(m, k);
  for (Eigen::Index j = k - 1; j >= 0; --j) {
    const Eigen::Index len = m - j;
    Vector<Scalar> v = vs.block(j, j, len, 1);
    if (v.squaredNorm() == Scalar(0)) continue;
    auto rows = out.q.bottomRows(len);
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> vt_q = v.transpose() * rows;
    rows.noalias() -= Scalar(2) * v * vt_q;
  }

  for (Eigen::Index i = 0; i < k; ++i) {
    if (out.r(i, i) < Scalar(0)) {
      out.r.row(i) = -out.r.row(i);
      out.q.col(i) = -out.q.col(i);
    }
  }
  return out;
}

/// Scales every row to unit L2 norm. Zero rows stay zero.
template <typename Scalar>
Matrix<Scalar> normalize_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const Scalar n = out.row(i).norm();
    if (n > Scalar(0)) out.row(i) /= n;
  }
  return out;
}

/// Vector-Jacobian product of normalize_rows at input x.
/// For u = x/|x|: dL/dx = (g - u (u.g)) / |x|.
template <typename Scalar>
Matrix<Scalar> normalize_rows_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& grad_out) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar n = x.row(i).norm();
    if (n == Scalar(0)) {
      out.row(i).setZero();
      continue;
    }
    const auto u = x.row(i) / n;
    const Scalar ug = u.dot(grad_out.row(i));
    out.row(i) = (grad_out.row(i) - ug * u) / n;
  }
  return out;
}

template <typename Scalar>
Scalar relative_frobenius_error(const Matrix<Scalar>& approx, const Matrix<Scalar>& exact) {
  const Scalar denom = exact.norm();
  const Scalar diff = (approx - exact).norm();
  return denom > Scalar(0) ? diff / denom : diff;
}

}  // namespace calfuse
