#pragma once

// Dense symmetric-matrix primitives shared by every other module.

#include <Eigen/Dense>

#include "drkf/error.hpp"

namespace drkf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Dense symmetric matrix. The input is symmetrized as (X + X^T)/2 on
/// construction, so entries(i, j) == entries(j, i) holds bit-exactly.
class SymMatrix {
 public:
  SymMatrix() : m_(Matrix::Zero(1, 1)) {}
  explicit SymMatrix(const Matrix& m);

  static SymMatrix identity(Index n);
  static SymMatrix zero(Index n);
  static SymMatrix diagonal(const Vector& d);
  static SymMatrix scalar(double v) { return diagonal(Vector::Constant(1, v)); }

  const Matrix& mat() const { return m_; }
  Index dim() const { return m_.rows(); }
  double operator()(Index i, Index j) const { return m_(i, j); }
  double trace() const { return m_.trace(); }

  SymMatrix operator+(const SymMatrix& o) const { return SymMatrix(m_ + o.m_); }
  SymMatrix operator-(const SymMatrix& o) const { return SymMatrix(m_ - o.m_); }
  SymMatrix operator*(double s) const { return SymMatrix(m_ * s); }

 private:
  Matrix m_;
};

/// LDL^T pivots d_j = X_jj - c^T Z^{-1} c for the leading block partition.
struct LdlDiagonals {
  Vector values;
};

/// Pivots together with the rows of L^{-1}. Row j of L^{-1} is the vector u_j
/// with d_j(X) = u_j^T X u_j, so the gradient of d_j is u_j u_j^T.
struct LdlPivots {
  Vector values;
  Matrix inv_unit_lower;
};

/// Tolerance below which negative eigenvalues are treated as round-off.
double psd_tolerance(const Matrix& x);

/// Principal square root via symmetric eigendecomposition. Eigenvalues in
/// [-tol_psd, 0) are clamped to zero; anything more negative throws kNotPSD.
SymMatrix sqrt_psd(const SymMatrix& x);

/// Sum of sqrt over eigenvalues, treating round-off-level values (relative to
/// the largest) as exact zeros.
double sum_sqrt_eigenvalues(const Vector& ev);

/// tr[sqrt(X)] for PSD X with the same clamping rule as sqrt_psd.
double trace_sqrt(const SymMatrix& x);

/// tr[ sqrt( sqrt(M1) M2 sqrt(M1) ) ].
double bures_cross(const SymMatrix& m1, const SymMatrix& m2);

/// Same quantity with a precomputed sqrt(M1).
double bures_cross_with_root(const SymMatrix& root_m1, const SymMatrix& m2);

LdlDiagonals ldl_diagonals(const SymMatrix& x);
LdlPivots ldl_pivots(const SymMatrix& x);

double min_eigenvalue(const SymMatrix& x);

/// Cholesky factor of a PD matrix; adds a 1e-12 * tr jitter once on failure.
Matrix cholesky_lower(const SymMatrix& x);

/// Symmetric part (X + X^T)/2 of an arbitrary square matrix.
inline Matrix symmetric_part(const Matrix& x) { return 0.5 * (x + x.transpose()); }

/// Solves K Z = B for symmetric PD K; throws `on_fail` when K is not PD.
Matrix solve_spd(const Matrix& k, const Matrix& b, ErrorCode on_fail = ErrorCode::kSingularK);

}  // namespace drkf
