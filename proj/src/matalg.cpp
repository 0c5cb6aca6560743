#include "drkf/matalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace drkf {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotPSD: return "NotPSD";
    case ErrorCode::kNotPD: return "NotPD";
    case ErrorCode::kDimMismatch: return "DimMismatch";
    case ErrorCode::kSingularSubmatrix: return "SingularSubmatrix";
    case ErrorCode::kDegenerateV: return "DegenerateV";
    case ErrorCode::kSingularVyy: return "SingularVyy";
    case ErrorCode::kSingularK: return "SingularK";
    case ErrorCode::kNearSingularBures: return "NearSingularBures";
    case ErrorCode::kInfeasibleStart: return "InfeasibleStart";
    case ErrorCode::kNumericalBreakdown: return "NumericalBreakdown";
    case ErrorCode::kDegenerateData: return "DegenerateData";
    case ErrorCode::kDataGap: return "DataGap";
    case ErrorCode::kInsufficientHistory: return "InsufficientHistory";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

SymMatrix::SymMatrix(const Matrix& m) {
  if (m.rows() != m.cols()) {
    throw Error(ErrorCode::kDimMismatch, "SymMatrix requires a square matrix, got " +
                                             std::to_string(m.rows()) + "x" +
                                             std::to_string(m.cols()));
  }
  if (m.rows() < 1) throw Error(ErrorCode::kDimMismatch, "SymMatrix requires dim >= 1");
  m_ = 0.5 * (m + m.transpose());
}

SymMatrix SymMatrix::identity(Index n) { return SymMatrix(Matrix::Identity(n, n)); }

SymMatrix SymMatrix::zero(Index n) { return SymMatrix(Matrix::Zero(n, n)); }

SymMatrix SymMatrix::diagonal(const Vector& d) { return SymMatrix(Matrix(d.asDiagonal())); }

double psd_tolerance(const Matrix& x) { return 1e-9 * std::max(1.0, x.trace()); }

namespace {

Eigen::SelfAdjointEigenSolver<Matrix> eigen_of(const Matrix& x) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(x);
  if (es.info() != Eigen::Success) {
    throw Error(ErrorCode::kNotPSD, "eigendecomposition failed");
  }
  return es;
}

Vector clamped_eigenvalues(const Eigen::SelfAdjointEigenSolver<Matrix>& es, double tol) {
  const Vector& ev = es.eigenvalues();
  if (ev.minCoeff() < -tol) {
    throw Error(ErrorCode::kNotPSD, "eigenvalue " + std::to_string(ev.minCoeff()) +
                                        " below tolerance -" + std::to_string(tol));
  }
  return ev.cwiseMax(0.0);
}

}  // namespace

// Sum of square roots with eigenvalues at round-off level treated as exact
// zeros; sqrt would otherwise turn 1e-16 noise into 1e-8 errors.
double sum_sqrt_eigenvalues(const Vector& ev) {
  const double cut = 64.0 * std::numeric_limits<double>::epsilon() * static_cast<double>(ev.size()) *
                     std::max(0.0, ev.maxCoeff());
  double s = 0.0;
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i) > cut) s += std::sqrt(ev(i));
  }
  return s;
}

SymMatrix sqrt_psd(const SymMatrix& x) {
  const auto es = eigen_of(x.mat());
  const Vector root = clamped_eigenvalues(es, psd_tolerance(x.mat())).cwiseSqrt();
  const Matrix& q = es.eigenvectors();
  return SymMatrix(q * root.asDiagonal() * q.transpose());
}

double trace_sqrt(const SymMatrix& x) {
  const auto es = eigen_of(x.mat());
  return sum_sqrt_eigenvalues(clamped_eigenvalues(es, psd_tolerance(x.mat())));
}

double bures_cross_with_root(const SymMatrix& root_m1, const SymMatrix& m2) {
  if (root_m1.dim() != m2.dim()) {
    throw Error(ErrorCode::kDimMismatch, "bures_cross: " + std::to_string(root_m1.dim()) +
                                             " vs " + std::to_string(m2.dim()));
  }
  // The inner product is PSD analytically; clamp whatever round-off leaves.
  const Matrix inner = root_m1.mat() * m2.mat() * root_m1.mat();
  const auto es = eigen_of(symmetric_part(inner));
  return sum_sqrt_eigenvalues(es.eigenvalues());
}

double bures_cross(const SymMatrix& m1, const SymMatrix& m2) {
  if (m1.dim() != m2.dim()) {
    throw Error(ErrorCode::kDimMismatch,
                "bures_cross: " + std::to_string(m1.dim()) + " vs " + std::to_string(m2.dim()));
  }
  if (min_eigenvalue(m2) < -psd_tolerance(m2.mat())) {
    throw Error(ErrorCode::kNotPSD, "bures_cross: second argument is not PSD");
  }
  return bures_cross_with_root(sqrt_psd(m1), m2);
}

LdlPivots ldl_pivots(const SymMatrix& x) {
  const Matrix& a = x.mat();
  const Index n = a.rows();
  const double thresh = 1e-12 * a.cwiseAbs().maxCoeff();

  // Unpivoted LDL^T; d_j is the Schur complement X_jj - c^T Z^{-1} c of the
  // leading (j-1) block, and Z is nonsingular iff d_1..d_{j-1} are nonzero.
  Matrix l = Matrix::Identity(n, n);
  Vector d(n);
  for (Index j = 0; j < n; ++j) {
    double dj = a(j, j);
    for (Index k = 0; k < j; ++k) dj -= l(j, k) * l(j, k) * d(k);
    d(j) = dj;
    if (j + 1 == n) break;
    if (!(std::abs(dj) > thresh)) {
      throw Error(ErrorCode::kSingularSubmatrix,
                  "leading " + std::to_string(j + 1) + "x" + std::to_string(j + 1) +
                      " block is numerically singular");
    }
    for (Index i = j + 1; i < n; ++i) {
      double v = a(i, j);
      for (Index k = 0; k < j; ++k) v -= l(i, k) * l(j, k) * d(k);
      l(i, j) = v / dj;
    }
  }
  LdlPivots out;
  out.values = d;
  out.inv_unit_lower =
      l.triangularView<Eigen::UnitLower>().solve(Matrix::Identity(n, n));
  return out;
}

LdlDiagonals ldl_diagonals(const SymMatrix& x) { return {ldl_pivots(x).values}; }

double min_eigenvalue(const SymMatrix& x) {
  return eigen_of(x.mat()).eigenvalues().minCoeff();
}

Matrix cholesky_lower(const SymMatrix& x) {
  const Matrix& a = x.mat();
  if (a.isZero(0.0)) return Matrix::Zero(a.rows(), a.cols());
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  const double jitter = 1e-12 * std::abs(a.trace());
  Eigen::LLT<Matrix> retry(a + jitter * Matrix::Identity(a.rows(), a.cols()));
  if (retry.info() == Eigen::Success) return retry.matrixL();
  throw Error(ErrorCode::kNotPD, "Cholesky factorization failed after jitter");
}

Matrix solve_spd(const Matrix& k, const Matrix& b, ErrorCode on_fail) {
  Eigen::LLT<Matrix> llt(k);
  if (llt.info() != Eigen::Success) {
    throw Error(on_fail, "matrix is not positive definite");
  }
  return llt.solve(b);
}

}  // namespace drkf
