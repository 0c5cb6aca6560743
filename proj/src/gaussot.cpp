#include "drkf/gaussot.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace drkf {

void ModelStep::validate() const {
  const Index n = A.rows();
  const Index m = C.rows();
  if (A.cols() != n || C.cols() != n || B.dim() != n || D.dim() != m) {
    throw Error(ErrorCode::kDimMismatch,
                "model step shapes: A " + std::to_string(A.rows()) + "x" +
                    std::to_string(A.cols()) + ", C " + std::to_string(C.rows()) + "x" +
                    std::to_string(C.cols()) + ", B " + std::to_string(B.dim()) + ", D " +
                    std::to_string(D.dim()));
  }
}

namespace {

void require_psd(const SymMatrix& x, const char* what) {
  if (min_eigenvalue(x) < -psd_tolerance(x.mat())) {
    throw Error(ErrorCode::kNotPSD, std::string(what) + " is not PSD");
  }
}

void check_alt(const ModelStep& step, const CandidateParams& alt, const SymMatrix& belief_cov) {
  step.validate();
  if (alt.B_bar.dim() != step.n() || alt.D_bar.dim() != step.m() ||
      alt.Sigma_bar.dim() != step.n() || belief_cov.dim() != step.n()) {
    throw Error(ErrorCode::kDimMismatch, "candidate or belief covariance dims");
  }
}

}  // namespace

double quadratic_ot_value(const GaussianMoments& p1, const GaussianMoments& p2,
                          const QuadCost& cost) {
  const Index d1 = p1.cov.dim();
  const Index d2 = p2.cov.dim();
  if (p1.mean.size() != d1 || p2.mean.size() != d2 || cost.P.dim() != d1 ||
      cost.Q.dim() != d2 || cost.R.dim() != d1 || d1 != d2) {
    throw Error(ErrorCode::kDimMismatch, "quadratic_ot_value: inconsistent dimensions");
  }
  require_psd(p2.cov, "M2");
  const SymMatrix root1 = sqrt_psd(p1.cov);
  const Matrix& r = cost.R.mat();
  const Matrix inner = root1.mat() * r * p2.cov.mat() * r * root1.mat();
  const Eigen::SelfAdjointEigenSolver<Matrix> es(symmetric_part(inner));
  const double cross = sum_sqrt_eigenvalues(es.eigenvalues());

  const double means = p1.mean.dot(cost.P.mat() * p1.mean) +
                       p2.mean.dot(cost.Q.mat() * p2.mean) + p1.mean.dot(r * p2.mean);
  return means + (cost.P.mat() * p1.cov.mat()).trace() + (cost.Q.mat() * p2.cov.mat()).trace() -
         cross;
}

double w2_gaussian(const GaussianMoments& p1, const GaussianMoments& p2) {
  if (p1.cov.dim() != p2.cov.dim() || p1.mean.size() != p1.cov.dim() ||
      p2.mean.size() != p2.cov.dim()) {
    throw Error(ErrorCode::kDimMismatch, "w2_gaussian: inconsistent dimensions");
  }
  const double value = (p1.mean - p2.mean).squaredNorm() + p1.cov.trace() + p2.cov.trace() -
                       2.0 * bures_cross(p1.cov, p2.cov);
  return std::max(0.0, value);
}

SymMatrix noise_block(const Matrix& c, const SymMatrix& b, const SymMatrix& d) {
  const Index n = b.dim();
  const Index m = d.dim();
  Matrix out(n + m, n + m);
  const Matrix bct = b.mat() * c.transpose();
  out.topLeftCorner(n, n) = b.mat();
  out.topRightCorner(n, m) = bct;
  out.bottomLeftCorner(m, n) = bct.transpose();
  out.bottomRightCorner(m, m) = c * bct + d.mat();
  return SymMatrix(out);
}

SymMatrix transport_weight(const Matrix& a, const Matrix& c) {
  const Matrix ca = c * a;
  return SymMatrix(Matrix::Identity(a.cols(), a.cols()) + a.transpose() * a +
                   ca.transpose() * ca);
}

SymMatrix predicted_cov(const ModelStep& step, const SymMatrix& sigma_prev, const SymMatrix& b,
                        const SymMatrix& d) {
  const Matrix& a = step.A;
  const SymMatrix pxx(a * sigma_prev.mat() * a.transpose() + b.mat());
  return noise_block(step.C, pxx, d);
}

SymMatrix joint_cov(const ModelStep& step, const SymMatrix& sigma_prev, const SymMatrix& b,
                    const SymMatrix& d) {
  const Index n = step.n();
  const Index m = step.m();
  const Matrix& a = step.A;
  const Matrix& c = step.C;
  Matrix lift(2 * n + m, n);
  lift << Matrix::Identity(n, n), a, c * a;
  Matrix out = lift * sigma_prev.mat() * lift.transpose();
  out.bottomRightCorner(n + m, n + m) += noise_block(c, b, d).mat();
  return SymMatrix(out);
}

StepMatrices build_step_matrices(const ModelStep& step, const CandidateParams& alt,
                                 const SymMatrix& belief_cov, const Vector& x_hat_prev) {
  check_alt(step, alt, belief_cov);
  const Index n = step.n();
  Vector x_hat = x_hat_prev.size() == 0 ? Vector::Zero(n) : x_hat_prev;
  if (x_hat.size() != n) throw Error(ErrorCode::kDimMismatch, "x_hat length");

  StepMatrices out;
  out.sigma2_nom = noise_block(step.C, step.B, step.D);
  out.sigma2_alt = noise_block(step.C, alt.B_bar, alt.D_bar);
  out.H = transport_weight(step.A, step.C);
  out.mu.resize(n + step.m());
  out.mu << step.A * x_hat, step.C * step.A * x_hat;
  out.V = predicted_cov(step, belief_cov, step.B, step.D);
  out.V_joint = joint_cov(step, belief_cov, step.B, step.D);
  if (!(min_eigenvalue(out.V) > 0.0)) {
    throw Error(ErrorCode::kDegenerateV, "predicted covariance V_t is not positive definite");
  }
  return out;
}

double bicausal_distance(const ModelStep& step, const CandidateParams& alt,
                         const SymMatrix& belief_cov) {
  check_alt(step, alt, belief_cov);
  require_psd(alt.B_bar, "B_bar");
  require_psd(alt.D_bar, "D_bar");
  require_psd(alt.Sigma_bar, "Sigma_bar");
  return BallDistance(step, belief_cov, BallKind::kBicausal).value(alt);
}

double joint_noncausal_distance(const ModelStep& step, const CandidateParams& alt,
                                const SymMatrix& belief_cov) {
  check_alt(step, alt, belief_cov);
  require_psd(alt.B_bar, "B_bar");
  require_psd(alt.D_bar, "D_bar");
  require_psd(alt.Sigma_bar, "Sigma_bar");
  return BallDistance(step, belief_cov, BallKind::kJoint).value(alt);
}

// --- BallDistance -----------------------------------------------------------

BallDistance::BallDistance(const ModelStep& step, const SymMatrix& belief_cov, BallKind kind)
    : step_(step), kind_(kind) {
  step_.validate();
  const Index n = step_.n();
  const Index m = step_.m();
  h_ = transport_weight(step_.A, step_.C);

  state_lift_.resize(n + m, n);
  state_lift_ << Matrix::Identity(n, n), step_.C;
  prev_lift_.resize(2 * n + m, n);
  prev_lift_ << Matrix::Identity(n, n), step_.A, step_.C * step_.A;
  noise_lift_.resize(2 * n + m, n);
  noise_lift_ << Matrix::Zero(n, n), Matrix::Identity(n, n), step_.C;

  if (kind_ == BallKind::kBicausal) {
    const SymMatrix s2 = noise_block(step_.C, step_.B, step_.D);
    first_ = make_term(s2, s2.trace());
    second_ = make_term(belief_cov, (h_.mat() * belief_cov.mat()).trace());
  } else {
    const SymMatrix vj = joint_cov(step_, belief_cov, step_.B, step_.D);
    first_ = make_term(vj, vj.trace());
  }
}

BallDistance::Term BallDistance::make_term(const SymMatrix& nominal, double nominal_trace) {
  Term t;
  t.root = sqrt_psd(nominal);
  const Eigen::SelfAdjointEigenSolver<Matrix> es(nominal.mat());
  const Vector& ev = es.eigenvalues();
  const double thresh = 1e-12 * std::max(1.0, ev.maxCoeff());
  t.null_dim = static_cast<Index>((ev.array() <= thresh).count());
  t.nominal_trace = nominal_trace;
  return t;
}

double BallDistance::cross(const Term& t, const Matrix& n) {
  const Matrix inner = t.root.mat() * n * t.root.mat();
  const Eigen::SelfAdjointEigenSolver<Matrix> es(symmetric_part(inner));
  return sum_sqrt_eigenvalues(es.eigenvalues());
}

Matrix BallDistance::cross_gradient(const Term& t, const Matrix& n) {
  // d tr[sqrt(X)] = tr[X^{-1/2} dX] / 2 with X = R N R, so the gradient in N
  // is R X^{-1/2} R / 2. Directions in the null space of R do not move X.
  const Matrix& r = t.root.mat();
  const Eigen::SelfAdjointEigenSolver<Matrix> es(symmetric_part(r * n * r));
  const Vector& ev = es.eigenvalues();
  const double thresh = 1e-10 * std::max(1.0, ev.maxCoeff());
  const Index deficient = static_cast<Index>((ev.array() < thresh).count());
  if (deficient > t.null_dim) {
    // Nearly singular nominal: use the equivalent form
    // N^{-1/2} (N^{1/2} S N^{1/2})^{1/2} N^{-1/2} / 2, which only needs N > 0.
    const Eigen::SelfAdjointEigenSolver<Matrix> en(symmetric_part(n));
    const Vector& nv = en.eigenvalues();
    if (!(nv.minCoeff() > 1e-12 * std::max(1.0, nv.maxCoeff()))) {
      throw Error(ErrorCode::kNearSingularBures,
                  "inner Bures matrix singular (min eigenvalue " + std::to_string(ev.minCoeff()) +
                      ")");
    }
    const Matrix& qn = en.eigenvectors();
    const Matrix n_root = qn * nv.cwiseSqrt().asDiagonal() * qn.transpose();
    const Matrix n_inv_root = qn * nv.cwiseSqrt().cwiseInverse().asDiagonal() * qn.transpose();
    const Matrix mid = sqrt_psd(SymMatrix(n_root * r * r * n_root)).mat();
    return 0.5 * n_inv_root * mid * n_inv_root;
  }
  Vector inv_root(ev.size());
  for (Index i = 0; i < ev.size(); ++i) {
    inv_root(i) = ev(i) < thresh ? 0.0 : 1.0 / std::sqrt(ev(i));
  }
  const Matrix& q = es.eigenvectors();
  return 0.5 * r * q * inv_root.asDiagonal() * q.transpose() * r;
}

Matrix BallDistance::alt_sigma2(const CandidateParams& alt) const {
  return noise_block(step_.C, alt.B_bar, alt.D_bar).mat();
}

Matrix BallDistance::alt_joint(const CandidateParams& alt) const {
  Matrix out = prev_lift_ * alt.Sigma_bar.mat() * prev_lift_.transpose();
  out += noise_lift_ * alt.B_bar.mat() * noise_lift_.transpose();
  const Index m = step_.m();
  out.bottomRightCorner(m, m) += alt.D_bar.mat();
  return out;
}

double BallDistance::value(const CandidateParams& alt) const {
  // w is a difference of traces of size `scale`; anything below round-off of
  // that size is reported as exactly 0.
  double w = 0.0, scale = 0.0;
  if (kind_ == BallKind::kBicausal) {
    const Matrix s2 = alt_sigma2(alt);
    w = first_.nominal_trace + s2.trace() - 2.0 * cross(first_, s2);
    const Matrix& h = h_.mat();
    const Matrix hsh = h * alt.Sigma_bar.mat() * h;
    const double tr_hs = (h * alt.Sigma_bar.mat()).trace();
    w += second_.nominal_trace + tr_hs - 2.0 * cross(second_, hsh);
    scale = first_.nominal_trace + s2.trace() + second_.nominal_trace + tr_hs;
  } else {
    const Matrix vj = alt_joint(alt);
    w = first_.nominal_trace + vj.trace() - 2.0 * cross(first_, vj);
    scale = first_.nominal_trace + vj.trace();
  }
  return w <= 1e-12 * scale ? 0.0 : w;
}

ParamsGradient BallDistance::gradient(const CandidateParams& alt) const {
  const Index m = step_.m();
  if (kind_ == BallKind::kBicausal) {
    const Matrix s2 = alt_sigma2(alt);
    const Matrix gamma =
        Matrix::Identity(s2.rows(), s2.cols()) - 2.0 * cross_gradient(first_, s2);
    const Matrix& h = h_.mat();
    const Matrix hsh = h * alt.Sigma_bar.mat() * h;
    const Matrix g2 = cross_gradient(second_, hsh);
    return {SymMatrix(state_lift_.transpose() * gamma * state_lift_),
            SymMatrix(Matrix(gamma.bottomRightCorner(m, m))), SymMatrix(h - 2.0 * h * g2 * h)};
  }
  const Matrix vj = alt_joint(alt);
  const Matrix gamma = Matrix::Identity(vj.rows(), vj.cols()) - 2.0 * cross_gradient(first_, vj);
  return {SymMatrix(noise_lift_.transpose() * gamma * noise_lift_),
          SymMatrix(Matrix(gamma.bottomRightCorner(m, m))),
          SymMatrix(prev_lift_.transpose() * gamma * prev_lift_)};
}

}  // namespace drkf
