#include "drkf/minimax.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace drkf {

std::string to_string(RobustMode mode) {
  switch (mode) {
    case RobustMode::kNonrobust: return "nonrobust";
    case RobustMode::kOt: return "ot";
    case RobustMode::kCot: return "cot";
  }
  return "unknown";
}

RobustMode parse_mode(const std::string& s) {
  if (s == "nonrobust" || s == "em") return RobustMode::kNonrobust;
  if (s == "ot") return RobustMode::kOt;
  if (s == "cot") return RobustMode::kCot;
  throw Error(ErrorCode::kInvalidArgument, "unknown mode '" + s + "'");
}

void RobustConfig::validate() const {
  if (!(radius >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "radius must be >= 0");
  if (!(delta > 0.0)) throw Error(ErrorCode::kInvalidArgument, "delta must be > 0");
  if (!(d_floor > 0.0)) throw Error(ErrorCode::kInvalidArgument, "d_floor must be > 0");
}

MinimaxTerms MinimaxTerms::compute(const ModelStep& step, const CandidateParams& cand) {
  MinimaxTerms t;
  const Matrix& a = step.A;
  t.P = a * cand.Sigma_bar.mat() * a.transpose() + cand.B_bar.mat();
  t.M = step.C * t.P;
  t.K = symmetric_part(t.M * step.C.transpose()) + cand.D_bar.mat();
  t.Kinv_M = solve_spd(t.K, t.M, ErrorCode::kSingularK);
  return t;
}

double objective_F(const ModelStep& step, const CandidateParams& cand) {
  const MinimaxTerms t = MinimaxTerms::compute(step, cand);
  return t.P.trace() - (t.M.transpose() * t.Kinv_M).trace();
}

ParamsGradient grad_F(const ModelStep& step, const CandidateParams& cand) {
  const MinimaxTerms t = MinimaxTerms::compute(step, cand);
  const Matrix& a = step.A;
  const Matrix& c = step.C;
  const Index n = step.n();

  // Derivatives of tr[M^T K^{-1} M]:
  //   B̄: 2 C^T K^{-1} M - C^T K^{-1} M M^T K^{-1} C
  //   D̄: -K^{-1} M M^T K^{-1}
  //   Σ̄: A^T (B̄ expression) A
  const Matrix kmmk = t.Kinv_M * t.Kinv_M.transpose();
  const Matrix db_trace =
      2.0 * symmetric_part(c.transpose() * t.Kinv_M) - c.transpose() * kmmk * c;
  const Matrix dd_trace = -kmmk;
  const Matrix ds_trace = a.transpose() * db_trace * a;

  return {SymMatrix(Matrix::Identity(n, n) - db_trace), SymMatrix(Matrix(-dd_trace)),
          SymMatrix(a.transpose() * a - ds_trace)};
}

ParamsGradient grad_w(const ModelStep& step, const CandidateParams& cand,
                      const SymMatrix& belief_cov, BallKind kind) {
  return BallDistance(step, belief_cov, kind).gradient(cand);
}

namespace {

// L = K̇ K^{-1} M - Ṁ for a direction (B, D, Σ).
Matrix hessian_l(const ModelStep& step, const MinimaxTerms& t, const CandidateParams& dir) {
  const Matrix& a = step.A;
  const Matrix& c = step.C;
  const Matrix p_dot = a * dir.Sigma_bar.mat() * a.transpose() + dir.B_bar.mat();
  const Matrix m_dot = c * p_dot;
  const Matrix k_dot = m_dot * c.transpose() + dir.D_bar.mat();
  return k_dot * t.Kinv_M - m_dot;
}

CandidateParams axpy(const CandidateParams& x, double s, const CandidateParams& d) {
  return {x.B_bar + d.B_bar * s, x.D_bar + d.D_bar * s, x.Sigma_bar + d.Sigma_bar * s};
}

double trace_term(const ModelStep& step, const CandidateParams& cand) {
  const MinimaxTerms t = MinimaxTerms::compute(step, cand);
  return (t.M.transpose() * t.Kinv_M).trace();
}

double params_norm(const CandidateParams& p) {
  return std::sqrt(p.B_bar.mat().squaredNorm() + p.D_bar.mat().squaredNorm() +
                   p.Sigma_bar.mat().squaredNorm());
}

Vector shifted_pivots(const SymMatrix& x, double floor) {
  try {
    return ldl_diagonals(x).values.array() - floor;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kSingularSubmatrix) throw;
    return Vector::Constant(x.dim(), -std::numeric_limits<double>::infinity());
  }
}

}  // namespace

double trace_term_hessian(const ModelStep& step, const MinimaxTerms& terms,
                          const CandidateParams& u, const CandidateParams& v) {
  const Matrix lu = hessian_l(step, terms, u);
  const Matrix lv = hessian_l(step, terms, v);
  const Matrix kinv_lv = solve_spd(terms.K, lv, ErrorCode::kSingularK);
  return 2.0 * (lu.transpose() * kinv_lv).trace();
}

Matrix hessian_F(const ModelStep& step, const MinimaxTerms& terms,
                 const std::vector<CandidateParams>& dirs) {
  const Index p = static_cast<Index>(dirs.size());
  std::vector<Matrix> ls;
  std::vector<Matrix> kinv_ls;
  ls.reserve(dirs.size());
  kinv_ls.reserve(dirs.size());
  for (const auto& d : dirs) {
    ls.push_back(hessian_l(step, terms, d));
    kinv_ls.push_back(solve_spd(terms.K, ls.back(), ErrorCode::kSingularK));
  }
  Matrix h(p, p);
  for (Index k = 0; k < p; ++k) {
    for (Index l = 0; l <= k; ++l) {
      h(k, l) = -2.0 * (ls[k].transpose() * kinv_ls[l]).trace();
      h(l, k) = h(k, l);
    }
  }
  return h;
}

HessianCheck hessian_identity_check(const ModelStep& step, const CandidateParams& cand,
                                    const CandidateParams& direction) {
  const double dir_norm = params_norm(direction);
  HessianCheck out;
  if (dir_norm == 0.0) return out;

  const MinimaxTerms t = MinimaxTerms::compute(step, cand);
  out.rhs = trace_term_hessian(step, t, direction, direction);

  // Central second difference with a perturbation of relative size 1e-4.
  const double h = 1e-4 * std::max(1.0, params_norm(cand)) / dir_norm;
  const double g0 = trace_term(step, cand);
  const double gp = trace_term(step, axpy(cand, h, direction));
  const double gm = trace_term(step, axpy(cand, -h, direction));
  out.lhs = (gp - 2.0 * g0 + gm) / (h * h);
  return out;
}

double ConstraintValues::min_slack() const {
  double s = ball;
  if (d_B.size()) s = std::min(s, d_B.minCoeff());
  if (d_D.size()) s = std::min(s, d_D.minCoeff());
  if (d_Sigma.size()) s = std::min(s, d_Sigma.minCoeff());
  return s;
}

ConstraintValues constraints(const ModelStep& step, const CandidateParams& cand,
                             const SymMatrix& belief_cov, const RobustConfig& cfg) {
  ConstraintValues out;
  out.d_B = shifted_pivots(cand.B_bar, cfg.d_floor);
  out.d_D = shifted_pivots(cand.D_bar, cfg.delta);
  out.d_Sigma = shifted_pivots(cand.Sigma_bar, cfg.d_floor);
  const bool pivots_ok = std::isfinite(out.d_B.minCoeff()) && std::isfinite(out.d_D.minCoeff()) &&
                         std::isfinite(out.d_Sigma.minCoeff());
  if (!pivots_ok || out.d_B.minCoeff() < 0.0 || out.d_D.minCoeff() < 0.0 ||
      out.d_Sigma.minCoeff() < 0.0) {
    // w is only defined on the PSD cone; report the ball as infeasible too
    // unless the matrices are still PSD.
    try {
      out.ball = cfg.radius - BallDistance(step, belief_cov, cfg.ball_kind()).value(cand);
    } catch (const Error&) {
      out.ball = -std::numeric_limits<double>::infinity();
    }
    return out;
  }
  out.ball = cfg.radius - BallDistance(step, belief_cov, cfg.ball_kind()).value(cand);
  return out;
}

LinearEstimator robust_gain(const CandidateParams& params, const ModelStep& step,
                            const Vector& x_hat_prev) {
  if (x_hat_prev.size() != step.n()) throw Error(ErrorCode::kDimMismatch, "x_hat length");
  const MinimaxTerms t = MinimaxTerms::compute(step, params);
  LinearEstimator out;
  out.G = t.Kinv_M.transpose();
  const Vector ax = step.A * x_hat_prev;
  out.g = ax - out.G * (step.C * ax);
  return out;
}

SymMatrix posterior_cov_robust(const CandidateParams& params, const ModelStep& step) {
  const MinimaxTerms t = MinimaxTerms::compute(step, params);
  return SymMatrix(t.P - t.M.transpose() * t.Kinv_M);
}

}  // namespace drkf
