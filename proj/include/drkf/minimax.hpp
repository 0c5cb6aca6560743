#pragma once

// The worst-case MSE problem for one filter step:
//
//   sup F(B̄, D̄, Σ̄) = tr[A Σ̄ A^T + B̄] - tr[M^T K^{-1} M]
//   s.t. w(B̄, D̄, Σ̄) <= eps,  d_j(B̄) >= floor,  d_j(D̄) >= delta,  d_j(Σ̄) >= floor
//
// with K = C A Σ̄ A^T C^T + C B̄ C^T + D̄ and M = C A Σ̄ A^T + C B̄.

#include <string>
#include <vector>

#include "drkf/gaussot.hpp"
#include "drkf/matalg.hpp"
#include "drkf/step.hpp"

namespace drkf {

enum class RobustMode { kNonrobust, kOt, kCot };
enum class Propagation { kWorstCase, kNominal };

std::string to_string(RobustMode mode);
/// Accepts "nonrobust"/"em", "ot", "cot"; throws kInvalidArgument otherwise.
RobustMode parse_mode(const std::string& s);

struct RobustConfig {
  double radius = 0.0;
  double delta = 1e-4;    // floor on the pivots of D̄
  double d_floor = 1e-6;  // floor on the pivots of B̄ and Σ̄
  RobustMode mode = RobustMode::kCot;
  Propagation propagate = Propagation::kWorstCase;

  void validate() const;
  BallKind ball_kind() const {
    return mode == RobustMode::kOt ? BallKind::kJoint : BallKind::kBicausal;
  }
};

struct RobustSolution {
  CandidateParams params;
  Matrix gain;       // G = M^T K^{-1}, n x m
  Vector intercept;  // g = A x̂ - G C A x̂
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  bool pinned = false;  // eps == 0, feasible set is the nominal point
  std::vector<std::string> warnings;
};

/// K, M and the derived quantities shared by the objective, its derivatives
/// and the robust gain.
struct MinimaxTerms {
  Matrix P;       // A Σ̄ A^T + B̄
  Matrix M;       // C P
  Matrix K;       // C P C^T + D̄
  Matrix Kinv_M;  // K^{-1} M

  /// Throws kSingularK when K is not positive definite.
  static MinimaxTerms compute(const ModelStep& step, const CandidateParams& cand);
};

double objective_F(const ModelStep& step, const CandidateParams& cand);

/// Full-matrix gradient of F, symmetrized.
ParamsGradient grad_F(const ModelStep& step, const CandidateParams& cand);

/// Gradient of the step distance used by `kind`.
ParamsGradient grad_w(const ModelStep& step, const CandidateParams& cand,
                      const SymMatrix& belief_cov, BallKind kind = BallKind::kBicausal);

/// Second derivative of tr[M^T K^{-1} M] as the bilinear form 2 tr[L_u^T K^{-1} L_v],
/// L = K̇ K^{-1} M - Ṁ for the directions u and v.
double trace_term_hessian(const ModelStep& step, const MinimaxTerms& terms,
                          const CandidateParams& u, const CandidateParams& v);

/// Hessian of F in the coordinates spanned by `dirs`: entry (k, l) is
/// -2 tr[L_k^T K^{-1} L_l].
Matrix hessian_F(const ModelStep& step, const MinimaxTerms& terms,
                 const std::vector<CandidateParams>& dirs);

struct HessianCheck {
  double lhs = 0.0;  // finite-difference second directional derivative
  double rhs = 0.0;  // 2 tr[K^{-1} L L^T]
};

HessianCheck hessian_identity_check(const ModelStep& step, const CandidateParams& cand,
                                    const CandidateParams& direction);

struct ConstraintValues {
  double ball = 0.0;  // eps - w, feasible when >= 0
  Vector d_B;         // d_j(B̄) - floor
  Vector d_D;         // d_j(D̄) - delta
  Vector d_Sigma;     // d_j(Σ̄) - floor

  double min_slack() const;
};

/// Singular leading blocks are reported as -infinity slacks.
ConstraintValues constraints(const ModelStep& step, const CandidateParams& cand,
                             const SymMatrix& belief_cov, const RobustConfig& cfg);

struct LinearEstimator {
  Matrix G;
  Vector g;
};

LinearEstimator robust_gain(const CandidateParams& params, const ModelStep& step,
                            const Vector& x_hat_prev);

/// V̄_xx - V̄_xy V̄_yy^{-1} V̄_yx under the model `params`; its trace is F.
SymMatrix posterior_cov_robust(const CandidateParams& params, const ModelStep& step);

}  // namespace drkf
