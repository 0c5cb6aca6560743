#pragma once

// Feasible-iterate trust-region interior-point maximization of F over
// (B̄, D̄, Σ̄). Iterates stay strictly inside the ball and above the pivot
// floors; infeasible trial steps are rejected and the trust region shrinks.

#include <iosfwd>
#include <string>
#include <vector>

#include "drkf/minimax.hpp"

namespace drkf {

struct SolverOptions {
  int max_iters = 20;           // trial steps, accepted or not
  double tolerance = 1e-8;      // relative barrier gap at which the solve counts as converged
  double initial_radius = 1.0;  // trust region, in coordinates whitened by the nominal
  double barrier_init = 0.1;    // mu_0 = barrier_init * max(1, |F(nominal)|)
  double barrier_decay = 0.2;
  bool verbose = false;

  void validate() const;
};

struct SolveTrace {
  struct Row {
    int iter = 0;
    double F = 0.0;
    double min_slack = 0.0;
    double step_norm = 0.0;  // accepted step; 0 for a rejected trial
  };
  std::vector<Row> rows;

  void write_csv(std::ostream& out) const;
};

/// Worst-case parameters for one step. Starts at the nominal triple and
/// returns the feasible iterate with the largest F, so value >= F(nominal).
/// x_hat_prev only enters the intercept g of the returned estimator.
RobustSolution solve_step(const ModelStep& step, const SymMatrix& belief_cov,
                          const RobustConfig& cfg, const SolverOptions& opts = {},
                          const Vector& x_hat_prev = {}, SolveTrace* trace = nullptr);

struct KktReport {
  bool pinned = false;        // eps == 0, no stationarity to check
  double stationarity = 0.0;  // ||grad F + sum lambda_i grad c_i||
  double grad_norm = 0.0;     // ||grad F||
  Vector multipliers;         // lambda >= 0: ball, then pivots of B̄, D̄, Σ̄
  Vector slacks;
  Vector complementarity;     // lambda_i * c_i
};

/// Multipliers fit by nonnegative least squares in the free lower-triangular
/// coordinates of the three matrices.
KktReport verify_kkt(const RobustSolution& solution, const ModelStep& step,
                     const SymMatrix& belief_cov, const RobustConfig& cfg);

}  // namespace drkf
