#pragma once

// Filtering recursion in three modes. Each robust step solves the worst-case
// problem around the current belief, applies the resulting linear estimator to
// y_t and carries a covariance forward (worst-case posterior by default).

#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "drkf/solver.hpp"
#include "drkf/statespace.hpp"

namespace drkf {

struct FilterRun {
  std::vector<GaussianBelief> beliefs;     // t = 1..T
  std::vector<RobustSolution> solutions;   // empty in nonrobust mode
  RobustMode mode = RobustMode::kCot;
  double radius = 0.0;
  std::vector<std::string> warnings;       // "t=<step>: <message>"
  std::optional<Error> error;              // set when the run stopped early

  bool ok() const { return !error.has_value(); }
};

/// One step. In nonrobust mode the solution is the pinned nominal. A solver
/// error falls back to the Kalman step and is reported in solution.warnings.
std::pair<GaussianBelief, RobustSolution> robust_step(const StateSpaceModel& model, int t,
                                                      const GaussianBelief& belief,
                                                      const Vector& y, const RobustConfig& cfg,
                                                      const SolverOptions& opts = {});

/// Errors that survive the fallback stop the run; everything computed up to
/// that step is kept and `error` is set.
FilterRun run_filter(const StateSpaceModel& model, const std::vector<Vector>& observations,
                     const GaussianBelief& init, const RobustConfig& cfg,
                     const SolverOptions& opts = {});

/// Header `t,xhat_1..xhat_n,tr_Sigma,worst_value,solver_iters`. Nonrobust rows
/// report tr_Sigma as the worst value and 0 iterations.
void write_filter_csv(std::ostream& out, const FilterRun& run);

}  // namespace drkf
