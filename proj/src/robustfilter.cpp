#include "drkf/robustfilter.hpp"

#include <ostream>

#include "drkf/csv.hpp"

namespace drkf {

namespace {

RobustSolution nominal_solution(const ModelStep& step, const GaussianBelief& belief,
                                const GaussianBelief& updated) {
  RobustSolution sol;
  sol.params = CandidateParams::nominal(step, belief.cov);
  const LinearEstimator est = robust_gain(sol.params, step, belief.mean);
  sol.gain = est.G;
  sol.intercept = est.g;
  sol.value = updated.cov.trace();
  sol.pinned = true;
  sol.converged = true;
  return sol;
}

}  // namespace

std::pair<GaussianBelief, RobustSolution> robust_step(const StateSpaceModel& model, int t,
                                                      const GaussianBelief& belief,
                                                      const Vector& y, const RobustConfig& cfg,
                                                      const SolverOptions& opts) {
  cfg.validate();
  if (y.size() != model.m()) throw Error(ErrorCode::kDimMismatch, "observation length");
  const ModelStep step = model.step(t);
  const Index n = model.n();

  // Same expression as kalman_filter so the nonrobust path matches it exactly.
  const GaussianBelief classic = kalman_update(predict_joint(model, t, belief), n, y);
  if (cfg.mode == RobustMode::kNonrobust || cfg.radius == 0.0) {
    return {classic, nominal_solution(step, belief, classic)};
  }

  RobustSolution sol;
  try {
    sol = solve_step(step, belief.cov, cfg, opts, belief.mean);
  } catch (const Error& e) {
    RobustSolution fb = nominal_solution(step, belief, classic);
    fb.converged = false;
    fb.warnings.push_back(std::string("SolverFallback: ") + e.what());
    return {classic, fb};
  }

  GaussianBelief next;
  next.mean = sol.gain * y + sol.intercept;
  next.cov = cfg.propagate == Propagation::kWorstCase ? posterior_cov_robust(sol.params, step)
                                                      : classic.cov;
  return {next, sol};
}

FilterRun run_filter(const StateSpaceModel& model, const std::vector<Vector>& observations,
                     const GaussianBelief& init, const RobustConfig& cfg,
                     const SolverOptions& opts) {
  cfg.validate();
  opts.validate();
  if (observations.empty()) throw Error(ErrorCode::kInvalidArgument, "no observations");
  if (init.mean.size() != model.n() || init.cov.dim() != model.n()) {
    throw Error(ErrorCode::kDimMismatch, "initial belief dims");
  }
  FilterRun run;
  run.mode = cfg.mode;
  run.radius = cfg.radius;
  run.beliefs.reserve(observations.size());
  GaussianBelief belief = init;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const int t = static_cast<int>(i) + 1;
    try {
      auto [next, sol] = robust_step(model, t, belief, observations[i], cfg, opts);
      for (const auto& w : sol.warnings) {
        run.warnings.push_back("t=" + std::to_string(t) + ": " + w);
      }
      belief = std::move(next);
      run.beliefs.push_back(belief);
      if (cfg.mode != RobustMode::kNonrobust) run.solutions.push_back(std::move(sol));
    } catch (const Error& e) {
      run.error = e;
      break;
    }
  }
  return run;
}

void write_filter_csv(std::ostream& out, const FilterRun& run) {
  if (run.beliefs.empty()) throw Error(ErrorCode::kInvalidArgument, "empty filter run");
  const Index n = run.beliefs.front().mean.size();
  std::vector<std::string> header{"t"};
  for (Index j = 1; j <= n; ++j) header.push_back("xhat_" + std::to_string(j));
  header.insert(header.end(), {"tr_Sigma", "worst_value", "solver_iters"});
  out << csv::join(header) << '\n';
  for (std::size_t i = 0; i < run.beliefs.size(); ++i) {
    const GaussianBelief& b = run.beliefs[i];
    std::vector<std::string> row{std::to_string(i + 1)};
    for (Index j = 0; j < n; ++j) row.push_back(csv::format(b.mean(j)));
    const double tr = b.cov.trace();
    row.push_back(csv::format(tr));
    if (i < run.solutions.size()) {
      row.push_back(csv::format(run.solutions[i].value));
      row.push_back(std::to_string(run.solutions[i].iterations));
    } else {
      row.push_back(csv::format(tr));
      row.push_back("0");
    }
    out << csv::join(row) << '\n';
  }
}

}  // namespace drkf
