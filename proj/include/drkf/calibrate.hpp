#pragma once

// EM estimation of static noise covariances (B, D) with the dynamics A_t, C_t
// known. E-step: Kalman filter + RTS smoother per trajectory; M-step: closed
// form from the pooled smoothed second moments.

#include <optional>
#include <vector>

#include "drkf/statespace.hpp"

namespace drkf {

/// Smoothed moments of x_0..x_T (index 0 is the initial state).
struct SmoothedMoments {
  std::vector<Vector> means;
  std::vector<SymMatrix> covs;
  /// lag_one[t] = Cov(x_t, x_{t-1} | y_{1:T}) for t = 1..T; lag_one[0] is unused.
  std::vector<Matrix> lag_one;
  double loglik = 0.0;  // log p(y_{1:T}) under the model
};

SmoothedMoments smoother(const StateSpaceModel& model, const std::vector<Vector>& observations,
                         const GaussianBelief& init);

double log_likelihood(const StateSpaceModel& model, const std::vector<Vector>& observations,
                      const GaussianBelief& init);

struct EmOptions {
  int max_em_iters = 50;
  double loglik_rel_tol = 1e-6;
  std::optional<SymMatrix> init_B;  // identity when unset
  std::optional<SymMatrix> init_D;
  int jobs = 1;

  void validate() const;
};

struct EmResult {
  SymMatrix B_hat;
  SymMatrix D_hat;
  std::vector<double> loglik_path;  // log-likelihood at each E-step
  int iters = 0;
  bool converged = false;
};

/// `skeleton` supplies A_t and C_t; its noise covariances are ignored.
EmResult em_fit(const StateSpaceModel& skeleton, const GaussianBelief& init,
                const std::vector<std::vector<Vector>>& trajectories, const EmOptions& opts = {});

}  // namespace drkf
