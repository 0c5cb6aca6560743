#include "drkf/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <thread>

namespace drkf {

SmoothedMoments smoother(const StateSpaceModel& model, const std::vector<Vector>& observations,
                         const GaussianBelief& init) {
  const std::size_t T = observations.size();
  if (T == 0) throw Error(ErrorCode::kInvalidArgument, "no observations");
  const Index n = model.n();

  // Forward pass, keeping the filtered and predicted state moments.
  std::vector<Vector> filt_mean(T + 1);
  std::vector<Matrix> filt_cov(T + 1);
  std::vector<Matrix> pred_cov(T + 1);
  std::vector<Matrix> a(T + 1);
  filt_mean[0] = init.mean;
  filt_cov[0] = init.cov.mat();
  SmoothedMoments out;
  GaussianBelief belief = init;
  for (std::size_t t = 1; t <= T; ++t) {
    const ModelStep s = model.step(static_cast<int>(t));
    const GaussianMoments j = predict_joint(s, belief);
    const Index m = s.m();
    const Vector innov = observations[t - 1] - j.mean.tail(m);
    const Matrix vyy = j.cov.mat().bottomRightCorner(m, m);
    const Eigen::LLT<Matrix> llt(vyy);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::kSingularVyy, "V_yy not PD");
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    out.loglik += -0.5 * (static_cast<double>(m) * std::log(2.0 * std::numbers::pi) + logdet +
                          innov.dot(llt.solve(innov)));

    belief = kalman_update(j, n, observations[t - 1]);
    a[t] = s.A;
    pred_cov[t] = j.cov.mat().topLeftCorner(n, n);
    filt_mean[t] = belief.mean;
    filt_cov[t] = belief.cov.mat();
  }

  // Backward (RTS) pass.
  out.means.assign(T + 1, Vector());
  out.covs.assign(T + 1, SymMatrix());
  out.lag_one.assign(T + 1, Matrix());
  out.means[T] = filt_mean[T];
  out.covs[T] = SymMatrix(filt_cov[T]);
  for (std::size_t k = T; k-- > 0;) {
    // J_k = Σ_k|k A_{k+1}^T P_{k+1}^{-1}
    const Matrix gain_t =
        solve_spd(pred_cov[k + 1], a[k + 1] * filt_cov[k], ErrorCode::kDegenerateData);
    const Matrix gain = gain_t.transpose();
    out.means[k] = filt_mean[k] + gain * (out.means[k + 1] - a[k + 1] * filt_mean[k]);
    out.covs[k] = SymMatrix(filt_cov[k] + gain * (out.covs[k + 1].mat() - pred_cov[k + 1]) *
                                              gain.transpose());
    out.lag_one[k + 1] = out.covs[k + 1].mat() * gain.transpose();
  }
  return out;
}

double log_likelihood(const StateSpaceModel& model, const std::vector<Vector>& observations,
                      const GaussianBelief& init) {
  GaussianBelief belief = init;
  double ll = 0.0;
  for (std::size_t t = 1; t <= observations.size(); ++t) {
    const GaussianMoments j = predict_joint(model, static_cast<int>(t), belief);
    const Index m = model.m();
    const Vector innov = observations[t - 1] - j.mean.tail(m);
    const Eigen::LLT<Matrix> llt(j.cov.mat().bottomRightCorner(m, m));
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::kSingularVyy, "V_yy not PD");
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    ll += -0.5 * (static_cast<double>(m) * std::log(2.0 * std::numbers::pi) + logdet +
                  innov.dot(llt.solve(innov)));
    belief = kalman_update(j, model.n(), observations[t - 1]);
  }
  return ll;
}

void EmOptions::validate() const {
  if (max_em_iters < 1) throw Error(ErrorCode::kInvalidArgument, "max_em_iters must be >= 1");
  if (!(loglik_rel_tol >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "loglik_rel_tol must be >= 0");
  }
  if (jobs < 1) throw Error(ErrorCode::kInvalidArgument, "jobs must be >= 1");
  for (const auto* m : {&init_B, &init_D}) {
    if (m->has_value() && !(min_eigenvalue(**m) > 0.0)) {
      throw Error(ErrorCode::kNotPD, "EM initial covariance must be positive definite");
    }
  }
}

namespace {

struct Sufficient {
  Matrix b_sum;
  Matrix d_sum;
  double steps = 0.0;
  double loglik = 0.0;
};

Sufficient e_step(const StateSpaceModel& model, const std::vector<Vector>& ys,
                  const GaussianBelief& init) {
  const SmoothedMoments sm = smoother(model, ys, init);
  const Index n = model.n();
  const Index m = model.m();
  Sufficient s{Matrix::Zero(n, n), Matrix::Zero(m, m), static_cast<double>(ys.size()), sm.loglik};
  for (std::size_t t = 1; t <= ys.size(); ++t) {
    const ModelStep st = model.step(static_cast<int>(t));
    const Matrix& a = st.A;
    const Matrix& c = st.C;
    const Vector e = sm.means[t] - a * sm.means[t - 1];
    const Matrix al = a * sm.lag_one[t].transpose();
    s.b_sum += e * e.transpose() + sm.covs[t].mat() - al - al.transpose() +
               a * sm.covs[t - 1].mat() * a.transpose();
    const Vector r = ys[t - 1] - c * sm.means[t];
    s.d_sum += r * r.transpose() + c * sm.covs[t].mat() * c.transpose();
  }
  return s;
}

SymMatrix repair_pd(const Matrix& x, const char* what) {
  SymMatrix s(x);
  const double lo = min_eigenvalue(s);
  const double floor = 1e-10 * std::max(1.0, std::abs(s.trace()));
  if (lo > floor) return s;
  if (lo < -1e-6 * std::max(1.0, std::abs(s.trace()))) {
    throw Error(ErrorCode::kDegenerateData,
                std::string("EM estimate of ") + what + " lost positive definiteness");
  }
  return SymMatrix(s.mat() + (floor - lo) * Matrix::Identity(s.dim(), s.dim()));
}

}  // namespace

EmResult em_fit(const StateSpaceModel& skeleton, const GaussianBelief& init,
                const std::vector<std::vector<Vector>>& trajectories, const EmOptions& opts) {
  opts.validate();
  if (trajectories.empty()) throw Error(ErrorCode::kInvalidArgument, "no training trajectories");
  for (const auto& tr : trajectories) {
    if (tr.size() < 2) throw Error(ErrorCode::kInvalidArgument, "trajectories need length >= 2");
  }
  const Index n = skeleton.n();
  const Index m = skeleton.m();

  EmResult res;
  res.B_hat = opts.init_B.value_or(SymMatrix::identity(n));
  res.D_hat = opts.init_D.value_or(SymMatrix::identity(m));
  if (res.B_hat.dim() != n || res.D_hat.dim() != m) {
    throw Error(ErrorCode::kDimMismatch, "EM initial covariance dims");
  }

  std::vector<Sufficient> stats(trajectories.size());
  for (int it = 0; it < opts.max_em_iters; ++it) {
    const StateSpaceModel model = skeleton.with_noise(res.B_hat, res.D_hat);
    const std::size_t jobs = std::min<std::size_t>(opts.jobs, trajectories.size());
    if (jobs <= 1) {
      for (std::size_t k = 0; k < trajectories.size(); ++k) {
        stats[k] = e_step(model, trajectories[k], init);
      }
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(jobs);
      for (std::size_t w = 0; w < jobs; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t k = w; k < trajectories.size(); k += jobs) {
              stats[k] = e_step(model, trajectories[k], init);
            }
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }

    // Reduce in trajectory order so results do not depend on `jobs`.
    Matrix b_sum = Matrix::Zero(n, n);
    Matrix d_sum = Matrix::Zero(m, m);
    double steps = 0.0;
    double ll = 0.0;
    for (const auto& s : stats) {
      b_sum += s.b_sum;
      d_sum += s.d_sum;
      steps += s.steps;
      ll += s.loglik;
    }
    const double prev = res.loglik_path.empty() ? 0.0 : res.loglik_path.back();
    res.loglik_path.push_back(ll);
    res.iters = it + 1;
    if (res.loglik_path.size() > 1 &&
        std::abs(ll - prev) <= opts.loglik_rel_tol * std::max(1.0, std::abs(prev))) {
      res.converged = true;
      break;
    }
    res.B_hat = repair_pd(b_sum / steps, "B");
    res.D_hat = repair_pd(d_sum / steps, "D");
  }
  return res;
}

}  // namespace drkf
