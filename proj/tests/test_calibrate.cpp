#include <doctest.h>

#include <numbers>

#include "drkf/calibrate.hpp"
#include "testing.hpp"

using namespace drkf;
using drkf::testing::Rng;

namespace {

// Batch oracle: (x_0..x_T, y_1..y_T) is one Gaussian vector, linear in the
// independent draws (x_0, w_1..w_T, v_1..v_T). Conditioning on all y gives
// the smoothed moments directly.
struct Batch {
  Vector x_mean;  // (T+1) n
  Matrix x_cov;
  double loglik = 0.0;
};

Batch batch_smoother(const Matrix& a, const Matrix& c, const SymMatrix& b, const SymMatrix& d,
                     const GaussianBelief& init, const std::vector<Vector>& ys) {
  const Index n = a.rows(), m = c.rows();
  const Index T = static_cast<Index>(ys.size());
  const Index nz = n + T * n + T * m;
  Matrix z_cov = Matrix::Zero(nz, nz);
  Vector z_mean = Vector::Zero(nz);
  z_cov.topLeftCorner(n, n) = init.cov.mat();
  z_mean.head(n) = init.mean;
  for (Index t = 0; t < T; ++t) {
    z_cov.block(n + t * n, n + t * n, n, n) = b.mat();
    z_cov.block(n + T * n + t * m, n + T * n + t * m, m, m) = d.mat();
  }
  // x_t = A^t x_0 + sum_{k<=t} A^{t-k} w_k ; y_t = C x_t + v_t
  Matrix lx = Matrix::Zero((T + 1) * n, nz);
  lx.block(0, 0, n, n) = Matrix::Identity(n, n);
  for (Index t = 1; t <= T; ++t) {
    lx.block(t * n, 0, n, nz) = a * lx.block((t - 1) * n, 0, n, nz);
    lx.block(t * n, n + (t - 1) * n, n, n) += Matrix::Identity(n, n);
  }
  Matrix ly = Matrix::Zero(T * m, nz);
  for (Index t = 1; t <= T; ++t) {
    ly.block((t - 1) * m, 0, m, nz) = c * lx.block(t * n, 0, n, nz);
    ly.block((t - 1) * m, n + T * n + (t - 1) * m, m, m) = Matrix::Identity(m, m);
  }
  const Vector mx = lx * z_mean, my = ly * z_mean;
  const Matrix sxx = lx * z_cov * lx.transpose();
  const Matrix sxy = lx * z_cov * ly.transpose();
  const Matrix syy = ly * z_cov * ly.transpose();
  Vector y(T * m);
  for (Index t = 0; t < T; ++t) y.segment(t * m, m) = ys[t];
  const Eigen::LDLT<Matrix> ldlt(syy);
  Batch out;
  out.x_mean = mx + sxy * ldlt.solve(y - my);
  out.x_cov = sxx - sxy * ldlt.solve(sxy.transpose());
  const double logdet = ldlt.vectorD().array().log().sum();
  out.loglik = -0.5 * (static_cast<double>(T * m) * std::log(2 * std::numbers::pi) + logdet +
                       (y - my).dot(ldlt.solve(y - my)));
  return out;
}

std::vector<std::vector<Vector>> simulate_many(const StateSpaceModel& model, int count, int length,
                                               std::uint64_t seed) {
  std::vector<std::vector<Vector>> out;
  for (int k = 0; k < count; ++k) {
    out.push_back(simulate(model, length, seed + k, Vector::Zero(model.n())).observations);
  }
  return out;
}

}  // namespace

TEST_SUITE("calibrate") {
  TEST_CASE("smoother matches the batch conditional") {
    Rng rng(1);
    for (int trial = 0; trial < 5; ++trial) {
      const Index n = rng.integer(1, 3), m = rng.integer(1, 2);
      const Matrix a = 0.7 * rng.gaussian(n, n), c = rng.gaussian(m, n);
      const SymMatrix b = rng.pd(n), d = rng.pd(m);
      const auto model = StateSpaceModel::time_invariant(a, c, b, d);
      const GaussianBelief init{rng.gaussian(n, 1), rng.pd(n)};
      std::vector<Vector> ys;
      for (int t = 0; t < 5; ++t) ys.push_back(rng.gaussian(m, 1));

      const SmoothedMoments sm = smoother(model, ys, init);
      const Batch bt = batch_smoother(a, c, b, d, init, ys);
      for (Index t = 0; t <= 5; ++t) {
        CHECK((sm.means[t] - bt.x_mean.segment(t * n, n)).norm() < 1e-9);
        CHECK(testing::rel_err(sm.covs[t].mat(), bt.x_cov.block(t * n, t * n, n, n)) < 1e-9);
        if (t > 0) {
          CHECK(testing::rel_err(sm.lag_one[t], bt.x_cov.block(t * n, (t - 1) * n, n, n)) < 1e-9);
        }
      }
      CHECK(sm.loglik == doctest::Approx(bt.loglik).epsilon(1e-10));
      CHECK(log_likelihood(model, ys, init) == doctest::Approx(bt.loglik).epsilon(1e-10));
    }
  }

  TEST_CASE("smoother examples") {
    Rng rng(2);
    const auto model = StateSpaceModel::time_invariant(0.9 * Matrix::Identity(2, 2),
                                                       rng.gaussian(1, 2), rng.pd(2), rng.pd(1));
    const GaussianBelief init = GaussianBelief::standard(2);
    const std::vector<Vector> one{rng.gaussian(1, 1)};
    const SmoothedMoments s1 = smoother(model, one, init);
    const auto f1 = kalman_filter(model, one, init);
    CHECK(s1.means[1] == f1[0].mean);
    CHECK(s1.covs[1].mat() == f1[0].cov.mat());

    const auto exact = StateSpaceModel::time_invariant(0.5 * Matrix::Identity(2, 2),
                                                       Matrix::Identity(2, 2), SymMatrix::identity(2),
                                                       SymMatrix::identity(2) * 1e-10);
    std::vector<Vector> ys;
    for (int t = 0; t < 6; ++t) ys.push_back(rng.gaussian(2, 1));
    const SmoothedMoments se = smoother(exact, ys, init);
    for (int t = 1; t <= 6; ++t) CHECK((se.means[t] - ys[t - 1]).norm() < 1e-6);

    const auto scalar = StateSpaceModel::time_invariant(Matrix::Constant(1, 1, 0.8),
                                                        Matrix::Constant(1, 1, 1.2),
                                                        SymMatrix::scalar(0.7), SymMatrix::scalar(1.5));
    std::vector<Vector> sy;
    for (int t = 0; t < 20; ++t) sy.push_back(rng.gaussian(1, 1));
    const SmoothedMoments ss = smoother(scalar, sy, GaussianBelief::standard(1));
    const auto sf = kalman_filter(scalar, sy, GaussianBelief::standard(1));
    for (int t = 1; t <= 20; ++t) CHECK(ss.covs[t](0, 0) <= sf[t - 1].cov(0, 0) + 1e-15);
  }

  TEST_CASE("EM recovers static covariances and increases the likelihood") {
    const Matrix a{{0.8, 0.2}, {0.0, 0.6}};
    const Matrix c{{1.0, 0.0}, {0.5, 1.0}};
    const SymMatrix b(Matrix{{1.0, 0.3}, {0.3, 0.6}});
    const SymMatrix d(Matrix{{0.5, 0.1}, {0.1, 0.4}});
    const auto truth = StateSpaceModel::time_invariant(a, c, b, d);
    const auto data = simulate_many(truth, 50, 200, 100);
    EmOptions opts;
    opts.max_em_iters = 300;
    opts.loglik_rel_tol = 1e-9;
    opts.jobs = 4;
    const EmResult r = em_fit(truth, GaussianBelief::standard(2), data, opts);
    CHECK(r.converged);
    CHECK(testing::rel_err(r.B_hat.mat(), b.mat()) < 0.10);
    CHECK((r.D_hat.mat() - d.mat()).norm() / d.mat().norm() < 0.10);
    for (std::size_t k = 1; k < r.loglik_path.size(); ++k) {
      CHECK(r.loglik_path[k] >= r.loglik_path[k - 1] - 1e-8);
    }
    CHECK(min_eigenvalue(r.B_hat) > 0.0);
    CHECK(min_eigenvalue(r.D_hat) > 0.0);

    opts.jobs = 1;
    opts.max_em_iters = 5;
    const EmResult s1 = em_fit(truth, GaussianBelief::standard(2), data, opts);
    opts.jobs = 3;
    const EmResult s3 = em_fit(truth, GaussianBelief::standard(2), data, opts);
    CHECK(s1.B_hat.mat() == s3.B_hat.mat());
    CHECK(s1.loglik_path == s3.loglik_path);
  }

  TEST_CASE("EM is monotone on short tracking-style runs") {
    const Matrix a{{1, 0, 1, 0}, {0, 1, 0, 1}, {0, 0, 1, 0}, {0, 0, 0, 1}};
    const Matrix c{{1, 0, 0, 0}, {0, 1, 0, 0}};
    const auto truth = StateSpaceModel::time_invariant(a, c, SymMatrix::identity(4) * 0.5,
                                                       SymMatrix::identity(2) * 2.0);
    const auto data = simulate_many(truth, 50, 10, 900);
    EmOptions opts;
    opts.loglik_rel_tol = 0.0;
    const EmResult r = em_fit(truth, GaussianBelief::standard(4), data, opts);
    REQUIRE(r.loglik_path.size() == 50);
    for (std::size_t k = 1; k < r.loglik_path.size(); ++k) {
      CHECK(r.loglik_path[k] >= r.loglik_path[k - 1] - 1e-8);
    }
  }

  TEST_CASE("more data gives better estimates") {
    const auto truth = StateSpaceModel::time_invariant(
        Matrix{{0.9, 0.2}, {0.0, 0.7}}, Matrix{{1.0, 0.5}}, SymMatrix(Matrix{{1.0, 0.3}, {0.3, 0.5}}),
        SymMatrix::scalar(0.8));
    EmOptions opts;
    opts.max_em_iters = 300;
    opts.loglik_rel_tol = 1e-10;
    auto err = [&](int count) {
      const auto data = simulate_many(truth, count, 50, 7);
      const EmResult r = em_fit(truth, GaussianBelief::standard(2), data, opts);
      return (r.B_hat.mat() - truth.step(1).B.mat()).norm() +
             (r.D_hat.mat() - truth.step(1).D.mat()).norm();
    };
    CHECK(err(100) < err(10));
  }

  TEST_CASE("uninformative data leaves B near its start") {
    const auto model = StateSpaceModel::time_invariant(Matrix::Identity(1, 1), Matrix::Identity(1, 1),
                                                       SymMatrix::scalar(1), SymMatrix::scalar(1e8));
    const std::vector<std::vector<Vector>> data{{Vector::Constant(1, 3.0), Vector::Constant(1, -2.0)}};
    EmOptions opts;
    opts.init_D = SymMatrix::scalar(1e8);
    opts.max_em_iters = 1;
    const EmResult one = em_fit(model, GaussianBelief::standard(1), data, opts);
    CHECK(one.B_hat(0, 0) == doctest::Approx(1.0).epsilon(1e-3));
    opts.max_em_iters = 50;
    const EmResult r = em_fit(model, GaussianBelief::standard(1), data, opts);
    CHECK(std::isfinite(r.B_hat(0, 0)));
    CHECK(r.B_hat(0, 0) > 0.0);
    CHECK(r.D_hat(0, 0) > 0.0);
  }

  TEST_CASE("input validation") {
    const auto model = StateSpaceModel::time_invariant(Matrix::Identity(1, 1), Matrix::Identity(1, 1),
                                                       SymMatrix::scalar(1), SymMatrix::scalar(1));
    CHECK_THROWS_AS(em_fit(model, GaussianBelief::standard(1), {}), Error);
    CHECK_THROWS_AS(em_fit(model, GaussianBelief::standard(1), {{Vector::Zero(1)}}), Error);
    EmOptions bad;
    bad.init_B = SymMatrix::scalar(-1);
    CHECK_THROWS_AS(bad.validate(), Error);
  }
}
