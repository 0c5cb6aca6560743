#include <doctest.h>

#include <sstream>

#include "drkf/robustfilter.hpp"
#include "testing.hpp"

using namespace drkf;
using drkf::testing::Rng;

namespace {

RobustConfig config(double radius, RobustMode mode = RobustMode::kCot) {
  RobustConfig cfg;
  cfg.radius = radius;
  cfg.mode = mode;
  return cfg;
}

StateSpaceModel tracking_model() {
  const Matrix a{{1, 0, 1, 0}, {0, 1, 0, 1}, {0, 0, 1, 0}, {0, 0, 0, 1}};
  const Matrix c{{1, 0, 0, 0}, {0, 1, 0, 0}};
  const SymMatrix b(Matrix{{1.0 / 3, 0, 0.5, 0}, {0, 1.0 / 3, 0, 0.5}, {0.5, 0, 1, 0}, {0, 0.5, 0, 1}});
  return StateSpaceModel::time_invariant(a, c, b, SymMatrix::identity(2) * 2.0);
}

}  // namespace

TEST_SUITE("robustfilter") {
  TEST_CASE("nonrobust mode is the Kalman filter") {
    const auto model = tracking_model();
    const auto traj = simulate(model, 40, 5, Vector::Zero(4));
    const auto init = GaussianBelief::standard(4);
    const FilterRun run = run_filter(model, traj.observations, init, config(1.0, RobustMode::kNonrobust));
    const auto ref = kalman_filter(model, traj.observations, init);
    REQUIRE(run.ok());
    REQUIRE(run.beliefs.size() == ref.size());
    CHECK(run.solutions.empty());
    for (std::size_t t = 0; t < ref.size(); ++t) {
      CHECK(run.beliefs[t].mean == ref[t].mean);
      CHECK(run.beliefs[t].cov.mat() == ref[t].cov.mat());
    }
  }

  TEST_CASE("zero radius is the Kalman step") {
    Rng rng(1);
    const auto model = tracking_model();
    const GaussianBelief prior{rng.gaussian(4, 1), rng.pd(4)};
    const Vector y = rng.gaussian(2, 1);
    const auto [post, sol] = robust_step(model, 1, prior, y, config(0.0));
    const GaussianBelief ref = kalman_update(predict_joint(model, 1, prior), 4, y);
    CHECK(sol.pinned);
    CHECK((post.mean - ref.mean).norm() < 1e-8);
    CHECK(testing::rel_err(post.cov.mat(), ref.cov.mat()) < 1e-8);
    CHECK((sol.gain * y + sol.intercept - ref.mean).norm() < 1e-8);
  }

  TEST_CASE("robust posterior is more pessimistic") {
    const auto model = StateSpaceModel::time_invariant(Matrix::Identity(1, 1), Matrix::Identity(1, 1),
                                                       SymMatrix::scalar(1), SymMatrix::scalar(1));
    const GaussianBelief prior = GaussianBelief::standard(1);
    const Vector y = Vector::Constant(1, 0.7);
    const double nominal = kalman_update(predict_joint(model, 1, prior), 1, y).cov.trace();
    CHECK(nominal == doctest::Approx(2.0 / 3.0));
    const testing::ScalarProblem p{1, 1, 1, 1, 1};
    const double grid = p.grid_max(0.5, 0.01, 0.02, 250);
    for (RobustMode mode : {RobustMode::kCot, RobustMode::kOt}) {
      const auto [post, sol] = robust_step(model, 1, prior, y, config(0.5, mode));
      CHECK(post.cov.trace() > nominal);
      CHECK(post.cov.trace() == doctest::Approx(sol.value).epsilon(1e-10));
      CHECK(sol.value >= nominal - 1e-12);
      if (mode == RobustMode::kCot) CHECK(testing::rel_err(sol.value, grid) < 1e-2);
    }
  }

  TEST_CASE("propagation toggle only changes the covariance") {
    Rng rng(2);
    const auto model = tracking_model();
    const GaussianBelief prior{rng.gaussian(4, 1), rng.pd(4)};
    const Vector y = rng.gaussian(2, 1);
    RobustConfig wc = config(0.5);
    RobustConfig nom = wc;
    nom.propagate = Propagation::kNominal;
    const auto [a, sa] = robust_step(model, 1, prior, y, wc);
    const auto [b, sb] = robust_step(model, 1, prior, y, nom);
    CHECK(a.mean == b.mean);
    const GaussianBelief ref = kalman_update(predict_joint(model, 1, prior), 4, y);
    CHECK(b.cov.mat() == ref.cov.mat());
    CHECK(a.cov.trace() >= b.cov.trace() - 1e-10);
  }

  TEST_CASE("cot run on the tracking model stays PSD") {
    const auto model = tracking_model();
    const auto traj = simulate(model, 100, 11, Vector::Zero(4));
    const FilterRun run = run_filter(model, traj.observations, GaussianBelief::standard(4), config(1.0));
    REQUIRE(run.ok());
    REQUIRE(run.beliefs.size() == 100);
    REQUIRE(run.solutions.size() == 100);
    const auto nominal = kalman_filter(model, traj.observations, GaussianBelief::standard(4));
    GaussianBelief prev = GaussianBelief::standard(4);
    for (std::size_t t = 0; t < 100; ++t) {
      CHECK(min_eigenvalue(run.beliefs[t].cov) >= -1e-9);
      // worst case over a ball containing the nominal, for the belief actually used
      const double nominal_trace =
          kalman_update(predict_joint(model, static_cast<int>(t) + 1, prev), 4, traj.observations[t])
              .cov.trace();
      CHECK(run.solutions[t].value >= nominal_trace - 1e-8);
      prev = run.beliefs[t];
    }
    CHECK(run.beliefs.back().cov.trace() > nominal.back().cov.trace());

    std::ostringstream os;
    write_filter_csv(os, run);
    const std::string s = os.str();
    CHECK(s.rfind("t,xhat_1,xhat_2,xhat_3,xhat_4,tr_Sigma,worst_value,solver_iters\n", 0) == 0);
    CHECK(std::count(s.begin(), s.end(), '\n') == 101);

    const FilterRun again = run_filter(model, traj.observations, GaussianBelief::standard(4), config(1.0));
    CHECK(again.beliefs.back().mean == run.beliefs.back().mean);
  }

  TEST_CASE("first-step value is monotone in the radius") {
    Rng rng(3);
    const auto model = tracking_model();
    const GaussianBelief prior{rng.gaussian(4, 1), rng.pd(4)};
    const Vector y = rng.gaussian(2, 1);
    SolverOptions opts;
    opts.max_iters = 300;
    double prev = 0.0;
    for (double eps : {0.0, 0.25, 0.5, 1.0, 2.0}) {
      const double v = robust_step(model, 1, prior, y, config(eps), opts).second.value;
      CHECK(v >= prev - 1e-8);
      prev = v;
    }
  }

  TEST_CASE("errors keep the partial run") {
    const auto model = StateSpaceModel(
        1, 1, [](int) { return Matrix::Identity(1, 1); }, [](int) { return Matrix::Identity(1, 1); },
        [](int t) { return SymMatrix::scalar(t < 3 ? 1.0 : -50.0); },
        [](int) { return SymMatrix::scalar(1.0); });
    const std::vector<Vector> ys(5, Vector::Zero(1));
    const FilterRun run = run_filter(model, ys, GaussianBelief::standard(1), config(0.2));
    CHECK_FALSE(run.ok());
    CHECK(run.beliefs.size() == 2);
    CHECK(run.solutions.size() == 2);
    CHECK_THROWS_AS(robust_step(tracking_model(), 1, GaussianBelief::standard(4), Vector::Zero(3),
                                config(0.2)),
                    Error);
  }
}
