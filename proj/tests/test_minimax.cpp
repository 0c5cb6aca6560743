#include <doctest.h>

#include <array>
#include <functional>

#include "drkf/minimax.hpp"
#include "drkf/statespace.hpp"
#include "testing.hpp"

using namespace drkf;
using drkf::testing::Rng;

namespace {

ModelStep scalar_step(double a, double c, double b, double d) {
  return {Matrix::Constant(1, 1, a), Matrix::Constant(1, 1, c), SymMatrix::scalar(b),
          SymMatrix::scalar(d)};
}

CandidateParams scalar_cand(double b, double d, double s) {
  return {SymMatrix::scalar(b), SymMatrix::scalar(d), SymMatrix::scalar(s)};
}

// Central differences of f along every symmetric unit direction of each block,
// laid out as (B̄ entries, D̄ entries, Σ̄ entries) with i >= j.
Vector fd_gradient(const std::function<double(const CandidateParams&)>& f,
                   const CandidateParams& x, double h) {
  std::vector<double> out;
  for (int b = 0; b < 3; ++b) {
    const SymMatrix& blk = b == 0 ? x.B_bar : (b == 1 ? x.D_bar : x.Sigma_bar);
    const Index n = blk.dim();
    for (Index j = 0; j < n; ++j) {
      for (Index i = j; i < n; ++i) {
        const Matrix e = testing::sym_unit(n, i, j) * (i == j ? 1.0 : 0.5);
        CandidateParams p = x, m = x;
        SymMatrix& bp = b == 0 ? p.B_bar : (b == 1 ? p.D_bar : p.Sigma_bar);
        SymMatrix& bm = b == 0 ? m.B_bar : (b == 1 ? m.D_bar : m.Sigma_bar);
        bp = SymMatrix(blk.mat() + h * e);
        bm = SymMatrix(blk.mat() - h * e);
        out.push_back((f(p) - f(m)) / (2 * h));
      }
    }
  }
  return Eigen::Map<Vector>(out.data(), static_cast<Index>(out.size()));
}

// The same layout for an analytic full-matrix gradient: the derivative along
// (E_ij + E_ji)/2 is G_ij for symmetric G.
Vector flatten(const ParamsGradient& g) {
  std::vector<double> out;
  for (const SymMatrix* blk : {&g.dB, &g.dD, &g.dSigma}) {
    for (Index j = 0; j < blk->dim(); ++j) {
      for (Index i = j; i < blk->dim(); ++i) out.push_back((*blk)(i, j));
    }
  }
  return Eigen::Map<Vector>(out.data(), static_cast<Index>(out.size()));
}

double vec_rel(const Vector& a, const Vector& b) {
  return (a - b).norm() / std::max({1.0, a.norm(), b.norm()});
}

}  // namespace

TEST_SUITE("minimax") {
  TEST_CASE("objective_F examples") {
    const ModelStep s = scalar_step(1, 1, 1, 1);
    CHECK(objective_F(s, scalar_cand(1, 1, 1)) == doctest::Approx(2.0 / 3.0));

    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
      const ModelStep st = rng.step(rng.integer(1, 4), rng.integer(1, 3));
      const GaussianBelief prior{rng.gaussian(st.n(), 1), rng.pd(st.n())};
      const auto post = kalman_update(predict_joint(st, prior), st.n(), rng.gaussian(st.m(), 1));
      CHECK(objective_F(st, CandidateParams::nominal(st, prior.cov)) ==
            doctest::Approx(post.cov.trace()).epsilon(1e-10));
    }

    ModelStep blind = rng.step(3, 2);
    blind.C.setZero();
    const CandidateParams c = rng.candidate(3, 2);
    CHECK(objective_F(blind, c) ==
          doctest::Approx((blind.A * c.Sigma_bar.mat() * blind.A.transpose()).trace() +
                          c.B_bar.trace()));
  }

  TEST_CASE("grad_F examples") {
    Rng rng(2);
    ModelStep blind = rng.step(3, 2);
    blind.C.setZero();
    const ParamsGradient g0 = grad_F(blind, rng.candidate(3, 2));
    CHECK(g0.dB.mat().isApprox(Matrix::Identity(3, 3)));
    CHECK(g0.dD.mat().isZero());
    CHECK(g0.dSigma.mat().isApprox(blind.A.transpose() * blind.A));

    const ParamsGradient gs = grad_F(scalar_step(1, 1, 1, 1), scalar_cand(1, 1, 1));
    CHECK(gs.dD(0, 0) == doctest::Approx(4.0 / 9.0));
    // dF/dB̄ = (1 - G C)^2 = 1/9 and dF/dΣ̄ = A^2 (1 - G C)^2 in the scalar case.
    CHECK(gs.dB(0, 0) == doctest::Approx(1.0 / 9.0));
    CHECK(gs.dSigma(0, 0) == doctest::Approx(1.0 / 9.0));
  }

  TEST_CASE("grad_F matches finite differences") {
    Rng rng(3);
    for (int i = 0; i < 30; ++i) {
      const ModelStep s = rng.step(3, 2);
      const CandidateParams x = rng.candidate(3, 2);
      const Vector fd =
          fd_gradient([&](const CandidateParams& p) { return objective_F(s, p); }, x, 1e-5);
      CHECK(vec_rel(fd, flatten(grad_F(s, x))) < 1e-4);
    }
  }

  TEST_CASE("grad_w examples and finite differences") {
    const ModelStep s = scalar_step(1, 1, 1, 1);
    const SymMatrix sigma = SymMatrix::scalar(1);
    const ParamsGradient at_nom = grad_w(s, scalar_cand(1, 1, 1), sigma);
    CHECK(std::abs(at_nom.dSigma(0, 0)) < 1e-12);
    CHECK(std::abs(at_nom.dB(0, 0)) < 1e-12);
    CHECK(std::abs(at_nom.dD(0, 0)) < 1e-12);
    CHECK(grad_w(s, scalar_cand(1, 1, 4), sigma).dSigma(0, 0) == doctest::Approx(1.5));

    Rng rng(4);
    for (int i = 0; i < 30; ++i) {
      const ModelStep st = rng.step(rng.integer(1, 3), rng.integer(1, 2));
      const SymMatrix cov = rng.pd(st.n());
      const CandidateParams x = rng.candidate(st.n(), st.m());
      for (BallKind kind : {BallKind::kBicausal, BallKind::kJoint}) {
        const BallDistance w(st, cov, kind);
        const Vector fd = fd_gradient([&](const CandidateParams& p) { return w.value(p); }, x, 1e-5);
        CHECK(vec_rel(fd, flatten(grad_w(st, x, cov, kind))) < 1e-4);
      }
    }
  }

  TEST_CASE("grad_w with a nearly singular nominal noise block") {
    // Differences of the closed-form scalar distance; the eigen-based value
    // is too noisy at this conditioning for finite differences.
    const testing::ScalarProblem p{0.8, 1.0, 1.0, 1e-6, 0.5};
    const ModelStep s = scalar_step(p.a, p.c, p.b, p.d);
    const SymMatrix sigma = SymMatrix::scalar(p.sigma);
    const double h = 1e-8;
    for (const auto& [bb, db, sb] : {std::array<double, 3>{1.0, 1e-6, 0.5},
                                     std::array<double, 3>{1.3, 2e-6, 0.7}}) {
      const ParamsGradient g = grad_w(s, scalar_cand(bb, db, sb), sigma);
      CHECK(g.dB(0, 0) == doctest::Approx((p.w(bb + h, db, sb) - p.w(bb - h, db, sb)) / (2 * h)).epsilon(1e-4));
      CHECK(g.dD(0, 0) == doctest::Approx((p.w(bb, db + h, sb) - p.w(bb, db - h, sb)) / (2 * h)).epsilon(1e-4));
      CHECK(g.dSigma(0, 0) == doctest::Approx((p.w(bb, db, sb + h) - p.w(bb, db, sb - h)) / (2 * h)).epsilon(1e-4));
    }
  }

  TEST_CASE("Hessian identity") {
    const ModelStep s = scalar_step(1, 1, 1, 1);
    const HessianCheck zero = hessian_identity_check(
        s, scalar_cand(1, 1, 1), {SymMatrix::zero(1), SymMatrix::zero(1), SymMatrix::zero(1)});
    CHECK(zero.lhs == 0.0);
    CHECK(zero.rhs == 0.0);
    const HessianCheck one = hessian_identity_check(s, scalar_cand(1, 1, 1), scalar_cand(1, 1, 1));
    CHECK(testing::rel_err(one.lhs, one.rhs) < 1e-4);

    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
      const ModelStep st = rng.step(3, 2);
      const CandidateParams x = rng.candidate(3, 2);
      const CandidateParams dir{rng.psd_rank(3, 2), rng.psd_rank(2, 1), rng.psd_rank(3, 3)};
      const HessianCheck h = hessian_identity_check(st, x, dir);
      CHECK(h.rhs >= -1e-8);
      CHECK(h.lhs >= -1e-8);
      CHECK(std::abs(h.lhs - h.rhs) <= 1e-4 * std::max(1.0, std::abs(h.rhs)));
    }
  }

  TEST_CASE("hessian_F is the second derivative of F") {
    Rng rng(6);
    const ModelStep st = rng.step(2, 2);
    const CandidateParams x = rng.candidate(2, 2);
    const std::vector<CandidateParams> dirs{
        {rng.pd(2), SymMatrix::zero(2), SymMatrix::zero(2)},
        {SymMatrix::zero(2), rng.pd(2), SymMatrix::zero(2)},
        {rng.psd_rank(2, 1), rng.pd(2), rng.pd(2)}};
    const Matrix h = hessian_F(st, MinimaxTerms::compute(st, x), dirs);
    const double eps = 1e-4;
    auto at = [&](double s, double t, std::size_t u, std::size_t v) {
      const CandidateParams p{x.B_bar + dirs[u].B_bar * s + dirs[v].B_bar * t,
                              x.D_bar + dirs[u].D_bar * s + dirs[v].D_bar * t,
                              x.Sigma_bar + dirs[u].Sigma_bar * s + dirs[v].Sigma_bar * t};
      return objective_F(st, p);
    };
    for (std::size_t u = 0; u < dirs.size(); ++u) {
      for (std::size_t v = 0; v < dirs.size(); ++v) {
        const double fd = (at(eps, eps, u, v) - at(eps, -eps, u, v) - at(-eps, eps, u, v) +
                           at(-eps, -eps, u, v)) /
                          (4 * eps * eps);
        CHECK(fd == doctest::Approx(h(u, v)).epsilon(1e-4));
      }
    }
  }

  TEST_CASE("F is midpoint concave") {
    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
      const ModelStep st = rng.step(rng.integer(1, 3), rng.integer(1, 2));
      const CandidateParams x = rng.candidate(st.n(), st.m());
      const CandidateParams y = rng.candidate(st.n(), st.m());
      const CandidateParams mid{(x.B_bar + y.B_bar) * 0.5, (x.D_bar + y.D_bar) * 0.5,
                                (x.Sigma_bar + y.Sigma_bar) * 0.5};
      CHECK(objective_F(st, mid) >= 0.5 * (objective_F(st, x) + objective_F(st, y)) - 1e-9);
    }
  }

  TEST_CASE("constraints examples") {
    Rng rng(8);
    const ModelStep st = rng.step(3, 2);
    const SymMatrix cov = rng.pd(3);
    RobustConfig cfg;
    cfg.radius = 0.7;
    const CandidateParams nom = CandidateParams::nominal(st, cov);
    const ConstraintValues cv = constraints(st, nom, cov, cfg);
    CHECK(cv.ball == doctest::Approx(0.7).epsilon(1e-9));
    CHECK(cv.d_B.isApprox((ldl_diagonals(st.B).values.array() - cfg.d_floor).matrix()));
    CHECK(cv.d_D.isApprox((ldl_diagonals(st.D).values.array() - cfg.delta).matrix()));
    CHECK(cv.d_Sigma.isApprox((ldl_diagonals(cov).values.array() - cfg.d_floor).matrix()));

    cfg.radius = 0.0;
    CHECK(constraints(st, nom, cov, cfg).ball >= -1e-9);
    CHECK(constraints(st, rng.near(nom, 0.1), cov, cfg).ball < 0.0);

    const ModelStep s2{Matrix::Identity(2, 2), Matrix::Identity(1, 2), SymMatrix::identity(2),
                       SymMatrix::scalar(1)};
    CandidateParams bad = CandidateParams::nominal(s2, SymMatrix::identity(2));
    bad.B_bar = SymMatrix(Matrix{{1, 2}, {2, 1}});
    const ConstraintValues cb = constraints(s2, bad, SymMatrix::identity(2), cfg);
    CHECK(cb.d_B(1) == doctest::Approx(-3.0 - cfg.d_floor));
    CHECK(cb.min_slack() < 0.0);

    bad.B_bar = SymMatrix(Matrix{{0, 1}, {1, 1}});
    CHECK(constraints(s2, bad, SymMatrix::identity(2), cfg).d_B(0) == -std::numeric_limits<double>::infinity());
  }

  TEST_CASE("robust_gain and posterior_cov_robust examples") {
    const ModelStep s = scalar_step(1, 1, 1, 1);
    const LinearEstimator e = robust_gain(scalar_cand(1, 1, 1), s, Vector::Constant(1, 0.9));
    CHECK(e.G(0, 0) == doctest::Approx(2.0 / 3.0));
    CHECK(e.g(0) == doctest::Approx(0.3));
    CHECK(robust_gain(scalar_cand(1, 1, 1), s, Vector::Zero(1)).g(0) == 0.0);

    const CandidateParams worst = scalar_cand(4, 1, 1);
    CHECK(posterior_cov_robust(worst, s).trace() == doctest::Approx(objective_F(s, worst)));

    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
      const ModelStep st = rng.step(rng.integer(1, 4), rng.integer(1, 3));
      const GaussianBelief prior{rng.gaussian(st.n(), 1), rng.pd(st.n())};
      const Vector y = rng.gaussian(st.m(), 1);
      const auto post = kalman_update(predict_joint(st, prior), st.n(), y);
      const CandidateParams nom = CandidateParams::nominal(st, prior.cov);
      const LinearEstimator est = robust_gain(nom, st, prior.mean);
      CHECK(((est.G * y + est.g) - post.mean).norm() < 1e-10 * std::max(1.0, post.mean.norm()));
      CHECK(testing::rel_err(posterior_cov_robust(nom, st).mat(), post.cov.mat()) < 1e-10);
    }

    ModelStep blind = rng.step(2, 1);
    blind.C.setZero();
    const CandidateParams c = rng.candidate(2, 1);
    CHECK(testing::rel_err(posterior_cov_robust(c, blind).mat(),
                           blind.A * c.Sigma_bar.mat() * blind.A.transpose() + c.B_bar.mat()) <
          1e-14);
  }

  TEST_CASE("config validation and mode names") {
    RobustConfig cfg;
    cfg.radius = -1;
    CHECK_THROWS_AS(cfg.validate(), Error);
    CHECK(parse_mode("cot") == RobustMode::kCot);
    CHECK(parse_mode("em") == RobustMode::kNonrobust);
    CHECK_THROWS_AS(parse_mode("x"), Error);
  }
}
