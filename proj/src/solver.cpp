#include "drkf/solver.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <limits>
#include <optional>

#include "drkf/csv.hpp"

namespace drkf {

void SolverOptions::validate() const {
  if (max_iters < 1) throw Error(ErrorCode::kInvalidArgument, "max_iters must be >= 1");
  if (!(tolerance > 0.0)) throw Error(ErrorCode::kInvalidArgument, "tolerance must be > 0");
  if (!(initial_radius > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "initial_radius must be > 0");
  }
  if (!(barrier_init > 0.0)) throw Error(ErrorCode::kInvalidArgument, "barrier_init must be > 0");
  if (!(barrier_decay > 0.0 && barrier_decay < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "barrier_decay must be in (0, 1)");
  }
}

void SolveTrace::write_csv(std::ostream& out) const {
  out << "iter,F,min_slack,step_norm\n";
  for (const auto& r : rows) {
    out << r.iter << ',' << csv::format(r.F) << ',' << csv::format(r.min_slack) << ','
        << csv::format(r.step_norm) << '\n';
  }
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Free coordinates of the three symmetric blocks. Block b moves as
// X_b = X_b^0 + L_b Z_b L_b^T, Z_b assembled from its lower triangle, so
// z = 0 is the base point exactly.
class Coordinates {
 public:
  Coordinates(const CandidateParams& base, bool whiten) : base_(base) {
    const std::array<const SymMatrix*, 3> blocks{&base.B_bar, &base.D_bar, &base.Sigma_bar};
    for (int b = 0; b < 3; ++b) {
      const Index d = blocks[b]->dim();
      if (whiten) {
        const double tau = 1e-12 * std::max(1.0, std::abs(blocks[b]->trace()));
        factor_[b] = cholesky_lower(SymMatrix(blocks[b]->mat() + tau * Matrix::Identity(d, d)));
      } else {
        factor_[b] = Matrix::Identity(d, d);
      }
      begin_[b] = static_cast<Index>(dirs_.size());
      for (Index j = 0; j < d; ++j) {
        for (Index i = j; i < d; ++i) {
          Matrix e = Matrix::Zero(d, d);
          e(i, j) = 1.0;
          e(j, i) = 1.0;
          CandidateParams dir{SymMatrix::zero(base.B_bar.dim()), SymMatrix::zero(base.D_bar.dim()),
                              SymMatrix::zero(base.Sigma_bar.dim())};
          block(dir, b) = SymMatrix(factor_[b] * e * factor_[b].transpose());
          dirs_.push_back(std::move(dir));
        }
      }
    }
    begin_[3] = static_cast<Index>(dirs_.size());
  }

  Index size() const { return begin_[3]; }
  Index begin(int b) const { return begin_[b]; }
  Index end(int b) const { return begin_[b + 1]; }
  const std::vector<CandidateParams>& directions() const { return dirs_; }

  CandidateParams point(const Vector& z) const {
    CandidateParams out = base_;
    for (int b = 0; b < 3; ++b) {
      const Index d = block(base_, b).dim();
      Matrix zb = Matrix::Zero(d, d);
      Index k = begin_[b];
      for (Index j = 0; j < d; ++j) {
        for (Index i = j; i < d; ++i, ++k) {
          zb(i, j) = z(k);
          zb(j, i) = z(k);
        }
      }
      block(out, b) = SymMatrix(block(base_, b).mat() + factor_[b] * zb * factor_[b].transpose());
    }
    return out;
  }

  Vector pull_back(const ParamsGradient& g) const {
    const std::array<const SymMatrix*, 3> gs{&g.dB, &g.dD, &g.dSigma};
    Vector out(size());
    for (int b = 0; b < 3; ++b) {
      for (Index k = begin_[b]; k < begin_[b + 1]; ++k) {
        out(k) = gs[b]->mat().cwiseProduct(block(dirs_[k], b).mat()).sum();
      }
    }
    return out;
  }

  static SymMatrix& block(CandidateParams& p, int b) {
    return b == 0 ? p.B_bar : (b == 1 ? p.D_bar : p.Sigma_bar);
  }
  static const SymMatrix& block(const CandidateParams& p, int b) {
    return b == 0 ? p.B_bar : (b == 1 ? p.D_bar : p.Sigma_bar);
  }

 private:
  CandidateParams base_;
  std::array<Matrix, 3> factor_;
  std::array<Index, 4> begin_{};
  std::vector<CandidateParams> dirs_;
};

// Constraint order: ball, then the pivots of B̄, D̄, Σ̄.
struct Point {
  Vector z;
  CandidateParams x;
  double F = 0.0;
  Vector slacks;
  std::array<LdlPivots, 3> pivots;

  double log_barrier() const { return slacks.array().log().sum(); }
  double min_slack() const { return slacks.minCoeff(); }
};

// Gradient and Hessian pieces at an accepted point; the barrier weight is
// applied when they are assembled.
struct Local {
  Vector grad_F;
  Matrix hess_F;
  std::vector<Vector> grad_c;
  std::vector<Matrix> hess_c;
};

class Problem {
 public:
  Problem(const ModelStep& step, const SymMatrix& belief_cov, const RobustConfig& cfg,
          const CandidateParams& base, std::array<double, 3> floors, bool whiten)
      : step_(step),
        cfg_(cfg),
        floors_(floors),
        ball_(step, belief_cov, cfg.ball_kind()),
        coords_(base, whiten) {}

  const Coordinates& coords() const { return coords_; }
  Index num_constraints() const { return 1 + 2 * step_.n() + step_.m(); }

  // Empty when the point is not strictly feasible or K is singular.
  std::optional<Point> evaluate(const Vector& z) const {
    Point p;
    p.z = z;
    p.x = coords_.point(z);
    p.slacks.resize(num_constraints());
    Index k = 1;
    for (int b = 0; b < 3; ++b) {
      try {
        p.pivots[b] = ldl_pivots(Coordinates::block(p.x, b));
      } catch (const Error&) {
        return std::nullopt;
      }
      for (Index j = 0; j < p.pivots[b].values.size(); ++j, ++k) {
        p.slacks(k) = p.pivots[b].values(j) - floors_[b];
      }
    }
    if (!(p.slacks.tail(num_constraints() - 1).minCoeff() > 0.0)) return std::nullopt;
    try {
      p.slacks(0) = cfg_.radius - ball_.value(p.x);
      p.F = objective_F(step_, p.x);
    } catch (const Error&) {
      return std::nullopt;
    }
    if (!(p.slacks(0) > 0.0) || !std::isfinite(p.F)) return std::nullopt;
    return p;
  }

  Local derivatives(const Point& p, bool with_hessians) const {
    const auto& dirs = coords_.directions();
    const Index np = coords_.size();
    Local out;
    out.grad_F = coords_.pull_back(grad_F(step_, p.x));

    const Vector grad_w = coords_.pull_back(ball_.gradient(p.x));
    out.grad_c.push_back(-grad_w);
    if (with_hessians) {
      out.hess_F = hessian_F(step_, MinimaxTerms::compute(step_, p.x), dirs);
      out.hess_c.push_back(-ball_hessian(p, grad_w));
    }

    for (int b = 0; b < 3; ++b) {
      const SymMatrix& x = Coordinates::block(p.x, b);
      const Matrix& inv_l = p.pivots[b].inv_unit_lower;
      for (Index j = 0; j < x.dim(); ++j) {
        const Vector u = inv_l.row(j).transpose();
        Vector g = Vector::Zero(np);
        std::vector<Vector> r;
        for (Index k = coords_.begin(b); k < coords_.end(b); ++k) {
          const Vector du = Coordinates::block(dirs[k], b).mat() * u;
          g(k) = u.dot(du);
          r.push_back(du.head(j));
        }
        out.grad_c.push_back(std::move(g));
        if (!with_hessians) continue;

        // d_j'' along (u, v) = -2 r_u^T Z^{-1} r_v with r = (Δ u_j)_{1:j-1}.
        Matrix h = Matrix::Zero(np, np);
        if (j > 0) {
          const Eigen::LLT<Matrix> z_llt(x.mat().topLeftCorner(j, j));
          std::vector<Vector> zr;
          for (const auto& ri : r) zr.push_back(z_llt.solve(ri));
          const Index k0 = coords_.begin(b);
          for (std::size_t a = 0; a < r.size(); ++a) {
            for (std::size_t c = 0; c <= a; ++c) {
              const double v = -2.0 * r[a].dot(zr[c]);
              h(k0 + a, k0 + c) = v;
              h(k0 + c, k0 + a) = v;
            }
          }
        }
        out.hess_c.push_back(std::move(h));
      }
    }
    return out;
  }

 private:
  // Forward differences of the analytic gradient of w.
  Matrix ball_hessian(const Point& p, const Vector& grad_w) const {
    const Index np = coords_.size();
    constexpr double h = 1e-6;
    Matrix out = Matrix::Zero(np, np);
    for (Index k = 0; k < np; ++k) {
      for (const double step : {h, -h}) {
        try {
          Vector z = p.z;
          z(k) += step;
          const Vector g = coords_.pull_back(ball_.gradient(coords_.point(z)));
          out.col(k) = (g - grad_w) / step;
          break;
        } catch (const Error&) {
          continue;
        }
      }
    }
    return symmetric_part(out);
  }

  const ModelStep& step_;
  RobustConfig cfg_;
  std::array<double, 3> floors_;
  BallDistance ball_;
  Coordinates coords_;
};

struct TrStep {
  Vector s;
  double newton_decrement = kInf;  // g^T Q^{-1} g when Q is positive definite
};

// Maximizes g^T s - s^T Q s / 2 over ||s|| <= radius.
TrStep trust_region_step(const Vector& g, const Matrix& q, double radius) {
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetric_part(q));
  const Vector& lam = eig.eigenvalues();
  const Matrix& v = eig.eigenvectors();
  const Vector gh = v.transpose() * g;
  TrStep out;

  const double lam_min = lam(0);
  const double scale = std::max(1.0, lam.cwiseAbs().maxCoeff());
  if (lam_min > 1e-14 * scale) {
    out.newton_decrement = (gh.array().square() / lam.array()).sum();
    const Vector s = v * (gh.array() / lam.array()).matrix();
    if (s.norm() <= radius) {
      out.s = s;
      return out;
    }
  }

  auto shifted = [&](double shift) {
    Vector c(gh.size());
    for (Index i = 0; i < gh.size(); ++i) {
      const double den = lam(i) + shift;
      c(i) = den > 1e-14 * scale ? gh(i) / den : 0.0;
    }
    return c;
  };

  const double lo = std::max(0.0, -lam_min);
  const Vector at_lo = shifted(lo);
  if (lo > 0.0 && at_lo.norm() < radius) {
    // Hard case: fill the remaining length along the most negative direction.
    const double tau = std::sqrt(radius * radius - at_lo.squaredNorm());
    out.s = v * at_lo + tau * v.col(0);
    return out;
  }

  double a = lo;
  double b = lo + g.norm() / radius;
  for (int it = 0; it < 200 && b - a > 1e-15 * std::max(1.0, b); ++it) {
    const double mid = 0.5 * (a + b);
    if (shifted(mid).norm() > radius) {
      a = mid;
    } else {
      b = mid;
    }
  }
  out.s = v * shifted(b);
  return out;
}

std::array<double, 3> effective_floors(const CandidateParams& nominal, const RobustConfig& cfg,
                                       std::vector<std::string>& warnings) {
  const std::array<double, 3> requested{cfg.d_floor, cfg.delta, cfg.d_floor};
  const std::array<const char*, 3> names{"B", "D", "Sigma"};
  std::array<double, 3> out = requested;
  for (int b = 0; b < 3; ++b) {
    double min_pivot = 0.0;
    try {
      min_pivot = ldl_diagonals(Coordinates::block(nominal, b)).values.minCoeff();
    } catch (const Error&) {
      min_pivot = 0.0;
    }
    if (min_pivot > requested[b]) continue;
    if (!(min_pivot > 0.0)) {
      throw Error(ErrorCode::kInfeasibleStart,
                  std::string("nominal ") + names[b] + " is not positive definite");
    }
    out[b] = 0.5 * min_pivot;
    warnings.push_back(std::string("InfeasibleStart: nominal ") + names[b] +
                       " pivot below floor, floor relaxed to " + csv::format(out[b]));
  }
  return out;
}

RobustSolution finish(const ModelStep& step, const CandidateParams& params, const Vector& x_hat) {
  RobustSolution sol;
  sol.params = params;
  const LinearEstimator est = robust_gain(params, step, x_hat);
  sol.gain = est.G;
  sol.intercept = est.g;
  sol.value = objective_F(step, params);
  return sol;
}

// Lawson-Hanson nonnegative least squares, min ||A x - b|| s.t. x >= 0.
Vector nnls(const Matrix& a, const Vector& b) {
  const Index k = a.cols();
  Vector x = Vector::Zero(k);
  std::vector<bool> passive(k, false);
  const double tol = 1e-12 * std::max(1.0, (a.transpose() * b).cwiseAbs().maxCoeff());

  auto solve_passive = [&]() {
    std::vector<Index> idx;
    for (Index i = 0; i < k; ++i) {
      if (passive[i]) idx.push_back(i);
    }
    Matrix ap(a.rows(), static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) ap.col(i) = a.col(idx[i]);
    const Vector zp = ap.colPivHouseholderQr().solve(b);
    Vector z = Vector::Zero(k);
    for (std::size_t i = 0; i < idx.size(); ++i) z(idx[i]) = zp(i);
    return z;
  };

  for (int outer = 0; outer < 3 * k + 10; ++outer) {
    const Vector w = a.transpose() * (b - a * x);
    Index best = -1;
    for (Index i = 0; i < k; ++i) {
      if (!passive[i] && w(i) > tol && (best < 0 || w(i) > w(best))) best = i;
    }
    if (best < 0) break;
    passive[best] = true;
    for (int inner = 0; inner < 3 * k + 10; ++inner) {
      const Vector z = solve_passive();
      bool positive = true;
      double alpha = 1.0;
      for (Index i = 0; i < k; ++i) {
        if (passive[i] && z(i) <= 0.0) {
          positive = false;
          alpha = std::min(alpha, x(i) / (x(i) - z(i)));
        }
      }
      if (positive) {
        x = z;
        break;
      }
      x += alpha * (z - x);
      for (Index i = 0; i < k; ++i) {
        if (passive[i] && x(i) <= 1e-15) {
          passive[i] = false;
          x(i) = 0.0;
        }
      }
    }
  }
  return x;
}

}  // namespace

RobustSolution solve_step(const ModelStep& step, const SymMatrix& belief_cov,
                          const RobustConfig& cfg, const SolverOptions& opts,
                          const Vector& x_hat_prev, SolveTrace* trace) {
  step.validate();
  cfg.validate();
  opts.validate();
  if (belief_cov.dim() != step.n()) throw Error(ErrorCode::kDimMismatch, "belief_cov dim");
  const Vector x_hat = x_hat_prev.size() ? x_hat_prev : Vector::Zero(step.n());
  const CandidateParams nominal = CandidateParams::nominal(step, belief_cov);

  if (cfg.radius == 0.0 || cfg.mode == RobustMode::kNonrobust) {
    RobustSolution sol = finish(step, nominal, x_hat);
    sol.pinned = true;
    sol.converged = true;
    if (trace) trace->rows.push_back({0, sol.value, 0.0, 0.0});
    return sol;
  }

  std::vector<std::string> warnings;
  const auto floors = effective_floors(nominal, cfg, warnings);
  const Problem prob(step, belief_cov, cfg, nominal, floors, /*whiten=*/true);
  const Index np = prob.coords().size();

  std::optional<Point> start = prob.evaluate(Vector::Zero(np));
  if (!start) throw Error(ErrorCode::kInfeasibleStart, "nominal point is not strictly feasible");
  Point cur = *start;
  Point best = cur;
  Local local = prob.derivatives(cur, true);

  double mu = opts.barrier_init * std::max(1.0, std::abs(cur.F));
  double radius = opts.initial_radius;
  const double n_con = static_cast<double>(prob.num_constraints());
  bool converged = false;
  int iters = 0;
  if (trace) trace->rows.push_back({0, cur.F, cur.min_slack(), 0.0});

  while (iters < opts.max_iters) {
    Vector g = local.grad_F;
    Matrix h = local.hess_F;
    for (std::size_t i = 0; i < local.grad_c.size(); ++i) {
      const double c = cur.slacks(static_cast<Index>(i));
      g += (mu / c) * local.grad_c[i];
      h += (mu / c) * local.hess_c[i] - (mu / (c * c)) * local.grad_c[i] * local.grad_c[i].transpose();
    }
    const Matrix q = -h;
    const TrStep tr = trust_region_step(g, q, radius);
    const double pred = g.dot(tr.s) - 0.5 * tr.s.dot(q * tr.s);
    const double phi = cur.F + mu * cur.log_barrier();

    // Centered for this barrier weight: tighten or stop.
    if (tr.newton_decrement <= 0.5 * mu || !(pred > 1e-15 * (1.0 + std::abs(phi)))) {
      if (mu * n_con <= opts.tolerance * (1.0 + std::abs(cur.F))) {
        converged = true;
        break;
      }
      mu *= opts.barrier_decay;
      continue;
    }

    ++iters;
    const double step_norm = tr.s.norm();
    std::optional<Point> trial = prob.evaluate(cur.z + tr.s);
    double accepted_norm = 0.0;
    if (!trial) {
      radius = 0.25 * step_norm;
    } else {
      const double rho = (trial->F + mu * trial->log_barrier() - phi) / pred;
      if (rho < 0.25) {
        radius = 0.25 * step_norm;
      } else if (rho > 0.75 && step_norm >= 0.99 * radius) {
        radius *= 2.0;
      }
      if (rho > 1e-4) {
        try {
          local = prob.derivatives(*trial, true);
        } catch (const Error& e) {
          warnings.push_back(std::string("derivatives failed: ") + e.what());
          cur = *trial;
          if (cur.F > best.F) best = cur;
          if (trace) trace->rows.push_back({iters, cur.F, cur.min_slack(), step_norm});
          break;
        }
        cur = *trial;
        accepted_norm = step_norm;
        if (cur.F > best.F) best = cur;
      }
    }
    if (trace) trace->rows.push_back({iters, cur.F, cur.min_slack(), accepted_norm});
    if (opts.verbose) {
      std::cerr << "iter " << iters << " F=" << cur.F << " mu=" << mu << " radius=" << radius
                << " min_slack=" << cur.min_slack() << '\n';
    }
    if (radius < 1e-14 * (1.0 + cur.z.norm())) break;
  }

  RobustSolution sol = finish(step, best.x, x_hat);
  sol.iterations = iters;
  sol.converged = converged;
  sol.warnings = std::move(warnings);
  return sol;
}

KktReport verify_kkt(const RobustSolution& solution, const ModelStep& step,
                     const SymMatrix& belief_cov, const RobustConfig& cfg) {
  KktReport rep;
  if (solution.pinned || cfg.radius == 0.0 || cfg.mode == RobustMode::kNonrobust) {
    rep.pinned = true;
    return rep;
  }
  const std::array<double, 3> floors{cfg.d_floor, cfg.delta, cfg.d_floor};
  const Problem prob(step, belief_cov, cfg, solution.params, floors, /*whiten=*/false);
  const Index np = prob.coords().size();

  // Slacks are computed directly so that boundary points are still reported.
  Point p;
  p.z = Vector::Zero(np);
  p.x = solution.params;
  const ConstraintValues cv = constraints(step, p.x, belief_cov, cfg);
  p.slacks.resize(prob.num_constraints());
  p.slacks << cv.ball, cv.d_B, cv.d_D, cv.d_Sigma;
  for (int b = 0; b < 3; ++b) p.pivots[b] = ldl_pivots(Coordinates::block(p.x, b));
  p.F = objective_F(step, p.x);

  const Local local = prob.derivatives(p, false);
  Matrix a(np, static_cast<Index>(local.grad_c.size()));
  for (std::size_t i = 0; i < local.grad_c.size(); ++i) a.col(i) = local.grad_c[i];
  rep.multipliers = nnls(a, -local.grad_F);
  rep.grad_norm = local.grad_F.norm();
  rep.stationarity = (local.grad_F + a * rep.multipliers).norm();
  rep.slacks = p.slacks;
  rep.complementarity = rep.multipliers.cwiseProduct(p.slacks);
  return rep;
}

}  // namespace drkf
