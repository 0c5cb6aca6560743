#include "drkf/statespace.hpp"

#include <istream>
#include <ostream>
#include <random>
#include <string>

#include "drkf/csv.hpp"

namespace drkf {

StateSpaceModel::StateSpaceModel(Index n, Index m, MatrixFn a, MatrixFn c, SymFn b, SymFn d)
    : n_(n), m_(m), a_(std::move(a)), c_(std::move(c)), b_(std::move(b)), d_(std::move(d)) {
  if (n_ < 1 || m_ < 1) throw Error(ErrorCode::kInvalidArgument, "n and m must be positive");
}

StateSpaceModel StateSpaceModel::time_invariant(const Matrix& a, const Matrix& c,
                                                const SymMatrix& b, const SymMatrix& d) {
  ModelStep probe{a, c, b, d};
  probe.validate();
  return StateSpaceModel(
      a.rows(), c.rows(), [a](int) { return a; }, [c](int) { return c; },
      [b](int) { return b; }, [d](int) { return d; });
}

ModelStep StateSpaceModel::step(int t) const {
  ModelStep s{a_(t), c_(t), b_(t), d_(t)};
  s.validate();
  if (s.n() != n_ || s.m() != m_) {
    throw Error(ErrorCode::kDimMismatch, "model dims changed at step " + std::to_string(t));
  }
  return s;
}

StateSpaceModel StateSpaceModel::with_noise(const SymMatrix& b, const SymMatrix& d) const {
  return StateSpaceModel(
      n_, m_, a_, c_, [b](int) { return b; }, [d](int) { return d; });
}

GaussianMoments predict_joint(const ModelStep& step, const GaussianBelief& belief) {
  step.validate();
  if (belief.mean.size() != step.n() || belief.cov.dim() != step.n()) {
    throw Error(ErrorCode::kDimMismatch, "belief dims");
  }
  GaussianMoments out;
  const Vector ax = step.A * belief.mean;
  out.mean.resize(step.n() + step.m());
  out.mean << ax, step.C * ax;
  out.cov = predicted_cov(step, belief.cov, step.B, step.D);
  // A deterministic state (V_xx = 0) is allowed; the update only needs V_yy > 0.
  const SymMatrix vyy(Matrix(out.cov.mat().bottomRightCorner(step.m(), step.m())));
  if (min_eigenvalue(out.cov) < -psd_tolerance(out.cov.mat()) || !(min_eigenvalue(vyy) > 0.0)) {
    throw Error(ErrorCode::kDegenerateV, "predicted covariance V_t is degenerate");
  }
  return out;
}

GaussianMoments predict_joint(const StateSpaceModel& model, int t, const GaussianBelief& belief) {
  return predict_joint(model.step(t), belief);
}

GaussianBelief kalman_update(const GaussianMoments& joint, Index n, const Vector& y) {
  const Index m = joint.cov.dim() - n;
  if (n < 1 || m < 1 || y.size() != m || joint.mean.size() != n + m) {
    throw Error(ErrorCode::kDimMismatch, "kalman_update partition");
  }
  const Matrix& v = joint.cov.mat();
  const Matrix vxy = v.topRightCorner(n, m);
  const Matrix vyy = v.bottomRightCorner(m, m);
  // gain^T = V_yy^{-1} V_yx
  const Matrix gain = solve_spd(vyy, vxy.transpose(), ErrorCode::kSingularVyy).transpose();
  GaussianBelief out;
  out.mean = joint.mean.head(n) + gain * (y - joint.mean.tail(m));
  out.cov = SymMatrix(Matrix(v.topLeftCorner(n, n)) - gain * vxy.transpose());
  return out;
}

std::vector<GaussianBelief> kalman_filter(const StateSpaceModel& model,
                                          const std::vector<Vector>& observations,
                                          const GaussianBelief& init) {
  if (observations.empty()) throw Error(ErrorCode::kInvalidArgument, "no observations");
  std::vector<GaussianBelief> out;
  out.reserve(observations.size());
  GaussianBelief belief = init;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const int t = static_cast<int>(i) + 1;
    belief = kalman_update(predict_joint(model, t, belief), model.n(), observations[i]);
    out.push_back(belief);
  }
  return out;
}

Trajectory simulate(const StateSpaceModel& model, int length, std::uint64_t seed,
                    const Vector& init_state) {
  if (length < 1) throw Error(ErrorCode::kInvalidArgument, "simulation length must be >= 1");
  if (init_state.size() != model.n()) throw Error(ErrorCode::kDimMismatch, "init_state length");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](Index k) {
    Vector z(k);
    for (Index i = 0; i < k; ++i) z(i) = normal(rng);
    return z;
  };

  Trajectory traj;
  traj.states.reserve(length);
  traj.observations.reserve(length);
  Vector x = init_state;
  for (int t = 1; t <= length; ++t) {
    const ModelStep s = model.step(t);
    x = s.A * x + cholesky_lower(s.B) * draw(s.n());
    Vector y = s.C * x + cholesky_lower(s.D) * draw(s.m());
    traj.states.push_back(x);
    traj.observations.push_back(std::move(y));
  }
  return traj;
}

void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
  if (traj.length() == 0) return;
  const Index n = traj.states.front().size();
  const Index m = traj.observations.front().size();
  std::vector<std::string> header{"t"};
  for (Index i = 1; i <= n; ++i) header.push_back("x_" + std::to_string(i));
  for (Index i = 1; i <= m; ++i) header.push_back("y_" + std::to_string(i));
  out << csv::join(header) << '\n';
  for (std::size_t k = 0; k < traj.length(); ++k) {
    out << (k + 1);
    for (Index i = 0; i < n; ++i) out << ',' << csv::format(traj.states[k](i));
    for (Index i = 0; i < m; ++i) out << ',' << csv::format(traj.observations[k](i));
    out << '\n';
  }
}

Trajectory read_trajectory_csv(std::istream& in, Index n) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kIo, "trajectory CSV is empty");
  const auto header = csv::split_line(line);
  if (header.size() < 2 || header.front() != "t") {
    throw Error(ErrorCode::kIo, "trajectory CSV header must start with 't'");
  }
  Index n_states = 0;
  for (std::size_t i = 1; i < header.size(); ++i) {
    if (header[i].rfind("x_", 0) == 0) ++n_states;
  }
  if (n >= 0) {
    if (n_states != 0 && n_states != n) {
      throw Error(ErrorCode::kDimMismatch, "trajectory CSV has " + std::to_string(n_states) +
                                               " state columns, expected " + std::to_string(n));
    }
    n_states = n;
  }
  const Index width = static_cast<Index>(header.size()) - 1;
  const Index m = width - n_states;
  if (m < 1) throw Error(ErrorCode::kIo, "trajectory CSV has no observation columns");

  Trajectory traj;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = csv::split_line(line);
    if (static_cast<Index>(fields.size()) != width + 1) {
      throw Error(ErrorCode::kIo, "trajectory CSV row has " + std::to_string(fields.size()) +
                                      " fields, expected " + std::to_string(width + 1));
    }
    Vector x(n_states);
    Vector y(m);
    for (Index i = 0; i < n_states; ++i) x(i) = csv::parse_double(fields[1 + i]);
    for (Index i = 0; i < m; ++i) y(i) = csv::parse_double(fields[1 + n_states + i]);
    traj.states.push_back(std::move(x));
    traj.observations.push_back(std::move(y));
  }
  return traj;
}

}  // namespace drkf
