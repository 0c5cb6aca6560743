#pragma once

// Nominal linear-Gaussian state-space model, classic Kalman recursion and
// trajectory simulation.
//
//   x_t = A_t x_{t-1} + w_t,  w_t ~ N(0, B_t)
//   y_t = C_t x_t + v_t,      v_t ~ N(0, D_t)
//
// Steps are indexed t = 1..T; the initial belief describes x_0.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "drkf/gaussot.hpp"
#include "drkf/matalg.hpp"
#include "drkf/step.hpp"

namespace drkf {

class StateSpaceModel {
 public:
  using MatrixFn = std::function<Matrix(int)>;
  using SymFn = std::function<SymMatrix(int)>;

  StateSpaceModel(Index n, Index m, MatrixFn a, MatrixFn c, SymFn b, SymFn d);

  static StateSpaceModel time_invariant(const Matrix& a, const Matrix& c, const SymMatrix& b,
                                        const SymMatrix& d);

  Index n() const { return n_; }
  Index m() const { return m_; }

  /// Matrices for step t; shapes are validated on every call.
  ModelStep step(int t) const;

  /// Same dynamics with the noise covariances replaced by static (B, D).
  StateSpaceModel with_noise(const SymMatrix& b, const SymMatrix& d) const;

 private:
  Index n_;
  Index m_;
  MatrixFn a_;
  MatrixFn c_;
  SymFn b_;
  SymFn d_;
};

struct GaussianBelief {
  Vector mean;
  SymMatrix cov;

  /// Default prior N(0, I_n).
  static GaussianBelief standard(Index n) { return {Vector::Zero(n), SymMatrix::identity(n)}; }
};

struct Trajectory {
  std::vector<Vector> states;        // x_1..x_T
  std::vector<Vector> observations;  // y_1..y_T

  std::size_t length() const { return states.size(); }
};

/// N(mu_t, V_t) of (x_t, y_t) given y_{1:t-1}. Throws kDegenerateV unless V_t is
/// PSD with V_yy > 0.
GaussianMoments predict_joint(const StateSpaceModel& model, int t, const GaussianBelief& belief);
GaussianMoments predict_joint(const ModelStep& step, const GaussianBelief& belief);

/// Conditions the first `n` coordinates of `joint` on the last m = y.size().
GaussianBelief kalman_update(const GaussianMoments& joint, Index n, const Vector& y);

/// Beliefs for t = 1..T.
std::vector<GaussianBelief> kalman_filter(const StateSpaceModel& model,
                                          const std::vector<Vector>& observations,
                                          const GaussianBelief& init);

Trajectory simulate(const StateSpaceModel& model, int length, std::uint64_t seed,
                    const Vector& init_state);

/// CSV with header `t,x_1..x_n,y_1..y_m`, full round-trip precision.
void write_trajectory_csv(std::ostream& out, const Trajectory& traj);

/// Parses the trajectory CSV. `n` selects how many columns are states; a
/// negative value infers it from the header names.
Trajectory read_trajectory_csv(std::istream& in, Index n = -1);

}  // namespace drkf
