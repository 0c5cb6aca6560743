#pragma once

// Closed-form Gaussian optimal-transport values: the general quadratic-cost
// functional, W2, the bi-causal step distance and the non-causal distance
// over the joint (x_{t-1}, x_t, y_t) law.

#include "drkf/matalg.hpp"
#include "drkf/step.hpp"

namespace drkf {

struct GaussianMoments {
  Vector mean;
  SymMatrix cov;
};

/// Cost xi1^T P xi1 + xi2^T Q xi2 + xi1^T R xi2.
struct QuadCost {
  SymMatrix P;
  SymMatrix Q;
  SymMatrix R;
};

double quadratic_ot_value(const GaussianMoments& p1, const GaussianMoments& p2,
                          const QuadCost& cost);

/// Squared 2-Wasserstein distance between two Gaussians.
double w2_gaussian(const GaussianMoments& p1, const GaussianMoments& p2);

// Block builders. All return exact block assemblies of the inputs.
/// sigma^2(B, D) = [[B, B C^T], [C B, C B C^T + D]].
SymMatrix noise_block(const Matrix& c, const SymMatrix& b, const SymMatrix& d);
/// H = I + A^T A + A^T C^T C A.
SymMatrix transport_weight(const Matrix& a, const Matrix& c);
/// V_t, covariance of (x_t, y_t) given y_{1:t-1}.
SymMatrix predicted_cov(const ModelStep& step, const SymMatrix& sigma_prev, const SymMatrix& b,
                        const SymMatrix& d);
/// Covariance of (x_{t-1}, x_t, y_t) given y_{1:t-1}; (2n+m) square.
SymMatrix joint_cov(const ModelStep& step, const SymMatrix& sigma_prev, const SymMatrix& b,
                    const SymMatrix& d);

struct StepMatrices {
  SymMatrix sigma2_nom;
  SymMatrix sigma2_alt;
  SymMatrix H;
  Vector mu;
  SymMatrix V;
  SymMatrix V_joint;
};

/// Throws kDegenerateV when the nominal V_t is not positive definite.
StepMatrices build_step_matrices(const ModelStep& step, const CandidateParams& alt,
                                 const SymMatrix& belief_cov, const Vector& x_hat_prev = {});

double bicausal_distance(const ModelStep& step, const CandidateParams& alt,
                         const SymMatrix& belief_cov);

double joint_noncausal_distance(const ModelStep& step, const CandidateParams& alt,
                                const SymMatrix& belief_cov);

enum class BallKind { kBicausal, kJoint };

struct ParamsGradient {
  SymMatrix dB;
  SymMatrix dD;
  SymMatrix dSigma;
};

/// Step distance with the nominal square roots cached, for repeated
/// evaluation inside the solver. Gradients are full-matrix symmetric.
class BallDistance {
 public:
  BallDistance(const ModelStep& step, const SymMatrix& belief_cov, BallKind kind);

  double value(const CandidateParams& alt) const;

  /// Throws kNearSingularBures when an inner Bures matrix is singular on the
  /// range of its nominal factor.
  ParamsGradient gradient(const CandidateParams& alt) const;

  BallKind kind() const { return kind_; }

 private:
  struct Term {
    SymMatrix root;              // sqrt of the nominal covariance
    double nominal_trace = 0.0;  // tr of the nominal weight term
    Index null_dim = 0;          // numerical nullity of the nominal covariance
  };

  static Term make_term(const SymMatrix& nominal, double nominal_trace);
  // tr[sqrt(root N root)] and its gradient root X^{-1/2} root / 2.
  static double cross(const Term& t, const Matrix& n);
  static Matrix cross_gradient(const Term& t, const Matrix& n);

  Matrix alt_sigma2(const CandidateParams& alt) const;
  Matrix alt_joint(const CandidateParams& alt) const;

  ModelStep step_;
  BallKind kind_;
  SymMatrix h_;
  Matrix state_lift_;  // [I; C], maps B̄ into sigma^2
  Matrix prev_lift_;   // [I; A; C A], maps Σ̄ into the joint covariance
  Matrix noise_lift_;  // [0; I; C], maps B̄ into the joint covariance
  Term first_;         // sigma^2 term (bi-causal) or the joint term
  Term second_;        // Σ term (bi-causal only)
};

}  // namespace drkf
