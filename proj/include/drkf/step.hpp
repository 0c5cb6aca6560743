#pragma once

// Per-step model matrices and the alternative-model triple that the
// robust step optimizes over.

#include "drkf/matalg.hpp"

namespace drkf {

/// Nominal (A_t, C_t, B_t, D_t) for one filter step.
struct ModelStep {
  Matrix A;     // n x n
  Matrix C;     // m x n
  SymMatrix B;  // n x n, state noise
  SymMatrix D;  // m x m, observation noise

  Index n() const { return A.rows(); }
  Index m() const { return C.rows(); }

  /// Throws kDimMismatch on inconsistent shapes.
  void validate() const;
};

/// Alternative (B̄_t, D̄_t, Σ̄_{t-1}). Feasibility is checked by the operations
/// that consume it, not here.
struct CandidateParams {
  SymMatrix B_bar;
  SymMatrix D_bar;
  SymMatrix Sigma_bar;

  static CandidateParams nominal(const ModelStep& step, const SymMatrix& belief_cov) {
    return {step.B, step.D, belief_cov};
  }
};

}  // namespace drkf
