// SPDX-License-Identifier: Apache-2.0
//
// Matrix square roots for the Fréchet trace term Tr((Sv St)^{1/2}).
#pragma once

#include <Eigen/Core>

namespace mir {

enum class SqrtMethod { Exact, NewtonSchulz };

struct SqrtConfig {
  SqrtMethod method = SqrtMethod::NewtonSchulz;
  int iterations = 50;      // Newton-Schulz cap, [1, 1000]
  double jitter = 1e-10;    // lambda; lambda * trace/d is added to the diagonal
  double tolerance = 1e-7;  // on ||Y_{i+1} - Y_i||_F / ||Y_i||_F
};

struct NewtonSchulzResult {
  Eigen::MatrixXd root;
  int iterations = 0;
  double residual = 0.0;  // last relative step size
};

/// Symmetric eigendecomposition with negative eigenvalues clamped to zero.
Eigen::MatrixXd sqrt_psd_exact(const Eigen::MatrixXd& a);

/// Coupled Newton-Schulz iteration on A / ||A||_F, rescaled by sqrt(||A||_F).
/// Throws NonConvergence when the step size is still above tolerance at the
/// iteration cap.
NewtonSchulzResult sqrt_newton_schulz(const Eigen::MatrixXd& a, const SqrtConfig& cfg = {});

/// Tr((Sv St)^{1/2}). The exact path evaluates the similar symmetric matrix
/// St^{1/2} Sv St^{1/2}; the Newton-Schulz path iterates on Sv St directly.
double trace_sqrt_product(const Eigen::MatrixXd& sv, const Eigen::MatrixXd& st, const SqrtConfig& cfg = {});

void validate(const SqrtConfig& cfg);

}  // namespace mir
