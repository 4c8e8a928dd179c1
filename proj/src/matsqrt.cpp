// SPDX-License-Identifier: Apache-2.0
#include "mir/matsqrt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Eigenvalues>

#include "mir/error.hpp"

namespace mir {
namespace {

constexpr double kSymmetryTol = 1e-6;

void require_square(const Eigen::MatrixXd& a, const char* what) {
  if (a.rows() != a.cols() || a.rows() == 0) {
    throw Error(ErrorCode::DimensionMismatch, std::string(what) + " must be a non-empty square matrix");
  }
}

void require_symmetric(const Eigen::MatrixXd& a, const char* what) {
  require_square(a, what);
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  if (!(asym <= kSymmetryTol * scale)) {
    throw Error(ErrorCode::NotSymmetric, std::string(what) + " is not symmetric (max |A - A^T| = " +
                                             std::to_string(asym) + ")");
  }
}

// Eigenvalues more negative than this are not roundoff.
double negative_floor(const Eigen::VectorXd& evals, double trace) {
  const double d = static_cast<double>(evals.size());
  const double top = std::max(evals.cwiseAbs().maxCoeff(), 0.0);
  return -(1e-8 * std::abs(trace) / d + 64.0 * std::numeric_limits<double>::epsilon() * d * top);
}

Eigen::VectorXd psd_eigenvalues(const Eigen::MatrixXd& a, Eigen::MatrixXd* vectors) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(
      a, vectors ? Eigen::ComputeEigenvectors : Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorCode::EigenFailure, "symmetric eigendecomposition did not converge");
  }
  Eigen::VectorXd evals = solver.eigenvalues();
  if (evals.minCoeff() < negative_floor(evals, a.trace())) {
    throw Error(ErrorCode::EigenFailure,
                "matrix is not positive semidefinite (eigenvalue " + std::to_string(evals.minCoeff()) + ")");
  }
  if (vectors) *vectors = solver.eigenvectors();
  return evals.cwiseMax(0.0);
}

Eigen::MatrixXd with_jitter(const Eigen::MatrixXd& a, double lambda) {
  const double shift = lambda * a.trace() / static_cast<double>(a.rows());
  if (!(shift > 0.0)) return a;
  Eigen::MatrixXd out = a;
  out.diagonal().array() += shift;
  return out;
}

}  // namespace

void validate(const SqrtConfig& cfg) {
  if (cfg.iterations < 1 || cfg.iterations > 1000) {
    throw Error(ErrorCode::InvalidArgument, "Newton-Schulz iterations must be in [1, 1000], got " +
                                                std::to_string(cfg.iterations));
  }
  if (!(cfg.jitter >= 0.0) || !std::isfinite(cfg.jitter)) {
    throw Error(ErrorCode::InvalidArgument, "jitter must be finite and nonnegative");
  }
  if (!(cfg.tolerance > 0.0)) throw Error(ErrorCode::InvalidArgument, "tolerance must be positive");
}

Eigen::MatrixXd sqrt_psd_exact(const Eigen::MatrixXd& a) {
  require_symmetric(a, "sqrt_psd_exact input");
  Eigen::MatrixXd vectors;
  const Eigen::VectorXd roots = psd_eigenvalues(a, &vectors).cwiseSqrt();
  Eigen::MatrixXd s = vectors * roots.asDiagonal() * vectors.transpose();
  return 0.5 * (s + s.transpose());
}

NewtonSchulzResult sqrt_newton_schulz(const Eigen::MatrixXd& a, const SqrtConfig& cfg) {
  validate(cfg);
  require_square(a, "sqrt_newton_schulz input");
  const Eigen::Index d = a.rows();
  const double c = a.norm();
  if (!std::isfinite(c)) throw Error(ErrorCode::NonConvergence, "Newton-Schulz input is not finite");
  if (c == 0.0) return {Eigen::MatrixXd::Zero(d, d), 0, 0.0};

  const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd y = a / c;
  Eigen::MatrixXd z = identity;
  Eigen::MatrixXd t(d, d), y_next(d, d);
  double residual = std::numeric_limits<double>::infinity();
  int it = 0;
  while (it < cfg.iterations) {
    ++it;
    t.noalias() = -0.5 * (z * y);
    t.diagonal().array() += 1.5;
    y_next.noalias() = y * t;
    z = (t * z).eval();
    residual = (y_next - y).norm() / y.norm();
    y.swap(y_next);
    if (!std::isfinite(residual)) break;
    if (residual < cfg.tolerance) {
      return {std::sqrt(c) * y, it, residual};
    }
  }
  throw Error(ErrorCode::NonConvergence, "Newton-Schulz step size " + std::to_string(residual) + " after " +
                                             std::to_string(it) + " iterations exceeds tolerance " +
                                             std::to_string(cfg.tolerance));
}

double trace_sqrt_product(const Eigen::MatrixXd& sv, const Eigen::MatrixXd& st, const SqrtConfig& cfg) {
  validate(cfg);
  require_symmetric(sv, "vision covariance");
  require_symmetric(st, "text covariance");
  if (sv.rows() != st.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "covariances differ in dimension (" + std::to_string(sv.rows()) +
                                                  " vs " + std::to_string(st.rows()) + ")");
  }
  const Eigen::MatrixXd a = with_jitter(sv, cfg.jitter);
  const Eigen::MatrixXd b = with_jitter(st, cfg.jitter);

  double trace = 0.0;
  if (cfg.method == SqrtMethod::Exact) {
    const Eigen::MatrixXd root_b = sqrt_psd_exact(b);
    Eigen::MatrixXd m = root_b * a * root_b;
    m = 0.5 * (m + m.transpose());
    trace = psd_eigenvalues(m, nullptr).cwiseSqrt().sum();
  } else {
    trace = sqrt_newton_schulz(a * b, cfg).root.trace();
  }
  return std::max(trace, 0.0);
}

}  // namespace mir
