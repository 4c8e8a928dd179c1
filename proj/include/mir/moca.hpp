// SPDX-License-Identifier: Apache-2.0
//
// Per-layer scale-and-shift calibration of vision tokens, psi(f) = u * f + v
// with elementwise u, v in R^d, fitted offline against a frozen activation
// dump.
#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "mir/gapstats.hpp"
#include "mir/mir_core.hpp"
#include "mir/tensor_io.hpp"

namespace mir {

struct CalibrationParams {
  Eigen::VectorXd u;
  Eigen::VectorXd v;
  int layer_index = 0;

  /// u = ones, v = zeros: the calibration starts as a no-op.
  static CalibrationParams identity(Eigen::Index dim, int layer_index = 0);
};

/// Per-dimension first and second moments, which is all the diagonal
/// family can see.
struct DiagonalMoments {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;  // unbiased
};

DiagonalMoments diagonal_moments(const Eigen::MatrixXd& tokens);

Tensor apply_calibration(const Tensor& tokens, const CalibrationParams& params);
Eigen::MatrixXd apply_calibration(const Eigen::MatrixXd& tokens, const CalibrationParams& params);

/// Closed form: u_i = sd_t,i / sd_v,i, v_i = mu_t,i - u_i mu_v,i. Dimensions
/// with vision sd below 1e-12 get u_i = 1 and a pure shift.
CalibrationParams fit_moment_matching(const Tensor& vision, const Tensor& text, int layer_index = 0);

/// Diagonal-moment loss ||mu_cal - mu_t||^2 + ||var_cal - var_t||^2 as a
/// function of (u, v), with its analytic gradient.
class DiagonalMomentLoss {
 public:
  DiagonalMomentLoss(DiagonalMoments vision, DiagonalMoments text);

  double value(const Eigen::VectorXd& u, const Eigen::VectorXd& v) const;
  /// Returns (dL/du, dL/dv).
  std::pair<Eigen::VectorXd, Eigen::VectorXd> gradient(const Eigen::VectorXd& u, const Eigen::VectorXd& v) const;

  Eigen::Index dim() const { return vision_.mean.size(); }

 private:
  DiagonalMoments vision_;
  DiagonalMoments text_;
};

struct GradientFit {
  CalibrationParams params;
  std::vector<double> losses;  // losses[0] is the identity initialization
};

/// Plain gradient descent from the identity. Returns the lowest-loss iterate;
/// throws Divergence if the loss grows past 10x its initial value.
GradientFit fit_gradient(const Tensor& vision, const Tensor& text, int steps, double learning_rate,
                         int layer_index = 0);

struct GapReport {
  double fid_before = 0.0;
  double fid_after = 0.0;
};

/// Layer FID of (vision, text) and of (calibrated vision, text) under the
/// same normalization, outlier and square-root options.
GapReport calibration_gap_report(const Tensor& vision, const Tensor& text, const CalibrationParams& params,
                                 const MirOptions& options = {});

nlohmann::json params_to_json(const std::vector<CalibrationParams>& params);
std::vector<CalibrationParams> params_from_json(const nlohmann::json& doc);
void write_params(const std::vector<CalibrationParams>& params, const std::filesystem::path& path);
std::vector<CalibrationParams> read_params(const std::filesystem::path& path);

}  // namespace mir
