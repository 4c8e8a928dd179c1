// SPDX-License-Identifier: Apache-2.0
//
// Everything between raw activations and the Fréchet distance: text-centric
// scaling, 3-sigma outlier trimming on token norms, and moment estimation.
#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "mir/tensor_io.hpp"

namespace mir {

struct ScalingFactor {
  double alpha = 1.0;
};

struct ModalityMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  Eigen::Index sample_count = 0;
};

enum class OutlierSide { High, Both };
enum class SigmaKind { Population, Sample };

struct OutlierOptions {
  OutlierSide side = OutlierSide::Both;
  SigmaKind sigma = SigmaKind::Population;
};

struct OutlierResult {
  Eigen::MatrixXd tokens;
  Eigen::Index removed = 0;
  /// Set when trimming would have left fewer than two rows and the input
  /// was returned unchanged.
  bool fallback = false;
};

struct PrepareOptions {
  bool normalize = true;
  bool remove_outliers = true;
  OutlierOptions outliers;
};

struct PreparedLayer {
  ModalityMoments vision;
  ModalityMoments text;
  double alpha = 1.0;
  Eigen::Index vision_removed = 0;
  Eigen::Index text_removed = 0;
  std::vector<std::string> warnings;
};

/// alpha = s / sum_j ||t_j||_2, so that alpha-scaled text rows have unit
/// mean norm.
ScalingFactor scaling_factor(const Eigen::MatrixXd& text_tokens);

/// Keeps rows whose l2 norm lies inside mean +/- 3 sigma of all row norms
/// (upper bound only for OutlierSide::High). One pass; falls back to the
/// input when fewer than two rows would survive.
OutlierResult remove_outliers(const Eigen::MatrixXd& tokens, const OutlierOptions& options = {});

/// Column mean and unbiased covariance, two-pass.
ModalityMoments moments(const Eigen::MatrixXd& tokens);

PreparedLayer prepare_layer(const LayerActivations& layer, const PrepareOptions& options = {});

/// Same as above on already-widened matrices; used where vision tokens were
/// transformed in memory (calibration reports).
PreparedLayer prepare_layer(const Eigen::MatrixXd& vision, const Eigen::MatrixXd& text,
                            const PrepareOptions& options = {}, int layer_index = 0);

}  // namespace mir
