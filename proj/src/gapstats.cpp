// SPDX-License-Identifier: Apache-2.0
#include "mir/gapstats.hpp"

#include <cmath>
#include <limits>

#include "mir/error.hpp"

namespace mir {

ScalingFactor scaling_factor(const Eigen::MatrixXd& text_tokens) {
  if (text_tokens.rows() < 1) throw Error(ErrorCode::DegenerateInput, "scaling factor needs at least one text token");
  const double norm_sum = text_tokens.rowwise().norm().sum();
  if (!(norm_sum > 0.0) || !std::isfinite(norm_sum)) {
    throw Error(ErrorCode::DegenerateInput, "all text tokens are zero vectors; scaling factor undefined");
  }
  return {static_cast<double>(text_tokens.rows()) / norm_sum};
}

OutlierResult remove_outliers(const Eigen::MatrixXd& tokens, const OutlierOptions& options) {
  const Eigen::Index n = tokens.rows();
  if (n < 2) return {tokens, 0, true};

  const Eigen::VectorXd norms = tokens.rowwise().norm();
  const double mean = norms.mean();
  const double sq = (norms.array() - mean).square().sum();
  const double denom = options.sigma == SigmaKind::Population ? double(n) : double(n - 1);
  const double sigma = std::sqrt(sq / denom);
  // A few ulps of slack so a zero-variance set is never split by roundoff in the mean.
  const double slack = 4.0 * std::numeric_limits<double>::epsilon() * std::abs(mean);
  const double hi = mean + 3.0 * sigma + slack;
  const double lo = options.side == OutlierSide::Both ? mean - 3.0 * sigma - slack
                                                      : -std::numeric_limits<double>::infinity();

  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (norms[i] >= lo && norms[i] <= hi) keep.push_back(i);
  }
  if (keep.size() < 2) return {tokens, 0, true};
  if (static_cast<Eigen::Index>(keep.size()) == n) return {tokens, 0, false};

  Eigen::MatrixXd out(static_cast<Eigen::Index>(keep.size()), tokens.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = tokens.row(keep[r]);
  return {std::move(out), n - static_cast<Eigen::Index>(keep.size()), false};
}

ModalityMoments moments(const Eigen::MatrixXd& tokens) {
  const Eigen::Index n = tokens.rows();
  if (n < 2) {
    throw Error(ErrorCode::InsufficientSamples,
                "covariance needs at least 2 samples, got " + std::to_string(n));
  }
  ModalityMoments m;
  m.sample_count = n;
  m.mean = tokens.colwise().mean().transpose();
  const Eigen::MatrixXd centered = tokens.rowwise() - m.mean.transpose();
  const Eigen::Index d = tokens.cols();
  m.covariance = Eigen::MatrixXd::Zero(d, d);
  m.covariance.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose(), 1.0 / double(n - 1));
  m.covariance.triangularView<Eigen::StrictlyUpper>() = m.covariance.transpose();
  return m;
}

PreparedLayer prepare_layer(const Eigen::MatrixXd& vision, const Eigen::MatrixXd& text,
                            const PrepareOptions& options, int layer_index) {
  if (vision.cols() != text.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "vision has " + std::to_string(vision.cols()) +
                                              " columns, text has " + std::to_string(text.cols()))
        .with_layer(layer_index);
  }
  PreparedLayer out;
  try {
    out.alpha = options.normalize ? scaling_factor(text).alpha : 1.0;
    Eigen::MatrixXd v = vision;
    Eigen::MatrixXd t = text;
    if (options.normalize) {
      v *= out.alpha;
      t *= out.alpha;
    }
    if (options.remove_outliers) {
      auto trimmed_v = remove_outliers(v, options.outliers);
      auto trimmed_t = remove_outliers(t, options.outliers);
      if (trimmed_v.fallback) {
        out.warnings.push_back("layer " + std::to_string(layer_index) +
                               ": outlier removal would leave <2 vision tokens; kept all");
      }
      if (trimmed_t.fallback) {
        out.warnings.push_back("layer " + std::to_string(layer_index) +
                               ": outlier removal would leave <2 text tokens; kept all");
      }
      out.vision_removed = trimmed_v.removed;
      out.text_removed = trimmed_t.removed;
      v = std::move(trimmed_v.tokens);
      t = std::move(trimmed_t.tokens);
    }
    out.vision = moments(v);
    out.text = moments(t);
  } catch (const Error& e) {
    throw e.with_layer(layer_index);
  }
  return out;
}

PreparedLayer prepare_layer(const LayerActivations& layer, const PrepareOptions& options) {
  return prepare_layer(layer.vision.cast<double>(), layer.text.cast<double>(), options, layer.layer_index);
}

}  // namespace mir
