// SPDX-License-Identifier: Apache-2.0
#include "mir/moca.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "mir/error.hpp"

namespace mir {
namespace {

constexpr double kMinVisionSd = 1e-12;

void check_dims(Eigen::Index cols, const CalibrationParams& p) {
  if (p.u.size() != cols || p.v.size() != cols) {
    throw Error(ErrorCode::DimensionMismatch, "calibration params have dimension " + std::to_string(p.u.size()) +
                                                  "/" + std::to_string(p.v.size()) + ", tokens have " +
                                                  std::to_string(cols))
        .with_layer(p.layer_index);
  }
}

void check_fit_inputs(const Tensor& vision, const Tensor& text, int layer_index) {
  if (vision.rows() < 2 || text.rows() < 2) {
    throw Error(ErrorCode::InsufficientSamples, "calibration needs at least 2 vision and 2 text tokens")
        .with_layer(layer_index);
  }
  if (vision.cols() != text.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "vision and text differ in hidden dimension").with_layer(layer_index);
  }
}

template <typename Matrix>
Matrix apply_impl(const Matrix& tokens, const CalibrationParams& params) {
  check_dims(tokens.cols(), params);
  Matrix out(tokens.rows(), tokens.cols());
  using Scalar = typename Matrix::Scalar;
  for (Eigen::Index j = 0; j < tokens.cols(); ++j) {
    const double u = params.u[j];
    const double v = params.v[j];
    for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
      const double scaled = static_cast<double>(tokens(i, j)) * u;
      // Adding +0.0 would turn -0.0 into +0.0.
      out(i, j) = static_cast<Scalar>(v == 0.0 ? scaled : scaled + v);
    }
  }
  return out;
}

}  // namespace

CalibrationParams CalibrationParams::identity(Eigen::Index dim, int layer_index) {
  return {Eigen::VectorXd::Ones(dim), Eigen::VectorXd::Zero(dim), layer_index};
}

DiagonalMoments diagonal_moments(const Eigen::MatrixXd& tokens) {
  if (tokens.rows() < 2) throw Error(ErrorCode::InsufficientSamples, "need at least 2 samples");
  DiagonalMoments m;
  m.mean = tokens.colwise().mean().transpose();
  m.variance = (tokens.rowwise() - m.mean.transpose()).colwise().squaredNorm().transpose() /
               static_cast<double>(tokens.rows() - 1);
  return m;
}

Tensor apply_calibration(const Tensor& tokens, const CalibrationParams& params) {
  return apply_impl(tokens, params);
}

Eigen::MatrixXd apply_calibration(const Eigen::MatrixXd& tokens, const CalibrationParams& params) {
  return apply_impl(tokens, params);
}

CalibrationParams fit_moment_matching(const Tensor& vision, const Tensor& text, int layer_index) {
  check_fit_inputs(vision, text, layer_index);
  const DiagonalMoments mv = diagonal_moments(vision.cast<double>());
  const DiagonalMoments mt = diagonal_moments(text.cast<double>());
  CalibrationParams p = CalibrationParams::identity(vision.cols(), layer_index);
  for (Eigen::Index i = 0; i < p.u.size(); ++i) {
    const double sd_v = std::sqrt(mv.variance[i]);
    if (sd_v > kMinVisionSd) p.u[i] = std::sqrt(mt.variance[i]) / sd_v;
    p.v[i] = mt.mean[i] - p.u[i] * mv.mean[i];
  }
  return p;
}

DiagonalMomentLoss::DiagonalMomentLoss(DiagonalMoments vision, DiagonalMoments text)
    : vision_(std::move(vision)), text_(std::move(text)) {
  if (vision_.mean.size() != text_.mean.size()) {
    throw Error(ErrorCode::DimensionMismatch, "vision and text differ in hidden dimension");
  }
}

double DiagonalMomentLoss::value(const Eigen::VectorXd& u, const Eigen::VectorXd& v) const {
  const Eigen::ArrayXd mean_res = u.array() * vision_.mean.array() + v.array() - text_.mean.array();
  const Eigen::ArrayXd var_res = u.array().square() * vision_.variance.array() - text_.variance.array();
  return mean_res.square().sum() + var_res.square().sum();
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> DiagonalMomentLoss::gradient(const Eigen::VectorXd& u,
                                                                           const Eigen::VectorXd& v) const {
  const Eigen::ArrayXd mean_res = u.array() * vision_.mean.array() + v.array() - text_.mean.array();
  const Eigen::ArrayXd var_res = u.array().square() * vision_.variance.array() - text_.variance.array();
  Eigen::VectorXd du = (2.0 * mean_res * vision_.mean.array() + 4.0 * var_res * u.array() * vision_.variance.array())
                           .matrix();
  Eigen::VectorXd dv = (2.0 * mean_res).matrix();
  return {std::move(du), std::move(dv)};
}

GradientFit fit_gradient(const Tensor& vision, const Tensor& text, int steps, double learning_rate, int layer_index) {
  check_fit_inputs(vision, text, layer_index);
  if (steps < 0) throw Error(ErrorCode::InvalidArgument, "steps must be nonnegative");
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidArgument, "learning rate must be positive");

  const DiagonalMomentLoss loss(diagonal_moments(vision.cast<double>()), diagonal_moments(text.cast<double>()));
  CalibrationParams current = CalibrationParams::identity(vision.cols(), layer_index);
  GradientFit fit{current, {loss.value(current.u, current.v)}};
  const double initial = fit.losses.front();
  double best = initial;

  for (int step = 0; step < steps; ++step) {
    const auto [du, dv] = loss.gradient(current.u, current.v);
    current.u -= learning_rate * du;
    current.v -= learning_rate * dv;
    const double value = loss.value(current.u, current.v);
    fit.losses.push_back(value);
    if (!std::isfinite(value) || value > 10.0 * initial + std::numeric_limits<double>::min()) {
      throw Error(ErrorCode::Divergence, "loss rose from " + std::to_string(initial) + " to " +
                                             std::to_string(value) + " at step " + std::to_string(step + 1) +
                                             "; learning rate " + std::to_string(learning_rate) + " is too high")
          .with_layer(layer_index);
    }
    if (value < best) {
      best = value;
      fit.params = current;
    }
  }
  return fit;
}

GapReport calibration_gap_report(const Tensor& vision, const Tensor& text, const CalibrationParams& params,
                                 const MirOptions& options) {
  LayerActivations before{vision, text, params.layer_index};
  LayerActivations after{apply_calibration(vision, params), text, params.layer_index};
  return {layer_fid(before, options), layer_fid(after, options)};
}

nlohmann::json params_to_json(const std::vector<CalibrationParams>& params) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& p : params) {
    doc.push_back({{"layer", p.layer_index},
                   {"u", std::vector<double>(p.u.data(), p.u.data() + p.u.size())},
                   {"v", std::vector<double>(p.v.data(), p.v.data() + p.v.size())}});
  }
  return doc;
}

std::vector<CalibrationParams> params_from_json(const nlohmann::json& doc) {
  if (!doc.is_array()) throw Error(ErrorCode::InvalidArgument, "calibration file must be a JSON array");
  std::vector<CalibrationParams> out;
  try {
    for (const auto& item : doc) {
      const auto u = item.at("u").get<std::vector<double>>();
      const auto v = item.at("v").get<std::vector<double>>();
      if (u.size() != v.size()) throw Error(ErrorCode::DimensionMismatch, "u and v differ in length");
      CalibrationParams p;
      p.layer_index = item.at("layer").get<int>();
      p.u = Eigen::Map<const Eigen::VectorXd>(u.data(), static_cast<Eigen::Index>(u.size()));
      p.v = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
      if (!p.u.allFinite() || !p.v.allFinite()) throw Error(ErrorCode::NonFiniteValue, "non-finite calibration");
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("bad calibration entry: ") + e.what());
  }
  return out;
}

void write_params(const std::vector<CalibrationParams>& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out << params_to_json(params).dump(2) << '\n';
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

std::vector<CalibrationParams> read_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open calibration file " + path.string());
  try {
    return params_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::InvalidArgument, path.string() + ": " + e.what());
  }
}

}  // namespace mir
