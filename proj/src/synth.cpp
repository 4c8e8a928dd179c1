// SPDX-License-Identifier: Apache-2.0
#include "mir/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "mir/error.hpp"
#include "mir/matsqrt.hpp"

namespace fs = std::filesystem;

namespace mir::synth {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Stream ids for parameter draws, kept apart from the token streams 0 and 1.
constexpr int kParamStream = 100;

Eigen::VectorXd ones_direction(int dim) {
  return Eigen::VectorXd::Constant(dim, 1.0 / std::sqrt(static_cast<double>(dim)));
}

Eigen::VectorXd random_direction(int dim, NormalSampler& rng) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng();
  return v / v.norm();
}

Eigen::VectorXd log_spaced(int n, double hi, double lo) {
  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) {
    const double t = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
    out[i] = hi * std::pow(lo / hi, t);
  }
  return out;
}

Gaussian standard(int dim, double variance = 1.0) {
  return {Eigen::VectorXd::Zero(dim), variance * Eigen::MatrixXd::Identity(dim, dim)};
}

// Distribution of D x + b (or any linear map) for x ~ g.
Gaussian transformed(const Gaussian& g, const Eigen::MatrixXd& map, const Eigen::VectorXd& shift) {
  Eigen::MatrixXd cov = map * g.covariance * map.transpose();
  cov = 0.5 * (cov + cov.transpose());
  return {map * g.mean + shift, std::move(cov)};
}

[[noreturn]] void bad_schedule(const std::string& why) { throw Error(ErrorCode::InvalidArgument, "schedule: " + why); }

Eigen::VectorXd parse_mean(const nlohmann::json& node, int dim) {
  if (node.is_null()) return Eigen::VectorXd::Zero(dim);
  if (node.is_number()) return node.get<double>() * ones_direction(dim);
  if (node.is_array()) {
    const auto values = node.get<std::vector<double>>();
    if (static_cast<int>(values.size()) != dim) bad_schedule("mean has wrong length");
    return Eigen::Map<const Eigen::VectorXd>(values.data(), dim);
  }
  bad_schedule("mean must be a number or an array");
}

Eigen::MatrixXd parse_cov(const nlohmann::json& node, int dim, NormalSampler& rng) {
  if (node.is_null() || node == "identity") return Eigen::MatrixXd::Identity(dim, dim);
  if (!node.is_object()) bad_schedule("cov must be \"identity\" or an object");
  const std::string type = node.value("type", "identity");
  const double scale = node.value("scale", 1.0);
  if (type == "identity") return scale * Eigen::MatrixXd::Identity(dim, dim);
  if (type == "diagonal") {
    const auto values = node.at("values").get<std::vector<double>>();
    if (static_cast<int>(values.size()) != dim) bad_schedule("diagonal has wrong length");
    for (double v : values) {
      if (!(v >= 0.0)) bad_schedule("diagonal entries must be nonnegative");
    }
    return Eigen::Map<const Eigen::VectorXd>(values.data(), dim).asDiagonal();
  }
  if (type == "random_spd") {
    const double condition = node.value("condition", 10.0);
    if (!(condition >= 1.0)) bad_schedule("condition must be >= 1");
    return random_spd(dim, condition, scale, rng);
  }
  if (type == "full") {
    const auto rows = node.at("values").get<std::vector<std::vector<double>>>();
    if (static_cast<int>(rows.size()) != dim) bad_schedule("full covariance has wrong size");
    Eigen::MatrixXd m(dim, dim);
    for (int i = 0; i < dim; ++i) {
      if (static_cast<int>(rows[i].size()) != dim) bad_schedule("full covariance has wrong size");
      for (int j = 0; j < dim; ++j) m(i, j) = rows[i][j];
    }
    if (!m.isApprox(m.transpose(), 1e-12)) bad_schedule("full covariance is not symmetric");
    return m;
  }
  bad_schedule("unknown covariance type '" + type + "'");
}

}  // namespace

double NormalSampler::uniform() {
  return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
}

double NormalSampler::operator()() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double radius = std::sqrt(-2.0 * std::log(uniform()));
  const double angle = 2.0 * std::numbers::pi * uniform();
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t derive_seed(std::uint64_t seed, int layer, int stream) {
  const std::uint64_t tag = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(layer)) << 16) ^
                            static_cast<std::uint64_t>(static_cast<std::uint32_t>(stream));
  return splitmix64(seed ^ splitmix64(tag));
}

Eigen::MatrixXd random_rotation(Eigen::Index dim, NormalSampler& rng) {
  Eigen::MatrixXd g(dim, dim);
  for (Eigen::Index j = 0; j < dim; ++j)
    for (Eigen::Index i = 0; i < dim; ++i) g(i, j) = rng();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  // Sign fix makes Q Haar-distributed.
  for (Eigen::Index j = 0; j < dim; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  return q;
}

Eigen::MatrixXd random_spd(Eigen::Index dim, double condition, double scale, NormalSampler& rng) {
  const Eigen::MatrixXd q = random_rotation(dim, rng);
  const Eigen::VectorXd evals = log_spaced(static_cast<int>(dim), scale, scale / condition);
  Eigen::MatrixXd s = q * evals.asDiagonal() * q.transpose();
  return 0.5 * (s + s.transpose());
}

Tensor sample_gaussian(const Gaussian& g, Eigen::Index rows, NormalSampler& rng) {
  const Eigen::Index d = g.mean.size();
  Eigen::MatrixXd factor;
  Eigen::LLT<Eigen::MatrixXd> llt(g.covariance);
  if (llt.info() == Eigen::Success) {
    factor = llt.matrixL();
  } else {
    factor = sqrt_psd_exact(g.covariance);
  }
  Eigen::MatrixXd z(rows, d);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < d; ++j) z(i, j) = rng();
  Eigen::MatrixXd x = z * factor.transpose();
  x.rowwise() += g.mean.transpose();
  return x.cast<float>();
}

double analytic_gaussian_fid(const Eigen::VectorXd& mean1, const Eigen::MatrixXd& cov1,
                             const Eigen::VectorXd& mean2, const Eigen::MatrixXd& cov2) {
  SqrtConfig exact;
  exact.method = SqrtMethod::Exact;
  exact.jitter = 0.0;
  const double value = (mean1 - mean2).squaredNorm() + cov1.trace() + cov2.trace() -
                       2.0 * trace_sqrt_product(cov1, cov2, exact);
  return std::max(value, 0.0);
}

double analytic_gaussian_fid(const LayerTarget& t) {
  return analytic_gaussian_fid(t.vision.mean, t.vision.covariance, t.text.mean, t.text.covariance);
}

LayerTarget scaled(const LayerTarget& t, double c) {
  return {{c * t.vision.mean, c * c * t.vision.covariance}, {c * t.text.mean, c * c * t.text.covariance}};
}

std::vector<std::string> preset_names() {
  return {"zero-gap", "halving", "decreasing", "random-spd", "diag-affine", "rotated", "scaled-stack"};
}

std::vector<LayerTarget> preset(const std::string& name, int num_layers, int dim, std::uint64_t seed) {
  if (num_layers < 1 || dim < 1) throw Error(ErrorCode::InvalidArgument, "preset needs K >= 1 and d >= 1");
  std::vector<LayerTarget> out;
  for (int k = 1; k <= num_layers; ++k) {
    NormalSampler rng(derive_seed(seed, k, kParamStream));
    LayerTarget t;
    if (name == "zero-gap") {
      t = {standard(dim), standard(dim)};
    } else if (name == "halving") {
      // Offset norms 2, 1, 0.5, ...: FIDs 4, 1, 0.25, ...
      t.text = standard(dim);
      t.vision = standard(dim);
      t.vision.mean = 2.0 * std::pow(0.5, k - 1) * ones_direction(dim);
    } else if (name == "decreasing") {
      // FID_k = 4 * 0.85^(k-1) with tight covariances so the estimated curve
      // stays monotone at moderate token counts.
      t.text = standard(dim, 0.01);
      t.vision = standard(dim, 0.01);
      t.vision.mean = 2.0 * std::pow(0.85, 0.5 * (k - 1)) * ones_direction(dim);
    } else if (name == "random-spd") {
      const double cond_v = std::pow(10.0, 1.0 + 3.0 * rng.uniform());
      const double cond_t = std::pow(10.0, 1.0 + 3.0 * rng.uniform());
      t.vision = {random_direction(dim, rng), random_spd(dim, cond_v, 1.0, rng)};
      t.text = {Eigen::VectorXd::Zero(dim), random_spd(dim, cond_t, 1.0, rng)};
    } else if (name == "diag-affine") {
      t.text = {0.5 * random_direction(dim, rng), random_spd(dim, 10.0, 1.0, rng)};
      Eigen::VectorXd gains(dim), shift(dim);
      for (int i = 0; i < dim; ++i) gains[i] = 0.5 + 1.5 * rng.uniform();
      for (int i = 0; i < dim; ++i) shift[i] = 0.5 * rng();
      t.vision = transformed(t.text, gains.asDiagonal(), shift);
    } else if (name == "rotated") {
      t.text = {Eigen::VectorXd::Zero(dim), Eigen::MatrixXd(log_spaced(dim, 4.0, 0.25).asDiagonal())};
      t.vision = transformed(t.text, 1.5 * random_rotation(dim, rng), random_direction(dim, rng));
    } else if (name == "scaled-stack") {
      // Same normalized pair at every layer, raw magnitude x10 per layer.
      LayerTarget base{{ones_direction(dim), Eigen::MatrixXd(log_spaced(dim, 2.0, 0.5).asDiagonal())},
                       standard(dim)};
      t = scaled(base, std::pow(10.0, k - 1));
    } else {
      throw Error(ErrorCode::InvalidArgument, "unknown schedule preset '" + name + "'");
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<LayerTarget> schedule_from_json(const nlohmann::json& doc, int dim, std::uint64_t seed) {
  if (!doc.is_object() || !doc.contains("layers") || !doc["layers"].is_array()) {
    bad_schedule("expected an object with a 'layers' array");
  }
  std::vector<LayerTarget> out;
  int k = 0;
  try {
    for (const auto& node : doc["layers"]) {
      ++k;
      NormalSampler rng(derive_seed(seed, k, kParamStream));
      const auto vision = node.value("vision", nlohmann::json::object());
      const auto text = node.value("text", nlohmann::json::object());
      LayerTarget t;
      t.vision = {parse_mean(vision.value("mean", nlohmann::json()), dim),
                  parse_cov(vision.value("cov", nlohmann::json()), dim, rng)};
      t.text = {parse_mean(text.value("mean", nlohmann::json()), dim),
                parse_cov(text.value("cov", nlohmann::json()), dim, rng)};
      const double scale = node.value("scale", 1.0);
      if (!(scale > 0.0)) bad_schedule("scale must be positive");
      out.push_back(scale == 1.0 ? t : scaled(t, scale));
    }
  } catch (const nlohmann::json::exception& e) {
    bad_schedule("layer " + std::to_string(k) + ": " + e.what());
  }
  return out;
}

SynthRun generate_run(const SynthSpec& spec, const fs::path& out_dir) {
  if (spec.num_layers < 1 || spec.hidden_dim < 1) throw Error(ErrorCode::InvalidArgument, "need K >= 1 and d >= 1");
  if (spec.vision_tokens < 2 || spec.text_tokens < 2) {
    throw Error(ErrorCode::InvalidArgument, "need at least 2 tokens per modality");
  }
  if (static_cast<int>(spec.schedule.size()) != spec.num_layers) {
    throw Error(ErrorCode::InvalidArgument, "schedule has " + std::to_string(spec.schedule.size()) +
                                                " layers, expected " + std::to_string(spec.num_layers));
  }
  for (const auto& t : spec.schedule) {
    for (const Gaussian* g : {&t.vision, &t.text}) {
      if (g->mean.size() != spec.hidden_dim || g->covariance.rows() != spec.hidden_dim ||
          g->covariance.cols() != spec.hidden_dim) {
        throw Error(ErrorCode::InvalidArgument, "schedule dimension does not match hidden_dim");
      }
    }
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw Error(ErrorCode::IoFailure, "cannot create output directory " + out_dir.string());
  }

  SynthRun run;
  RunManifest& m = run.manifest;
  m.model_id = spec.model_id;
  m.hidden_dim = spec.hidden_dim;
  m.num_layers = spec.num_layers;
  m.num_pairs = 1;
  m.root = out_dir;
  m.extra["generator"] = {{"prng", kPrngName},
                          {"gaussian", kGaussianName},
                          {"version", kGeneratorVersion},
                          {"seed", spec.seed},
                          {"tokens", {spec.vision_tokens, spec.text_tokens}}};

  for (int k = 1; k <= spec.num_layers; ++k) {
    const LayerTarget& target = spec.schedule[static_cast<std::size_t>(k - 1)];
    char name[64];
    std::snprintf(name, sizeof(name), "layer_%03d_vision.npy", k);
    const std::string vision_name = name;
    std::snprintf(name, sizeof(name), "layer_%03d_text.npy", k);
    const std::string text_name = name;

    NormalSampler vision_rng(derive_seed(spec.seed, k, 0));
    NormalSampler text_rng(derive_seed(spec.seed, k, 1));
    write_tensor(sample_gaussian(target.vision, spec.vision_tokens, vision_rng), out_dir / vision_name);
    write_tensor(sample_gaussian(target.text, spec.text_tokens, text_rng), out_dir / text_name);

    m.layers.push_back({k, vision_name, text_name});
    run.oracle_fids.push_back(analytic_gaussian_fid(target));
  }
  write_manifest(m, out_dir / "manifest.json");

  std::ofstream oracle(out_dir / "oracle.json", std::ios::trunc);
  if (!oracle) throw Error(ErrorCode::IoFailure, "cannot write oracle.json in " + out_dir.string());
  oracle << nlohmann::json{{"per_layer_fid", run.oracle_fids}, {"note", "raw-distribution FIDs, pre-normalization"}}
                .dump(2)
         << '\n';
  return run;
}

}  // namespace mir::synth
