// SPDX-License-Identifier: Apache-2.0
//
// Seeded Gaussian fixtures with analytic ground-truth Fréchet distances.
//
// Sampling is pinned: std::mt19937_64 (its output sequence is fixed by the
// C++ standard) feeding a Box-Muller transform implemented here, so the same
// spec produces byte-identical tensors on any conforming platform.
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "mir/tensor_io.hpp"

namespace mir::synth {

inline constexpr const char* kPrngName = "mt19937_64";
inline constexpr const char* kGaussianName = "box-muller";
inline constexpr int kGeneratorVersion = 1;

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

struct LayerTarget {
  Gaussian vision;
  Gaussian text;
};

struct SynthSpec {
  int num_layers = 0;
  int hidden_dim = 0;
  Eigen::Index vision_tokens = 0;
  Eigen::Index text_tokens = 0;
  std::uint64_t seed = 0;
  std::vector<LayerTarget> schedule;  // one entry per layer
  std::string model_id = "synthetic";
};

struct SynthRun {
  RunManifest manifest;
  std::vector<double> oracle_fids;
};

/// Standard normal deviates from the pinned generator.
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : engine_(seed) {}

  double operator()();
  /// Uniform on (0, 1], 53 bits.
  double uniform();
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Independent stream per (seed, layer, stream id).
std::uint64_t derive_seed(std::uint64_t seed, int layer, int stream);

/// Q diag(lambda) Q^T with Q Haar-random and eigenvalues log-spaced from
/// `scale` down to `scale / condition`.
Eigen::MatrixXd random_spd(Eigen::Index dim, double condition, double scale, NormalSampler& rng);
Eigen::MatrixXd random_rotation(Eigen::Index dim, NormalSampler& rng);

/// rows x dim samples from N(mean, covariance), rounded to float32.
Tensor sample_gaussian(const Gaussian& g, Eigen::Index rows, NormalSampler& rng);

/// Closed-form Fréchet distance between two Gaussians.
double analytic_gaussian_fid(const Eigen::VectorXd& mean1, const Eigen::MatrixXd& cov1,
                             const Eigen::VectorXd& mean2, const Eigen::MatrixXd& cov2);
double analytic_gaussian_fid(const LayerTarget& target);

/// Both modalities multiplied by `factor` (mean * c, covariance * c^2).
LayerTarget scaled(const LayerTarget& target, double factor);

/// Named schedules: zero-gap, halving, decreasing, random-spd, diag-affine,
/// rotated, scaled-stack.
std::vector<std::string> preset_names();
std::vector<LayerTarget> preset(const std::string& name, int num_layers, int hidden_dim, std::uint64_t seed);

/// Schedule file: {"layers": [{"scale": c, "vision": {...}, "text": {...}}]}
/// where each modality has an optional "mean" (number = offset norm along
/// the all-ones direction, or an explicit array) and "cov" ("identity" or
/// {"type": identity|diagonal|random_spd|full, ...}).
std::vector<LayerTarget> schedule_from_json(const nlohmann::json& doc, int hidden_dim, std::uint64_t seed);

SynthRun generate_run(const SynthSpec& spec, const std::filesystem::path& out_dir);

}  // namespace mir::synth
