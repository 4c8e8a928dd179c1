// SPDX-License-Identifier: Apache-2.0
//
// Per-layer Fréchet distance between vision and text token distributions and
// the Modality Integration Rate, ln(sum_k FID_k).
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mir/gapstats.hpp"
#include "mir/matsqrt.hpp"
#include "mir/tensor_io.hpp"

namespace mir {

struct LayerRange {
  int first = 0;
  int last = 0;  // inclusive
  bool contains(int k) const { return k >= first && k <= last; }
};

struct MirOptions {
  PrepareOptions prepare;
  SqrtConfig sqrt;
  double epsilon_floor = 1e-12;
  /// Retry a layer with the exact square root when Newton-Schulz fails.
  bool fallback_to_exact = true;
  /// Layer 0 (embedding output) is skipped unless requested.
  bool include_embedding_layer = false;
  std::optional<LayerRange> layers;
  int threads = 1;
};

struct ConfigFingerprint {
  bool normalize = true;
  bool remove_outliers = true;
  OutlierSide outlier_side = OutlierSide::Both;
  SigmaKind outlier_sigma = SigmaKind::Population;
  SqrtMethod sqrt_method = SqrtMethod::NewtonSchulz;
  int ns_iterations = 0;
  double ns_tolerance = 0.0;
  double jitter = 0.0;
  double epsilon_floor = 0.0;
};

struct LayerTimings {
  double load_ms = 0.0;
  double prepare_ms = 0.0;
  double fid_ms = 0.0;
};

struct GapProfile {
  std::vector<int> layer_indices;
  std::vector<double> per_layer_fid;
  double fid_sum = 0.0;
  double mir = 0.0;
  ConfigFingerprint config;
  /// Outlier fallbacks and sqrt fallbacks, in layer order.
  std::vector<std::string> warnings;
  std::vector<LayerTimings> timings;
};

struct ReportRow {
  int layer = 0;
  double fid = 0.0;
};

/// ||mu_v - mu_t||^2 + Tr(Sv) + Tr(St) - 2 Tr((Sv St)^{1/2}), with roundoff
/// negatives clamped to zero.
double fid_layer(const ModalityMoments& vision, const ModalityMoments& text, const SqrtConfig& cfg = {});

/// ln(max(sum, epsilon_floor)).
double mir_from_fids(const std::vector<double>& fids, double epsilon_floor);

ConfigFingerprint fingerprint(const MirOptions& options);

GapProfile compute_mir(const RunManifest& manifest, const MirOptions& options = {});

/// Layer FID for one in-memory layer under the full option set, including
/// the exact-sqrt fallback. Warnings are appended to `warnings` if given.
double layer_fid(const LayerActivations& layer, const MirOptions& options,
                 std::vector<std::string>* warnings = nullptr);

std::vector<ReportRow> per_layer_report(const GapProfile& profile);

std::string to_string(SqrtMethod method);
std::string to_string(OutlierSide side);

}  // namespace mir
