// SPDX-License-Identifier: Apache-2.0
#include "mir/mir_core.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "mir/error.hpp"

namespace mir {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

struct LayerOutcome {
  double fid = 0.0;
  std::vector<std::string> warnings;
  LayerTimings timings;
  std::exception_ptr error;
};

double fid_with_fallback(const PreparedLayer& prepared, const MirOptions& options, int layer_index,
                         std::vector<std::string>& warnings) {
  try {
    return fid_layer(prepared.vision, prepared.text, options.sqrt);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NonConvergence || !options.fallback_to_exact ||
        options.sqrt.method == SqrtMethod::Exact) {
      throw e.with_layer(layer_index);
    }
    warnings.push_back("layer " + std::to_string(layer_index) + ": " + e.detail() +
                       "; fell back to exact square root");
    SqrtConfig exact = options.sqrt;
    exact.method = SqrtMethod::Exact;
    try {
      return fid_layer(prepared.vision, prepared.text, exact);
    } catch (const Error& inner) {
      throw inner.with_layer(layer_index);
    }
  }
}

LayerOutcome run_layer(const RunManifest& manifest, const LayerEntry& entry, const MirOptions& options) {
  LayerOutcome out;
  try {
    auto t0 = Clock::now();
    const LayerActivations layer = load_layer(manifest, entry);
    out.timings.load_ms = ms_since(t0);

    t0 = Clock::now();
    PreparedLayer prepared = prepare_layer(layer, options.prepare);
    out.timings.prepare_ms = ms_since(t0);
    out.warnings = std::move(prepared.warnings);

    t0 = Clock::now();
    out.fid = fid_with_fallback(prepared, options, entry.index, out.warnings);
    out.timings.fid_ms = ms_since(t0);
  } catch (...) {
    out.error = std::current_exception();
  }
  return out;
}

}  // namespace

double fid_layer(const ModalityMoments& vision, const ModalityMoments& text, const SqrtConfig& cfg) {
  if (vision.mean.size() != text.mean.size() || vision.covariance.rows() != text.covariance.rows() ||
      vision.covariance.rows() != vision.mean.size()) {
    throw Error(ErrorCode::DimensionMismatch, "vision and text moments differ in dimension");
  }
  const double mean_term = (vision.mean - text.mean).squaredNorm();
  const double trace_v = vision.covariance.trace();
  const double trace_t = text.covariance.trace();
  const double cross = trace_sqrt_product(vision.covariance, text.covariance, cfg);
  const double fid = mean_term + trace_v + trace_t - 2.0 * cross;
  if (fid >= 0.0) return fid;

  // Roundoff allowance grows with the magnitude of the trace terms; the
  // Newton-Schulz stopping tolerance bounds its own error.
  const double scale = std::max(1.0, trace_v + trace_t);
  const double rel = cfg.method == SqrtMethod::Exact ? 1e-8 : std::max(1e-8, cfg.tolerance);
  if (fid > -rel * scale) return 0.0;
  throw Error(ErrorCode::InternalConsistency,
              "FID evaluated to " + std::to_string(fid) + "; the matrix square root is inaccurate");
}

double mir_from_fids(const std::vector<double>& fids, double epsilon_floor) {
  double sum = 0.0;
  for (double f : fids) sum += f;
  return std::log(std::max(sum, epsilon_floor));
}

ConfigFingerprint fingerprint(const MirOptions& o) {
  ConfigFingerprint f;
  f.normalize = o.prepare.normalize;
  f.remove_outliers = o.prepare.remove_outliers;
  f.outlier_side = o.prepare.outliers.side;
  f.outlier_sigma = o.prepare.outliers.sigma;
  f.sqrt_method = o.sqrt.method;
  f.ns_iterations = o.sqrt.iterations;
  f.ns_tolerance = o.sqrt.tolerance;
  f.jitter = o.sqrt.jitter;
  f.epsilon_floor = o.epsilon_floor;
  return f;
}

double layer_fid(const LayerActivations& layer, const MirOptions& options, std::vector<std::string>* warnings) {
  PreparedLayer prepared = prepare_layer(layer, options.prepare);
  std::vector<std::string> local = std::move(prepared.warnings);
  const double fid = fid_with_fallback(prepared, options, layer.layer_index, local);
  if (warnings) warnings->insert(warnings->end(), local.begin(), local.end());
  return fid;
}

GapProfile compute_mir(const RunManifest& manifest, const MirOptions& options) {
  validate(options.sqrt);
  if (!(options.epsilon_floor > 0.0)) throw Error(ErrorCode::InvalidArgument, "epsilon floor must be positive");

  std::vector<const LayerEntry*> selected;
  for (const auto& entry : manifest.layers) {
    if (entry.index == 0 && !options.include_embedding_layer) continue;
    if (options.layers && !options.layers->contains(entry.index)) continue;
    selected.push_back(&entry);
  }

  std::vector<LayerOutcome> outcomes(selected.size());
  const int workers = std::clamp(options.threads, 1, static_cast<int>(std::max<std::size_t>(selected.size(), 1)));
  if (workers == 1) {
    for (std::size_t i = 0; i < selected.size(); ++i) outcomes[i] = run_layer(manifest, *selected[i], options);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < selected.size(); i = next++) {
          outcomes[i] = run_layer(manifest, *selected[i], options);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  GapProfile profile;
  profile.config = fingerprint(options);
  // Accumulate in layer order so the sum does not depend on scheduling.
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (outcomes[i].error) std::rethrow_exception(outcomes[i].error);
    profile.layer_indices.push_back(selected[i]->index);
    profile.per_layer_fid.push_back(outcomes[i].fid);
    profile.timings.push_back(outcomes[i].timings);
    for (auto& w : outcomes[i].warnings) profile.warnings.push_back(std::move(w));
    profile.fid_sum += outcomes[i].fid;
  }
  profile.mir = mir_from_fids(profile.per_layer_fid, options.epsilon_floor);
  return profile;
}

std::vector<ReportRow> per_layer_report(const GapProfile& profile) {
  std::vector<ReportRow> rows;
  rows.reserve(profile.per_layer_fid.size());
  for (std::size_t i = 0; i < profile.per_layer_fid.size(); ++i) {
    rows.push_back({profile.layer_indices[i], profile.per_layer_fid[i]});
  }
  return rows;
}

std::string to_string(SqrtMethod method) {
  return method == SqrtMethod::Exact ? "exact" : "newton-schulz";
}

std::string to_string(OutlierSide side) { return side == OutlierSide::High ? "high" : "both"; }

}  // namespace mir
