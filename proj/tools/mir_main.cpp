// SPDX-License-Identifier: Apache-2.0
//
// mir: modality integration rate from dumped layer activations.
//
//   mir compute   --manifest run/manifest.json [--out result.json]
//   mir profile   --manifest run/manifest.json --out gap.csv
//   mir synth     --layers K --dim d --tokens r,s --seed S --schedule NAME|FILE --out DIR
//   mir calibrate --manifest run/manifest.json --method moment|grad --out params.json
//
// Exit codes: 0 success, 1 malformed input or I/O failure, 2 numerical
// failure, 64 bad command line.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mir/error.hpp"
#include "mir/mir_core.hpp"
#include "mir/moca.hpp"
#include "mir/synth.hpp"
#include "mir/tensor_io.hpp"

namespace {

constexpr int kExitInput = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitUsage = 64;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ComputeFlags {
  std::string manifest;
  std::string sqrt = "newton-schulz";
  int ns_iters = mir::SqrtConfig{}.iterations;
  double ns_tol = mir::SqrtConfig{}.tolerance;
  double jitter = mir::SqrtConfig{}.jitter;
  double epsilon = 1e-12;
  bool no_normalize = false;
  bool no_outlier_removal = false;
  std::string outlier_side = "both";
  std::string outlier_sigma = "population";
  std::string layers;
  std::optional<int> threads;
  bool no_fallback = false;
  bool include_embedding = false;
};

void add_compute_flags(CLI::App* cmd, ComputeFlags& f) {
  cmd->add_option("--manifest", f.manifest, "Run manifest (JSON)")->required();
  cmd->add_option("--sqrt", f.sqrt, "Matrix square root: exact | newton-schulz")
      ->check(CLI::IsMember({"exact", "newton-schulz"}));
  cmd->add_option("--ns-iters", f.ns_iters, "Newton-Schulz iteration cap")->check(CLI::Range(1, 1000));
  cmd->add_option("--ns-tol", f.ns_tol, "Newton-Schulz relative step tolerance")->check(CLI::PositiveNumber);
  cmd->add_option("--jitter", f.jitter, "Diagonal jitter as a fraction of trace/d")->check(CLI::NonNegativeNumber);
  cmd->add_option("--epsilon", f.epsilon, "Floor applied to the FID sum before the log")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--no-normalize", f.no_normalize, "Skip text-centric scaling");
  cmd->add_flag("--no-outlier-removal", f.no_outlier_removal, "Skip 3-sigma norm trimming");
  cmd->add_option("--outlier-side", f.outlier_side, "Trim high norms only, or both tails")
      ->check(CLI::IsMember({"high", "both"}));
  cmd->add_option("--outlier-sigma", f.outlier_sigma, "Standard deviation of norms: population | sample")
      ->check(CLI::IsMember({"population", "sample"}));
  cmd->add_option("--layers", f.layers, "Inclusive layer range a..b (or a single index)");
  cmd->add_option("--threads", f.threads, "Layers processed concurrently (default $MIR_THREADS or 1)")
      ->check(CLI::Range(1, 1024));
  cmd->add_flag("--no-fallback", f.no_fallback, "Fail instead of retrying with the exact square root");
  cmd->add_flag("--include-embedding", f.include_embedding, "Include layer 0 when the manifest has it");
}

mir::LayerRange parse_range(const std::string& text) {
  auto to_int = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    if (used != s.size() || s.empty()) throw UsageError("--layers: cannot parse '" + text + "'");
    return v;
  };
  const auto dots = text.find("..");
  if (dots == std::string::npos) {
    const int k = to_int(text);
    return {k, k};
  }
  mir::LayerRange r{to_int(text.substr(0, dots)), to_int(text.substr(dots + 2))};
  if (r.first > r.last) throw UsageError("--layers: empty range '" + text + "'");
  return r;
}

int resolve_threads(const std::optional<int>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MIR_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v >= 1) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("MIR_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

mir::MirOptions to_options(const ComputeFlags& f) {
  mir::MirOptions o;
  o.prepare.normalize = !f.no_normalize;
  o.prepare.remove_outliers = !f.no_outlier_removal;
  o.prepare.outliers.side = f.outlier_side == "high" ? mir::OutlierSide::High : mir::OutlierSide::Both;
  o.prepare.outliers.sigma = f.outlier_sigma == "sample" ? mir::SigmaKind::Sample : mir::SigmaKind::Population;
  o.sqrt.method = f.sqrt == "exact" ? mir::SqrtMethod::Exact : mir::SqrtMethod::NewtonSchulz;
  o.sqrt.iterations = f.ns_iters;
  o.sqrt.tolerance = f.ns_tol;
  o.sqrt.jitter = f.jitter;
  o.epsilon_floor = f.epsilon;
  o.fallback_to_exact = !f.no_fallback;
  o.include_embedding_layer = f.include_embedding;
  if (!f.layers.empty()) o.layers = parse_range(f.layers);
  o.threads = resolve_threads(f.threads);
  return o;
}

nlohmann::json config_json(const ComputeFlags& f, const mir::MirOptions& o) {
  return {{"normalize", o.prepare.normalize},
          {"outlier_removal", o.prepare.remove_outliers},
          {"outlier_side", mir::to_string(o.prepare.outliers.side)},
          {"outlier_sigma", o.prepare.outliers.sigma == mir::SigmaKind::Sample ? "sample" : "population"},
          {"sqrt", mir::to_string(o.sqrt.method)},
          {"ns_iters", o.sqrt.iterations},
          {"ns_tolerance", o.sqrt.tolerance},
          {"jitter", o.sqrt.jitter},
          {"epsilon_floor", o.epsilon_floor},
          {"fallback_to_exact", o.fallback_to_exact},
          {"include_embedding", o.include_embedding_layer},
          {"layers", f.layers.empty() ? nlohmann::json() : nlohmann::json(f.layers)},
          {"threads", o.threads}};
}

void warn_all(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "mir: warning: " << w << '\n';
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw mir::Error(mir::ErrorCode::IoFailure, "cannot open " + path + " for writing");
  return out;
}

std::string fmt17(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

void print_mir(double mir) { std::printf("%.4f\n", mir); }

void write_layer_csv(std::ostream& out, const mir::GapProfile& profile) {
  out << "layer,fid\n";
  for (const auto& row : mir::per_layer_report(profile)) out << row.layer << ',' << fmt17(row.fid) << '\n';
}

int run_compute(const ComputeFlags& f, const std::string& out_path, const std::string& format) {
  const auto start = std::chrono::steady_clock::now();
  const mir::MirOptions options = to_options(f);
  const mir::RunManifest manifest = mir::read_manifest(f.manifest);
  const mir::GapProfile profile = mir::compute_mir(manifest, options);
  warn_all(profile.warnings);
  const double total_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

  if (!out_path.empty()) {
    auto out = open_out(out_path);
    if (format == "csv") {
      write_layer_csv(out, profile);
      out << "mir," << fmt17(profile.mir) << '\n';
    } else {
      double load = 0, prep = 0, fid = 0;
      for (const auto& t : profile.timings) {
        load += t.load_ms;
        prep += t.prepare_ms;
        fid += t.fid_ms;
      }
      nlohmann::json doc = {{"mir", profile.mir},
                            {"fid_sum", profile.fid_sum},
                            {"layers", profile.layer_indices},
                            {"per_layer_fid", profile.per_layer_fid},
                            {"config", config_json(f, options)},
                            {"manifest_path", f.manifest},
                            {"warnings", profile.warnings},
                            {"timings", {{"load_ms", load}, {"prepare_ms", prep}, {"fid_ms", fid}, {"total_ms", total_ms}}}};
      out << doc.dump(2) << '\n';
    }
    if (!out) throw mir::Error(mir::ErrorCode::IoFailure, "write failed for " + out_path);
  }
  print_mir(profile.mir);
  return 0;
}

int run_profile(const ComputeFlags& f, const std::string& out_path) {
  const mir::MirOptions options = to_options(f);
  const mir::RunManifest manifest = mir::read_manifest(f.manifest);
  const mir::GapProfile profile = mir::compute_mir(manifest, options);
  warn_all(profile.warnings);
  auto out = open_out(out_path);
  write_layer_csv(out, profile);
  if (!out) throw mir::Error(mir::ErrorCode::IoFailure, "write failed for " + out_path);
  print_mir(profile.mir);
  return 0;
}

struct SynthFlags {
  int layers = 0;
  int dim = 0;
  std::string tokens;
  std::uint64_t seed = 0;
  std::string schedule;
  std::string out;
};

int run_synth(const SynthFlags& f) {
  mir::synth::SynthSpec spec;
  spec.num_layers = f.layers;
  spec.hidden_dim = f.dim;
  spec.seed = f.seed;
  const auto comma = f.tokens.find(',');
  try {
    if (comma == std::string::npos) {
      spec.vision_tokens = spec.text_tokens = std::stoll(f.tokens);
    } else {
      spec.vision_tokens = std::stoll(f.tokens.substr(0, comma));
      spec.text_tokens = std::stoll(f.tokens.substr(comma + 1));
    }
  } catch (const std::exception&) {
    throw UsageError("--tokens: expected r,s but got '" + f.tokens + "'");
  }

  const auto names = mir::synth::preset_names();
  if (std::find(names.begin(), names.end(), f.schedule) != names.end()) {
    spec.schedule = mir::synth::preset(f.schedule, f.layers, f.dim, f.seed);
  } else {
    std::ifstream in(f.schedule);
    if (!in) throw mir::Error(mir::ErrorCode::MissingFile, "schedule '" + f.schedule + "' is neither a preset nor a readable file");
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw mir::Error(mir::ErrorCode::InvalidArgument, f.schedule + ": " + e.what());
    }
    spec.schedule = mir::synth::schedule_from_json(doc, f.dim, f.seed);
  }
  mir::synth::generate_run(spec, f.out);
  return 0;
}

struct CalibrateFlags {
  std::string method = "moment";
  int steps = 500;
  double lr = 0.05;
  std::string out;
  std::string report;
};

int run_calibrate(const ComputeFlags& f, const CalibrateFlags& c) {
  const mir::MirOptions options = to_options(f);
  const mir::RunManifest manifest = mir::read_manifest(f.manifest);

  std::vector<mir::CalibrationParams> params;
  std::vector<mir::GapReport> reports;
  std::vector<std::string> warnings;
  for (const auto& entry : manifest.layers) {
    if (entry.index == 0 && !options.include_embedding_layer) continue;
    if (options.layers && !options.layers->contains(entry.index)) continue;
    const auto layer = mir::load_layer(manifest, entry);
    mir::CalibrationParams p =
        c.method == "grad" ? mir::fit_gradient(layer.vision, layer.text, c.steps, c.lr, entry.index).params
                           : mir::fit_moment_matching(layer.vision, layer.text, entry.index);
    reports.push_back(mir::calibration_gap_report(layer.vision, layer.text, p, options));
    params.push_back(std::move(p));
  }
  mir::write_params(params, c.out);

  double after_sum = 0.0;
  for (const auto& r : reports) after_sum += r.fid_after;
  if (!c.report.empty()) {
    auto out = open_out(c.report);
    out << "layer,fid_before,fid_after\n";
    for (std::size_t i = 0; i < params.size(); ++i) {
      out << params[i].layer_index << ',' << fmt17(reports[i].fid_before) << ',' << fmt17(reports[i].fid_after)
          << '\n';
    }
    if (!out) throw mir::Error(mir::ErrorCode::IoFailure, "write failed for " + c.report);
  }
  print_mir(std::log(std::max(after_sum, options.epsilon_floor)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modality integration rate between vision and text tokens"};
  app.require_subcommand(1);

  ComputeFlags compute_flags;
  std::string compute_out, compute_format = "json";
  auto* compute = app.add_subcommand("compute", "Compute MIR over all layers of a run");
  add_compute_flags(compute, compute_flags);
  compute->add_option("--out", compute_out, "Result document path");
  compute->add_option("--format", compute_format, "json | csv")->check(CLI::IsMember({"json", "csv"}));

  ComputeFlags profile_flags;
  std::string profile_out;
  auto* profile = app.add_subcommand("profile", "Write per-layer FID as CSV");
  add_compute_flags(profile, profile_flags);
  profile->add_option("--out", profile_out, "CSV path")->required();

  SynthFlags synth_flags;
  auto* synth = app.add_subcommand("synth", "Generate a seeded Gaussian fixture with analytic FIDs");
  synth->add_option("--layers", synth_flags.layers, "Number of layers K")->required()->check(CLI::PositiveNumber);
  synth->add_option("--dim", synth_flags.dim, "Hidden dimension d")->required()->check(CLI::PositiveNumber);
  synth->add_option("--tokens", synth_flags.tokens, "Tokens per modality r,s")->required();
  synth->add_option("--seed", synth_flags.seed, "Generator seed")->required();
  synth->add_option("--schedule", synth_flags.schedule, "Preset name or schedule JSON file")->required();
  synth->add_option("--out", synth_flags.out, "Output directory")->required();

  ComputeFlags calibrate_flags;
  CalibrateFlags calibrate_opts;
  auto* calibrate = app.add_subcommand("calibrate", "Fit per-layer scale-and-shift calibration");
  add_compute_flags(calibrate, calibrate_flags);
  calibrate->add_option("--method", calibrate_opts.method, "moment | grad")
      ->check(CLI::IsMember({"moment", "grad"}));
  calibrate->add_option("--steps", calibrate_opts.steps, "Gradient steps")->check(CLI::NonNegativeNumber);
  calibrate->add_option("--lr", calibrate_opts.lr, "Gradient learning rate")->check(CLI::PositiveNumber);
  calibrate->add_option("--out", calibrate_opts.out, "Calibration params JSON")->required();
  calibrate->add_option("--report", calibrate_opts.report, "CSV of layer,fid_before,fid_after");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*compute) return run_compute(compute_flags, compute_out, compute_format);
    if (*profile) return run_profile(profile_flags, profile_out);
    if (*synth) return run_synth(synth_flags);
    if (*calibrate) return run_calibrate(calibrate_flags, calibrate_opts);
  } catch (const UsageError& e) {
    std::cerr << "mir: " << e.what() << '\n';
    return kExitUsage;
  } catch (const mir::Error& e) {
    std::cerr << "mir: error: " << e.what() << '\n';
    return mir::is_numerical(e.code()) ? kExitNumerical : kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "mir: error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitUsage;
}
