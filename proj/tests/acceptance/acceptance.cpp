// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. One PASS/FAIL line per criterion; exit
// status is nonzero if any criterion fails.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mir/error.hpp"
#include "mir/matsqrt.hpp"
#include "mir/mir_core.hpp"
#include "mir/moca.hpp"
#include "mir/synth.hpp"
#include "mir/tensor_io.hpp"
#include "oracle/jacobi_oracle.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace mir;
using mir::testing::TempDir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, x);
  return buf;
}

MirOptions raw_exact() {
  MirOptions o;
  o.prepare.normalize = false;
  o.prepare.remove_outliers = false;
  o.sqrt.method = SqrtMethod::Exact;
  return o;
}

MirOptions with_sqrt(MirOptions o, SqrtMethod m) {
  o.sqrt.method = m;
  return o;
}

synth::SynthRun make_run(const fs::path& dir, std::vector<synth::LayerTarget> schedule, int d, Eigen::Index tokens,
                         std::uint64_t seed) {
  synth::SynthSpec spec;
  spec.num_layers = static_cast<int>(schedule.size());
  spec.hidden_dim = d;
  spec.vision_tokens = tokens;
  spec.text_tokens = tokens;
  spec.seed = seed;
  spec.schedule = std::move(schedule);
  return synth::generate_run(spec, dir);
}

double mean_of(const std::vector<double>& x) { return std::accumulate(x.begin(), x.end(), 0.0) / double(x.size()); }

/// Fixture with a clear mean gap and tight covariances: text N(0, 0.1 I),
/// vision N(2 e, 0.1 I), e a unit vector.
std::vector<synth::LayerTarget> tight_gap(int layers, int d) {
  std::vector<synth::LayerTarget> out;
  for (int k = 0; k < layers; ++k) {
    synth::LayerTarget t{{Eigen::VectorXd::Zero(d), 0.1 * Eigen::MatrixXd::Identity(d, d)},
                         {Eigen::VectorXd::Zero(d), 0.1 * Eigen::MatrixXd::Identity(d, d)}};
    t.vision.mean = 2.0 * Eigen::VectorXd::Ones(d) / std::sqrt(double(d));
    out.push_back(t);
  }
  return out;
}

/// Scales every 100th row to ten times its norm.
Tensor inject(Tensor x) {
  for (Eigen::Index i = 0; i < x.rows(); i += 100) x.row(i) *= 10.0f;
  return x;
}

oracle::Vec to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

oracle::Mat to_mat(const Eigen::MatrixXd& m) {
  oracle::Mat out(static_cast<std::size_t>(m.rows()), oracle::Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult cli(const std::string& args) {
  const std::string cmd = "'" + std::string(MIR_CLI_PATH) + "' " + args + " 2>/dev/null";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// ---------------------------------------------------------------------------

Outcome analytic_oracle() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0, oracle_gap = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    TempDir dir;
    const auto schedule = synth::preset("random-spd", 2, 16, seed);
    const auto run = make_run(dir.path(), schedule, 16, 50000, seed);
    const auto profile = compute_mir(read_manifest(dir / "manifest.json"), raw_exact());
    for (std::size_t k = 0; k < profile.per_layer_fid.size(); ++k) {
      worst = std::max(worst, std::abs(profile.per_layer_fid[k] - run.oracle_fids[k]) / run.oracle_fids[k]);
      // The closed form itself, recomputed with Jacobi eigendecompositions.
      const auto& t = schedule[k];
      const double jacobi = oracle::gaussian_fid(to_vec(t.vision.mean), to_mat(t.vision.covariance),
                                                 to_vec(t.text.mean), to_mat(t.text.covariance));
      oracle_gap = std::max(oracle_gap, std::abs(jacobi - run.oracle_fids[k]) / jacobi);
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst < 0.02 && oracle_gap < 1e-8 && secs < 60.0,
          "worst relative FID error " + fmt("%.4f", worst) + " (< 0.02), closed form vs Jacobi " +
              fmt("%.1e", oracle_gap) + ", " + fmt("%.1f", secs) + " s (< 60)"};
}

Outcome newton_schulz_fidelity() {
  int within = 0;
  double worst = 0.0;
  SqrtConfig exact;
  exact.method = SqrtMethod::Exact;
  SqrtConfig ns;
  for (int i = 0; i < 100; ++i) {
    synth::NormalSampler rng(synth::derive_seed(2024, i, 7));
    const Eigen::MatrixXd a = synth::random_spd(64, std::pow(10.0, 6.0 * rng.uniform()), 1.0, rng);
    const Eigen::MatrixXd b = synth::random_spd(64, std::pow(10.0, 6.0 * rng.uniform()), 1.0 + rng.uniform(), rng);
    const double e = trace_sqrt_product(a, b, exact);
    double err = 1.0;
    try {
      err = std::abs(trace_sqrt_product(a, b, ns) - e) / e;
    } catch (const Error&) {
    }
    worst = std::max(worst, err);
    if (err < 0.01) ++within;
  }

  double mir_gap = 0.0;
  for (const auto& name : synth::preset_names()) {
    const int d = 16;
    TempDir dir;
    make_run(dir.path(), synth::preset(name, 4, d, 31), d, 5000, 31);
    const auto manifest = read_manifest(dir / "manifest.json");
    MirOptions ns_only;
    ns_only.fallback_to_exact = false;
    const double a = compute_mir(manifest, ns_only).mir;
    const double b = compute_mir(manifest, with_sqrt(MirOptions{}, SqrtMethod::Exact)).mir;
    mir_gap = std::max(mir_gap, std::abs(a - b));
  }
  return {within >= 99 && mir_gap < 0.01, std::to_string(within) + "/100 trace pairs within 1% (worst " +
                                              fmt("%.2e", worst) + "), max |MIR gap| " + fmt("%.2e", mir_gap)};
}

Outcome closed_forms() {
  const SqrtConfig exact{SqrtMethod::Exact};
  const ModalityMoments a{Eigen::Vector2d(3, 4), Eigen::Matrix2d::Identity(), 100};
  const ModalityMoments b{Eigen::Vector2d(0, 0), Eigen::Matrix2d::Identity(), 100};
  const double f25 = fid_layer(a, b, exact);
  bool ok = std::abs(f25 - 25.0) <= 1e-6;

  double worst_1d = 0.0;
  for (double va : {0.25, 1.0, 4.0, 9.0}) {
    for (double vb : {0.5, 2.0, 16.0}) {
      const ModalityMoments x{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, va), 100};
      const ModalityMoments y{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, vb), 100};
      const double want = std::pow(std::sqrt(va) - std::sqrt(vb), 2);
      worst_1d = std::max(worst_1d, std::abs(fid_layer(x, y, exact) - want));
    }
  }
  ok = ok && worst_1d <= 1e-6;

  double worst_log = 0.0;
  for (int k : {1, 4, 12, 32}) {
    // Unit mean offset, equal covariances: FID exactly 1 per layer.
    const ModalityMoments x{Eigen::Vector2d(0.6, 0.8), Eigen::Matrix2d::Identity() * 0.3, 100};
    const ModalityMoments y{Eigen::Vector2d(0, 0), Eigen::Matrix2d::Identity() * 0.3, 100};
    std::vector<double> fids(static_cast<std::size_t>(k), fid_layer(x, y, exact));
    worst_log = std::max(worst_log, std::abs(mir_from_fids(fids, 1e-12) - std::log(double(k))));
  }
  ok = ok && worst_log <= 1e-6;
  return {ok, "FID " + fmt("%.9f", f25) + ", 1-D worst " + fmt("%.1e", worst_1d) + ", ln K worst " +
                  fmt("%.1e", worst_log)};
}

Outcome joint_scale_invariance() {
  TempDir base;
  make_run(base.path(), synth::preset("random-spd", 4, 12, 41), 12, 4000, 41);
  const auto manifest = read_manifest(base / "manifest.json");
  const MirOptions exact = with_sqrt(MirOptions{}, SqrtMethod::Exact);
  const MirOptions ns;
  const auto ref_exact = compute_mir(manifest, exact).per_layer_fid;
  const auto ref_ns = compute_mir(manifest, ns).per_layer_fid;
  double worst = 0.0;
  for (float c : {1e-3f, 1.0f, 1e3f}) {
    TempDir dir;
    fs::copy_file(base / "manifest.json", dir / "manifest.json");
    for (const auto& e : manifest.layers) {
      write_tensor(read_tensor(manifest.resolve(e.vision)) * c, dir / e.vision);
      write_tensor(read_tensor(manifest.resolve(e.text)) * c, dir / e.text);
    }
    const auto scaled = read_manifest(dir / "manifest.json");
    const auto got_exact = compute_mir(scaled, exact).per_layer_fid;
    const auto got_ns = compute_mir(scaled, ns).per_layer_fid;
    for (std::size_t k = 0; k < ref_exact.size(); ++k) {
      worst = std::max(worst, mir::testing::rel_diff(got_exact[k], ref_exact[k]));
      worst = std::max(worst, mir::testing::rel_diff(got_ns[k], ref_ns[k]));
    }
  }
  return {worst < 1e-5, "max relative per-layer FID change " + fmt("%.2e", worst) + " (< 1e-5)"};
}

Outcome normalization_ablation() {
  TempDir dir;
  make_run(dir.path(), synth::preset("scaled-stack", 4, 8, 51), 8, 20000, 51);
  const auto manifest = read_manifest(dir / "manifest.json");
  auto spread = [](const std::vector<double>& f) {
    const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
    return std::make_pair((*hi - *lo) / mean_of(f), *hi / *lo);
  };
  const auto normalized = compute_mir(manifest).per_layer_fid;
  MirOptions off;
  off.prepare.normalize = false;
  const auto raw = compute_mir(manifest, off).per_layer_fid;
  const double rel = spread(normalized).first;
  const double ratio = spread(raw).second;
  return {rel < 0.05 && ratio > 100.0,
          "normalized spread " + fmt("%.4f", rel) + " (< 0.05), raw max/min " + fmt("%.3g", ratio) + " (> 100)"};
}

Outcome sample_stability() {
  const auto schedule = tight_gap(6, 8);
  std::vector<double> spreads, means;
  for (Eigen::Index tokens : {500, 2000, 10000}) {
    std::vector<double> mirs;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      TempDir dir;
      make_run(dir.path(), schedule, 8, tokens, 6100 + seed);
      mirs.push_back(compute_mir(read_manifest(dir / "manifest.json")).mir);
    }
    const auto [lo, hi] = std::minmax_element(mirs.begin(), mirs.end());
    spreads.push_back(*hi - *lo);
    means.push_back(mean_of(mirs));
  }
  const bool decreasing = spreads[1] < spreads[0] && spreads[2] < spreads[1];
  const double rel = spreads[2] / std::abs(means[2]);
  return {decreasing && rel < 0.01, "MIR max-min over seeds " + fmt("%.4f", spreads[0]) + " > " +
                                        fmt("%.4f", spreads[1]) + " > " + fmt("%.4f", spreads[2]) +
                                        ", largest budget " + fmt("%.4f", rel) + " of mean (< 0.01)"};
}

Outcome outlier_robustness() {
  TempDir clean;
  make_run(clean.path(), tight_gap(4, 8), 8, 10000, 71);
  const auto manifest = read_manifest(clean / "manifest.json");

  auto dirty_copy = [&](const TempDir& dir, bool text_too) {
    fs::copy_file(clean / "manifest.json", dir / "manifest.json");
    for (const auto& e : manifest.layers) {
      write_tensor(inject(read_tensor(manifest.resolve(e.vision))), dir / e.vision);
      const Tensor t = read_tensor(manifest.resolve(e.text));
      write_tensor(text_too ? inject(t) : t, dir / e.text);
    }
    return read_manifest(dir / "manifest.json");
  };
  auto rel_change = [&](const RunManifest& dirty, MirOptions o) {
    const double a = compute_mir(manifest, o).mir;
    return std::abs(compute_mir(dirty, o).mir - a) / std::abs(a);
  };

  // Vision-only contamination under the default pipeline.
  TempDir vis;
  const auto vis_dirty = dirty_copy(vis, false);
  MirOptions on;
  MirOptions off;
  off.prepare.remove_outliers = false;
  const double a_on = rel_change(vis_dirty, on);
  const double a_off = rel_change(vis_dirty, off);

  // Both modalities contaminated; normalization off so the scale factor does
  // not move with the text outliers.
  TempDir both;
  const auto both_dirty = dirty_copy(both, true);
  on.prepare.normalize = false;
  off.prepare.normalize = false;
  const double b_on = rel_change(both_dirty, on);
  const double b_off = rel_change(both_dirty, off);

  const bool ok = a_on < 0.005 && b_on < 0.005 && a_off > 0.05 && b_off > 0.05;
  return {ok, "vision-only: " + fmt("%.4f", a_on) + " with removal, " + fmt("%.3f", a_off) +
                  " without; both: " + fmt("%.4f", b_on) + " with, " + fmt("%.3f", b_off) + " without"};
}

Outcome calibration() {
  MirOptions exact = with_sqrt(MirOptions{}, SqrtMethod::Exact);
  double diag_ratio = 0.0;
  for (std::uint64_t seed : {81, 82, 83}) {
    const auto t = synth::preset("diag-affine", 1, 16, seed)[0];
    synth::NormalSampler rv(synth::derive_seed(seed, 1, 0)), rt(synth::derive_seed(seed, 1, 1));
    const Tensor v = synth::sample_gaussian(t.vision, 20000, rv);
    const Tensor x = synth::sample_gaussian(t.text, 20000, rt);
    const auto r = calibration_gap_report(v, x, fit_moment_matching(v, x, 1), exact);
    diag_ratio = std::max(diag_ratio, r.fid_after / r.fid_before);
  }

  // Central differences on the moment loss.
  const Eigen::MatrixXd vm = mir::testing::gaussian_matrix(300, 10, 84) * 1.5;
  const Eigen::MatrixXd tm = (mir::testing::gaussian_matrix(300, 10, 85).array() + 0.3).matrix();
  const DiagonalMomentLoss loss(diagonal_moments(vm), diagonal_moments(tm));
  Eigen::VectorXd u = Eigen::VectorXd::Constant(10, 0.8), w = Eigen::VectorXd::Constant(10, 0.1);
  const auto [gu, gv] = loss.gradient(u, w);
  double grad_err = 0.0;
  const double h = 1e-4;
  for (int i = 0; i < 10; ++i) {
    Eigen::VectorXd up = u, um = u, wp = w, wm = w;
    up[i] += h;
    um[i] -= h;
    wp[i] += h;
    wm[i] -= h;
    grad_err = std::max(grad_err, std::abs((loss.value(up, w) - loss.value(um, w)) / (2 * h) - gu[i]) /
                                      std::max(1.0, std::abs(gu[i])));
    grad_err = std::max(grad_err, std::abs((loss.value(u, wp) - loss.value(u, wm)) / (2 * h) - gv[i]) /
                                      std::max(1.0, std::abs(gv[i])));
  }

  const auto t = synth::preset("rotated", 1, 16, 86)[0];
  synth::NormalSampler rv(synth::derive_seed(86, 1, 0)), rt(synth::derive_seed(86, 1, 1));
  const Tensor v = synth::sample_gaussian(t.vision, 20000, rv);
  const Tensor x = synth::sample_gaussian(t.text, 20000, rt);
  const auto rot = calibration_gap_report(v, x, fit_moment_matching(v, x, 1), exact);

  const bool ok = diag_ratio < 0.01 && grad_err < 1e-3 && rot.fid_after > 0.0 && rot.fid_after < rot.fid_before;
  return {ok, "diag-affine after/before " + fmt("%.2e", diag_ratio) + " (< 0.01), gradient error " +
                  fmt("%.1e", grad_err) + ", rotated " + fmt("%.3f", rot.fid_before) + " -> " +
                  fmt("%.3f", rot.fid_after)};
}

Outcome determinism() {
  TempDir a, b;
  const std::string args = "synth --layers 4 --dim 8 --tokens 2000,1500 --seed 91 --schedule random-spd --out ";
  if (cli(args + q(a.path())).code != 0 || cli(args + q(b.path())).code != 0) return {false, "synth failed"};
  bool same = true;
  for (const auto& entry : fs::directory_iterator(a.path())) {
    const auto name = entry.path().filename().string();
    same = same && mir::testing::slurp(a / name) == mir::testing::slurp(b / name);
  }

  const std::string compute = "compute --threads 1 --manifest " + q(a / "manifest.json");
  const auto r1 = cli(compute + " --format csv --out " + q(a / "r1.csv"));
  const auto r2 = cli(compute + " --format csv --out " + q(a / "r2.csv"));
  const auto j1 = cli(compute + " --out " + q(a / "r1.json"));
  const auto j2 = cli(compute + " --out " + q(a / "r2.json"));
  if (r1.code != 0 || r2.code != 0 || j1.code != 0 || j2.code != 0) return {false, "compute failed"};
  const bool csv_same = mir::testing::slurp(a / "r1.csv") == mir::testing::slurp(a / "r2.csv") && r1.out == r2.out;
  auto d1 = nlohmann::json::parse(mir::testing::slurp(a / "r1.json"));
  auto d2 = nlohmann::json::parse(mir::testing::slurp(a / "r2.json"));
  d1.erase("timings");
  d2.erase("timings");
  const bool json_same = d1.dump() == d2.dump();
  return {same && csv_same && json_same, std::string("synth files ") + (same ? "identical" : "differ") +
                                             ", compute CSV " + (csv_same ? "identical" : "differs") +
                                             ", JSON without timings " + (json_same ? "identical" : "differs")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"analytic-oracle FID within 2% on 10 seeds", analytic_oracle},
      {"Newton-Schulz agrees with the exact square root", newton_schulz_fidelity},
      {"closed-form FID and MIR values", closed_forms},
      {"joint scaling leaves per-layer FID unchanged", joint_scale_invariance},
      {"text-centric normalization removes depth-wise scale drift", normalization_ablation},
      {"MIR stabilizes as the token budget grows", sample_stability},
      {"outlier removal absorbs 1% of 10x-norm tokens", outlier_robustness},
      {"calibration closes diagonal gaps and narrows rotated ones", calibration},
      {"synth and compute are byte-reproducible", determinism},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[%s] %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  std::printf("%d/%zu criteria passed\n", int(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
