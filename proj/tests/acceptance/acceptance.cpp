// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "bevuda/adaptation/adapt.hpp"
#include "bevuda/geometry/pipeline.hpp"
#include "bevuda/harness/experiments.hpp"
#include "bevuda/numerics/rng.hpp"
#include "bevuda/synth/scene.hpp"
#include "bevuda/uncertainty/uncertainty.hpp"
#include "support/oracles.hpp"
#include "support/primitives.hpp"
#include "support/random.hpp"

#ifndef BEVUDA_CLI_PATH
#define BEVUDA_CLI_PATH ""
#endif

namespace fs = std::filesystem;
using namespace bevuda;
using numerics::GradientSet;
using numerics::GraphFn;
using numerics::ParameterSet;
using numerics::Rng;
using numerics::Shape;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;
using testing_support::uniform;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. gradients

Outcome gradients() {
  const auto t0 = Clock::now();
  double prim = 0.0;
  std::string worst;
  for (const auto& c : testing_support::primitive_cases())
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const double e = testing_support::check_primitive(c, seed);
      if (!(e <= prim)) {
        prim = e;
        worst = c.name;
      }
    }

  // Full objective at a briefly pretrained 2-view 8x16 operating point, on the
  // first scene pair where all four loss terms are active.
  harness::ExperimentConfig e;
  e.dims.image_height = 8;
  e.dims.image_width = 16;
  e.dims.views = 2;
  e.source_scenes = 16;
  e.target_scenes = 8;
  e.eval_scenes = 1;
  e.train_epochs = 30;
  const harness::CorpusSet corpora = harness::generate_corpora(e, e.target_domain_shift());
  const ParameterSet params = harness::pretrain(e, corpora.source).params;
  const adaptation::AdaptConfig cfg = e.adaptation().step;
  const ParameterSet disc = adaptation::init_adaptation(params, e.dims, e.seed).disc;

  adaptation::LossReport report;
  bool all_terms = false;
  std::size_t scene = 0;
  adaptation::TeacherTargets targets;
  for (; scene < corpora.target.scenes.size() && !all_terms; ++scene) {
    const synth::SceneSample* src[] = {&corpora.source.scenes[scene]};
    const synth::SceneSample* tgt[] = {&corpora.target.scenes[scene]};
    targets = adaptation::teacher_targets(params, tgt, cfg, 0);
    Tape tape(params);
    report = {};
    adaptation::student_objective(tape, src, tgt, targets, disc, cfg, 0, &report);
    all_terms = report.l_unc != 0.0 && report.l_sup != 0.0 && report.l_mkt != 0.0 && report.l_ali != 0.0;
  }
  --scene;
  const synth::SceneSample* src[] = {&corpora.source.scenes[scene]};
  const synth::SceneSample* tgt[] = {&corpora.target.scenes[scene]};
  GraphFn g = [&](Tape& tape, std::span<const Var>) {
    return adaptation::student_objective(tape, src, tgt, targets, disc, cfg, 0);
  };
  const auto [value, analytic] = numerics::value_and_gradient(g, params, {});
  const GradientSet fd = numerics::finite_difference_gradient(g, params, {}, 1e-5, 6);
  const double full = numerics::gradient_check_error(analytic, fd);
  const double secs = seconds_since(t0);

  Outcome o;
  o.pass = prim < 1e-4 && full < 1e-4 && all_terms && secs < 60.0;
  o.detail = "primitives max rel err " + fmt("%.2e", prim) + " (" + worst + "), full objective " + fmt("%.2e", full) + " on scene " + std::to_string(scene) +
             (all_terms ? "" : " with a zero loss term") + ", " + fmt("%.1f s", secs);
  return o;
}

// ---------------------------------------------------------------------------
// 2. oracles

Outcome oracles() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double unc = 0.0, pool = 0.0, js = 0.0, transfer = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 2 + rng.below(6), C = 2 + rng.below(6), H = 1 + rng.below(4), W = 1 + rng.below(4);
    std::vector<geometry::DepthDistribution> samples;
    std::vector<Tensor> raw;
    for (std::size_t k = 0; k < m; ++k) {
      raw.push_back(testing_support::random_distribution(C, H, W, rng));
      samples.push_back(geometry::DepthDistribution{raw.back(), {}});
    }
    unc = std::max(unc, numerics::max_abs_diff(uncertainty::uncertainty_map(samples).tensor,
                                               testing_support::naive_std(raw)));
  }
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t D = 2 + rng.below(7), H = 2 + rng.below(7), W = 2 + rng.below(7);
    const Tensor x = uniform({1 + rng.below(3), D, H, W}, rng);
    const numerics::Pool3d p = testing_support::pool(1 + rng.below(D), 1 + rng.below(H), 1 + rng.below(W),
                                                     1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
    pool = std::max(pool, numerics::max_abs_diff(geometry::pool_to_bev(geometry::VoxelFeature{x}, p).tensor,
                                                 testing_support::naive_pool(x, p)));
  }
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    const auto a = testing_support::random_simplex(n, rng, trial % 2 == 0);
    const auto b = testing_support::random_simplex(n, rng, trial % 3 == 0);
    js = std::max(js, std::abs(harness::js_divergence(a, b) - testing_support::naive_js(a, b)));
  }
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Tensor> t, s;
    const std::size_t spaces = 1 + rng.below(3);
    for (std::size_t l = 0; l < spaces; ++l) {
      const Shape shape = {1 + rng.below(5), 1 + rng.below(4), 1 + rng.below(4)};
      t.push_back(uniform(shape, rng));
      s.push_back(uniform(shape, rng));
    }
    transfer = std::max(transfer, std::abs(adaptation::transfer_loss(t, s) - testing_support::naive_transfer(t, s)));
  }
  const double secs = seconds_since(t0);
  const double worst = std::max({unc, pool, js, transfer});
  Outcome o;
  o.pass = worst <= 1e-12 && secs < 30.0;
  o.detail = "max abs diff uncertainty_map " + fmt("%.1e", unc) + ", pool_to_bev " + fmt("%.1e", pool) +
             ", js_divergence " + fmt("%.1e", js) + ", transfer_loss " + fmt("%.1e", transfer) + ", " +
             fmt("%.2f s", secs);
  return o;
}

// ---------------------------------------------------------------------------
// 3. UEMA

Outcome uema() {
  const adaptation::UemaConfig cfg{0.999, 0.001};
  Rng rng(3);
  std::size_t containment = 0, damping = 0, compared = 0, update = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const double t = rng.uniform(-5, 5), s = rng.uniform(-5, 5);
    double u1 = rng.uniform(0.0, 0.5), u2 = rng.uniform(0.0, 0.5);
    if (u1 > u2) std::swap(u1, u2);
    const double a = adaptation::uema_blend(t, s, u1, cfg);
    const double b = adaptation::uema_blend(t, s, u2, cfg);
    if (!(a >= std::min(t, s) && a <= std::max(t, s))) ++containment;
    if (!(b >= std::min(t, s) && b <= std::max(t, s))) ++containment;
    if (t != s && u1 < u2) {
      ++compared;
      if (!(std::abs(b - t) < std::abs(a - t))) ++damping;
    }
    ParameterSet pt, ps;
    pt.insert("w", Tensor::scalar(t));
    ps.insert("w", Tensor::scalar(s));
    if (adaptation::uema_update(pt, ps, u1, cfg).at("w").item() != a) ++update;
  }
  Outcome o;
  o.pass = containment == 0 && damping == 0 && update == 0 && compared > 0;
  o.detail = "10000 triples: " + std::to_string(containment) + " containment, " + std::to_string(damping) + "/" +
             std::to_string(compared) + " damping and " + std::to_string(update) + " update violations";
  return o;
}

// ---------------------------------------------------------------------------
// 4. spot values

Outcome spot_values() {
  const geometry::ModelDims dims;
  ParameterSet disc = geometry::init_discriminator(dims, 1);
  for (auto& [_, t] : disc)
    for (double& v : t.values()) v = 0.0;  // D = sigmoid(0) = 0.5 everywhere
  Rng rng(4);
  const Tensor ps = uniform({dims.embed_dim, dims.classes}, rng), pt = uniform({dims.embed_dim, dims.classes}, rng);
  const double ali = adaptation::alignment_loss(ps, pt, disc);
  const double total = adaptation::total_da_loss(1, 1, 1, 1, adaptation::LossWeights{1, 1, 0.1, 0.1});
  const std::vector<geometry::DepthDistribution> two = {
      geometry::DepthDistribution{Tensor({2, 1, 1}, {0.4, 0.6}), {}},
      geometry::DepthDistribution{Tensor({2, 1, 1}, {0.6, 0.4}), {}}};
  const uncertainty::UncertaintyMap u = uncertainty::uncertainty_map(two);
  const bool ali_ok = std::abs(ali + 2.0 * std::log(2.0)) <= 1e-9;
  const bool total_ok = total == 2.2;
  const bool unc_ok = std::abs(u.tensor[0] - 0.1) <= 1e-12 && std::abs(u.tensor[1] - 0.1) <= 1e-12 &&
                      std::abs(u.scalar_mean - 0.1) <= 1e-12;
  Outcome o;
  o.pass = ali_ok && total_ok && unc_ok;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "alignment %.12f (-2 ln 2 = %.12f), total %.17g, uncertainty %.15f", ali,
                -2.0 * std::log(2.0), total, u.scalar_mean);
  o.detail = buf;
  return o;
}

// ---------------------------------------------------------------------------
// 5-8. trends over root seeds

struct SeedResult {
  std::map<std::string, double> map;
  std::map<std::string, double> js;
  std::vector<harness::LadderLevel> ladder;
};

double mean_of(const std::vector<SeedResult>& r, const std::string& name) {
  double s = 0.0;
  for (const auto& x : r) s += x.map.at(name);
  return s / static_cast<double>(r.size());
}

double mean_js(const std::vector<SeedResult>& r, const std::string& name) {
  double s = 0.0;
  for (const auto& x : r) s += x.js.at(name);
  return s / static_cast<double>(r.size());
}

std::vector<SeedResult> run_trends(std::size_t seeds, double* total_secs) {
  const auto t0 = Clock::now();
  std::vector<SeedResult> out;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    harness::ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.target_shift = synth::DomainShift::Kind::fog;
    cfg.fog_level = 3;
    const harness::CorpusSet corpora = harness::generate_corpora(cfg, cfg.target_domain_shift());
    const ParameterSet source = harness::pretrain(cfg, corpora.source).params;
    SeedResult r;
    for (const auto& v : harness::ablation_variants()) {
      const harness::RunResult run = harness::adapt_and_evaluate(cfg, source, corpora, v.switches);
      r.map[v.name] = run.metrics.simplified_map;
      r.js[v.name] = run.divergence.js;
    }
    r.ladder = harness::fog_ladder(cfg, source, {1, 3, 5});
    std::printf("  seed %llu:", static_cast<unsigned long long>(seed));
    for (const auto& [name, m] : r.map) std::printf(" %s %.4f", name.c_str(), m);
    std::printf(" | ladder");
    for (const auto& l : r.ladder) std::printf(" L%d %.4f/%.4f", l.level, l.source_only.simplified_map, l.adapted.simplified_map);
    std::printf("\n");
    std::fflush(stdout);
    out.push_back(std::move(r));
  }
  *total_secs = seconds_since(t0);
  return out;
}

Outcome adaptation_trend(const std::vector<SeedResult>& r, double secs) {
  std::size_t wins = 0;
  for (const auto& x : r) wins += x.map.at("full") > x.map.at("source-only");
  const double full = mean_of(r, "full"), base = mean_of(r, "source-only");
  Outcome o;
  o.pass = full > base && wins * 5 >= 4 * r.size() && secs < 1200.0;
  o.detail = "mean mAP full " + fmt("%.4f", full) + " vs source-only " + fmt("%.4f", base) + ", wins " +
             std::to_string(wins) + "/" + std::to_string(r.size()) + ", " + fmt("%.0f s", secs);
  return o;
}

Outcome ablation_order(const std::vector<SeedResult>& r) {
  const double so = mean_of(r, "source-only"), rdt = mean_of(r, "RDT"), gcs = mean_of(r, "GCS"),
               full = mean_of(r, "full");
  const int inversions = (rdt < so) + (gcs < so) + (full < rdt) + (full < gcs);
  Outcome o;
  o.pass = inversions <= 1;
  o.detail = "mean mAP source-only " + fmt("%.4f", so) + ", RDT " + fmt("%.4f", rdt) + ", GCS " + fmt("%.4f", gcs) +
             ", full " + fmt("%.4f", full) + ", " + std::to_string(inversions) + " inversion(s)";
  return o;
}

Outcome divergence(const std::vector<SeedResult>& r) {
  const double full = mean_js(r, "full"), base = mean_js(r, "source-only");
  Outcome o;
  o.pass = full < base;
  o.detail = "mean BEV JS full " + fmt("%.5f", full) + " vs source-only " + fmt("%.5f", base) + " nats";
  return o;
}

Outcome fog_ladder(const std::vector<SeedResult>& r) {
  double so[3] = {0, 0, 0}, ad[3] = {0, 0, 0};
  for (const auto& x : r)
    for (std::size_t i = 0; i < 3; ++i) {
      so[i] += x.ladder.at(i).source_only.simplified_map / static_cast<double>(r.size());
      ad[i] += x.ladder.at(i).adapted.simplified_map / static_cast<double>(r.size());
    }
  const bool monotone = so[0] >= so[1] && so[1] >= so[2];
  const double drop_so = so[0] - so[2], drop_ad = ad[0] - ad[2];
  Outcome o;
  o.pass = monotone && drop_ad < drop_so;
  char buf[200];
  std::snprintf(buf, sizeof(buf), "source-only L1/L3/L5 %.4f/%.4f/%.4f, adapted %.4f/%.4f/%.4f, drop %.4f vs %.4f",
                so[0], so[1], so[2], ad[0], ad[1], ad[2], drop_ad, drop_so);
  o.detail = buf;
  return o;
}

// ---------------------------------------------------------------------------
// 9. reproducibility

int run_cli(const std::string& cli, const fs::path& dir, const std::string& args) {
  const std::string cmd = "\"" + cli + "\" --config \"" + (dir / "tiny.cfg").string() + "\" --out-dir \"" +
                          dir.string() + "\" " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    files[fs::relative(e.path(), dir).generic_string()] = ss.str();
  }
  return files;
}

Outcome reproducibility(const std::string& cli) {
  Outcome o;
  if (cli.empty() || !fs::exists(cli)) {
    o.detail = "bevuda executable not found at '" + cli + "'";
    return o;
  }
  const fs::path root = fs::temp_directory_path() / ("bevuda_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  std::vector<std::map<std::string, std::string>> runs;
  int failures = 0;
  for (const char* name : {"a", "b"}) {
    const fs::path dir = root / name;
    fs::create_directories(dir);
    std::ofstream(dir / "tiny.cfg") << "seed = 7\ngen.source_scenes = 8\ngen.target_scenes = 8\ngen.eval_scenes = 8\n"
                                       "train.epochs = 4\nadapt.epochs = 2\n";
    const std::string d = dir.string() + "/";
    for (const std::string& args : {std::string("gen"), std::string("train-source"),
                                    std::string("adapt --variant all --repeats 2"),
                                    "eval --checkpoint " + d + "runs/full/r0/student.ckpt --name full-r0",
                                    "diagnose --checkpoint " + d + "source.ckpt --space prototype",
                                    std::string("report")})
      failures += run_cli(cli, dir, args) != 0;
    runs.push_back(snapshot(dir));
  }
  fs::remove_all(root);

  std::size_t differing = 0, checkpoints = 0, csvs = 0, reports = 0;
  std::set<std::string> names;
  for (const auto& r : runs)
    for (const auto& [n, _] : r) names.insert(n);
  for (const auto& n : names) {
    const auto a = runs[0].find(n), b = runs[1].find(n);
    if (a == runs[0].end() || b == runs[1].end() || a->second != b->second) ++differing;
    checkpoints += n.ends_with(".ckpt");
    csvs += n.ends_with(".csv");
    reports += n.ends_with(".txt");
  }
  o.pass = failures == 0 && differing == 0 && checkpoints > 0 && csvs > 0 && reports > 0;
  o.detail = std::to_string(names.size()) + " files (" + std::to_string(checkpoints) + " checkpoints, " +
             std::to_string(csvs) + " CSVs, " + std::to_string(reports) + " reports), " + std::to_string(differing) +
             " differ, " + std::to_string(failures) + " failed commands";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string cli = BEVUDA_CLI_PATH;
  std::size_t seeds = 5;
  std::vector<int> only;
  app.add_option("--cli", cli, "bevuda executable for the reproducibility run");
  app.add_option("--seeds", seeds, "root seeds for the trend criteria")->check(CLI::PositiveNumber);
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  int failed = 0;
  auto report = [&](int n, const char* what, const Outcome& o) {
    std::printf("%s criterion %d: %s: %s\n", o.pass ? "PASS" : "FAIL", n, what, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  };
  auto guarded = [&](int n, const char* what, auto fn) {
    if (!wanted(n)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.detail = std::string("exception: ") + e.what();
    }
    report(n, what, o);
  };

  guarded(1, "gradient check", gradients);
  guarded(2, "oracles", oracles);
  guarded(3, "UEMA invariants", uema);
  guarded(4, "spot values", spot_values);

  if (wanted(5) || wanted(6) || wanted(7) || wanted(8)) {
    std::vector<SeedResult> r;
    double total_secs = 0.0;
    std::string error;
    try {
      r = run_trends(seeds, &total_secs);
    } catch (const std::exception& e) {
      error = std::string("exception: ") + e.what();
    }
    auto trend = [&](int n, const char* what, auto fn) {
      if (!wanted(n)) return;
      report(n, what, error.empty() ? fn() : Outcome{false, error});
    };
    trend(5, "adaptation trend", [&] { return adaptation_trend(r, total_secs); });
    trend(6, "ablation ordering", [&] { return ablation_order(r); });
    trend(7, "divergence reduction", [&] { return divergence(r); });
    trend(8, "fog ladder", [&] { return fog_ladder(r); });
  }

  guarded(9, "reproducibility", [&] { return reproducibility(cli); });
  return failed == 0 ? 0 : 1;
}
