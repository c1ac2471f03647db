#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "bevuda/errors.hpp"
#include "bevuda/harness/config.hpp"
#include "bevuda/harness/metrics.hpp"
#include "bevuda/harness/report.hpp"
#include "bevuda/harness/training.hpp"
#include "bevuda/synth/corpus.hpp"
#include "doctest.h"
#include "support/oracles.hpp"
#include "support/random.hpp"

using namespace bevuda;
using namespace bevuda::harness;
using geometry::BevGrid;
using geometry::ModelDims;
using numerics::Rng;
using testing_support::naive_js;
using testing_support::random_simplex;
using testing_support::uniform;

namespace {

// Empty prediction set (occupancy 0 everywhere) for a grid.
DetectionSet blank(BevGrid grid, std::size_t classes) {
  const std::size_t N = grid.cells();
  Tensor scores({N, classes}, 0.0);
  for (std::size_t c = 0; c < N; ++c) scores[c * classes] = 1.0;
  return DetectionSet{Tensor({N}, 0.0), Tensor({N, 2}, 0.0), scores};
}

void predict_at(DetectionSet& d, BevGrid grid, const ObjectLabel& l, double score) {
  const std::size_t c = grid.index(l.cell_d, l.cell_w);
  const std::size_t n = d.classes();
  d.occupancy[c] = score;
  d.offsets[2 * c] = l.offset_d;
  d.offsets[2 * c + 1] = l.offset_w;
  for (std::size_t k = 0; k < n; ++k) d.class_scores[c * n + k] = k == l.category ? 1.0 : 0.0;
}

struct SmallData {
  ModelDims dims;
  synth::Corpus source;
  synth::Corpus target;
  explicit SmallData(std::size_t n = 8, std::uint64_t seed = 3) {
    synth::SceneSpec spec = synth::spec_for(dims);
    spec.lidar_density = 0.6;
    source = synth::make_corpus(spec, synth::DomainShift::none(), n, seed, true);
    target = synth::make_corpus(spec, synth::DomainShift::fog_level(3, 0.006), n, seed + 1, false);
  }
};

SourceTraining small_training(std::uint64_t seed, std::size_t epochs) {
  SourceTraining t;
  t.step.lr = 0.1;
  t.step.depth_weight = 4.0;
  t.step.grad_clip = 10.0;
  t.step.seed = seed;
  t.epochs = epochs;
  t.batch_size = 4;
  return t;
}

}  // namespace

TEST_CASE("average_precision") {
  const bool all[] = {true, true};
  CHECK(average_precision(all, 2) == 1.0);
  const bool half[] = {true};
  CHECK(average_precision(half, 2) == 0.5);
  const bool mixed[] = {false, true};
  CHECK(average_precision(mixed, 1) == 0.5);
  CHECK(average_precision(std::span<const bool>{}, 3) == 0.0);
  CHECK(average_precision(all, 0) == 0.0);
}

TEST_CASE("evaluate_detections hand examples") {
  const BevGrid grid{4, 4};
  const std::vector<std::vector<ObjectLabel>> truth = {{{0, 1, 0.1, -0.2, 0}, {2, 3, -0.3, 0.0, 0}, {3, 0, 0.2, 0.2, 1}}};
  SUBCASE("exact saturated predictions give mAP 1 and zero translation error") {
    DetectionSet d = blank(grid, 3);
    for (const auto& l : truth[0]) predict_at(d, grid, l, 1.0);
    const MetricsReport r = evaluate_detections(std::span(&d, 1), truth, grid);
    CHECK(r.simplified_map == 1.0);
    CHECK(r.mean_translation_error == 0.0);
    CHECK(r.n_eval_scenes == 1);
    CHECK(r.per_class_ap == std::vector<double>{1.0, 1.0, 0.0});
  }
  SUBCASE("no predictions give mAP 0") {
    const DetectionSet d = blank(grid, 3);
    const MetricsReport r = evaluate_detections(std::span(&d, 1), truth, grid);
    CHECK(r.simplified_map == 0.0);
    CHECK(r.mean_translation_error == 1.0);
  }
  SUBCASE("one of two objects found without false positives gives AP 0.5") {
    DetectionSet d = blank(grid, 3);
    predict_at(d, grid, truth[0][0], 0.8);
    predict_at(d, grid, truth[0][2], 0.8);
    const MetricsReport r = evaluate_detections(std::span(&d, 1), truth, grid);
    CHECK(r.per_class_ap[0] == 0.5);
    CHECK(r.per_class_ap[1] == 1.0);
    CHECK(r.simplified_map == 0.75);
  }
  SUBCASE("a prediction of the wrong class does not match") {
    DetectionSet d = blank(grid, 3);
    ObjectLabel wrong = truth[0][2];
    wrong.category = 2;
    predict_at(d, grid, wrong, 0.9);
    CHECK(evaluate_detections(std::span(&d, 1), truth, grid).per_class_ap[1] == 0.0);
  }
  SUBCASE("mismatched inputs are rejected") {
    const DetectionSet d = blank(grid, 3);
    CHECK_THROWS_AS(evaluate_detections(std::span(&d, 1), std::vector<std::vector<ObjectLabel>>{}, grid), ShapeError);
    CHECK_THROWS_AS(evaluate_detections(std::span(&d, 1), truth, BevGrid{2, 2}), ShapeError);
  }
}

TEST_CASE("evaluation monotonicity on random scenes") {
  const BevGrid grid{8, 8};
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    // Objects on a sparse lattice so every prediction has a unique candidate.
    std::vector<std::vector<ObjectLabel>> truth(2);
    std::vector<DetectionSet> preds(2, blank(grid, 3));
    for (std::size_t s = 0; s < 2; ++s) {
      for (std::size_t d = 0; d < 8; d += 3)
        for (std::size_t w = 0; w < 8; w += 3)
          if (rng.bernoulli(0.5)) truth[s].push_back({d, w, rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.below(3)});
      for (const auto& l : truth[s])
        if (rng.bernoulli(0.5)) predict_at(preds[s], grid, l, rng.uniform(0.01, 1.0));
      for (int k = 0; k < 3; ++k) {
        ObjectLabel fp{1 + 3 * rng.below(2), 1 + 3 * rng.below(2), 0.0, 0.0, rng.below(3)};
        predict_at(preds[s], grid, fp, rng.uniform(0.01, 1.0));
      }
    }
    const double base = evaluate_detections(preds, truth, grid).simplified_map;

    // A correct prediction for an object that has none.
    for (std::size_t s = 0; s < 2; ++s)
      for (const auto& l : truth[s])
        if (preds[s].occupancy[grid.index(l.cell_d, l.cell_w)] == 0.0) {
          std::vector<DetectionSet> more = preds;
          predict_at(more[s], grid, l, rng.uniform(0.01, 1.0));
          CHECK(evaluate_detections(more, truth, grid).simplified_map >= base);
        }
    // A false positive far from every object.
    std::vector<DetectionSet> worse = preds;
    const std::size_t s = rng.below(2);
    ObjectLabel fp{1 + 3 * rng.below(2), 1 + 3 * rng.below(2), 0.0, 0.0, rng.below(3)};
    if (worse[s].occupancy[grid.index(fp.cell_d, fp.cell_w)] == 0.0) {
      predict_at(worse[s], grid, fp, rng.uniform(0.01, 1.0));
      CHECK(evaluate_detections(worse, truth, grid).simplified_map <= base);
    }
  }
}

TEST_CASE("js_divergence") {
  const std::vector<double> a = {0.2, 0.3, 0.5};
  CHECK(js_divergence(a, a) == 0.0);
  const std::vector<double> p = {1.0, 0.0}, q = {0.0, 1.0}, u = {0.5, 0.5};
  CHECK(js_divergence(p, q) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(js_divergence(p, u) == doctest::Approx(0.2158).epsilon(1e-4));
  CHECK(std::abs(js_divergence(p, u) - (0.5 * std::log(4.0 / 3.0) + 0.25 * std::log(2.0 / 3.0) + 0.25 * std::log(2.0))) <= 1e-12);
  CHECK_THROWS_AS(js_divergence(std::vector<double>{0.5, 0.6}, u), std::invalid_argument);
  CHECK_THROWS_AS(js_divergence(std::vector<double>{1.5, -0.5}, u), std::invalid_argument);
  CHECK_THROWS_AS(js_divergence(a, u), std::invalid_argument);

  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    const auto x = random_simplex(n, rng, trial % 2 == 0);
    const auto y = random_simplex(n, rng, trial % 3 == 0);
    const double v = js_divergence(x, y);
    CHECK(v == js_divergence(y, x));
    CHECK(v >= 0.0);
    CHECK(v <= std::log(2.0) + 1e-15);
    CHECK(std::abs(v - naive_js(x, y)) <= 1e-12);
  }
}

TEST_CASE("histogram and probe divergences") {
  Rng rng(6);
  const Tensor x = uniform({200, 4}, rng);
  SUBCASE("identical samples") {
    CHECK(histogram_js(x, x) == 0.0);
    CHECK(probe_h_divergence(x, x, 1) == 0.0);
  }
  SUBCASE("separable samples push the proxy towards 2") {
    const Tensor s = uniform({200, 4}, rng, 1.0, 2.0), t = uniform({200, 4}, rng, -2.0, -1.0);
    CHECK(probe_h_divergence(s, t, 2) >= 1.9);
    CHECK(histogram_js(s, t) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("the proxy stays in [0, 2] and JS in [0, ln 2]") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Tensor s = uniform({60, 3}, rng), t = uniform({60, 3}, rng, -0.5, 1.5);
      const double h = probe_h_divergence(s, t, seed);
      CHECK(h >= 0.0);
      CHECK(h <= 2.0);
      const double js = histogram_js(s, t);
      CHECK(js >= 0.0);
      CHECK(js <= std::log(2.0));
    }
  }
  SUBCASE("constant channels are flagged degenerate") {
    bool degenerate = false;
    CHECK(histogram_js(Tensor({10, 2}, 0.3), Tensor({12, 2}, 0.3), &degenerate) == 0.0);
    CHECK(degenerate);
    histogram_js(x, x, &degenerate);
    CHECK(!degenerate);
  }
  SUBCASE("channel mismatch is rejected") { CHECK_THROWS_AS(histogram_js(x, Tensor({5, 3}, 0.0)), ShapeError); }
}

TEST_CASE("divergence_report on corpora") {
  const SmallData data(4);
  const auto params = geometry::init_parameters(data.dims, 2);
  const DivergenceReport same = divergence_report(params, data.dims, data.source.scenes, data.source.scenes,
                                                  FeatureSpace::bev, 1);
  CHECK(same.js == 0.0);
  CHECK(same.h_proxy == 0.0);
  CHECK(same.space == FeatureSpace::bev);
  for (FeatureSpace space : {FeatureSpace::image, FeatureSpace::voxel, FeatureSpace::bev}) {
    const DivergenceReport r = divergence_report(params, data.dims, data.source.scenes, data.target.scenes, space, 1);
    CHECK(r.js > 0.0);
    CHECK(r.h_proxy >= 0.0);
    CHECK(r.h_proxy <= 2.0);
    CHECK(parse_feature_space(to_string(space)) == space);
  }
  const DivergenceReport proto = divergence_report(params, data.dims, data.source.scenes, data.target.scenes,
                                                   FeatureSpace::prototype, 1, data.source.sealed_labels,
                                                   data.target.sealed_labels);
  CHECK(std::isfinite(proto.js));
  CHECK_THROWS(parse_feature_space("pixels"));
}

TEST_CASE("config parsing") {
  SUBCASE("defaults") {
    std::istringstream empty("");
    const ExperimentConfig cfg = parse_config(empty);
    CHECK(cfg.uema.alpha == 0.999);
    CHECK(cfg.uema.sigma == 0.001);
    CHECK(cfg.fusion.mc_passes == 5);
    CHECK(cfg.weights.lambda3 == 0.1);
    CHECK(cfg.dims.embed_dim == 256);
  }
  SUBCASE("values, comments and blank lines") {
    std::istringstream in("# experiment\nseed = 9\n\nswitch.uema = false  # off\nfusion.theta = 0.05\ngen.target_shift = night\n");
    const ExperimentConfig cfg = parse_config(in);
    CHECK(cfg.seed == 9);
    CHECK(!cfg.switches.uema);
    CHECK(cfg.fusion.theta == 0.05);
    CHECK(cfg.target_shift == synth::DomainShift::Kind::night);
  }
  SUBCASE("errors") {
    for (const char* text : {"seed.typo = 1\n", "seed = abc\n", "seed\n", "seed = 1\nseed = 2\n", "gen.fog_level = 7\n",
                             "switch.da = maybe\n", "uema.alpha = 1.5\n", "model.image_width = 31\n"}) {
      std::istringstream in(text);
      CHECK_THROWS_AS(parse_config(in), ConfigError);
    }
  }
  SUBCASE("dump and parse round trip") {
    ExperimentConfig cfg;
    cfg.seed = 77;
    cfg.switches.kt = false;
    cfg.fusion.theta = 0.125;
    cfg.target_layout = synth::LayoutStyle::curved_city;
    cfg.adapt_lr = 0.0123;
    const std::string text = dump_config(cfg);
    std::istringstream in(text);
    const ExperimentConfig back = parse_config(in);
    CHECK(dump_config(back) == text);
    CHECK(back.seed == 77);
    CHECK(back.adapt_lr == 0.0123);
    for (const ConfigKey& k : config_keys()) CHECK(get_config_value(back, k.key) == get_config_value(cfg, k.key));
  }
  SUBCASE("unknown keys are rejected by set_config_value") {
    ExperimentConfig cfg;
    CHECK_THROWS_AS(set_config_value(cfg, "loss.lambda5", "1"), ConfigError);
    CHECK_THROWS_AS(get_config_value(cfg, "loss.lambda5"), ConfigError);
  }
  SUBCASE("derived settings follow the config") {
    ExperimentConfig cfg;
    CHECK(cfg.fog_shift(5).beta == doctest::Approx(2.5 * cfg.fog_beta0));
    CHECK(cfg.target_domain_shift().level == 3);
    const AdaptationRun run = cfg.adaptation(adaptation::Switches::all_off());
    CHECK(run.step.switches == adaptation::Switches::all_off());
    CHECK(run.step.lr == cfg.adapt_lr);
    CHECK(cfg.source_training().epochs == cfg.train_epochs);
  }
}

TEST_CASE("train_source") {
  const SmallData data(8);
  const auto init = geometry::init_parameters(data.dims, 5);
  SUBCASE("zero epochs returns the initialization") {
    CHECK(train_source(init, data.source.scenes, small_training(1, 0)).params == init);
  }
  SUBCASE("deterministic, with one CSV row per step") {
    std::ostringstream a, b;
    const SourceResult ra = train_source(init, data.source.scenes, small_training(1, 2), &a);
    const SourceResult rb = train_source(init, data.source.scenes, small_training(1, 2), &b);
    CHECK(ra.params == rb.params);
    CHECK(a.str() == b.str());
    CHECK(ra.epoch_loss.size() == 2);
    std::istringstream lines(a.str());
    std::string header;
    std::getline(lines, header);
    CHECK(header == kSourceCsvHeader);
    std::size_t rows = 0;
    for (std::string line; std::getline(lines, line);) ++rows;
    CHECK(rows == 4);
  }
  SUBCASE("final epoch loss does not exceed the first in the median over 3 seeds") {
    std::vector<double> change;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const SourceResult r = train_source(geometry::init_parameters(data.dims, seed), data.source.scenes,
                                          small_training(seed, 8));
      change.push_back(r.epoch_loss.back() - r.epoch_loss.front());
    }
    std::sort(change.begin(), change.end());
    CHECK(change[1] <= 0.0);
  }
}

TEST_CASE("epoch_order is a seeded permutation") {
  const auto a = epoch_order(10, 3, 0);
  CHECK(a == epoch_order(10, 3, 0));
  CHECK(a != epoch_order(10, 3, 1));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 10; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("run_adaptation") {
  const SmallData data(4);
  const SmallData other(4, 40);
  const auto source = geometry::init_parameters(data.dims, 7);
  AdaptationRun run;
  run.step.lr = 0.05;
  run.step.disc_lr = 0.05;
  run.step.pseudo_threshold = 0.0;
  run.step.grad_clip = 10.0;
  run.step.seed = 2;
  run.epochs = 1;
  run.batch_size = 2;

  SUBCASE("all switches off ignores the target domain") {
    run.step.switches = adaptation::Switches::all_off();
    const AdaptResult a = run_adaptation(source, data.source.scenes, data.target.scenes, run);
    const AdaptResult b = run_adaptation(source, data.source.scenes, other.target.scenes, run);
    CHECK(a.state.student == b.state.student);
    REQUIRE(a.reports.size() == 2);
    for (const auto& r : a.reports) {
      CHECK(r.l_unc == 0.0);
      CHECK(r.l_mkt == 0.0);
      CHECK(r.l_ali == 0.0);
      CHECK(r.total == r.l_sup);
    }
    // Continued source training: the same supervised steps in the same order.
    numerics::ParameterSet p = source;
    const auto order = epoch_order(4, numerics::mix_seed(2, numerics::stream_id("shuffle.source")), 0);
    for (std::size_t step = 0; step < 2; ++step) {
      const synth::SceneSample* batch[] = {&data.source.scenes[order[2 * step]], &data.source.scenes[order[2 * step + 1]]};
      p = adaptation::supervised_step(p, batch, run.step, step).first;
    }
    for (const auto& [name, t] : p) CHECK(numerics::max_abs_diff(t, a.state.student.at(name)) <= 1e-12);
  }
  SUBCASE("all switches on logs four nonzero loss columns on step 1") {
    std::ostringstream csv;
    const AdaptResult r = run_adaptation(source, data.source.scenes, data.target.scenes, run, &csv);
    const LossReport& first = r.reports.at(0);
    CHECK(first.l_unc != 0.0);
    CHECK(first.l_sup != 0.0);
    CHECK(first.l_mkt != 0.0);
    CHECK(first.l_ali != 0.0);
    CHECK(csv.str().rfind(adaptation::kLossCsvHeader, 0) == 0);
  }
  SUBCASE("UEMA off updates the teacher with the constant coefficient") {
    run.step.switches.uema = false;
    run.epochs = 1;
    run.batch_size = 4;
    const AdaptResult r = run_adaptation(source, data.source.scenes, data.target.scenes, run);
    REQUIRE(r.reports.size() == 1);
    const auto expected = adaptation::uema_update(source, r.state.student, 0.0, adaptation::UemaConfig{0.999, 0.0});
    CHECK(r.state.teacher == expected);
    const auto with_u = adaptation::uema_update(source, r.state.student, 0.4, adaptation::UemaConfig{0.999, 0.0});
    CHECK(with_u == expected);
  }
}

TEST_CASE("report") {
  auto metrics = [](const std::string& run, std::size_t repeat, double map) {
    MetricsRow r;
    r.run = run;
    r.repeat = repeat;
    r.seed = 10 + repeat;
    r.metrics.simplified_map = map;
    r.metrics.mean_translation_error = 0.25;
    r.metrics.per_class_ap = {map, 0.5, 0.125};
    r.metrics.n_eval_scenes = 64;
    return r;
  };
  SUBCASE("empty input gives the header only") {
    const std::string t = format_table({});
    CHECK(std::count(t.begin(), t.end(), '\n') == 2);
    CHECK(t.find("Method") == 0);
  }
  SUBCASE("rows are sorted by run name with mean and sample std") {
    const std::vector<MetricsRow> rows = {metrics("zeta", 0, 0.2), metrics("alpha", 0, 0.1), metrics("alpha", 1, 0.3)};
    const auto summary = summarize(rows);
    REQUIRE(summary.size() == 2);
    CHECK(summary[0].run == "alpha");
    CHECK(summary[0].repeats == 2);
    CHECK(summary[0].map.mean == doctest::Approx(0.2));
    CHECK(summary[0].map.std == doctest::Approx(std::sqrt(0.02)));
    CHECK(summary[1].map.std == 0.0);
    CHECK(!summary[0].js.has_value());
    const std::string table = format_table(summary);
    CHECK(table.find("alpha") < table.find("zeta"));
    CHECK(table.find("0.2000 +- 0.1414") != std::string::npos);
  }
  SUBCASE("CSV round trip") {
    std::stringstream ms;
    ms << kMetricsCsvHeader << '\n';
    write_metrics_row(ms, metrics("full", 1, 0.4));
    const auto back = read_metrics_csv(ms);
    REQUIRE(back.size() == 1);
    CHECK(back[0].run == "full");
    CHECK(back[0].seed == 11);
    CHECK(back[0].metrics.per_class_ap == std::vector<double>{0.4, 0.5, 0.125});

    std::stringstream ds;
    ds << kDivergenceCsvHeader << '\n';
    DivergenceRow d{"full", 0, 3, DivergenceReport{0.0125, 0.5, FeatureSpace::voxel, true}};
    write_divergence_row(ds, d);
    const auto dback = read_divergence_csv(ds);
    REQUIRE(dback.size() == 1);
    CHECK(dback[0].divergence.js == 0.0125);
    CHECK(dback[0].divergence.space == FeatureSpace::voxel);
    CHECK(dback[0].divergence.degenerate);

    const auto summary = summarize({metrics("full", 1, 0.4)}, dback);
    CHECK(summary[0].js->mean == 0.0125);
    CHECK(summary_csv(summary).rfind(kSummaryCsvHeader, 0) == 0);
  }
  SUBCASE("malformed CSVs and bad names are rejected") {
    std::stringstream bad_header("run,seed\n");
    CHECK_THROWS_AS(read_metrics_csv(bad_header), FormatError);
    std::stringstream short_row(std::string(kMetricsCsvHeader) + "\nfull,1,2\n");
    CHECK_THROWS_AS(read_metrics_csv(short_row), FormatError);
    std::stringstream bad_number(std::string(kMetricsCsvHeader) + "\nfull,1,2,x,0.1,3,\n");
    CHECK_THROWS_AS(read_metrics_csv(bad_number), FormatError);
    std::ostringstream os;
    CHECK_THROWS_AS(write_metrics_row(os, metrics("a,b", 0, 0.1)), std::invalid_argument);
  }
  SUBCASE("mean_std") {
    CHECK(mean_std({}).mean == 0.0);
    CHECK(mean_std({2.0}).std == 0.0);
    const Stat s = mean_std({1.0, 2.0, 3.0, 4.0});
    CHECK(s.mean == 2.5);
    CHECK(s.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  }
}
