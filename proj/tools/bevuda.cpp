#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "bevuda/errors.hpp"
#include "bevuda/harness/config.hpp"
#include "bevuda/harness/experiments.hpp"
#include "bevuda/harness/report.hpp"
#include "bevuda/numerics/checkpoint.hpp"

namespace fs = std::filesystem;
using namespace bevuda;
using namespace bevuda::harness;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  fs::path out_dir = ".";
};

fs::path resolve(const Globals& g, const fs::path& p) { return p.is_absolute() ? p : g.out_dir / p; }

ExperimentConfig load(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (g.seed_given) cfg.seed = g.seed;
  cfg.validate();
  return cfg;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ConfigError(what + " '" + p.string() + "' does not exist");
}

synth::Corpus load_corpus(const fs::path& p, const std::string& what, bool with_labels) {
  require_file(p, what);
  synth::Corpus c = synth::read_corpus(p);
  if (with_labels) c.sealed_labels = synth::read_sealed_labels(p);
  return c;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw FormatError("cannot write '" + p.string() + "'");
  return os;
}

template <class Row, class Reader>
std::vector<Row> read_if_present(const fs::path& p, Reader reader) {
  if (!fs::exists(p)) return {};
  std::ifstream in(p, std::ios::binary);
  return reader(in);
}

// Replaces rows with the same (run, repeat) and rewrites the file in sorted order.
template <class Row, class Reader, class Writer>
void upsert(const fs::path& p, const char* header, std::vector<Row> fresh, Reader reader, Writer writer) {
  std::vector<Row> rows = read_if_present<Row>(p, reader);
  for (Row& f : fresh) {
    std::erase_if(rows, [&](const Row& r) { return r.run == f.run && r.repeat == f.repeat; });
    rows.push_back(std::move(f));
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const Row& a, const Row& b) { return std::tie(a.run, a.repeat) < std::tie(b.run, b.repeat); });
  std::ofstream os = open_out(p);
  os << header << '\n';
  for (const Row& r : rows) writer(os, r);
}

void store_metrics(const Globals& g, std::vector<MetricsRow> rows) {
  upsert(resolve(g, "metrics.csv"), kMetricsCsvHeader, std::move(rows),
         [](std::istream& in) { return read_metrics_csv(in); }, write_metrics_row);
}

void store_divergence(const Globals& g, std::vector<DivergenceRow> rows) {
  upsert(resolve(g, "divergence.csv"), kDivergenceCsvHeader, std::move(rows),
         [](std::istream& in) { return read_divergence_csv(in); }, write_divergence_row);
}

void print_metrics(const std::string& name, const MetricsReport& m) {
  std::printf("%s: mAP %.4f  mATE %.4f  (%zu scenes)\n", name.c_str(), m.simplified_map, m.mean_translation_error,
              m.n_eval_scenes);
}

// ---------------------------------------------------------------------------

int cmd_gen(const Globals& g, int level) {
  ExperimentConfig cfg = load(g);
  if (level > 0) {
    cfg.target_shift = synth::DomainShift::Kind::fog;
    cfg.fog_level = level;
    cfg.validate();
  }
  const CorpusSet c = generate_corpora(cfg, cfg.target_domain_shift());
  fs::create_directories(g.out_dir);
  synth::write_corpus(resolve(g, cfg.source_corpus), c.source);
  synth::write_corpus(resolve(g, cfg.target_corpus), c.target);
  synth::write_corpus(resolve(g, cfg.eval_corpus), c.eval);
  std::printf("wrote %zu source, %zu target and %zu eval scenes to %s\n", c.source.scenes.size(),
              c.target.scenes.size(), c.eval.scenes.size(), g.out_dir.string().c_str());
  return 0;
}

int cmd_train(const Globals& g) {
  const ExperimentConfig cfg = load(g);
  const synth::Corpus source = load_corpus(resolve(g, cfg.source_corpus), "source corpus", false);
  const fs::path ckpt = resolve(g, "source.ckpt");
  std::ofstream csv = open_out(resolve(g, "source_loss.csv"));
  try {
    const SourceResult r = pretrain(cfg, source, &csv);
    numerics::save_checkpoint(ckpt, r.params);
    std::printf("source loss %.4f -> %.4f over %zu epochs; wrote %s\n", r.epoch_loss.empty() ? 0.0 : r.epoch_loss.front(),
                r.epoch_loss.empty() ? 0.0 : r.epoch_loss.back(), r.epoch_loss.size(), ckpt.string().c_str());
  } catch (const DivergenceError& e) {
    numerics::save_checkpoint(ckpt, e.last_good());
    std::fprintf(stderr, "error: %s (last good checkpoint saved to %s)\n", e.what(), ckpt.string().c_str());
    return kExitDivergence;
  }
  return 0;
}

int cmd_adapt(const Globals& g, const std::string& source_ckpt, const std::string& variant, std::size_t repeats) {
  const ExperimentConfig base = load(g);
  const fs::path ckpt_path = source_ckpt.empty() ? resolve(g, "source.ckpt") : fs::path(source_ckpt);
  require_file(ckpt_path, "source checkpoint");
  const numerics::ParameterSet source_params = numerics::load_checkpoint(ckpt_path);
  CorpusSet corpora;
  corpora.source = load_corpus(resolve(g, base.source_corpus), "source corpus", true);
  corpora.target = load_corpus(resolve(g, base.target_corpus), "target corpus", true);
  corpora.eval = load_corpus(resolve(g, base.eval_corpus), "eval corpus", true);

  std::vector<Variant> runs;
  if (variant == "config") {
    runs.push_back({base.switches.name(), base.switches});
  } else {
    for (const Variant& v : ablation_variants())
      if (variant == "all" || variant == v.name) runs.push_back(v);
    if (runs.empty()) throw ConfigError("unknown variant '" + variant + "'");
  }

  std::vector<MetricsRow> metrics;
  std::vector<DivergenceRow> divergences;
  for (const Variant& v : runs) {
    for (std::size_t r = 0; r < repeats; ++r) {
      ExperimentConfig cfg = base;
      cfg.seed = base.seed + r;
      const fs::path dir = resolve(g, fs::path("runs") / v.name / ("r" + std::to_string(r)));
      std::ofstream csv = open_out(dir / "loss.csv");
      RunResult res;
      try {
        res = adapt_and_evaluate(cfg, source_params, corpora, v.switches, FeatureSpace::bev, &csv);
      } catch (const DivergenceError& e) {
        numerics::save_checkpoint(dir / "student.ckpt", e.last_good());
        std::fprintf(stderr, "error: %s (last good student saved to %s)\n", e.what(),
                     (dir / "student.ckpt").string().c_str());
        return kExitDivergence;
      }
      numerics::save_checkpoint(dir / "student.ckpt", res.adapt.state.student);
      numerics::save_checkpoint(dir / "teacher.ckpt", res.adapt.state.teacher);
      print_metrics(v.name + " r" + std::to_string(r), res.metrics);
      metrics.push_back({v.name, r, cfg.seed, res.metrics});
      divergences.push_back({v.name, r, cfg.seed, res.divergence});
    }
  }
  store_metrics(g, metrics);
  store_divergence(g, divergences);
  const auto summary = summarize(metrics, divergences);
  std::fputs(format_table(summary, "adaptation (" + std::to_string(repeats) + " repeats)").c_str(), stdout);
  return 0;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, std::string name, const std::string& corpus) {
  const ExperimentConfig cfg = load(g);
  require_file(checkpoint, "checkpoint");
  const fs::path corpus_path = corpus.empty() ? resolve(g, cfg.eval_corpus) : fs::path(corpus);
  const synth::Corpus eval = load_corpus(corpus_path, "eval corpus", true);
  if (eval.scenes.empty()) throw ConfigError("eval corpus '" + corpus_path.string() + "' is empty");
  const MetricsReport m = evaluate(numerics::load_checkpoint(checkpoint), cfg.dims, eval.scenes, eval.sealed_labels);
  if (name.empty()) name = fs::path(checkpoint).stem().string();
  print_metrics(name, m);
  store_metrics(g, {{name, 0, cfg.seed, m}});
  return 0;
}

int cmd_diagnose(const Globals& g, const std::string& checkpoint, std::string name, const std::string& space_name) {
  const ExperimentConfig cfg = load(g);
  require_file(checkpoint, "checkpoint");
  FeatureSpace space;
  try {
    space = parse_feature_space(space_name);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  const bool labels = space == FeatureSpace::prototype;
  const synth::Corpus source = load_corpus(resolve(g, cfg.source_corpus), "source corpus", labels);
  const synth::Corpus target = load_corpus(resolve(g, cfg.target_corpus), "target corpus", labels);
  const DivergenceReport d = divergence_report(numerics::load_checkpoint(checkpoint), cfg.dims, source.scenes,
                                               target.scenes, space, cfg.stream("probe"), source.sealed_labels,
                                               target.sealed_labels);
  if (name.empty()) name = fs::path(checkpoint).stem().string();
  std::printf("%s [%s]: js %.6f nats  h_proxy %.4f%s\n", name.c_str(), to_string(space).c_str(), d.js, d.h_proxy,
              d.degenerate ? "  (warning: every channel constant)" : "");
  store_divergence(g, {{name, 0, cfg.seed, d}});
  return 0;
}

int cmd_report(const Globals& g) {
  const auto metrics =
      read_if_present<MetricsRow>(resolve(g, "metrics.csv"), [](std::istream& in) { return read_metrics_csv(in); });
  const auto divs = read_if_present<DivergenceRow>(resolve(g, "divergence.csv"),
                                                   [](std::istream& in) { return read_divergence_csv(in); });
  const auto rows = summarize(metrics, divs);
  const std::string table = format_table(rows, "results (mean +- std over repeats)");
  std::fputs(table.c_str(), stdout);
  open_out(resolve(g, "report.txt")) << table;
  open_out(resolve(g, "summary.csv")) << summary_csv(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher-student domain adaptation for toy BEV detection"};
  app.require_subcommand(1);
  Globals g;
  std::string out_dir = ".";
  app.add_option("--config", g.config, "key = value config file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", g.seed, "root seed (overrides the config)");
  app.add_option("--out-dir", out_dir, "directory for corpora, checkpoints, logs and reports");

  int level = 0;
  auto* gen = app.add_subcommand("gen", "generate source, target and eval corpora");
  gen->add_option("--fog-level", level, "fog ladder level of the target (overrides the config)")->check(CLI::Range(1, 5));

  auto* train = app.add_subcommand("train-source", "pretrain on the labeled source corpus");

  std::string source_ckpt;
  std::string variant = "config";
  std::size_t repeats = 1;
  auto* adapt = app.add_subcommand("adapt", "adapt a source checkpoint to the target corpus and evaluate it");
  adapt->add_option("--source-ckpt", source_ckpt, "source checkpoint (default <out-dir>/source.ckpt)");
  adapt->add_option("--variant", variant, "config, source-only, RDT, GCS, full or all");
  adapt->add_option("--repeats", repeats, "runs per variant; repeat r uses seed + r")->check(CLI::PositiveNumber);

  std::string checkpoint;
  std::string name;
  std::string corpus;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on the eval corpus");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--name", name, "run name in metrics.csv (default: checkpoint stem)");
  eval->add_option("--corpus", corpus, "corpus with sealed labels (default: the config's eval corpus)");

  std::string space = "bev";
  auto* diagnose = app.add_subcommand("diagnose", "source/target feature divergence of a checkpoint");
  diagnose->add_option("--checkpoint", checkpoint, "checkpoint to probe")->required();
  diagnose->add_option("--name", name, "run name in divergence.csv (default: checkpoint stem)");
  diagnose->add_option("--space", space, "image, voxel, bev or prototype");

  auto* report = app.add_subcommand("report", "summarize metrics.csv and divergence.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  g.seed_given = seed_opt->count() > 0;
  g.out_dir = out_dir;

  try {
    if (*gen) return cmd_gen(g, level);
    if (*train) return cmd_train(g);
    if (*adapt) return cmd_adapt(g, source_ckpt, variant, repeats);
    if (*eval) return cmd_eval(g, checkpoint, name, corpus);
    if (*diagnose) return cmd_diagnose(g, checkpoint, name, space);
    if (*report) return cmd_report(g);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
