#include "bevuda/harness/experiments.hpp"

#include "bevuda/numerics/rng.hpp"

namespace bevuda::harness {

CorpusSet generate_corpora(const ExperimentConfig& cfg, const synth::DomainShift& target_shift) {
  cfg.validate();
  CorpusSet c;
  c.source = synth::make_corpus(cfg.scene_spec(false), synth::DomainShift::none(), cfg.source_scenes,
                                cfg.stream("corpus.source"), true);
  c.target = synth::make_corpus(cfg.scene_spec(true), target_shift, cfg.target_scenes, cfg.stream("corpus.target"),
                                false);
  c.eval = synth::make_corpus(cfg.scene_spec(true), target_shift, cfg.eval_scenes, cfg.stream("corpus.eval"), true);
  return c;
}

numerics::ParameterSet initial_parameters(const ExperimentConfig& cfg) {
  return geometry::init_parameters(cfg.dims, cfg.stream("init"));
}

SourceResult pretrain(const ExperimentConfig& cfg, const synth::Corpus& source, std::ostream* csv) {
  return train_source(initial_parameters(cfg), source.scenes, cfg.source_training(), csv);
}

RunResult adapt_and_evaluate(const ExperimentConfig& cfg, const numerics::ParameterSet& source_params,
                             const CorpusSet& corpora, const adaptation::Switches& switches, FeatureSpace space,
                             std::ostream* csv) {
  RunResult r;
  r.name = switches.name();
  r.switches = switches;
  r.adapt = run_adaptation(source_params, corpora.source.scenes, corpora.target.scenes, cfg.adaptation(switches), csv);
  r.metrics = evaluate(r.adapt.state.student, cfg.dims, corpora.eval.scenes, corpora.eval.sealed_labels);
  r.divergence = divergence_report(r.adapt.state.student, cfg.dims, corpora.source.scenes, corpora.target.scenes,
                                   space, cfg.stream("probe"), corpora.source.sealed_labels,
                                   corpora.target.sealed_labels);
  return r;
}

std::vector<Variant> ablation_variants() {
  using adaptation::Switches;
  Switches rdt = Switches::all_off();
  rdt.da = rdt.uema = rdt.kt = true;
  Switches gcs = Switches::all_off();
  gcs.ba = gcs.ia = gcs.va = true;
  return {{"source-only", Switches::all_off()}, {"RDT", rdt}, {"GCS", gcs}, {"full", Switches{}}};
}

std::vector<LadderLevel> fog_ladder(const ExperimentConfig& cfg, const numerics::ParameterSet& source_params,
                                    const std::vector<int>& levels) {
  std::vector<LadderLevel> out;
  numerics::ParameterSet current = source_params;
  for (int level : levels) {
    const CorpusSet corpora = generate_corpora(cfg, cfg.fog_shift(level));
    LadderLevel row;
    row.level = level;
    row.source_only =
        adapt_and_evaluate(cfg, source_params, corpora, adaptation::Switches::all_off()).metrics;
    RunResult adapted = adapt_and_evaluate(cfg, current, corpora, adaptation::Switches{});
    row.adapted = adapted.metrics;
    current = std::move(adapted.adapt.state.student);
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace bevuda::harness
