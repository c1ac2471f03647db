#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "bevuda/harness/config.hpp"
#include "bevuda/harness/metrics.hpp"
#include "bevuda/harness/training.hpp"
#include "bevuda/synth/corpus.hpp"

namespace bevuda::harness {

struct CorpusSet {
  synth::Corpus source;
  synth::Corpus target;  // unlabeled; its labels stay in the sealed section
  synth::Corpus eval;
};

/// Source, target and evaluation corpora of one root seed. Corpora built
/// with different shifts show the same scenes.
CorpusSet generate_corpora(const ExperimentConfig& cfg, const synth::DomainShift& target_shift);

numerics::ParameterSet initial_parameters(const ExperimentConfig& cfg);

SourceResult pretrain(const ExperimentConfig& cfg, const synth::Corpus& source, std::ostream* csv = nullptr);

struct RunResult {
  std::string name;
  adaptation::Switches switches;
  AdaptResult adapt;
  MetricsReport metrics;
  DivergenceReport divergence;
};

/// Adapts from `source_params` with the given switches, then evaluates the
/// student on the evaluation corpus and measures its source/target
/// divergence in `space`.
RunResult adapt_and_evaluate(const ExperimentConfig& cfg, const numerics::ParameterSet& source_params,
                             const CorpusSet& corpora, const adaptation::Switches& switches,
                             FeatureSpace space = FeatureSpace::bev, std::ostream* csv = nullptr);

struct Variant {
  std::string name;
  adaptation::Switches switches;
};

/// source-only (every switch off), RDT (DA+UEMA+KT), GCS (BA+IA+VA) and
/// full (every switch on).
std::vector<Variant> ablation_variants();

struct LadderLevel {
  int level = 0;
  MetricsReport source_only;
  MetricsReport adapted;
};

/// Walks the fog ladder in order. The source-only column adapts from
/// `source_params` with every switch off at each level; the adapted column
/// is continual, each level starting from the previous level's student.
std::vector<LadderLevel> fog_ladder(const ExperimentConfig& cfg, const numerics::ParameterSet& source_params,
                                    const std::vector<int>& levels);

}  // namespace bevuda::harness
