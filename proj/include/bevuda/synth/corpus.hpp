#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bevuda/synth/scene.hpp"

namespace bevuda::synth {

struct CorpusHeader {
  SceneSpec spec;  // spec.seed is unused; scene i is generated from mix_seed(seed, i)
  DomainShift shift;
  std::size_t n_scenes = 0;
  std::uint64_t seed = 0;
  bool labeled = true;  // whether scene records carry their labels
  std::vector<double> bin_edges;

  friend bool operator==(const CorpusHeader&, const CorpusHeader&) = default;
};

struct Corpus {
  CorpusHeader header;
  std::vector<SceneSample> scenes;
  /// Evaluation labels per scene. Empty after read_corpus; filled by
  /// read_sealed_labels or make_corpus.
  std::vector<std::vector<ObjectLabel>> sealed_labels;
};

/// Seed of scene `index` in a corpus built from `seed`.
std::uint64_t scene_seed(std::uint64_t seed, std::size_t index);

/// Generates n_scenes scenes and applies `shift` to their images. Scenes
/// depend only on (spec, seed, index), so corpora that differ only in their
/// shift show the same scenes.
Corpus make_corpus(const SceneSpec& spec, const DomainShift& shift, std::size_t n_scenes, std::uint64_t seed,
                   bool labeled);

/// Writes the corpus atomically (temporary file, then rename).
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
/// Header and scene records only; the sealed section is not parsed.
Corpus read_corpus(const std::filesystem::path& path);
std::vector<std::vector<ObjectLabel>> read_sealed_labels(const std::filesystem::path& path);

Corpus build_corpus(const std::filesystem::path& path, const SceneSpec& spec, const DomainShift& shift,
                    std::size_t n_scenes, std::uint64_t seed, bool labeled);

/// Labels packed as [count, (cell_d, cell_w, offset_d, offset_w, category)...].
numerics::Tensor pack_labels(const std::vector<ObjectLabel>& labels);
std::vector<ObjectLabel> unpack_labels(const numerics::Tensor& packed);

}  // namespace bevuda::synth
