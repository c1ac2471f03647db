#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "bevuda/harness/training.hpp"
#include "bevuda/synth/scene.hpp"

namespace bevuda::harness {

/// Everything one experiment needs. Every field has a default and a dotted
/// key in the text format (see config_keys()).
struct ExperimentConfig {
  std::uint64_t seed = 1;

  std::filesystem::path source_corpus = "source.corpus";
  std::filesystem::path target_corpus = "target.corpus";
  std::filesystem::path eval_corpus = "eval.corpus";

  std::size_t n_objects = 4;
  synth::LayoutStyle source_layout = synth::LayoutStyle::grid_city;
  synth::LayoutStyle target_layout = synth::LayoutStyle::grid_city;
  double lidar_density = 0.6;
  std::size_t source_scenes = 128;
  std::size_t target_scenes = 64;
  std::size_t eval_scenes = 64;
  synth::DomainShift::Kind target_shift = synth::DomainShift::Kind::fog;
  int fog_level = 3;
  double fog_beta0 = 0.006;
  double airlight = 0.8;
  double night_gain = 0.5;
  double rain_density = 0.05;
  double noise_sigma = 0.02;

  geometry::ModelDims dims;
  uncertainty::FusionConfig fusion;
  adaptation::UemaConfig uema;
  adaptation::LossWeights weights;
  adaptation::Switches switches;

  double train_lr = 0.1;
  std::size_t train_epochs = 150;
  std::size_t batch_size = 4;
  double depth_weight = 4.0;
  double train_dropout = 0.2;
  double grad_clip = 10.0;

  double adapt_lr = 0.05;
  double disc_lr = 0.05;
  std::size_t adapt_epochs = 12;
  double pseudo_threshold = 0.3;

  /// Throws ConfigError on out-of-range values.
  void validate() const;

  synth::SceneSpec scene_spec(bool target_domain) const;
  synth::DomainShift target_domain_shift() const;
  /// The same target shift moved to another fog ladder level.
  synth::DomainShift fog_shift(int level) const;

  std::uint64_t stream(const char* tag) const;
  SourceTraining source_training() const;
  AdaptationRun adaptation(const adaptation::Switches& switches) const;
  AdaptationRun adaptation() const { return adaptation(switches); }
};

struct ConfigKey {
  std::string key;
  std::string doc;
};

/// Every accepted key in file order.
const std::vector<ConfigKey>& config_keys();

/// Sets one key from its text form; unknown keys and malformed values throw
/// ConfigError.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& cfg, const std::string& key);

/// `key = value` lines; blank lines and `#` comments are ignored. Keys not
/// given keep their defaults. Relative corpus paths are kept as written.
ExperimentConfig parse_config(std::istream& in, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Every key with its current value, parseable by parse_config.
std::string dump_config(const ExperimentConfig& cfg);

}  // namespace bevuda::harness
