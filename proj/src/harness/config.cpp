#include "bevuda/harness/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "bevuda/numerics/rng.hpp"

namespace bevuda::harness {

namespace {

using uncertainty::DepthSelection;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string selection_name(DepthSelection s) {
  switch (s) {
    case DepthSelection::uncertainty: return "uncertainty";
    case DepthSelection::confidence: return "confidence";
    case DepthSelection::lidar_over_prediction: return "lidar-over-prediction";
    case DepthSelection::lidar_only: return "lidar-only";
  }
  return "uncertainty";
}

DepthSelection parse_selection(const std::string& key, const std::string& v) {
  for (DepthSelection s : {DepthSelection::uncertainty, DepthSelection::confidence,
                           DepthSelection::lidar_over_prediction, DepthSelection::lidar_only}) {
    if (selection_name(s) == v) return s;
  }
  throw ConfigError(key + ": unknown depth selection '" + v + "'");
}

struct Field {
  ConfigKey info;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field number(const char* key, const char* doc, T ExperimentConfig::*member) {
  return {{key, doc},
          [member](ExperimentConfig& c, const std::string& k, const std::string& v) {
            if constexpr (std::is_floating_point_v<T>) {
              c.*member = to_double(k, v);
            } else {
              c.*member = static_cast<T>(to_u64(k, v));
            }
          },
          [member](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          }};
}

template <typename S, typename T>
Field nested(const char* key, const char* doc, S ExperimentConfig::*outer, T S::*member) {
  return {{key, doc},
          [outer, member](ExperimentConfig& c, const std::string& k, const std::string& v) {
            if constexpr (std::is_same_v<T, bool>) {
              c.*outer.*member = to_bool(k, v);
            } else if constexpr (std::is_floating_point_v<T>) {
              c.*outer.*member = to_double(k, v);
            } else {
              c.*outer.*member = static_cast<T>(to_u64(k, v));
            }
          },
          [outer, member](const ExperimentConfig& c) {
            if constexpr (std::is_same_v<T, bool>) {
              return std::string(c.*outer.*member ? "true" : "false");
            } else if constexpr (std::is_floating_point_v<T>) {
              return format_double(c.*outer.*member);
            } else {
              return std::to_string(c.*outer.*member);
            }
          }};
}

Field path(const char* key, const char* doc, std::filesystem::path ExperimentConfig::*member) {
  return {{key, doc},
          [member](ExperimentConfig& c, const std::string& k, const std::string& v) {
            if (v.empty()) throw ConfigError(k + ": path must not be empty");
            c.*member = v;
          },
          [member](const ExperimentConfig& c) { return (c.*member).string(); }};
}

Field layout(const char* key, const char* doc, synth::LayoutStyle ExperimentConfig::*member) {
  return {{key, doc},
          [member](ExperimentConfig& c, const std::string&, const std::string& v) { c.*member = synth::parse_layout(v); },
          [member](const ExperimentConfig& c) { return synth::to_string(c.*member); }};
}

std::vector<Field> build_fields() {
  using E = ExperimentConfig;
  using geometry::ModelDims;
  using adaptation::Switches;
  std::vector<Field> f;
  f.push_back(number("seed", "root seed; every other seed is derived from it", &E::seed));

  f.push_back(path("data.source", "labeled source corpus", &E::source_corpus));
  f.push_back(path("data.target", "unlabeled target corpus", &E::target_corpus));
  f.push_back(path("data.eval", "labeled target-domain evaluation corpus", &E::eval_corpus));

  f.push_back(number("gen.n_objects", "objects per scene", &E::n_objects));
  f.push_back(layout("gen.source_layout", "grid-city or curved-city", &E::source_layout));
  f.push_back(layout("gen.target_layout", "grid-city or curved-city", &E::target_layout));
  f.push_back(number("gen.lidar_density", "fraction of feature pixels with a LiDAR return", &E::lidar_density));
  f.push_back(number("gen.source_scenes", "source corpus size", &E::source_scenes));
  f.push_back(number("gen.target_scenes", "target corpus size", &E::target_scenes));
  f.push_back(number("gen.eval_scenes", "evaluation corpus size", &E::eval_scenes));
  f.push_back({{"gen.target_shift", "none, fog, night or rain"},
               [](E& c, const std::string&, const std::string& v) { c.target_shift = synth::parse_shift_kind(v); },
               [](const E& c) { return synth::to_string(c.target_shift); }});
  f.push_back({{"gen.fog_level", "fog ladder level 1..5"},
               [](E& c, const std::string& k, const std::string& v) {
                 c.fog_level = static_cast<int>(to_u64(k, v));
               },
               [](const E& c) { return std::to_string(c.fog_level); }});
  f.push_back(number("gen.fog_beta0", "ladder unit: level l uses beta = 0.5 l beta0 (1/m)", &E::fog_beta0));
  f.push_back(number("gen.airlight", "fog gray level", &E::airlight));
  f.push_back(number("gen.night_gain", "night brightness gain", &E::night_gain));
  f.push_back(number("gen.rain_density", "rain streak pixel fraction", &E::rain_density));
  f.push_back(number("gen.noise_sigma", "sensor noise for night and rain", &E::noise_sigma));

  f.push_back(nested("model.image_height", "H0", &E::dims, &ModelDims::image_height));
  f.push_back(nested("model.image_width", "W0", &E::dims, &ModelDims::image_width));
  f.push_back(nested("model.views", "camera views M", &E::dims, &ModelDims::views));
  f.push_back(nested("model.image_channels", "C_I", &E::dims, &ModelDims::image_channels));
  f.push_back(nested("model.encoder_hidden", "encoder hidden width", &E::dims, &ModelDims::encoder_hidden));
  f.push_back(nested("model.depth_bins", "C_D", &E::dims, &ModelDims::depth_bins));
  f.push_back(nested("model.depth_hidden", "depth net hidden width", &E::dims, &ModelDims::depth_hidden));
  f.push_back(nested("model.head_hidden", "detection head hidden width", &E::dims, &ModelDims::head_hidden));
  f.push_back(nested("model.classes", "object categories n", &E::dims, &ModelDims::classes));
  f.push_back(nested("model.embed_dim", "prototype channels C", &E::dims, &ModelDims::embed_dim));
  f.push_back(nested("model.disc_hidden", "discriminator hidden width", &E::dims, &ModelDims::disc_hidden));
  f.push_back(nested("model.depth_min", "nearest depth bin edge (m)", &E::dims, &ModelDims::depth_min));
  f.push_back(nested("model.depth_max", "farthest depth bin edge (m)", &E::dims, &ModelDims::depth_max));
  f.push_back(nested("model.pool_depth", "BEV pooling kernel along depth", &E::dims, &ModelDims::pool_depth));
  f.push_back(nested("model.pool_width", "BEV pooling kernel along width", &E::dims, &ModelDims::pool_width));

  f.push_back({{"fusion.theta", "uncertainty threshold, or auto for the batch quantile"},
               [](E& c, const std::string& k, const std::string& v) {
                 if (v == "auto") {
                   c.fusion.theta.reset();
                 } else {
                   c.fusion.theta = to_double(k, v);
                 }
               },
               [](const E& c) { return c.fusion.theta ? format_double(*c.fusion.theta) : std::string("auto"); }});
  f.push_back(nested("fusion.theta_quantile", "quantile used when theta is auto", &E::fusion,
                     &uncertainty::FusionConfig::theta_quantile));
  f.push_back(nested("fusion.mc_passes", "stochastic depth passes m", &E::fusion, &uncertainty::FusionConfig::mc_passes));
  f.push_back(nested("fusion.dropout_rate", "dropout of the stochastic passes", &E::fusion,
                     &uncertainty::FusionConfig::dropout_rate));
  f.push_back({{"fusion.selection", "uncertainty, confidence, lidar-over-prediction or lidar-only"},
               [](E& c, const std::string& k, const std::string& v) { c.fusion.selection = parse_selection(k, v); },
               [](const E& c) { return selection_name(c.fusion.selection); }});

  f.push_back(nested("uema.alpha", "EMA coefficient", &E::uema, &adaptation::UemaConfig::alpha));
  f.push_back(nested("uema.sigma", "uncertainty damping", &E::uema, &adaptation::UemaConfig::sigma));

  f.push_back(nested("loss.lambda1", "pseudo-label loss weight", &E::weights, &adaptation::LossWeights::lambda1));
  f.push_back(nested("loss.lambda2", "source supervision weight", &E::weights, &adaptation::LossWeights::lambda2));
  f.push_back(nested("loss.lambda3", "knowledge transfer weight", &E::weights, &adaptation::LossWeights::lambda3));
  f.push_back(nested("loss.lambda4", "prototype alignment weight", &E::weights, &adaptation::LossWeights::lambda4));

  f.push_back(nested("switch.da", "LiDAR-fused teacher depth", &E::switches, &Switches::da));
  f.push_back(nested("switch.uema", "uncertainty term of the teacher update", &E::switches, &Switches::uema));
  f.push_back(nested("switch.kt", "pseudo-label and transfer losses", &E::switches, &Switches::kt));
  f.push_back(nested("switch.ba", "BEV block of the prototype", &E::switches, &Switches::ba));
  f.push_back(nested("switch.ia", "image block of the prototype", &E::switches, &Switches::ia));
  f.push_back(nested("switch.va", "voxel block of the prototype", &E::switches, &Switches::va));

  f.push_back(number("train.lr", "source training learning rate", &E::train_lr));
  f.push_back(number("train.epochs", "source training epochs", &E::train_epochs));
  f.push_back(number("train.batch_size", "scenes per step", &E::batch_size));
  f.push_back(number("train.depth_weight", "weight of the LiDAR depth loss in L_SUP", &E::depth_weight));
  f.push_back(number("train.dropout", "depth net dropout while training", &E::train_dropout));
  f.push_back(number("train.grad_clip", "global gradient norm limit, 0 disables", &E::grad_clip));

  f.push_back(number("adapt.lr", "student learning rate", &E::adapt_lr));
  f.push_back(number("adapt.disc_lr", "discriminator learning rate", &E::disc_lr));
  f.push_back(number("adapt.epochs", "passes over the target corpus", &E::adapt_epochs));
  f.push_back(number("adapt.pseudo_threshold", "occupancy needed for a pseudo label", &E::pseudo_threshold));
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = build_fields();
  return f;
}

const Field& find_field(const std::string& key) {
  for (const Field& f : fields())
    if (f.info.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const Field& f : fields()) k.push_back(f.info);
    return k;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  find_field(key).set(cfg, key, value);
}

std::string get_config_value(const ExperimentConfig& cfg, const std::string& key) { return find_field(key).get(cfg); }

ExperimentConfig parse_config(std::istream& in, const std::string& origin) {
  ExperimentConfig cfg;
  std::string line;
  std::size_t number = 0;
  std::vector<std::string> seen;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(number) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) throw ConfigError(where + "duplicate key '" + key + "'");
    seen.push_back(key);
    try {
      set_config_value(cfg, key, value);
    } catch (const std::exception& e) {
      throw ConfigError(where + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, path.string());
}

std::string dump_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const Field& f : fields()) os << f.info.key << " = " << f.get(cfg) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  try {
    dims.validate();
    fusion.validate();
    uema.validate();
    weights.validate();
    scene_spec(false).validate();
    scene_spec(true).validate();
    target_domain_shift().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  check(source_scenes > 0 && target_scenes > 0 && eval_scenes > 0, "corpus sizes must be positive");
  check(fog_level >= 1 && fog_level <= 5, "gen.fog_level must lie in 1..5");
  check(fog_beta0 >= 0.0, "gen.fog_beta0 must be non-negative");
  check(batch_size > 0, "train.batch_size must be positive");
  check(train_lr >= 0.0 && adapt_lr >= 0.0 && disc_lr >= 0.0, "learning rates must be non-negative");
  check(depth_weight >= 0.0, "train.depth_weight must be non-negative");
  check(train_dropout >= 0.0 && train_dropout < 1.0, "train.dropout must lie in [0, 1)");
  check(grad_clip >= 0.0, "train.grad_clip must be non-negative");
  check(pseudo_threshold >= 0.0 && pseudo_threshold <= 1.0, "adapt.pseudo_threshold must lie in [0, 1]");
}

synth::SceneSpec ExperimentConfig::scene_spec(bool target_domain) const {
  synth::SceneSpec s = synth::spec_for(dims);
  s.n_objects = n_objects;
  s.layout = target_domain ? target_layout : source_layout;
  s.lidar_density = lidar_density;
  return s;
}

synth::DomainShift ExperimentConfig::fog_shift(int level) const {
  return synth::DomainShift::fog_level(level, fog_beta0, airlight);
}

synth::DomainShift ExperimentConfig::target_domain_shift() const {
  switch (target_shift) {
    case synth::DomainShift::Kind::none: return synth::DomainShift::none();
    case synth::DomainShift::Kind::fog: return fog_shift(fog_level);
    case synth::DomainShift::Kind::night: return synth::DomainShift::night(night_gain, noise_sigma);
    case synth::DomainShift::Kind::rain: return synth::DomainShift::rain(rain_density, noise_sigma);
  }
  return synth::DomainShift::none();
}

std::uint64_t ExperimentConfig::stream(const char* tag) const {
  return numerics::mix_seed(seed, numerics::stream_id(tag));
}

SourceTraining ExperimentConfig::source_training() const {
  SourceTraining t;
  AdaptConfig& s = t.step;
  s.dims = dims;
  s.fusion = fusion;
  s.lr = train_lr;
  s.depth_weight = depth_weight;
  s.train_dropout = train_dropout;
  s.grad_clip = grad_clip;
  s.seed = stream("train");
  t.epochs = train_epochs;
  t.batch_size = batch_size;
  return t;
}

AdaptationRun ExperimentConfig::adaptation(const adaptation::Switches& sw) const {
  AdaptationRun r;
  AdaptConfig& s = r.step;
  s.dims = dims;
  s.weights = weights;
  s.uema = uema;
  s.fusion = fusion;
  s.switches = sw;
  s.lr = adapt_lr;
  s.disc_lr = disc_lr;
  s.pseudo_threshold = pseudo_threshold;
  s.depth_weight = depth_weight;
  s.train_dropout = train_dropout;
  s.grad_clip = grad_clip;
  s.seed = stream("adapt");
  r.epochs = adapt_epochs;
  r.batch_size = batch_size;
  return r;
}

}  // namespace bevuda::harness
