#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bevuda/geometry/model.hpp"
#include "bevuda/geometry/types.hpp"
#include "bevuda/synth/scene.hpp"

namespace bevuda::harness {

using geometry::DetectionSet;
using geometry::ObjectLabel;
using numerics::ParameterSet;
using numerics::Tensor;

struct MetricsReport {
  double simplified_map = 0.0;
  double mean_translation_error = 1.0;  // cell units
  std::vector<double> per_class_ap;
  std::size_t n_eval_scenes = 0;
};

inline constexpr double kMatchRadius = 1.0;
inline constexpr double kTranslationScore = 0.5;

/// All-point interpolated average precision of a ranked list of hits
/// (true = matched) against `positives` ground-truth objects.
double average_precision(std::span<const bool> ranked_hits, std::size_t positives);

/// Cell-level detection metrics. Every cell with positive occupancy is a
/// prediction of its argmax class scored by its occupancy; predictions are
/// greedily matched, best score first, to the nearest unmatched same-class
/// object of the same scene within kMatchRadius cells. mAP averages over
/// classes that have ground truth. Translation error averages the match
/// distance over matches scoring at least kTranslationScore (1.0 when there
/// are none).
MetricsReport evaluate_detections(std::span<const DetectionSet> predictions,
                                  std::span<const std::vector<ObjectLabel>> truth, geometry::BevGrid grid);

/// Runs the detector over every scene and scores it against `truth`.
MetricsReport evaluate(const ParameterSet& params, const geometry::ModelDims& dims,
                       std::span<const synth::SceneSample> scenes, std::span<const std::vector<ObjectLabel>> truth);

// ---------------------------------------------------------------------------

/// Jensen-Shannon divergence in nats. Both inputs must be non-negative and
/// sum to 1 within 1e-9.
double js_divergence(std::span<const double> p, std::span<const double> q);

enum class FeatureSpace { image, voxel, bev, prototype };
std::string to_string(FeatureSpace s);
FeatureSpace parse_feature_space(const std::string& name);

struct DivergenceReport {
  double js = 0.0;
  double h_proxy = 0.0;
  FeatureSpace space = FeatureSpace::bev;
  bool degenerate = false;  // every channel was constant
};

inline constexpr std::size_t kHistogramBins = 32;
inline constexpr std::size_t kProbeSteps = 200;

/// Mean over channels of the JS divergence between per-channel histograms
/// (kHistogramBins bins on the channel's common range). Samples are rows
/// (count, channels).
double histogram_js(const Tensor& source, const Tensor& target, bool* degenerate = nullptr);

/// 2 |Pr_s[D = 1] - Pr_t[D = 1]| on held-out halves for a freshly trained
/// 2-layer probe D. Both domains use the same permutation of their rows.
double probe_h_divergence(const Tensor& source, const Tensor& target, std::uint64_t seed);

/// Feature rows of every scene in the requested space. The prototype space
/// needs labels and yields one row per (scene, present category).
Tensor collect_features(const ParameterSet& params, const geometry::ModelDims& dims,
                        std::span<const synth::SceneSample> scenes, FeatureSpace space,
                        std::span<const std::vector<ObjectLabel>> labels = {});

DivergenceReport divergence_report(const ParameterSet& params, const geometry::ModelDims& dims,
                                   std::span<const synth::SceneSample> source,
                                   std::span<const synth::SceneSample> target, FeatureSpace space,
                                   std::uint64_t seed, std::span<const std::vector<ObjectLabel>> source_labels = {},
                                   std::span<const std::vector<ObjectLabel>> target_labels = {});

}  // namespace bevuda::harness
