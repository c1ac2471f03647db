#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bevuda/geometry/model.hpp"
#include "bevuda/geometry/types.hpp"

namespace bevuda::uncertainty {

using geometry::CameraConfig;
using geometry::DepthDistribution;
using geometry::ImageFeature;
using geometry::LidarDepthMap;
using numerics::Tensor;

/// Per-pixel, per-bin standard deviation of MC-dropout depth probabilities.
struct UncertaintyMap {
  Tensor tensor;  // (C_D, H, W), entries in [0, 0.5]
  double scalar_mean = 0.0;

  /// Mean over bins for each pixel, (H * W).
  std::vector<double> per_pixel() const;
};

/// Which pixels of the teacher's depth are replaced by LiDAR.
enum class DepthSelection {
  uncertainty,           // U(X_p) > theta and LiDAR observed
  confidence,            // max-bin probability below the confidence threshold
  lidar_over_prediction, // every observed LiDAR pixel
  lidar_only,            // LiDAR where observed, zero elsewhere
};

struct FusionConfig {
  /// Fixed threshold; when unset the `theta_quantile` of the batch's
  /// per-pixel uncertainties is used.
  std::optional<double> theta;
  double theta_quantile = 0.7;
  std::size_t mc_passes = 5;
  double dropout_rate = 0.2;
  DepthSelection selection = DepthSelection::uncertainty;

  void validate() const;
};

/// m stochastic passes of the depth net with independent hidden-layer
/// dropout masks. Reproducible given `seed`; rejects m < 2.
std::vector<DepthDistribution> mc_depth_samples(const ImageFeature& feat, const CameraConfig& cam,
                                                const numerics::ParameterSet& params,
                                                const geometry::ModelDims& dims, const FusionConfig& cfg,
                                                std::uint64_t seed);

/// Population standard deviation (divide by m) around the ensemble mean,
/// per pixel and bin.
UncertaintyMap uncertainty_map(std::span<const DepthDistribution> samples);

/// Mean of the samples (the MC predictive distribution).
DepthDistribution ensemble_mean(std::span<const DepthDistribution> samples);

/// Keeps the prediction where the pixel's mean-over-bins uncertainty is at
/// most `theta`; otherwise substitutes the LiDAR one-hot if that pixel was
/// observed, and keeps the prediction if it was not.
DepthDistribution fuse_depth(const DepthDistribution& pred, const LidarDepthMap& lidar,
                             const UncertaintyMap& u, double theta);

/// Per-pixel maximum bin probability, (H, W).
Tensor confidence_map(const DepthDistribution& pred);

/// Confidence baseline: pixels whose confidence is below `threshold` and
/// that have a LiDAR return take the LiDAR one-hot.
DepthDistribution fuse_depth_by_confidence(const DepthDistribution& pred, const LidarDepthMap& lidar,
                                           double threshold);

/// Linear-interpolated quantile (q in [0, 1]) of a non-empty sample.
double quantile(std::vector<double> values, double q);

/// Applies `selection` to every view of a batch, deriving the threshold from
/// the pooled batch statistics when `cfg.theta` is unset.
std::vector<DepthDistribution> select_depth(std::span<const DepthDistribution> preds,
                                            std::span<const LidarDepthMap> lidar,
                                            std::span<const UncertaintyMap> maps, const FusionConfig& cfg);

}  // namespace bevuda::uncertainty
