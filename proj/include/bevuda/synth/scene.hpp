#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bevuda/geometry/model.hpp"
#include "bevuda/geometry/types.hpp"

namespace bevuda::synth {

using geometry::BevGrid;
using geometry::CameraConfig;
using geometry::LidarDepthMap;
using geometry::ObjectLabel;
using numerics::Tensor;

enum class LayoutStyle { grid_city, curved_city };

std::string to_string(LayoutStyle style);
LayoutStyle parse_layout(const std::string& name);

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t n_objects = 4;
  LayoutStyle layout = LayoutStyle::grid_city;
  std::size_t views = 2;
  std::size_t image_height = 16;
  std::size_t image_width = 32;
  double depth_min = 2.0;
  double depth_max = 18.0;
  std::size_t depth_bins = 16;
  BevGrid grid{8, 8};
  std::size_t classes = 3;
  double lidar_density = 0.3;

  void validate() const;
  std::vector<double> bin_edges() const;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

/// Scene geometry matching a detector's input and BEV grid.
SceneSpec spec_for(const geometry::ModelDims& dims);

struct SceneSample {
  std::vector<Tensor> images;        // M x (3, H0, W0), values in [0, 1]
  std::vector<CameraConfig> cams;    // M
  std::vector<Tensor> depth_gt;      // M x (H0, W0), meters
  std::vector<LidarDepthMap> lidar;  // M, at feature resolution (H0/2, W0/2)
  std::vector<ObjectLabel> labels;   // empty on unlabeled target data

  bool operator==(const SceneSample& other) const;
};

/// Pinhole camera of view `view`: shared horizontal geometry, per-view
/// vertical focal length and principal row.
CameraConfig view_camera(const SceneSpec& spec, std::size_t view);

/// Deterministic scene: colored boxes standing on a ground plane, shaded by
/// distance, seen by every view. Throws SizingError when the objects cannot
/// be placed.
SceneSample generate_scene(const SceneSpec& spec);

struct DomainShift {
  enum class Kind { none, fog, night, rain };
  Kind kind = Kind::none;
  double beta = 0.0;      // fog extinction, 1/m
  double airlight = 0.8;  // fog gray level
  double gain = 1.0;      // night
  double density = 0.0;   // rain streak pixel fraction
  double noise_sigma = 0.0;
  int level = 0;          // fog ladder level, 0 when not on the ladder

  void validate() const;
  std::string describe() const;
  friend bool operator==(const DomainShift&, const DomainShift&) = default;

  static DomainShift none();
  /// Ladder level 1..5 maps to beta = 0.5 * level * beta0.
  static DomainShift fog_level(int level, double beta0, double airlight = 0.8);
  static DomainShift night(double gain, double noise_sigma);
  static DomainShift rain(double density, double noise_sigma);
};

std::string to_string(DomainShift::Kind kind);
DomainShift::Kind parse_shift_kind(const std::string& name);

/// out = in * exp(-beta d) + airlight (1 - exp(-beta d)), clamped to [0, 1].
Tensor apply_fog(const Tensor& image, const Tensor& depth_gt, double beta, double airlight);
/// out = clamp(gain * in + N(0, noise_sigma)).
Tensor apply_night(const Tensor& image, double gain, double noise_sigma, std::uint64_t seed);
/// Bright diagonal streaks covering about `streak_density` of the pixels,
/// plus gaussian noise.
Tensor apply_rain(const Tensor& image, double streak_density, double noise_sigma, std::uint64_t seed);

/// Applies `shift` to every image of the scene; everything else is copied.
SceneSample apply_shift(const SceneSample& scene, const DomainShift& shift, std::uint64_t seed);

struct LidarSample {
  LidarDepthMap map;
  std::size_t dropped = 0;  // pixels selected but outside the bin range
};

/// Bin index of `depth`, or -1 outside [edges.front(), edges.back()]. The
/// last bin includes its upper edge.
int depth_bin(double depth, const std::vector<double>& edges);

/// Keeps a seeded Bernoulli(density) subset of pixels, each observed at the
/// bin containing its depth.
LidarSample sample_lidar(const Tensor& depth_gt, double density, const std::vector<double>& bin_edges,
                         std::uint64_t seed);

/// Nearest depth in every 2x2 block: (H0, W0) -> (H0/2, W0/2).
Tensor min_pool_depth(const Tensor& depth_gt);

/// Gray-level standard deviation of an image (luma weights 0.299/0.587/0.114).
double image_contrast(const Tensor& image);

}  // namespace bevuda::synth
