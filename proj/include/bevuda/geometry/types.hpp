#pragma once

#include <cstddef>
#include <vector>

#include "bevuda/numerics/tensor.hpp"

namespace bevuda::geometry {

using numerics::Tensor;

/// Pinhole intrinsics of one camera view.
struct CameraConfig {
  Tensor intrinsics{{3, 3}, 0.0};
  std::size_t view_index = 0;

  static CameraConfig pinhole(double fx, double fy, double cx, double cy, std::size_t view);
  /// Throws std::invalid_argument unless focal entries are positive and the
  /// matrix is invertible.
  void validate() const;
};

/// Encoded image, (C_I, H, W).
struct ImageFeature {
  Tensor tensor;
};

/// Per-pixel categorical distribution over depth bins, (C_D, H, W).
struct DepthDistribution {
  Tensor tensor;
  std::vector<double> bin_edges;  // C_D + 1 increasing depths in meters

  std::size_t bins() const { return tensor.extent(0); }
  std::size_t height() const { return tensor.extent(1); }
  std::size_t width() const { return tensor.extent(2); }
};

/// Lifted frustum features, (C_I, C_D, H, W).
struct VoxelFeature {
  Tensor tensor;
};

/// Pooled BEV features, (C_I, C'_D, H', W').
struct BEVFeature {
  Tensor tensor;
};

/// Sparse one-hot depth observations at feature resolution.
struct LidarDepthMap {
  Tensor tensor;            // (C_D, H, W); one-hot at observed pixels, zero elsewhere
  std::vector<int> bin;     // H * W, observed bin index or -1
  std::size_t height = 0;
  std::size_t width = 0;

  bool observed(std::size_t pixel) const { return bin[pixel] >= 0; }
  std::size_t observed_count() const;
  static LidarDepthMap from_bins(std::vector<int> bins, std::size_t bins_count, std::size_t height,
                                 std::size_t width);
};

/// Top-down detection grid: depth cells along the viewing direction and
/// lateral (column) cells.
struct BevGrid {
  std::size_t depth_cells = 0;
  std::size_t width_cells = 0;

  std::size_t cells() const { return depth_cells * width_cells; }
  std::size_t index(std::size_t d, std::size_t w) const { return d * width_cells + w; }
  friend bool operator==(const BevGrid&, const BevGrid&) = default;
};

/// One ground-truth object, positioned in continuous cell units: its center
/// lies at (cell_d + 0.5 + offset_d, cell_w + 0.5 + offset_w).
struct ObjectLabel {
  std::size_t cell_d = 0;
  std::size_t cell_w = 0;
  double offset_d = 0.0;
  double offset_w = 0.0;
  std::size_t category = 0;

  friend bool operator==(const ObjectLabel&, const ObjectLabel&) = default;
};

/// Dense per-cell output of the detection head.
struct DetectionSet {
  Tensor occupancy;     // (N), in [0, 1]
  Tensor offsets;       // (N, 2), (depth, lateral) in cell units
  Tensor class_scores;  // (N, n), rows sum to 1

  std::size_t cells() const { return occupancy.size(); }
  std::size_t classes() const { return class_scores.extent(1); }
};

/// Dense per-cell training targets.
struct DetectionTargets {
  BevGrid grid;
  std::size_t classes = 0;
  std::vector<double> occupancy;  // N, 0 or 1
  std::vector<double> offsets;    // N * 2
  std::vector<int> category;      // N, -1 for empty cells

  std::size_t positives() const;
  static DetectionTargets empty(BevGrid grid, std::size_t classes);
  static DetectionTargets from_labels(const std::vector<ObjectLabel>& labels, BevGrid grid,
                                      std::size_t classes);
};

}  // namespace bevuda::geometry
