#pragma once

#include "bevuda/geometry/model.hpp"
#include "bevuda/geometry/types.hpp"
#include "bevuda/numerics/tape.hpp"

namespace bevuda::geometry {

using numerics::Tape;
using numerics::Var;

// ---------------------------------------------------------------------------
// Tape builders. Per-pixel quantities use a row layout (P, C) with
// P = H * W in row-major pixel order.
// ---------------------------------------------------------------------------

/// Stride-2 patch extraction: (3, H0, W0) -> (H0/2 * W0/2, 12).
Tensor image_patches(const Tensor& image);

/// Patch layer + relu + linear -> (P, C_I).
Var encode_image(Tape& tape, const Tensor& image);

/// Flattened intrinsics scaled by 1/image_width, length 9.
Tensor intrinsics_vector(const CameraConfig& cam, std::size_t image_width);

inline constexpr std::size_t kDepthConditioning = 11;

/// Per-pixel camera conditioning (P, 11): the intrinsics vector followed by
/// the ray direction ((u - cx) / fx, (v - cy) / fy) through the pixel's
/// patch center, for a feature map W0/2 wide.
Tensor depth_conditioning(const CameraConfig& cam, std::size_t image_width, std::size_t pixels);

/// Per-pixel depth MLP over [feature, conditioning] with optional hidden-layer
/// dropout mask (P, depth_hidden). Returns softmax probabilities (P, C_D).
Var estimate_depth(Tape& tape, Var features, const CameraConfig& cam, std::size_t image_width,
                   const Tensor* dropout_mask = nullptr);

/// Outer product per pixel: (P, C_I) x (P, C_D) -> (C_I, C_D, H, W).
Var lift_to_voxel(Tape& tape, Var features, Var depth, std::size_t height, std::size_t width);

/// (C_I, C'_D, 1, W') -> (N, C_I), cell n = d * W' + w.
Var bev_cells(Tape& tape, Var bev);

struct DecodeVars {
  Var attention;  // (n_q, N)
  Var context;    // (n_q, C), attention-weighted mean of cells
  Var output;     // (n_q, C), after the output projection
};

/// Scaled dot-product attention of queries over BEV cells, then a linear
/// projection.
DecodeVars decode_bev(Tape& tape, Var cells, Var queries);

DetectionVars detect(Tape& tape, Var decoded);

/// BCE on occupancy + squared offset error on occupied cells + class
/// cross-entropy on occupied cells, all summed over cells.
Var supervised_loss(Tape& tape, const DetectionVars& pred, const DetectionTargets& truth);

/// Mean cross-entropy of predicted depth (P, C_D) against observed LiDAR
/// bins. Returns a zero constant when nothing is observed.
Var depth_loss(Tape& tape, Var depth, const LidarDepthMap& lidar);

// ---------------------------------------------------------------------------
// Value-level operations.
// ---------------------------------------------------------------------------

/// Rejects a wrong channel count; image values must lie in [0, 1].
ImageFeature encode_image(const Tensor& image, const ParameterSet& params, const CameraConfig& view);

DepthDistribution estimate_depth(const ImageFeature& feat, const CameraConfig& cam,
                                 const ParameterSet& params, const ModelDims& dims);

VoxelFeature lift_to_voxel(const ImageFeature& feat, const DepthDistribution& depth);

BEVFeature pool_to_bev(const VoxelFeature& vox, const numerics::Pool3d& pool);

struct DecodeResult {
  Tensor attention;
  Tensor context;
  Tensor output;
};

/// Flattens BEV positions (C'_D, H', W') into cells and decodes `queries`
/// (n_q, C_I) against them.
DecodeResult decode_bev(const BEVFeature& bev, const Tensor& queries, const ParameterSet& params);

DetectionSet detect(const Tensor& decoded, const ParameterSet& params);

struct SupervisedLossTerms {
  double occupancy = 0.0;
  double offset = 0.0;
  double classification = 0.0;
  double total = 0.0;
};

SupervisedLossTerms supervised_loss(const DetectionSet& pred, const DetectionTargets& truth);

/// Runs the whole detector on one frame without dropout.
DetectionSet predict(const ParameterSet& params, const ModelDims& dims, std::span<const Tensor> images,
                     std::span<const CameraConfig> cams);

/// Value of detection vars recorded on a tape.
DetectionSet read_detections(const Tape& tape, const DetectionVars& vars);

}  // namespace bevuda::geometry
