#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bevuda/geometry/types.hpp"
#include "bevuda/numerics/parameters.hpp"
#include "bevuda/numerics/tape.hpp"

namespace bevuda::geometry {

using numerics::ParameterSet;
using numerics::Pool3d;

/// Sizes of every layer of the toy BEV detector plus the embedding nets
/// used for prototype alignment.
struct ModelDims {
  std::size_t image_height = 16;  // H0
  std::size_t image_width = 32;   // W0
  std::size_t views = 2;
  std::size_t image_channels = 8;  // C_I
  std::size_t encoder_hidden = 16;
  std::size_t depth_bins = 16;  // C_D
  std::size_t depth_hidden = 32;
  std::size_t head_hidden = 32;
  std::size_t classes = 3;
  std::size_t embed_dim = 256;  // prototype channel extent C
  std::size_t disc_hidden = 32;
  double depth_min = 2.0;
  double depth_max = 18.0;
  /// Depth and width kernel/stride; the height kernel always spans the full
  /// feature height so the pooled grid has H' = 1.
  std::size_t pool_depth = 2;
  std::size_t pool_width = 2;

  std::size_t feature_height() const { return image_height / 2; }
  std::size_t feature_width() const { return image_width / 2; }
  std::size_t pixels() const { return feature_height() * feature_width(); }
  Pool3d pool() const;
  BevGrid grid() const;
  std::vector<double> bin_edges() const;
  void validate() const;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Detector parameters (encoder, depth net, decoder, head) plus the three
/// per-space embedding MLPs and the shared prototype layer.
ParameterSet init_parameters(const ModelDims& dims, std::uint64_t seed);
/// Same layout as init_parameters with every entry zero.
ParameterSet zero_parameters(const ModelDims& dims);
/// Binary domain classifier over prototype columns.
ParameterSet init_discriminator(const ModelDims& dims, std::uint64_t seed);

/// Checks that `params` has exactly the layout `dims` implies.
void check_layout(const ParameterSet& params, const ModelDims& dims);

struct DetectionVars {
  numerics::Var occupancy;  // (N, 1)
  numerics::Var offsets;    // (N, 2)
  numerics::Var classes;    // (N, n)
};

struct ForwardOptions {
  /// Dropout on the depth net's hidden layer; 0 disables it.
  double dropout_rate = 0.0;
  std::uint64_t dropout_seed = 0;
  /// Per-view (C_D, H, W) distributions lifted instead of the prediction
  /// (the fused teacher depth). Gradients do not flow into them.
  const std::vector<Tensor>* depth_override = nullptr;
};

struct ForwardVars {
  std::vector<numerics::Var> features;  // per view (P, C_I)
  std::vector<numerics::Var> depth;     // per view (P, C_D), predicted
  numerics::Var voxel;                  // (C_I, C_D, H, W), summed over views
  numerics::Var bev;                    // (C_I, C'_D, 1, W')
  numerics::Var cells;                  // (N, C_I)
  numerics::Var decoded;                // (N, C_I), cells + decoder output
  DetectionVars detection;
};

/// Full detector forward pass of one multi-view frame.
ForwardVars forward(numerics::Tape& tape, const ModelDims& dims, std::span<const Tensor> images,
                    std::span<const CameraConfig> cams, const ForwardOptions& options = {});

/// Dropout mask seed of one view's depth net for a given pass seed.
std::uint64_t view_dropout_seed(std::uint64_t pass_seed, std::size_t view);

}  // namespace bevuda::geometry
