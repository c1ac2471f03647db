#include "bevuda/geometry/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "bevuda/errors.hpp"
#include "bevuda/geometry/pipeline.hpp"
#include "bevuda/numerics/rng.hpp"

namespace bevuda::geometry {

using numerics::Rng;
using numerics::Shape;

Pool3d ModelDims::pool() const {
  Pool3d p;
  p.kernel = {pool_depth, feature_height(), pool_width};
  p.stride = {pool_depth, feature_height(), pool_width};
  return p;
}

BevGrid ModelDims::grid() const {
  return BevGrid{numerics::pooled_extent(depth_bins, pool_depth, pool_depth),
                 numerics::pooled_extent(feature_width(), pool_width, pool_width)};
}

std::vector<double> ModelDims::bin_edges() const {
  std::vector<double> edges(depth_bins + 1);
  for (std::size_t k = 0; k <= depth_bins; ++k) {
    edges[k] = depth_min + (depth_max - depth_min) * static_cast<double>(k) / depth_bins;
  }
  return edges;
}

void ModelDims::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model dims: " + what); };
  if (image_height < 2 || image_width < 2 || image_height % 2 || image_width % 2)
    fail("image size must be even and at least 2x2");
  if (views < 1) fail("views must be >= 1");
  if (image_channels == 0 || encoder_hidden == 0 || depth_hidden == 0 || head_hidden == 0 ||
      embed_dim == 0 || disc_hidden == 0)
    fail("layer widths must be positive");
  if (depth_bins < 2) fail("need at least two depth bins");
  if (classes == 0) fail("need at least one class");
  if (!(depth_max > depth_min && depth_min >= 0.0)) fail("depth range must be increasing");
  if (pool_depth == 0 || pool_width == 0 || pool_depth > depth_bins || pool_width > feature_width())
    fail("pool kernel must fit the voxel grid");
}

namespace {

void add_dense(ParameterSet& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
               double gain, double bias = 0.0) {
  Tensor w({in, out}, 0.0);
  const double sd = gain / std::sqrt(static_cast<double>(in));
  for (double& v : w.values()) v = rng.normal(0.0, sd);
  p.insert(name + ".w", std::move(w));
  p.insert(name + ".b", Tensor({out}, bias));
}

constexpr double kRelu = 1.4142135623730951;

}  // namespace

ParameterSet init_parameters(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  Rng root(seed);
  ParameterSet p;
  const std::size_t ci = dims.image_channels;
  Rng r = root.stream("encoder");
  add_dense(p, "encoder.patch", 12, dims.encoder_hidden, r, kRelu);
  add_dense(p, "encoder.out", dims.encoder_hidden, ci, r, 1.0);
  r = root.stream("depth");
  add_dense(p, "depth.hidden", ci + kDepthConditioning, dims.depth_hidden, r, kRelu);
  add_dense(p, "depth.out", dims.depth_hidden, dims.depth_bins, r, 1.0);
  r = root.stream("decoder");
  const std::size_t cells = dims.grid().cells();
  Tensor query({cells, ci}, 0.0);
  for (double& v : query.values()) v = r.normal(0.0, 0.1);
  p.insert("decoder.query", std::move(query));
  for (const char* name : {"decoder.wq", "decoder.wk"}) {
    Tensor w({ci, ci}, 0.0);
    for (double& v : w.values()) v = r.normal(0.0, 1.0 / std::sqrt(static_cast<double>(ci)));
    p.insert(name, std::move(w));
  }
  add_dense(p, "decoder.proj", ci, ci, r, 0.5);
  r = root.stream("head");
  add_dense(p, "head.hidden", ci, dims.head_hidden, r, kRelu);
  add_dense(p, "head.out", dims.head_hidden, 3 + dims.classes, r, 0.5);
  p.at("head.out.b")[0] = -2.0;  // sparse occupancy prior
  r = root.stream("embed");
  for (const char* space : {"image", "voxel", "bev"}) {
    const std::string base = std::string("embed.") + space;
    add_dense(p, base + ".l1", ci, dims.embed_dim, r, kRelu);
    add_dense(p, base + ".l2", dims.embed_dim, dims.embed_dim, r, 1.0);
  }
  add_dense(p, "embed.shared", 3 * dims.embed_dim, dims.embed_dim, r, 1.0);
  return p;
}

ParameterSet zero_parameters(const ModelDims& dims) {
  ParameterSet p = init_parameters(dims, 0);
  for (auto& [_, t] : p) {
    for (double& v : t.values()) v = 0.0;
  }
  return p;
}

ParameterSet init_discriminator(const ModelDims& dims, std::uint64_t seed) {
  Rng r = Rng(seed).stream("discriminator");
  ParameterSet p;
  add_dense(p, "disc.l1", dims.embed_dim, dims.disc_hidden, r, kRelu);
  add_dense(p, "disc.l2", dims.disc_hidden, 1, r, 1.0);
  return p;
}

void check_layout(const ParameterSet& params, const ModelDims& dims) {
  if (!params.same_layout(zero_parameters(dims))) {
    throw ShapeError("parameter set does not match the model dimensions");
  }
}

std::uint64_t view_dropout_seed(std::uint64_t pass_seed, std::size_t view) {
  return numerics::mix_seed(pass_seed, 0x5157ull + view);
}

ForwardVars forward(Tape& tape, const ModelDims& dims, std::span<const Tensor> images,
                    std::span<const CameraConfig> cams, const ForwardOptions& options) {
  if (images.size() != cams.size() || images.empty()) {
    throw ShapeError("forward: need one camera per image and at least one view");
  }
  if (options.depth_override && options.depth_override->size() != images.size()) {
    throw ShapeError("forward: depth override must cover every view");
  }
  const std::size_t H = dims.feature_height();
  const std::size_t W = dims.feature_width();
  ForwardVars out;
  for (std::size_t v = 0; v < images.size(); ++v) {
    if (images[v].shape() != Shape{3, dims.image_height, dims.image_width}) {
      throw ShapeError("forward: image " + std::to_string(v) + " has shape " +
                       numerics::to_string(images[v].shape()));
    }
    Var feat = encode_image(tape, images[v]);
    Tensor mask;
    const Tensor* mask_ptr = nullptr;
    if (options.dropout_rate > 0.0) {
      mask = numerics::dropout_mask({dims.pixels(), dims.depth_hidden}, options.dropout_rate,
                                    view_dropout_seed(options.dropout_seed, v));
      mask_ptr = &mask;
    }
    Var depth = estimate_depth(tape, feat, cams[v], dims.image_width, mask_ptr);
    Var lifted_depth = depth;
    if (options.depth_override) {
      const Tensor& d = (*options.depth_override)[v];
      if (d.shape() != Shape{dims.depth_bins, H, W}) {
        throw ShapeError("forward: depth override has shape " + numerics::to_string(d.shape()));
      }
      lifted_depth = tape.constant(d.reshaped({dims.depth_bins, H * W}));
      lifted_depth = tape.transpose(lifted_depth);
    }
    Var vox = lift_to_voxel(tape, feat, lifted_depth, H, W);
    out.voxel = v == 0 ? vox : tape.add(out.voxel, vox);
    out.features.push_back(feat);
    out.depth.push_back(depth);
  }
  out.bev = tape.avg_pool3d(out.voxel, dims.pool());
  out.cells = bev_cells(tape, out.bev);
  Var queries = tape.add(out.cells, tape.param("decoder.query"));
  DecodeVars dec = decode_bev(tape, out.cells, queries);
  out.decoded = tape.add(out.cells, dec.output);
  out.detection = detect(tape, out.decoded);
  return out;
}

}  // namespace bevuda::geometry
