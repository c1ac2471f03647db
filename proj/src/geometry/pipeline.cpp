#include "bevuda/geometry/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bevuda/errors.hpp"

namespace bevuda::geometry {

using numerics::Shape;

Tensor image_patches(const Tensor& image) {
  if (image.rank() != 3 || image.extent(0) != 3) {
    throw ShapeError("image must have shape (3, H0, W0), got " + numerics::to_string(image.shape()));
  }
  const std::size_t H0 = image.extent(1);
  const std::size_t W0 = image.extent(2);
  if (H0 % 2 || W0 % 2) throw ShapeError("image extents must be even");
  const std::size_t H = H0 / 2;
  const std::size_t W = W0 / 2;
  Tensor patches({H * W, 12}, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      double* row = patches.data() + (h * W + w) * 12;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            *row++ = image[(c * H0 + 2 * h + dy) * W0 + 2 * w + dx];
    }
  return patches;
}

Var encode_image(Tape& tape, const Tensor& image) {
  Var x = tape.constant(image_patches(image));
  Var h = tape.relu(tape.linear(x, tape.param("encoder.patch.w"), tape.param("encoder.patch.b")));
  return tape.linear(h, tape.param("encoder.out.w"), tape.param("encoder.out.b"));
}

Tensor intrinsics_vector(const CameraConfig& cam, std::size_t image_width) {
  cam.validate();
  Tensor k = cam.intrinsics.reshaped({9});
  for (double& v : k.values()) v /= static_cast<double>(image_width);
  return k;
}

Tensor depth_conditioning(const CameraConfig& cam, std::size_t image_width, std::size_t pixels) {
  const std::size_t W = image_width / 2;
  if (W == 0 || pixels % W) throw ShapeError("depth_conditioning: pixel count does not fit the feature width");
  const Tensor k = intrinsics_vector(cam, image_width);
  const Tensor& K = cam.intrinsics;
  constexpr std::size_t C = kDepthConditioning;
  Tensor cond({pixels, C}, 0.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    double* row = cond.data() + p * C;
    std::copy_n(k.data(), 9, row);
    const double u = 2.0 * static_cast<double>(p % W) + 1.0;
    const double v = 2.0 * static_cast<double>(p / W) + 1.0;
    row[9] = (u - K[2]) / K[0];
    row[10] = (v - K[5]) / K[4];
  }
  return cond;
}

Var estimate_depth(Tape& tape, Var features, const CameraConfig& cam, std::size_t image_width,
                   const Tensor* dropout_mask) {
  const std::size_t P = tape.shape(features).at(0);
  const Var parts[] = {features, tape.constant(depth_conditioning(cam, image_width, P))};
  Var x = tape.concat(parts, 1);
  Var h = tape.relu(tape.linear(x, tape.param("depth.hidden.w"), tape.param("depth.hidden.b")));
  if (dropout_mask) h = tape.dropout(h, *dropout_mask);
  Var logits = tape.linear(h, tape.param("depth.out.w"), tape.param("depth.out.b"));
  return tape.softmax(logits, 1);
}

Var lift_to_voxel(Tape& tape, Var features, Var depth, std::size_t height, std::size_t width) {
  const Shape& fs = tape.shape(features);
  const Shape& ds = tape.shape(depth);
  if (fs.size() != 2 || ds.size() != 2 || fs[0] != ds[0] || fs[0] != height * width) {
    throw ShapeError("lift_to_voxel: features " + numerics::to_string(fs) + " and depth " +
                     numerics::to_string(ds) + " disagree on pixels");
  }
  const std::size_t ci = fs[1];
  const std::size_t cd = ds[1];
  Var v = tape.outer(tape.transpose(features), tape.transpose(depth));
  return tape.reshape(v, {ci, cd, height, width});
}

Var bev_cells(Tape& tape, Var bev) {
  const Shape& s = tape.shape(bev);
  if (s.size() != 4) throw ShapeError("bev_cells: BEV feature must be rank 4");
  Var flat = tape.reshape(bev, {s[0], s[1] * s[2] * s[3]});
  return tape.transpose(flat);
}

DecodeVars decode_bev(Tape& tape, Var cells, Var queries) {
  const Shape& cs = tape.shape(cells);
  const Shape& qs = tape.shape(queries);
  if (cs.size() != 2 || qs.size() != 2 || cs[1] != qs[1]) {
    throw ShapeError("decode_bev: query channels " + numerics::to_string(qs) +
                     " do not match BEV channels " + numerics::to_string(cs));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cs[1]));
  Var q = tape.linear(queries, tape.param("decoder.wq"));
  Var k = tape.linear(cells, tape.param("decoder.wk"));
  DecodeVars out;
  out.attention = tape.softmax(tape.scale(tape.matmul(q, k, true), inv_sqrt), 1);
  out.context = tape.matmul(out.attention, cells);
  out.output = tape.linear(out.context, tape.param("decoder.proj.w"), tape.param("decoder.proj.b"));
  return out;
}

DetectionVars detect(Tape& tape, Var decoded) {
  Var h = tape.relu(tape.linear(decoded, tape.param("head.hidden.w"), tape.param("head.hidden.b")));
  Var raw = tape.linear(h, tape.param("head.out.w"), tape.param("head.out.b"));
  const std::size_t width = tape.shape(raw)[1];
  DetectionVars out;
  out.occupancy = tape.sigmoid(tape.slice(raw, 1, 0, 1));
  out.offsets = tape.slice(raw, 1, 1, 3);
  out.classes = tape.softmax(tape.slice(raw, 1, 3, width), 1);
  return out;
}

Var supervised_loss(Tape& tape, const DetectionVars& pred, const DetectionTargets& truth) {
  const std::size_t N = tape.shape(pred.occupancy)[0];
  const std::size_t n = tape.shape(pred.classes)[1];
  if (truth.occupancy.size() != N || truth.classes != n) {
    throw ShapeError("supervised_loss: prediction grid (" + std::to_string(N) + " cells, " +
                     std::to_string(n) + " classes) does not match the targets");
  }
  Var occ = tape.binary_cross_entropy(pred.occupancy, Tensor({N, 1}, truth.occupancy));

  Tensor offset_mask({N, 2}, 0.0);
  Tensor offset_target({N, 2}, truth.offsets);
  Tensor class_mask({N, n}, 0.0);
  for (std::size_t c = 0; c < N; ++c) {
    if (truth.occupancy[c] <= 0.5) continue;
    offset_mask[2 * c] = offset_mask[2 * c + 1] = 1.0;
    if (truth.category[c] >= 0) class_mask[c * n + static_cast<std::size_t>(truth.category[c])] = 1.0;
  }
  Var diff = tape.mul(tape.sub(pred.offsets, tape.constant(std::move(offset_target))),
                      tape.constant(std::move(offset_mask)));
  Var reg = tape.sum(tape.mul(diff, diff));
  Var logp = tape.log(tape.clamp(pred.classes, 1e-12, 1.0));
  Var cls = tape.scale(tape.sum(tape.mul(logp, tape.constant(std::move(class_mask)))), -1.0);
  return tape.add(tape.add(occ, reg), cls);
}

Var depth_loss(Tape& tape, Var depth, const LidarDepthMap& lidar) {
  const Shape& s = tape.shape(depth);
  const std::size_t P = lidar.height * lidar.width;
  if (s.size() != 2 || s[0] != P || s[1] != lidar.tensor.extent(0)) {
    throw ShapeError("depth_loss: depth " + numerics::to_string(s) + " does not match lidar map");
  }
  const std::size_t observed = lidar.observed_count();
  if (observed == 0) return tape.constant(Tensor::scalar(0.0));
  Tensor onehot({P, s[1]}, 0.0);
  for (std::size_t p = 0; p < P; ++p)
    if (lidar.bin[p] >= 0) onehot[p * s[1] + static_cast<std::size_t>(lidar.bin[p])] = 1.0;
  Var logp = tape.log(tape.clamp(depth, 1e-12, 1.0));
  return tape.scale(tape.sum(tape.mul(logp, tape.constant(std::move(onehot)))),
                    -1.0 / static_cast<double>(observed));
}

// ---------------------------------------------------------------------------

namespace {

Tensor rows_to_chw(const Tensor& rows, std::size_t h, std::size_t w) {
  const std::size_t P = rows.extent(0);
  const std::size_t C = rows.extent(1);
  Tensor out({C, h, w}, 0.0);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t c = 0; c < C; ++c) out[c * P + p] = rows[p * C + c];
  return out;
}

Tensor chw_to_rows(const Tensor& chw) {
  const std::size_t C = chw.extent(0);
  const std::size_t P = chw.size() / C;
  Tensor out({P, C}, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) out[p * C + c] = chw[c * P + p];
  return out;
}

}  // namespace

ImageFeature encode_image(const Tensor& image, const ParameterSet& params, const CameraConfig& view) {
  view.validate();
  if (image.rank() != 3 || image.extent(0) != 3) {
    throw ShapeError("encode_image: expected 3 channels, got shape " + numerics::to_string(image.shape()));
  }
  for (double v : image.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("encode_image: pixel values must lie in [0, 1]");
  }
  Tape tape(params);
  Var f = encode_image(tape, image);
  return ImageFeature{rows_to_chw(tape.value(f), image.extent(1) / 2, image.extent(2) / 2)};
}

DepthDistribution estimate_depth(const ImageFeature& feat, const CameraConfig& cam,
                                 const ParameterSet& params, const ModelDims& dims) {
  if (feat.tensor.rank() != 3) throw ShapeError("estimate_depth: feature must be (C_I, H, W)");
  if (!feat.tensor.all_finite()) throw NumericError("estimate_depth: non-finite feature");
  const std::size_t H = feat.tensor.extent(1);
  const std::size_t W = feat.tensor.extent(2);
  Tape tape(params);
  Var f = tape.constant(chw_to_rows(feat.tensor));
  Var d = estimate_depth(tape, f, cam, dims.image_width, nullptr);
  DepthDistribution out;
  out.tensor = rows_to_chw(tape.value(d), H, W);
  out.bin_edges = dims.bin_edges();
  return out;
}

VoxelFeature lift_to_voxel(const ImageFeature& feat, const DepthDistribution& depth) {
  const Tensor& f = feat.tensor;
  const Tensor& d = depth.tensor;
  if (f.rank() != 3 || d.rank() != 3 || f.extent(1) != d.extent(1) || f.extent(2) != d.extent(2)) {
    throw ShapeError("lift_to_voxel: feature " + numerics::to_string(f.shape()) + " and depth " +
                     numerics::to_string(d.shape()) + " disagree on (H, W)");
  }
  numerics::ParameterSet none;
  Tape tape(none);
  Var v = lift_to_voxel(tape, tape.constant(chw_to_rows(f)), tape.constant(chw_to_rows(d)), f.extent(1),
                        f.extent(2));
  return VoxelFeature{tape.value(v)};
}

BEVFeature pool_to_bev(const VoxelFeature& vox, const numerics::Pool3d& pool) {
  numerics::ParameterSet none;
  Tape tape(none);
  return BEVFeature{tape.value(tape.avg_pool3d(tape.constant(vox.tensor), pool))};
}

DecodeResult decode_bev(const BEVFeature& bev, const Tensor& queries, const ParameterSet& params) {
  Tape tape(params);
  Var cells = bev_cells(tape, tape.constant(bev.tensor));
  DecodeVars d = decode_bev(tape, cells, tape.constant(queries));
  return DecodeResult{tape.value(d.attention), tape.value(d.context), tape.value(d.output)};
}

DetectionSet read_detections(const Tape& tape, const DetectionVars& vars) {
  DetectionSet out;
  const Tensor& occ = tape.value(vars.occupancy);
  out.occupancy = occ.reshaped({occ.size()});
  out.offsets = tape.value(vars.offsets);
  out.class_scores = tape.value(vars.classes);
  return out;
}

DetectionSet detect(const Tensor& decoded, const ParameterSet& params) {
  if (!decoded.all_finite()) throw NumericError("detect: non-finite decoded features");
  Tape tape(params);
  return read_detections(tape, detect(tape, tape.constant(decoded)));
}

SupervisedLossTerms supervised_loss(const DetectionSet& pred, const DetectionTargets& truth) {
  const std::size_t N = pred.cells();
  const std::size_t n = pred.classes();
  numerics::ParameterSet none;
  Tape tape(none);
  DetectionVars v{tape.constant(pred.occupancy.reshaped({N, 1})), tape.constant(pred.offsets),
                  tape.constant(pred.class_scores)};
  if (truth.occupancy.size() != N || truth.classes != n) {
    throw ShapeError("supervised_loss: prediction and target grids differ");
  }
  SupervisedLossTerms terms;
  terms.occupancy = tape.value(tape.binary_cross_entropy(v.occupancy, Tensor({N, 1}, truth.occupancy))).item();
  for (std::size_t c = 0; c < N; ++c) {
    if (truth.occupancy[c] <= 0.5) continue;
    for (std::size_t k = 0; k < 2; ++k) {
      const double d = pred.offsets[2 * c + k] - truth.offsets[2 * c + k];
      terms.offset += d * d;
    }
    if (truth.category[c] >= 0) {
      const double p = pred.class_scores[c * n + static_cast<std::size_t>(truth.category[c])];
      terms.classification -= std::log(std::clamp(p, 1e-12, 1.0));
    }
  }
  terms.total = tape.value(supervised_loss(tape, v, truth)).item();
  return terms;
}

DetectionSet predict(const ParameterSet& params, const ModelDims& dims, std::span<const Tensor> images,
                     std::span<const CameraConfig> cams) {
  Tape tape(params);
  ForwardVars f = forward(tape, dims, images, cams);
  return read_detections(tape, f.detection);
}

}  // namespace bevuda::geometry
