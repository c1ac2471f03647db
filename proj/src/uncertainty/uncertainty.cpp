#include "bevuda/uncertainty/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bevuda/errors.hpp"
#include "bevuda/geometry/pipeline.hpp"
#include "bevuda/numerics/rng.hpp"

namespace bevuda::uncertainty {

using numerics::Tape;
using numerics::Var;

std::vector<double> UncertaintyMap::per_pixel() const {
  const std::size_t bins = tensor.extent(0);
  const std::size_t plane = tensor.size() / bins;
  std::vector<double> out(plane, 0.0);
  for (std::size_t b = 0; b < bins; ++b)
    for (std::size_t p = 0; p < plane; ++p) out[p] += tensor[b * plane + p];
  for (double& v : out) v /= static_cast<double>(bins);
  return out;
}

void FusionConfig::validate() const {
  if (mc_passes < 2) throw std::invalid_argument("MC dropout needs at least two passes");
  if (!(dropout_rate > 0.0 && dropout_rate < 1.0))
    throw std::invalid_argument("dropout rate must lie in (0, 1)");
  if (theta && !(*theta >= 0.0)) throw std::invalid_argument("theta must be non-negative");
  if (!(theta_quantile >= 0.0 && theta_quantile <= 1.0))
    throw std::invalid_argument("theta quantile must lie in [0, 1]");
}

namespace {

Tensor rows_to_chw(const Tensor& rows, std::size_t h, std::size_t w) {
  const std::size_t P = rows.extent(0);
  const std::size_t C = rows.extent(1);
  Tensor out({C, h, w}, 0.0);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t c = 0; c < C; ++c) out[c * P + p] = rows[p * C + c];
  return out;
}

void check_same(const DepthDistribution& a, const DepthDistribution& b) {
  if (a.tensor.shape() != b.tensor.shape()) {
    throw ShapeError("depth distributions differ in shape: " + numerics::to_string(a.tensor.shape()) +
                     " vs " + numerics::to_string(b.tensor.shape()));
  }
}

}  // namespace

std::vector<DepthDistribution> mc_depth_samples(const ImageFeature& feat, const CameraConfig& cam,
                                                const numerics::ParameterSet& params,
                                                const geometry::ModelDims& dims, const FusionConfig& cfg,
                                                std::uint64_t seed) {
  if (cfg.mc_passes < 2) throw std::invalid_argument("mc_depth_samples: m must be at least 2");
  if (!(cfg.dropout_rate >= 0.0 && cfg.dropout_rate < 1.0))
    throw std::invalid_argument("mc_depth_samples: dropout rate must lie in [0, 1)");
  const std::size_t C = feat.tensor.extent(0);
  const std::size_t H = feat.tensor.extent(1);
  const std::size_t W = feat.tensor.extent(2);
  const std::size_t P = H * W;
  Tensor rows({P, C}, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) rows[p * C + c] = feat.tensor[c * P + p];

  std::vector<DepthDistribution> out;
  out.reserve(cfg.mc_passes);
  for (std::size_t n = 0; n < cfg.mc_passes; ++n) {
    Tape tape(params);
    const Tensor mask = numerics::dropout_mask({P, dims.depth_hidden}, cfg.dropout_rate,
                                               numerics::mix_seed(seed, n));
    Var d = geometry::estimate_depth(tape, tape.constant(rows), cam, dims.image_width, &mask);
    out.push_back(DepthDistribution{rows_to_chw(tape.value(d), H, W), dims.bin_edges()});
  }
  return out;
}

UncertaintyMap uncertainty_map(std::span<const DepthDistribution> samples) {
  if (samples.size() < 2) throw std::invalid_argument("uncertainty_map needs at least two samples");
  for (const auto& s : samples) check_same(samples[0], s);
  const std::size_t n = samples[0].tensor.size();
  const double m = static_cast<double>(samples.size());
  UncertaintyMap u;
  u.tensor = Tensor(samples[0].tensor.shape(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (const auto& s : samples) mu += s.tensor[i];
    mu /= m;
    double var = 0.0;
    for (const auto& s : samples) {
      const double d = s.tensor[i] - mu;
      var += d * d;
    }
    u.tensor[i] = std::sqrt(var / m);
    total += u.tensor[i];
  }
  u.scalar_mean = total / static_cast<double>(n);
  return u;
}

DepthDistribution ensemble_mean(std::span<const DepthDistribution> samples) {
  if (samples.empty()) throw std::invalid_argument("ensemble_mean of no samples");
  DepthDistribution out = samples[0];
  for (std::size_t k = 1; k < samples.size(); ++k) {
    check_same(out, samples[k]);
    for (std::size_t i = 0; i < out.tensor.size(); ++i) out.tensor[i] += samples[k].tensor[i];
  }
  for (double& v : out.tensor.values()) v /= static_cast<double>(samples.size());
  return out;
}

namespace {

void check_lidar(const DepthDistribution& pred, const LidarDepthMap& lidar) {
  if (lidar.tensor.shape() != pred.tensor.shape()) {
    throw ShapeError("lidar map " + numerics::to_string(lidar.tensor.shape()) +
                     " does not match depth " + numerics::to_string(pred.tensor.shape()));
  }
}

void replace_pixel(DepthDistribution& out, const LidarDepthMap& lidar, std::size_t p) {
  const std::size_t bins = out.bins();
  const std::size_t plane = out.height() * out.width();
  for (std::size_t b = 0; b < bins; ++b) out.tensor[b * plane + p] = lidar.tensor[b * plane + p];
}

}  // namespace

DepthDistribution fuse_depth(const DepthDistribution& pred, const LidarDepthMap& lidar,
                             const UncertaintyMap& u, double theta) {
  check_lidar(pred, lidar);
  if (u.tensor.shape() != pred.tensor.shape()) throw ShapeError("uncertainty map does not match depth");
  const std::vector<double> pixel_u = u.per_pixel();
  DepthDistribution out = pred;
  for (std::size_t p = 0; p < pixel_u.size(); ++p) {
    if (pixel_u[p] > theta && lidar.observed(p)) replace_pixel(out, lidar, p);
  }
  return out;
}

Tensor confidence_map(const DepthDistribution& pred) {
  const std::size_t bins = pred.bins();
  const std::size_t plane = pred.height() * pred.width();
  Tensor out({pred.height(), pred.width()}, 0.0);
  for (std::size_t p = 0; p < plane; ++p) {
    double best = 0.0;
    for (std::size_t b = 0; b < bins; ++b) best = std::max(best, pred.tensor[b * plane + p]);
    out[p] = best;
  }
  return out;
}

DepthDistribution fuse_depth_by_confidence(const DepthDistribution& pred, const LidarDepthMap& lidar,
                                           double threshold) {
  check_lidar(pred, lidar);
  const Tensor conf = confidence_map(pred);
  DepthDistribution out = pred;
  for (std::size_t p = 0; p < conf.size(); ++p) {
    if (conf[p] < threshold && lidar.observed(p)) replace_pixel(out, lidar, p);
  }
  return out;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

std::vector<DepthDistribution> select_depth(std::span<const DepthDistribution> preds,
                                            std::span<const LidarDepthMap> lidar,
                                            std::span<const UncertaintyMap> maps, const FusionConfig& cfg) {
  if (preds.size() != lidar.size()) throw ShapeError("select_depth: one lidar map per view required");
  std::vector<DepthDistribution> out;
  out.reserve(preds.size());
  switch (cfg.selection) {
    case DepthSelection::uncertainty: {
      if (maps.size() != preds.size()) throw ShapeError("select_depth: one uncertainty map per view required");
      double theta = 0.0;
      if (cfg.theta) {
        theta = *cfg.theta;
      } else {
        std::vector<double> pooled;
        for (const auto& m : maps) {
          auto px = m.per_pixel();
          pooled.insert(pooled.end(), px.begin(), px.end());
        }
        theta = quantile(std::move(pooled), cfg.theta_quantile);
      }
      for (std::size_t v = 0; v < preds.size(); ++v) out.push_back(fuse_depth(preds[v], lidar[v], maps[v], theta));
      break;
    }
    case DepthSelection::confidence: {
      // Same fraction of candidate pixels as the uncertainty rule: the
      // least-confident (1 - quantile) share.
      std::vector<double> pooled;
      for (const auto& p : preds) {
        const Tensor c = confidence_map(p);
        pooled.insert(pooled.end(), c.values().begin(), c.values().end());
      }
      const double threshold = quantile(std::move(pooled), 1.0 - cfg.theta_quantile);
      for (std::size_t v = 0; v < preds.size(); ++v)
        out.push_back(fuse_depth_by_confidence(preds[v], lidar[v], threshold));
      break;
    }
    case DepthSelection::lidar_over_prediction:
      for (std::size_t v = 0; v < preds.size(); ++v) {
        check_lidar(preds[v], lidar[v]);
        DepthDistribution d = preds[v];
        for (std::size_t p = 0; p < lidar[v].bin.size(); ++p)
          if (lidar[v].observed(p)) replace_pixel(d, lidar[v], p);
        out.push_back(std::move(d));
      }
      break;
    case DepthSelection::lidar_only:
      for (std::size_t v = 0; v < preds.size(); ++v) {
        check_lidar(preds[v], lidar[v]);
        out.push_back(DepthDistribution{lidar[v].tensor, preds[v].bin_edges});
      }
      break;
  }
  return out;
}

}  // namespace bevuda::uncertainty
