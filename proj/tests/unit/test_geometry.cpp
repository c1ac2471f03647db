#include <cmath>
#include <vector>

#include "bevuda/errors.hpp"
#include "bevuda/geometry/model.hpp"
#include "bevuda/geometry/pipeline.hpp"
#include "doctest.h"
#include "support/oracles.hpp"
#include "support/random.hpp"

using namespace bevuda;
using namespace bevuda::geometry;
using numerics::GradientSet;
using numerics::GraphFn;
using numerics::Rng;
using numerics::Shape;
using testing_support::naive_pool;
using testing_support::pool;
using testing_support::random_distribution;
using testing_support::uniform;

namespace {

ModelDims small_dims() {
  ModelDims d;
  d.image_height = 8;
  d.image_width = 16;
  return d;
}

ParameterSet subset(const ParameterSet& p, const std::string& prefix) {
  ParameterSet out;
  for (const auto& [name, t] : p)
    if (name.rfind(prefix, 0) == 0) out.insert(name, t);
  return out;
}

ParameterSet detector_only(const ParameterSet& p) {
  ParameterSet out;
  for (const auto& [name, t] : p)
    if (name.rfind("embed.", 0) != 0) out.insert(name, t);
  return out;
}

CameraConfig cam(std::size_t w0, std::size_t h0, std::size_t view = 0) {
  return CameraConfig::pinhole(static_cast<double>(w0), static_cast<double>(h0), 0.5 * static_cast<double>(w0),
                               0.4 * static_cast<double>(h0), view);
}

}  // namespace

TEST_CASE("camera config validation") {
  CHECK_NOTHROW(cam(32, 16).validate());
  CameraConfig bad = cam(32, 16);
  bad.intrinsics[0] = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CameraConfig singular = cam(32, 16);
  singular.intrinsics[8] = 0.0;
  CHECK_THROWS_AS(singular.validate(), std::invalid_argument);
}

TEST_CASE("encode_image") {
  const ModelDims dims;
  SUBCASE("zero image with zero parameters gives a zero feature") {
    const ImageFeature f = encode_image(Tensor({3, 16, 32}, 0.0), zero_parameters(dims), cam(32, 16));
    CHECK(f.tensor.shape() == Shape{dims.image_channels, 8, 16});
    CHECK(f.tensor == Tensor(f.tensor.shape(), 0.0));
  }
  SUBCASE("deterministic") {
    Rng rng(2);
    const Tensor img = uniform({3, 16, 32}, rng, 0.0, 1.0);
    const ParameterSet p = init_parameters(dims, 9);
    CHECK(encode_image(img, p, cam(32, 16)).tensor == encode_image(img, p, cam(32, 16)).tensor);
  }
  SUBCASE("wrong channel count or out-of-range pixels are rejected") {
    const ParameterSet p = init_parameters(dims, 9);
    CHECK_THROWS_AS(encode_image(Tensor({4, 16, 32}, 0.5), p, cam(32, 16)), ShapeError);
    CHECK_THROWS_AS(encode_image(Tensor({3, 16, 32}, 1.5), p, cam(32, 16)), std::invalid_argument);
  }
  SUBCASE("gradient of mean(feature) matches finite differences") {
    Rng rng(4);
    const Tensor img = uniform({3, 16, 32}, rng, 0.0, 1.0);
    const ParameterSet p = subset(init_parameters(dims, 4), "encoder.");
    GraphFn g = [&](numerics::Tape& t, std::span<const Var>) { return t.mean(encode_image(t, img)); };
    const auto [v, analytic] = numerics::value_and_gradient(g, p, {});
    CHECK(numerics::gradient_check_error(analytic, numerics::finite_difference_gradient(g, p, {}, 1e-5)) < 1e-4);
  }
}

TEST_CASE("estimate_depth") {
  ModelDims dims;
  Rng rng(6);
  ParameterSet p = init_parameters(dims, 6);
  const ImageFeature feat{uniform({dims.image_channels, 8, 16}, rng)};
  SUBCASE("all-equal logits give a uniform distribution") {
    for (double& v : p.at("depth.out.w").values()) v = 0.0;
    for (double& v : p.at("depth.out.b").values()) v = 0.7;
    const DepthDistribution d = estimate_depth(feat, cam(32, 16), p, dims);
    for (double v : d.tensor.values()) CHECK(v == doctest::Approx(1.0 / 16.0).epsilon(1e-14));
  }
  SUBCASE("per-pixel sums are 1 and bin edges are monotone") {
    const DepthDistribution d = estimate_depth(feat, cam(32, 16), p, dims);
    CHECK(d.tensor.shape() == Shape{16, 8, 16});
    for (std::size_t px = 0; px < 128; ++px) {
      double s = 0.0;
      for (std::size_t b = 0; b < 16; ++b) s += d.tensor[b * 128 + px];
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
    REQUIRE(d.bin_edges.size() == 17);
    for (std::size_t k = 1; k < 17; ++k) CHECK(d.bin_edges[k] > d.bin_edges[k - 1]);
  }
  SUBCASE("two-bin logits (0, ln 2) give (1/3, 2/3)") {
    ModelDims two = dims;
    two.depth_bins = 2;
    ParameterSet q = init_parameters(two, 1);
    for (double& v : q.at("depth.out.w").values()) v = 0.0;
    q.at("depth.out.b")[0] = 0.0;
    q.at("depth.out.b")[1] = std::log(2.0);
    const DepthDistribution d = estimate_depth(feat, cam(32, 16), q, two);
    for (std::size_t px = 0; px < 128; ++px) {
      CHECK(d.tensor[px] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
      CHECK(d.tensor[128 + px] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    }
  }
  SUBCASE("camera intrinsics change the prediction") {
    const DepthDistribution a = estimate_depth(feat, cam(32, 16), p, dims);
    const DepthDistribution b = estimate_depth(feat, cam(32, 20), p, dims);
    CHECK(numerics::max_abs_diff(a.tensor, b.tensor) > 0.0);
  }
}

TEST_CASE("depth conditioning carries intrinsics and the pixel ray") {
  const CameraConfig c = CameraConfig::pinhole(32, 16, 16, 6, 0);
  const Tensor cond = depth_conditioning(c, 32, 128);
  REQUIRE(cond.shape() == Shape{128, kDepthConditioning});
  CHECK(cond[0] == 1.0);                          // fx / W0
  CHECK(cond[9] == doctest::Approx((1.0 - 16) / 32));
  CHECK(cond[10] == doctest::Approx((1.0 - 6) / 16));
  const std::size_t p = 3 * 16 + 5;  // row 3, column 5 of the feature map
  CHECK(cond[p * kDepthConditioning + 9] == doctest::Approx((11.0 - 16) / 32));
  CHECK(cond[p * kDepthConditioning + 10] == doctest::Approx((7.0 - 6) / 16));
}

TEST_CASE("lift_to_voxel") {
  Rng rng(8);
  const ImageFeature feat{uniform({4, 3, 5}, rng)};
  SUBCASE("one-hot depth at bin k places the feature at slice k only") {
    DepthDistribution d{Tensor({6, 3, 5}, 0.0), {}};
    for (std::size_t px = 0; px < 15; ++px) d.tensor[2 * 15 + px] = 1.0;
    const Tensor v = lift_to_voxel(feat, d).tensor;
    REQUIRE(v.shape() == Shape{4, 6, 3, 5});
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t b = 0; b < 6; ++b)
        for (std::size_t px = 0; px < 15; ++px)
          CHECK(v[(c * 6 + b) * 15 + px] == (b == 2 ? feat.tensor[c * 15 + px] : 0.0));
  }
  SUBCASE("uniform depth gives feat / C_D in every slice") {
    const DepthDistribution d{Tensor({6, 3, 5}, 1.0 / 6.0), {}};
    const Tensor v = lift_to_voxel(feat, d).tensor;
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t b = 0; b < 6; ++b)
        for (std::size_t px = 0; px < 15; ++px)
          CHECK(v[(c * 6 + b) * 15 + px] == doctest::Approx(feat.tensor[c * 15 + px] / 6.0).epsilon(1e-15));
  }
  SUBCASE("zero feature gives a zero voxel") {
    const DepthDistribution d{random_distribution(6, 3, 5, rng), {}};
    const Tensor v = lift_to_voxel(ImageFeature{Tensor({4, 3, 5}, 0.0)}, d).tensor;
    CHECK(v == Tensor(v.shape(), 0.0));
  }
  SUBCASE("linearity in the feature and mass conservation over depth") {
    const DepthDistribution d{random_distribution(6, 3, 5, rng), {}};
    const Tensor v = lift_to_voxel(feat, d).tensor;
    Tensor scaled = feat.tensor;
    for (double& x : scaled.values()) x *= -2.5;
    const Tensor vs = lift_to_voxel(ImageFeature{scaled}, d).tensor;
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(vs[i] == doctest::Approx(-2.5 * v[i]).epsilon(1e-14));
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t px = 0; px < 15; ++px) {
        double s = 0.0;
        for (std::size_t b = 0; b < 6; ++b) s += v[(c * 6 + b) * 15 + px];
        CHECK(s == doctest::Approx(feat.tensor[c * 15 + px]).epsilon(1e-12));
      }
  }
  SUBCASE("mismatched (H, W) is rejected") {
    const DepthDistribution d{Tensor({6, 3, 4}, 1.0 / 6.0), {}};
    CHECK_THROWS_AS(lift_to_voxel(feat, d), ShapeError);
  }
}

TEST_CASE("pool_to_bev") {
  Rng rng(10);
  SUBCASE("unit kernel and stride is the identity") {
    const VoxelFeature v{uniform({2, 5, 3, 4}, rng)};
    CHECK(pool_to_bev(v, pool(1, 1, 1, 1, 1, 1)).tensor == v.tensor);
  }
  SUBCASE("depth extent hand values") {
    CHECK(pool_to_bev(VoxelFeature{Tensor({1, 16, 1, 1}, 1.0)}, pool(4, 1, 1, 4, 1, 1)).tensor.extent(1) == 4);
    CHECK(pool_to_bev(VoxelFeature{Tensor({1, 10, 1, 1}, 1.0)}, pool(3, 1, 1, 2, 1, 1)).tensor.extent(1) == 4);
  }
  SUBCASE("shape law over kernels, strides and extents") {
    for (std::size_t e = 4; e <= 16; e += 3)
      for (std::size_t k = 1; k <= 4; ++k)
        for (std::size_t s = 1; s <= 4; ++s) {
          const Tensor out = pool_to_bev(VoxelFeature{Tensor({1, e, e, e}, 1.0)}, pool(k, k, k, s, s, s)).tensor;
          const std::size_t want = (e - k) / s + 1;
          CHECK(out.shape() == Shape{1, want, want, want});
        }
  }
  SUBCASE("matches a naive triple loop within 1e-12") {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t D = 2 + rng.below(7), H = 2 + rng.below(7), W = 2 + rng.below(7);
      const VoxelFeature v{uniform({2, D, H, W}, rng)};
      const numerics::Pool3d p = pool(1 + rng.below(D), 1 + rng.below(H), 1 + rng.below(W), 1 + rng.below(3),
                                      1 + rng.below(3), 1 + rng.below(3));
      CHECK(numerics::max_abs_diff(pool_to_bev(v, p).tensor, naive_pool(v.tensor, p)) <= 1e-12);
    }
  }
  SUBCASE("kernel larger than the input is rejected") {
    CHECK_THROWS_AS(pool_to_bev(VoxelFeature{Tensor({1, 3, 2, 2}, 1.0)}, pool(4, 1, 1, 1, 1, 1)), ShapeError);
  }
}

TEST_CASE("decode_bev") {
  const ModelDims dims;
  const ParameterSet p = init_parameters(dims, 12);
  Rng rng(12);
  const BEVFeature bev{uniform({8, 4, 1, 3}, rng)};
  SUBCASE("zero queries attend uniformly; context is the mean cell") {
    const DecodeResult r = decode_bev(bev, Tensor({2, 8}, 0.0), p);
    for (double a : r.attention.values()) CHECK(a == doctest::Approx(1.0 / 12.0).epsilon(1e-14));
    for (std::size_t c = 0; c < 8; ++c) {
      double m = 0.0;
      for (std::size_t k = 0; k < 12; ++k) m += bev.tensor[c * 12 + k];
      CHECK(r.context[c] == doctest::Approx(m / 12.0).epsilon(1e-12));
    }
  }
  SUBCASE("a single cell is returned unchanged before projection") {
    const BEVFeature one{uniform({8, 1, 1, 1}, rng)};
    const DecodeResult r = decode_bev(one, uniform({3, 8}, rng), p);
    for (std::size_t q = 0; q < 3; ++q)
      for (std::size_t c = 0; c < 8; ++c) CHECK(r.context[q * 8 + c] == doctest::Approx(one.tensor[c]));
  }
  SUBCASE("attention rows sum to 1") {
    const DecodeResult r = decode_bev(bev, uniform({5, 8}, rng, -3, 3), p);
    for (std::size_t q = 0; q < 5; ++q) {
      double s = 0.0;
      for (std::size_t k = 0; k < 12; ++k) s += r.attention[q * 12 + k];
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
  SUBCASE("query channel mismatch is rejected") { CHECK_THROWS_AS(decode_bev(bev, Tensor({2, 7}, 0.0), p), ShapeError); }
}

TEST_CASE("detect") {
  const ModelDims dims;
  Rng rng(13);
  SUBCASE("zero logits give occupancy 0.5") {
    const DetectionSet d = detect(Tensor({6, 8}, 0.0), zero_parameters(dims));
    for (double o : d.occupancy.values()) CHECK(o == 0.5);
  }
  SUBCASE("class scores sum to 1; output is deterministic") {
    const ParameterSet p = init_parameters(dims, 13);
    const Tensor x = uniform({10, 8}, rng);
    const DetectionSet a = detect(x, p);
    const DetectionSet b = detect(x, p);
    CHECK(a.occupancy == b.occupancy);
    CHECK(a.class_scores == b.class_scores);
    for (std::size_t c = 0; c < 10; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += a.class_scores[c * 3 + k];
      CHECK(std::abs(s - 1.0) < 1e-12);
      CHECK(a.occupancy[c] > 0.0);
      CHECK(a.occupancy[c] < 1.0);
    }
  }
}

TEST_CASE("supervised_loss") {
  const BevGrid grid{2, 3};
  SUBCASE("prediction equal to the truth has zero regression and class terms") {
    const std::vector<ObjectLabel> labels = {{0, 1, 0.2, -0.1, 2}, {1, 2, -0.3, 0.0, 0}};
    const DetectionTargets t = DetectionTargets::from_labels(labels, grid, 3);
    DetectionSet pred{Tensor({6}, 1e-12), Tensor({6, 2}, t.offsets), Tensor({6, 3}, 0.0)};
    for (std::size_t c = 0; c < 6; ++c) {
      if (t.occupancy[c] > 0.5) {
        pred.occupancy[c] = 1.0 - 1e-12;
        pred.class_scores[c * 3 + static_cast<std::size_t>(t.category[c])] = 1.0;
      } else {
        pred.class_scores[c * 3] = 1.0;
      }
    }
    const SupervisedLossTerms l = supervised_loss(pred, t);
    CHECK(l.offset == 0.0);
    CHECK(l.classification == 0.0);
    CHECK(l.occupancy < 1e-10);
  }
  SUBCASE("empty scene at occupancy 0.5 costs N ln 2") {
    const DetectionTargets t = DetectionTargets::empty(grid, 3);
    const DetectionSet pred{Tensor({6}, 0.5), Tensor({6, 2}, 0.3), Tensor({6, 3}, 1.0 / 3.0)};
    const SupervisedLossTerms l = supervised_loss(pred, t);
    CHECK(l.occupancy == doctest::Approx(6 * std::log(2.0)).epsilon(1e-14));
    CHECK(l.total == doctest::Approx(6 * std::log(2.0)).epsilon(1e-14));
  }
  SUBCASE("labels land in their cells") {
    const DetectionTargets t = DetectionTargets::from_labels({{1, 0, 0.1, 0.2, 1}}, grid, 3);
    CHECK(t.positives() == 1);
    CHECK(t.category[grid.index(1, 0)] == 1);
    CHECK(t.offsets[2 * grid.index(1, 0) + 1] == 0.2);
  }
}

TEST_CASE("end-to-end supervised loss gradient on a 2-view 8x16 scene") {
  const ModelDims dims = small_dims();
  Rng rng(21);
  std::vector<Tensor> images = {uniform({3, 8, 16}, rng, 0, 1), uniform({3, 8, 16}, rng, 0, 1)};
  std::vector<CameraConfig> cams = {cam(16, 8, 0), cam(16, 9, 1)};
  const DetectionTargets t = DetectionTargets::from_labels({{1, 1, 0.1, -0.2, 0}, {5, 3, -0.3, 0.25, 2}},
                                                           dims.grid(), dims.classes);
  const ParameterSet p = detector_only(init_parameters(dims, 21));
  GraphFn g = [&](numerics::Tape& tape, std::span<const Var>) {
    ForwardVars f = forward(tape, dims, images, cams);
    return supervised_loss(tape, f.detection, t);
  };
  const auto [v, analytic] = numerics::value_and_gradient(g, p, {});
  const GradientSet fd = numerics::finite_difference_gradient(g, p, {}, 1e-5, 6);
  CHECK(numerics::gradient_check_error(analytic, fd) < 1e-4);
}

TEST_CASE("model layout") {
  const ModelDims dims;
  const ParameterSet p = init_parameters(dims, 1);
  CHECK_NOTHROW(check_layout(p, dims));
  CHECK(p.at("embed.shared.w").shape() == Shape{768, 256});
  CHECK(init_parameters(dims, 1) == p);
  CHECK(init_parameters(dims, 2) != p);
  ModelDims other = dims;
  other.depth_bins = 8;
  CHECK_THROWS_AS(check_layout(p, other), ShapeError);
  CHECK(dims.grid() == BevGrid{8, 8});
}
