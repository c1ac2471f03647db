#include "bevuda/geometry/types.hpp"

#include <cmath>
#include <stdexcept>

#include "bevuda/errors.hpp"

namespace bevuda::geometry {

CameraConfig CameraConfig::pinhole(double fx, double fy, double cx, double cy, std::size_t view) {
  CameraConfig cam;
  cam.intrinsics = Tensor({3, 3}, {fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0});
  cam.view_index = view;
  cam.validate();
  return cam;
}

void CameraConfig::validate() const {
  if (intrinsics.shape() != numerics::Shape{3, 3}) {
    throw ShapeError("intrinsics must be 3x3");
  }
  const Tensor& k = intrinsics;
  if (!(k[0] > 0.0 && k[4] > 0.0)) {
    throw std::invalid_argument("intrinsics focal entries must be positive");
  }
  const double det = k[0] * (k[4] * k[8] - k[5] * k[7]) - k[1] * (k[3] * k[8] - k[5] * k[6]) +
                     k[2] * (k[3] * k[7] - k[4] * k[6]);
  if (!std::isfinite(det) || std::abs(det) < 1e-12) {
    throw std::invalid_argument("intrinsics matrix is singular");
  }
}

std::size_t LidarDepthMap::observed_count() const {
  std::size_t n = 0;
  for (int b : bin) n += b >= 0;
  return n;
}

LidarDepthMap LidarDepthMap::from_bins(std::vector<int> bins, std::size_t bins_count,
                                       std::size_t height, std::size_t width) {
  if (bins.size() != height * width) {
    throw ShapeError("lidar bin map size does not match " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  LidarDepthMap map;
  map.height = height;
  map.width = width;
  map.tensor = Tensor({bins_count, height, width}, 0.0);
  const std::size_t plane = height * width;
  for (std::size_t p = 0; p < plane; ++p) {
    if (bins[p] < 0) continue;
    if (static_cast<std::size_t>(bins[p]) >= bins_count) {
      throw std::out_of_range("lidar bin index out of range");
    }
    map.tensor[static_cast<std::size_t>(bins[p]) * plane + p] = 1.0;
  }
  map.bin = std::move(bins);
  return map;
}

std::size_t DetectionTargets::positives() const {
  std::size_t n = 0;
  for (double o : occupancy) n += o > 0.5;
  return n;
}

DetectionTargets DetectionTargets::empty(BevGrid grid, std::size_t classes) {
  DetectionTargets t;
  t.grid = grid;
  t.classes = classes;
  t.occupancy.assign(grid.cells(), 0.0);
  t.offsets.assign(grid.cells() * 2, 0.0);
  t.category.assign(grid.cells(), -1);
  return t;
}

DetectionTargets DetectionTargets::from_labels(const std::vector<ObjectLabel>& labels, BevGrid grid,
                                               std::size_t classes) {
  DetectionTargets t = empty(grid, classes);
  for (const ObjectLabel& l : labels) {
    if (l.cell_d >= grid.depth_cells || l.cell_w >= grid.width_cells) {
      throw std::out_of_range("label outside the BEV grid");
    }
    if (l.category >= classes) throw std::out_of_range("label category out of range");
    const std::size_t c = grid.index(l.cell_d, l.cell_w);
    t.occupancy[c] = 1.0;
    t.offsets[2 * c] = l.offset_d;
    t.offsets[2 * c + 1] = l.offset_w;
    t.category[c] = static_cast<int>(l.category);
  }
  return t;
}

}  // namespace bevuda::geometry
