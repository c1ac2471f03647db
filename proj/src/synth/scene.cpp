#include "bevuda/synth/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "bevuda/errors.hpp"
#include "bevuda/numerics/rng.hpp"

namespace bevuda::synth {

using numerics::Rng;

namespace {

constexpr double kCameraHeight = 1.5;
constexpr double kObjectWidth = 1.6;
constexpr double kObjectHeight = 4.0;
constexpr std::array<double, 3> kSky{0.70, 0.80, 0.95};
constexpr std::array<double, 3> kGround{0.45, 0.45, 0.45};

using Color = std::array<double, 3>;

Color palette(LayoutStyle style, std::size_t category) {
  static const Color grid[] = {{0.90, 0.20, 0.20}, {0.20, 0.80, 0.30}, {0.25, 0.35, 0.90},
                               {0.85, 0.80, 0.20}, {0.80, 0.30, 0.80}};
  static const Color curved[] = {{0.90, 0.50, 0.20}, {0.50, 0.80, 0.20}, {0.40, 0.20, 0.80},
                                 {0.95, 0.65, 0.55}, {0.30, 0.70, 0.70}};
  const Color* table = style == LayoutStyle::grid_city ? grid : curved;
  return table[category % 5];
}

/// Linear distance falloff of scene illumination, 1 at d_min down to 0.35
/// at d_max; gives the depth net a brightness cue.
double shading(double z, double d_min, double d_max) {
  return 1.0 - 0.65 * std::clamp((z - d_min) / (d_max - d_min), 0.0, 1.0);
}

struct Placed {
  ObjectLabel label;
  double z = 0.0;
  double u = 0.0;
  double albedo = 1.0;
};

struct ViewRender {
  Tensor depth;
  std::vector<int> owner;  // object index per pixel, -1 for background
};

ViewRender render_geometry(const SceneSpec& spec, const CameraConfig& cam, const std::vector<Placed>& objects) {
  const std::size_t H0 = spec.image_height;
  const std::size_t W0 = spec.image_width;
  const double fx = cam.intrinsics[0];
  const double fy = cam.intrinsics[4];
  const double cy = cam.intrinsics[5];
  ViewRender r{Tensor({H0, W0}, spec.depth_max), std::vector<int>(H0 * W0, -1)};
  for (std::size_t row = 0; row < H0; ++row) {
    const double vc = static_cast<double>(row) + 0.5;
    double z = spec.depth_max;
    if (vc > cy) z = std::clamp(fy * kCameraHeight / (vc - cy), spec.depth_min, spec.depth_max);
    for (std::size_t col = 0; col < W0; ++col) r.depth[row * W0 + col] = z;
  }
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const Placed& o = objects[k];
    const double half = fx * 0.5 * kObjectWidth / o.z;
    const double u0 = o.u - half;
    const double u1 = o.u + half;
    const double v0 = cy + fy * (kCameraHeight - kObjectHeight) / o.z;
    const double v1 = cy + fy * kCameraHeight / o.z;
    for (std::size_t row = 0; row < H0; ++row) {
      const double vc = static_cast<double>(row) + 0.5;
      if (vc < v0 || vc >= v1) continue;
      for (std::size_t col = 0; col < W0; ++col) {
        const double uc = static_cast<double>(col) + 0.5;
        if (uc < u0 || uc >= u1) continue;
        const std::size_t i = row * W0 + col;
        if (o.z < r.depth[i]) {
          r.depth[i] = o.z;
          r.owner[i] = static_cast<int>(k);
        }
      }
    }
  }
  return r;
}

/// Whether object `k` owns at least one pixel inside its own BEV column
/// strip in every view.
bool visible(const SceneSpec& spec, const std::vector<ViewRender>& renders, std::size_t k,
             const ObjectLabel& label) {
  const double cell_px = static_cast<double>(spec.image_width) / static_cast<double>(spec.grid.width_cells);
  const auto c0 = static_cast<std::size_t>(std::floor(label.cell_w * cell_px));
  const auto c1 = static_cast<std::size_t>(std::ceil((label.cell_w + 1) * cell_px));
  for (const ViewRender& r : renders) {
    bool seen = false;
    for (std::size_t row = 0; row < spec.image_height && !seen; ++row)
      for (std::size_t col = c0; col < std::min(c1, spec.image_width); ++col)
        if (r.owner[row * spec.image_width + col] == static_cast<int>(k)) {
          seen = true;
          break;
        }
    if (!seen) return false;
  }
  return true;
}

std::size_t curved_column(const SceneSpec& spec, std::size_t cell_d, double phase, Rng& rng) {
  const double W = static_cast<double>(spec.grid.width_cells);
  const double t = static_cast<double>(cell_d) / static_cast<double>(spec.grid.depth_cells);
  const double center = 0.5 * W + (W / 3.0) * std::sin(3.14159265358979323846 * t + phase);
  const double jitter = rng.uniform(-1.0, 1.0);
  const double w = std::clamp(std::floor(center + jitter), 0.0, W - 1.0);
  return static_cast<std::size_t>(w);
}

Placed sample_object(const SceneSpec& spec, double phase, Rng& rng) {
  Placed p;
  ObjectLabel& l = p.label;
  l.cell_d = rng.below(spec.grid.depth_cells);
  l.cell_w = spec.layout == LayoutStyle::grid_city ? rng.below(spec.grid.width_cells)
                                                   : curved_column(spec, l.cell_d, phase, rng);
  l.category = rng.below(spec.classes);
  const double fd = rng.uniform(0.1, 0.9);
  const double fw = rng.uniform(0.1, 0.9);
  l.offset_d = fd - 0.5;
  l.offset_w = fw - 0.5;
  const double cell_m = (spec.depth_max - spec.depth_min) / static_cast<double>(spec.grid.depth_cells);
  const double cell_px = static_cast<double>(spec.image_width) / static_cast<double>(spec.grid.width_cells);
  p.z = spec.depth_min + (static_cast<double>(l.cell_d) + fd) * cell_m;
  p.u = (static_cast<double>(l.cell_w) + fw) * cell_px;
  p.albedo = rng.uniform(0.97, 1.0);
  return p;
}

}  // namespace

std::string to_string(LayoutStyle style) {
  return style == LayoutStyle::grid_city ? "grid-city" : "curved-city";
}

LayoutStyle parse_layout(const std::string& name) {
  if (name == "grid-city") return LayoutStyle::grid_city;
  if (name == "curved-city") return LayoutStyle::curved_city;
  throw ConfigError("unknown layout style '" + name + "' (expected grid-city or curved-city)");
}

void SceneSpec::validate() const {
  if (views < 2) throw std::invalid_argument("scene spec: at least two views required");
  if (image_height < 8 || image_width < 8 || image_height % 2 || image_width % 2)
    throw SizingError("scene spec: image must be at least 8x8 with even extents");
  if (!(depth_max > depth_min && depth_min > 0.0)) throw std::invalid_argument("scene spec: bad depth range");
  if (depth_bins < 2) throw std::invalid_argument("scene spec: need at least two depth bins");
  if (grid.depth_cells == 0 || grid.width_cells == 0 || grid.width_cells > image_width / 2 ||
      grid.depth_cells > depth_bins)
    throw SizingError("scene spec: BEV grid does not fit the image and depth bins");
  if (classes == 0) throw std::invalid_argument("scene spec: need at least one class");
  if (n_objects > grid.cells() / 2) throw SizingError("scene spec: too many objects for the BEV grid");
  if (!(lidar_density > 0.0 && lidar_density <= 1.0))
    throw std::invalid_argument("scene spec: lidar density must lie in (0, 1]");
}

std::vector<double> SceneSpec::bin_edges() const {
  std::vector<double> edges(depth_bins + 1);
  for (std::size_t k = 0; k <= depth_bins; ++k)
    edges[k] = depth_min + (depth_max - depth_min) * static_cast<double>(k) / static_cast<double>(depth_bins);
  return edges;
}

SceneSpec spec_for(const geometry::ModelDims& dims) {
  SceneSpec s;
  s.views = dims.views;
  s.image_height = dims.image_height;
  s.image_width = dims.image_width;
  s.depth_min = dims.depth_min;
  s.depth_max = dims.depth_max;
  s.depth_bins = dims.depth_bins;
  s.grid = dims.grid();
  s.classes = dims.classes;
  return s;
}

bool SceneSample::operator==(const SceneSample& o) const {
  if (images != o.images || depth_gt != o.depth_gt || labels != o.labels) return false;
  if (cams.size() != o.cams.size() || lidar.size() != o.lidar.size()) return false;
  for (std::size_t v = 0; v < cams.size(); ++v)
    if (cams[v].intrinsics != o.cams[v].intrinsics || cams[v].view_index != o.cams[v].view_index) return false;
  for (std::size_t v = 0; v < lidar.size(); ++v)
    if (lidar[v].tensor != o.lidar[v].tensor || lidar[v].bin != o.lidar[v].bin) return false;
  return true;
}

CameraConfig view_camera(const SceneSpec& spec, std::size_t view) {
  const double H0 = static_cast<double>(spec.image_height);
  const double W0 = static_cast<double>(spec.image_width);
  const double v = static_cast<double>(view);
  return CameraConfig::pinhole(W0, H0 * (0.875 + 0.125 * v), 0.5 * W0, H0 * (0.35 + 0.05 * v), view);
}

SceneSample generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng place = root.stream("placement");
  const double phase = place.uniform(-0.6, 0.6);

  std::vector<CameraConfig> cams;
  for (std::size_t v = 0; v < spec.views; ++v) cams.push_back(view_camera(spec, v));

  std::vector<Placed> objects;
  std::vector<ViewRender> renders;
  auto render_all = [&] {
    renders.clear();
    for (const auto& cam : cams) renders.push_back(render_geometry(spec, cam, objects));
  };
  // Greedy placement; a dead end restarts the whole layout.
  bool placed = false;
  for (int restart = 0; restart < 50 && !placed; ++restart) {
    objects.clear();
    placed = true;
    for (std::size_t k = 0; k < spec.n_objects && placed; ++k) {
      bool ok = false;
      for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
        Placed cand = sample_object(spec, phase, place);
        const bool taken = std::any_of(objects.begin(), objects.end(), [&](const Placed& o) {
          return o.label.cell_d == cand.label.cell_d && o.label.cell_w == cand.label.cell_w;
        });
        if (taken) continue;
        objects.push_back(cand);
        render_all();
        ok = true;
        for (std::size_t j = 0; j < objects.size() && ok; ++j) ok = visible(spec, renders, j, objects[j].label);
        if (!ok) objects.pop_back();
      }
      placed = ok;
    }
  }
  if (!placed) {
    throw SizingError("generate_scene: could not place " + std::to_string(spec.n_objects) +
                      " objects visibly in every view");
  }
  render_all();

  SceneSample s;
  s.cams = cams;
  const std::vector<double> edges = spec.bin_edges();
  const std::size_t H0 = spec.image_height;
  const std::size_t W0 = spec.image_width;
  const std::size_t plane = H0 * W0;
  for (std::size_t v = 0; v < spec.views; ++v) {
    Rng texture = root.stream(numerics::mix_seed(numerics::stream_id("texture"), v));
    const ViewRender& r = renders[v];
    Tensor img({3, H0, W0}, 0.0);
    for (std::size_t i = 0; i < plane; ++i) {
      const double z = r.depth[i];
      const double noise = texture.normal(0.0, 0.02);
      Color c;
      if (r.owner[i] >= 0) {
        const Placed& o = objects[static_cast<std::size_t>(r.owner[i])];
        const Color base = palette(spec.layout, o.label.category);
        for (std::size_t ch = 0; ch < 3; ++ch) c[ch] = base[ch] * o.albedo * shading(z, spec.depth_min, spec.depth_max);
      } else if (z >= spec.depth_max) {
        c = kSky;
      } else {
        for (std::size_t ch = 0; ch < 3; ++ch) c[ch] = kGround[ch] * shading(z, spec.depth_min, spec.depth_max) + noise;
      }
      for (std::size_t ch = 0; ch < 3; ++ch) img[ch * plane + i] = std::clamp(c[ch], 0.0, 1.0);
    }
    s.images.push_back(std::move(img));
    s.depth_gt.push_back(r.depth);
    LidarSample lidar = sample_lidar(min_pool_depth(r.depth), spec.lidar_density, edges,
                                     root.stream(numerics::mix_seed(numerics::stream_id("lidar"), v)).seed());
    s.lidar.push_back(std::move(lidar.map));
  }
  for (const Placed& o : objects) s.labels.push_back(o.label);
  return s;
}

// ---------------------------------------------------------------------------

void DomainShift::validate() const {
  if (!(beta >= 0.0)) throw std::invalid_argument("domain shift: beta must be non-negative");
  if (!(gain > 0.0 && gain <= 1.0)) throw std::invalid_argument("domain shift: gain must lie in (0, 1]");
  if (!(density >= 0.0 && density < 1.0)) throw std::invalid_argument("domain shift: density must lie in [0, 1)");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("domain shift: noise sigma must be non-negative");
  if (!(airlight >= 0.0 && airlight <= 1.0)) throw std::invalid_argument("domain shift: airlight must lie in [0, 1]");
}

std::string DomainShift::describe() const {
  std::ostringstream os;
  os << to_string(kind);
  switch (kind) {
    case Kind::none: break;
    case Kind::fog: os << "(beta=" << beta << ",airlight=" << airlight << ",level=" << level << ")"; break;
    case Kind::night: os << "(gain=" << gain << ",sigma=" << noise_sigma << ")"; break;
    case Kind::rain: os << "(density=" << density << ",sigma=" << noise_sigma << ")"; break;
  }
  return os.str();
}

DomainShift DomainShift::none() { return DomainShift{}; }

DomainShift DomainShift::fog_level(int level, double beta0, double airlight) {
  if (level < 1 || level > 5) throw std::invalid_argument("fog level must lie in 1..5");
  DomainShift s;
  s.kind = Kind::fog;
  s.level = level;
  s.beta = 0.5 * level * beta0;
  s.airlight = airlight;
  s.validate();
  return s;
}

DomainShift DomainShift::night(double gain, double noise_sigma) {
  DomainShift s;
  s.kind = Kind::night;
  s.gain = gain;
  s.noise_sigma = noise_sigma;
  s.validate();
  return s;
}

DomainShift DomainShift::rain(double density, double noise_sigma) {
  DomainShift s;
  s.kind = Kind::rain;
  s.density = density;
  s.noise_sigma = noise_sigma;
  s.validate();
  return s;
}

std::string to_string(DomainShift::Kind kind) {
  switch (kind) {
    case DomainShift::Kind::none: return "none";
    case DomainShift::Kind::fog: return "fog";
    case DomainShift::Kind::night: return "night";
    case DomainShift::Kind::rain: return "rain";
  }
  return "none";
}

DomainShift::Kind parse_shift_kind(const std::string& name) {
  if (name == "none") return DomainShift::Kind::none;
  if (name == "fog") return DomainShift::Kind::fog;
  if (name == "night") return DomainShift::Kind::night;
  if (name == "rain") return DomainShift::Kind::rain;
  throw ConfigError("unknown domain shift '" + name + "'");
}

namespace {

void check_image(const Tensor& image) {
  if (image.rank() != 3 || image.extent(0) != 3)
    throw ShapeError("expected an image of shape (3, H0, W0), got " + numerics::to_string(image.shape()));
}

}  // namespace

Tensor apply_fog(const Tensor& image, const Tensor& depth_gt, double beta, double airlight) {
  check_image(image);
  if (!(beta >= 0.0)) throw std::invalid_argument("apply_fog: beta must be non-negative");
  const std::size_t plane = image.extent(1) * image.extent(2);
  if (depth_gt.size() != plane) throw ShapeError("apply_fog: depth map does not match the image");
  Tensor out = image;
  for (std::size_t i = 0; i < plane; ++i) {
    const double t = std::exp(-beta * depth_gt[i]);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = image[ch * plane + i] * t + airlight * (1.0 - t);
      out[ch * plane + i] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

Tensor apply_night(const Tensor& image, double gain, double noise_sigma, std::uint64_t seed) {
  check_image(image);
  if (!(gain > 0.0 && gain <= 1.0)) throw std::invalid_argument("apply_night: gain must lie in (0, 1]");
  Rng rng(seed);
  Tensor out = image;
  for (double& v : out.values()) {
    const double noise = noise_sigma > 0.0 ? rng.normal(0.0, noise_sigma) : 0.0;
    v = std::clamp(gain * v + noise, 0.0, 1.0);
  }
  return out;
}

Tensor apply_rain(const Tensor& image, double streak_density, double noise_sigma, std::uint64_t seed) {
  check_image(image);
  if (!(streak_density >= 0.0 && streak_density < 1.0))
    throw std::invalid_argument("apply_rain: density must lie in [0, 1)");
  constexpr std::size_t kLength = 4;
  const std::size_t H = image.extent(1);
  const std::size_t W = image.extent(2);
  const std::size_t plane = H * W;
  Rng rng(seed);
  Rng starts = rng.stream("streaks");
  Rng noise = rng.stream("noise");
  // A pixel is covered when any of the kLength pixels up its diagonal starts
  // a streak, so P(covered) = 1 - (1 - p)^kLength = density.
  const double p = 1.0 - std::pow(1.0 - streak_density, 1.0 / static_cast<double>(kLength));
  std::vector<char> streak(plane, 0);
  if (streak_density > 0.0) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (!starts.bernoulli(p)) continue;
      const std::size_t r = i / W;
      const std::size_t c = i % W;
      for (std::size_t k = 0; k < kLength; ++k) streak[((r + k) % H) * W + (c + k) % W] = 1;
    }
  }
  Tensor out = image;
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < plane; ++i) {
      double v = image[ch * plane + i];
      if (streak[i]) v += 0.6 * (1.0 - v);
      if (noise_sigma > 0.0) v += noise.normal(0.0, noise_sigma);
      out[ch * plane + i] = std::clamp(v, 0.0, 1.0);
    }
  return out;
}

SceneSample apply_shift(const SceneSample& scene, const DomainShift& shift, std::uint64_t seed) {
  shift.validate();
  SceneSample out = scene;
  for (std::size_t v = 0; v < out.images.size(); ++v) {
    const std::uint64_t s = numerics::mix_seed(seed, v);
    switch (shift.kind) {
      case DomainShift::Kind::none: break;
      case DomainShift::Kind::fog:
        out.images[v] = apply_fog(scene.images[v], scene.depth_gt[v], shift.beta, shift.airlight);
        break;
      case DomainShift::Kind::night:
        out.images[v] = apply_night(scene.images[v], shift.gain, shift.noise_sigma, s);
        break;
      case DomainShift::Kind::rain:
        out.images[v] = apply_rain(scene.images[v], shift.density, shift.noise_sigma, s);
        break;
    }
  }
  return out;
}

int depth_bin(double depth, const std::vector<double>& edges) {
  if (edges.size() < 2 || !std::isfinite(depth) || depth < edges.front() || depth > edges.back()) return -1;
  const auto it = std::upper_bound(edges.begin(), edges.end(), depth);
  const auto k = static_cast<int>(it - edges.begin()) - 1;
  return std::min(k, static_cast<int>(edges.size()) - 2);
}

LidarSample sample_lidar(const Tensor& depth_gt, double density, const std::vector<double>& bin_edges,
                         std::uint64_t seed) {
  if (!(density > 0.0 && density <= 1.0)) throw std::invalid_argument("sample_lidar: density must lie in (0, 1]");
  if (depth_gt.rank() != 2) throw ShapeError("sample_lidar: depth map must be (H, W)");
  const std::size_t H = depth_gt.extent(0);
  const std::size_t W = depth_gt.extent(1);
  Rng rng(seed);
  std::vector<int> bins(H * W, -1);
  LidarSample out;
  for (std::size_t i = 0; i < H * W; ++i) {
    if (!rng.bernoulli(density)) continue;
    const int b = depth_bin(depth_gt[i], bin_edges);
    if (b < 0) {
      ++out.dropped;
      continue;
    }
    bins[i] = b;
  }
  out.map = LidarDepthMap::from_bins(std::move(bins), bin_edges.size() - 1, H, W);
  return out;
}

Tensor min_pool_depth(const Tensor& depth_gt) {
  if (depth_gt.rank() != 2 || depth_gt.extent(0) % 2 || depth_gt.extent(1) % 2)
    throw ShapeError("min_pool_depth: depth map must be (H0, W0) with even extents");
  const std::size_t H = depth_gt.extent(0) / 2;
  const std::size_t W = depth_gt.extent(1) / 2;
  const std::size_t W0 = depth_gt.extent(1);
  Tensor out({H, W}, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      const std::size_t i = 2 * h * W0 + 2 * w;
      out[h * W + w] = std::min({depth_gt[i], depth_gt[i + 1], depth_gt[i + W0], depth_gt[i + W0 + 1]});
    }
  return out;
}

double image_contrast(const Tensor& image) {
  check_image(image);
  const std::size_t plane = image.extent(1) * image.extent(2);
  double mean = 0.0;
  std::vector<double> gray(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    gray[i] = 0.299 * image[i] + 0.587 * image[plane + i] + 0.114 * image[2 * plane + i];
    mean += gray[i];
  }
  mean /= static_cast<double>(plane);
  double var = 0.0;
  for (double g : gray) var += (g - mean) * (g - mean);
  return std::sqrt(var / static_cast<double>(plane));
}

}  // namespace bevuda::synth
