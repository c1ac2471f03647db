#include "bevuda/synth/corpus.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "bevuda/errors.hpp"
#include "bevuda/numerics/checkpoint.hpp"
#include "bevuda/numerics/rng.hpp"

namespace bevuda::synth {

namespace nx = numerics;

// Layout (little-endian):
//   magic "BEVCORPS", version u32
//   header text (key=value lines) as a string, bin_edges tensor
//   n_scenes u64, then per scene an entry block of named tensors
//   magic "SEALEDLB", then per scene one packed label tensor

namespace {

constexpr char kMagic[8] = {'B', 'E', 'V', 'C', 'O', 'R', 'P', 'S'};
constexpr char kSealedMagic[8] = {'S', 'E', 'A', 'L', 'E', 'D', 'L', 'B'};
constexpr std::uint32_t kVersion = 1;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string header_text(const CorpusHeader& h) {
  std::ostringstream os;
  const SceneSpec& s = h.spec;
  os << "spec.n_objects=" << s.n_objects << "\n"
     << "spec.layout=" << to_string(s.layout) << "\n"
     << "spec.views=" << s.views << "\n"
     << "spec.image_height=" << s.image_height << "\n"
     << "spec.image_width=" << s.image_width << "\n"
     << "spec.depth_min=" << fmt(s.depth_min) << "\n"
     << "spec.depth_max=" << fmt(s.depth_max) << "\n"
     << "spec.depth_bins=" << s.depth_bins << "\n"
     << "spec.grid_depth=" << s.grid.depth_cells << "\n"
     << "spec.grid_width=" << s.grid.width_cells << "\n"
     << "spec.classes=" << s.classes << "\n"
     << "spec.lidar_density=" << fmt(s.lidar_density) << "\n"
     << "shift.kind=" << to_string(h.shift.kind) << "\n"
     << "shift.beta=" << fmt(h.shift.beta) << "\n"
     << "shift.airlight=" << fmt(h.shift.airlight) << "\n"
     << "shift.gain=" << fmt(h.shift.gain) << "\n"
     << "shift.density=" << fmt(h.shift.density) << "\n"
     << "shift.noise_sigma=" << fmt(h.shift.noise_sigma) << "\n"
     << "shift.level=" << h.shift.level << "\n"
     << "n_scenes=" << h.n_scenes << "\n"
     << "seed=" << h.seed << "\n"
     << "labeled=" << (h.labeled ? 1 : 0) << "\n";
  return os.str();
}

CorpusHeader parse_header(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("corpus header line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("corpus header is missing '" + key + "'");
    return it->second;
  };
  auto u = [&](const std::string& key) { return static_cast<std::size_t>(std::stoull(get(key))); };
  auto d = [&](const std::string& key) { return std::strtod(get(key).c_str(), nullptr); };
  CorpusHeader h;
  try {
    SceneSpec& s = h.spec;
    s.n_objects = u("spec.n_objects");
    s.layout = parse_layout(get("spec.layout"));
    s.views = u("spec.views");
    s.image_height = u("spec.image_height");
    s.image_width = u("spec.image_width");
    s.depth_min = d("spec.depth_min");
    s.depth_max = d("spec.depth_max");
    s.depth_bins = u("spec.depth_bins");
    s.grid = BevGrid{u("spec.grid_depth"), u("spec.grid_width")};
    s.classes = u("spec.classes");
    s.lidar_density = d("spec.lidar_density");
    h.shift.kind = parse_shift_kind(get("shift.kind"));
    h.shift.beta = d("shift.beta");
    h.shift.airlight = d("shift.airlight");
    h.shift.gain = d("shift.gain");
    h.shift.density = d("shift.density");
    h.shift.noise_sigma = d("shift.noise_sigma");
    h.shift.level = std::stoi(get("shift.level"));
    h.n_scenes = u("n_scenes");
    h.seed = std::stoull(get("seed"));
    h.labeled = get("labeled") == "1";
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("malformed corpus header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed corpus header: ") + e.what());
  }
  return h;
}

std::string view_key(std::size_t v, const char* what) { return "view" + std::to_string(v) + "." + what; }

nx::ParameterSet scene_record(const SceneSample& s, bool labeled) {
  nx::ParameterSet rec;
  for (std::size_t v = 0; v < s.images.size(); ++v) {
    rec.insert(view_key(v, "image"), s.images[v]);
    rec.insert(view_key(v, "intrinsics"), s.cams[v].intrinsics);
    rec.insert(view_key(v, "depth_gt"), s.depth_gt[v]);
    const LidarDepthMap& l = s.lidar[v];
    Tensor bins({l.height, l.width}, 0.0);
    for (std::size_t p = 0; p < l.bin.size(); ++p) bins[p] = static_cast<double>(l.bin[p]);
    rec.insert(view_key(v, "lidar_bins"), std::move(bins));
  }
  if (labeled) rec.insert("labels", pack_labels(s.labels));
  return rec;
}

SceneSample parse_record(const nx::ParameterSet& rec, const CorpusHeader& h) {
  SceneSample s;
  for (std::size_t v = 0; v < h.spec.views; ++v) {
    s.images.push_back(rec.at(view_key(v, "image")));
    geometry::CameraConfig cam;
    cam.intrinsics = rec.at(view_key(v, "intrinsics"));
    cam.view_index = v;
    s.cams.push_back(std::move(cam));
    s.depth_gt.push_back(rec.at(view_key(v, "depth_gt")));
    const Tensor& bins = rec.at(view_key(v, "lidar_bins"));
    if (bins.rank() != 2) throw FormatError("lidar bins must be a 2-D tensor");
    std::vector<int> b(bins.size());
    for (std::size_t p = 0; p < b.size(); ++p) b[p] = static_cast<int>(bins[p]);
    s.lidar.push_back(LidarDepthMap::from_bins(std::move(b), h.spec.depth_bins, bins.extent(0), bins.extent(1)));
  }
  if (h.labeled) s.labels = unpack_labels(rec.at("labels"));
  return s;
}

void read_magic(std::istream& is, const char (&magic)[8], const char* what) {
  char buf[8];
  is.read(buf, 8);
  if (!is || std::memcmp(buf, magic, 8) != 0) throw FormatError(std::string("bad magic: not a ") + what);
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open corpus " + path.string());
  return is;
}

/// Reads the header and leaves the stream positioned at the first record.
CorpusHeader read_preamble(std::istream& is) {
  read_magic(is, kMagic, "corpus file");
  const std::uint32_t version = nx::read_u32(is);
  if (version != kVersion) throw FormatError("unsupported corpus version " + std::to_string(version));
  CorpusHeader h = parse_header(nx::read_string(is));
  const Tensor edges = nx::read_tensor(is);
  h.bin_edges.assign(edges.values().begin(), edges.values().end());
  const std::uint64_t n = nx::read_u64(is);
  if (n != h.n_scenes) throw FormatError("corpus scene count disagrees with its header");
  return h;
}

}  // namespace

std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) { return nx::mix_seed(seed, index); }

Corpus make_corpus(const SceneSpec& spec, const DomainShift& shift, std::size_t n_scenes, std::uint64_t seed,
                   bool labeled) {
  if (n_scenes == 0) throw std::invalid_argument("make_corpus: need at least one scene");
  shift.validate();
  Corpus c;
  c.header.spec = spec;
  c.header.spec.seed = 0;
  c.header.shift = shift;
  c.header.n_scenes = n_scenes;
  c.header.seed = seed;
  c.header.labeled = labeled;
  c.header.bin_edges = spec.bin_edges();
  const std::uint64_t shift_seed = nx::mix_seed(seed, nx::stream_id("shift"));
  for (std::size_t i = 0; i < n_scenes; ++i) {
    SceneSpec si = spec;
    si.seed = scene_seed(seed, i);
    SceneSample s = apply_shift(generate_scene(si), shift, nx::mix_seed(shift_seed, i));
    c.sealed_labels.push_back(s.labels);
    if (!labeled) s.labels.clear();
    c.scenes.push_back(std::move(s));
  }
  return c;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  const CorpusHeader& h = corpus.header;
  if (corpus.scenes.size() != h.n_scenes || corpus.sealed_labels.size() != h.n_scenes) {
    throw std::invalid_argument("write_corpus: scene and label counts must match the header");
  }
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + tmp.string() + " for writing");
    os.write(kMagic, 8);
    nx::write_u32(os, kVersion);
    nx::write_string(os, header_text(h));
    nx::write_tensor(os, Tensor({h.bin_edges.size()}, h.bin_edges));
    nx::write_u64(os, h.n_scenes);
    for (const SceneSample& s : corpus.scenes) nx::write_entries(os, scene_record(s, h.labeled));
    os.write(kSealedMagic, 8);
    for (const auto& labels : corpus.sealed_labels) nx::write_tensor(os, pack_labels(labels));
    os.flush();
    if (!os) throw FormatError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  Corpus c;
  c.header = read_preamble(is);
  for (std::size_t i = 0; i < c.header.n_scenes; ++i) c.scenes.push_back(parse_record(nx::read_entries(is), c.header));
  return c;
}

std::vector<std::vector<ObjectLabel>> read_sealed_labels(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  const CorpusHeader h = read_preamble(is);
  for (std::size_t i = 0; i < h.n_scenes; ++i) nx::read_entries(is);
  read_magic(is, kSealedMagic, "sealed label section");
  std::vector<std::vector<ObjectLabel>> out;
  for (std::size_t i = 0; i < h.n_scenes; ++i) out.push_back(unpack_labels(nx::read_tensor(is)));
  return out;
}

Corpus build_corpus(const std::filesystem::path& path, const SceneSpec& spec, const DomainShift& shift,
                    std::size_t n_scenes, std::uint64_t seed, bool labeled) {
  Corpus c = make_corpus(spec, shift, n_scenes, seed, labeled);
  write_corpus(path, c);
  return c;
}

Tensor pack_labels(const std::vector<ObjectLabel>& labels) {
  std::vector<double> v{static_cast<double>(labels.size())};
  for (const ObjectLabel& l : labels) {
    v.push_back(static_cast<double>(l.cell_d));
    v.push_back(static_cast<double>(l.cell_w));
    v.push_back(l.offset_d);
    v.push_back(l.offset_w);
    v.push_back(static_cast<double>(l.category));
  }
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

std::vector<ObjectLabel> unpack_labels(const Tensor& packed) {
  if (packed.rank() != 1 || packed.size() < 1) throw FormatError("packed labels must be a vector");
  const auto count = static_cast<std::size_t>(packed[0]);
  if (packed.size() != 1 + 5 * count) throw FormatError("packed label tensor has the wrong length");
  std::vector<ObjectLabel> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    const double* r = packed.data() + 1 + 5 * k;
    out[k] = ObjectLabel{static_cast<std::size_t>(r[0]), static_cast<std::size_t>(r[1]), r[2], r[3],
                         static_cast<std::size_t>(r[4])};
  }
  return out;
}

}  // namespace bevuda::synth
