#include "bevuda/adaptation/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

#include "bevuda/errors.hpp"
#include "bevuda/geometry/pipeline.hpp"
#include "bevuda/numerics/rng.hpp"

namespace bevuda::adaptation {

namespace nx = numerics;
using geometry::DetectionTargets;
using geometry::ForwardOptions;
using geometry::ForwardVars;
using geometry::ModelDims;

std::string Switches::name() const {
  std::string out;
  auto add = [&](bool on, const char* tag) {
    if (!on) return;
    if (!out.empty()) out += "+";
    out += tag;
  };
  add(da, "DA");
  add(uema, "UEMA");
  add(kt, "KT");
  add(ba, "BA");
  add(ia, "IA");
  add(va, "VA");
  return out.empty() ? "none" : out;
}

void AdaptConfig::validate() const {
  dims.validate();
  weights.validate();
  uema.validate();
  fusion.validate();
  if (!(lr >= 0.0) || !(disc_lr >= 0.0)) throw std::invalid_argument("learning rates must be non-negative");
  if (!(pseudo_threshold >= 0.0 && pseudo_threshold <= 1.0))
    throw std::invalid_argument("pseudo-label threshold must lie in [0, 1]");
  if (!(depth_weight >= 0.0)) throw std::invalid_argument("depth weight must be non-negative");
  if (!(train_dropout >= 0.0 && train_dropout < 1.0)) throw std::invalid_argument("train dropout must lie in [0, 1)");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("gradient clip must be non-negative");
}

LossWeights AdaptConfig::effective_weights() const {
  LossWeights w = weights;
  if (!switches.kt) w.lambda1 = w.lambda3 = 0.0;
  if (!switches.spaces().any()) w.lambda4 = 0.0;
  return w;
}

UemaConfig AdaptConfig::effective_uema() const {
  UemaConfig u = uema;
  if (!switches.uema) u.sigma = 0.0;
  return u;
}

AdaptState init_adaptation(const ParameterSet& source, const ModelDims& dims, std::uint64_t seed) {
  geometry::check_layout(source, dims);
  return AdaptState{source, source, geometry::init_discriminator(dims, seed), 0};
}

void write_loss_row(std::ostream& os, const LossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.step, r.l_unc, r.l_sup, r.l_mkt,
                r.l_ali, r.total, r.u_mean);
  os << buf;
}

// ---------------------------------------------------------------------------

namespace {

ForwardOptions train_options(const AdaptConfig& cfg, std::uint64_t seed) {
  ForwardOptions o;
  o.dropout_rate = cfg.train_dropout;
  o.dropout_seed = seed;
  return o;
}

nx::GradientSet clip(nx::GradientSet g, double max_norm) {
  if (max_norm <= 0.0) return g;
  double sq = 0.0;
  for (const auto& [_, t] : g.entries)
    for (double v : t.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm <= max_norm) return g;
  const double f = max_norm / norm;
  for (auto& [_, t] : g.entries)
    for (double& v : t.values()) v *= f;
  return g;
}

std::uint64_t step_stream(const AdaptConfig& cfg, std::size_t step, const char* tag) {
  return nx::mix_seed(nx::mix_seed(cfg.seed, step), nx::stream_id(tag));
}

}  // namespace

Var source_objective(Tape& tape, Batch source, const AdaptConfig& cfg, std::uint64_t dropout_seed,
                     std::vector<ForwardVars>* forwards) {
  if (source.empty()) throw std::invalid_argument("source batch is empty");
  const ModelDims& dims = cfg.dims;
  Var total;
  for (std::size_t j = 0; j < source.size(); ++j) {
    const SceneSample& s = *source[j];
    ForwardVars f = geometry::forward(tape, dims, s.images, s.cams, train_options(cfg, nx::mix_seed(dropout_seed, j)));
    const DetectionTargets targets = DetectionTargets::from_labels(s.labels, dims.grid(), dims.classes);
    Var loss = geometry::supervised_loss(tape, f.detection, targets);
    if (cfg.depth_weight > 0.0) {
      Var depth;
      for (std::size_t v = 0; v < f.depth.size(); ++v) {
        Var d = geometry::depth_loss(tape, f.depth[v], s.lidar.at(v));
        depth = v == 0 ? d : tape.add(depth, d);
      }
      loss = tape.add(loss, tape.scale(depth, cfg.depth_weight / static_cast<double>(f.depth.size())));
    }
    total = j == 0 ? loss : tape.add(total, loss);
    if (forwards) forwards->push_back(std::move(f));
  }
  return tape.scale(total, 1.0 / static_cast<double>(source.size()));
}

double batch_uncertainty(const ParameterSet& params, Batch scenes, const AdaptConfig& cfg, std::uint64_t seed) {
  if (scenes.empty()) throw std::invalid_argument("batch_uncertainty: empty batch");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const SceneSample& s = *scenes[i];
    for (std::size_t v = 0; v < s.images.size(); ++v) {
      const auto feat = geometry::encode_image(s.images[v], params, s.cams[v]);
      const auto samples = uncertainty::mc_depth_samples(feat, s.cams[v], params, cfg.dims, cfg.fusion,
                                                         nx::mix_seed(seed, i * s.images.size() + v));
      total += uncertainty::uncertainty_map(samples).scalar_mean;
      ++count;
    }
  }
  return std::clamp(total / static_cast<double>(count), 0.0, 0.5);
}

std::vector<std::vector<Tensor>> teacher_depth(const ParameterSet& teacher, Batch scenes, const AdaptConfig& cfg,
                                               std::uint64_t seed) {
  std::vector<geometry::DepthDistribution> preds;
  std::vector<geometry::LidarDepthMap> lidar;
  std::vector<uncertainty::UncertaintyMap> maps;
  const bool need_maps = cfg.fusion.selection == uncertainty::DepthSelection::uncertainty;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const SceneSample& s = *scenes[i];
    for (std::size_t v = 0; v < s.images.size(); ++v) {
      const auto feat = geometry::encode_image(s.images[v], teacher, s.cams[v]);
      preds.push_back(geometry::estimate_depth(feat, s.cams[v], teacher, cfg.dims));
      lidar.push_back(s.lidar.at(v));
      if (need_maps) {
        const auto samples = uncertainty::mc_depth_samples(feat, s.cams[v], teacher, cfg.dims, cfg.fusion,
                                                           nx::mix_seed(seed, i * s.images.size() + v));
        maps.push_back(uncertainty::uncertainty_map(samples));
      }
    }
  }
  const auto fused = uncertainty::select_depth(preds, lidar, maps, cfg.fusion);
  std::vector<std::vector<Tensor>> out;
  std::size_t k = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    std::vector<Tensor> views;
    for (std::size_t v = 0; v < scenes[i]->images.size(); ++v) views.push_back(fused[k++].tensor);
    out.push_back(std::move(views));
  }
  return out;
}

PooledVars pool_categories(Tape& tape, const ModelDims& dims, std::span<const ForwardVars> forwards,
                           std::span<const DetectionTargets> labels) {
  if (forwards.size() != labels.size() || forwards.empty()) {
    throw ShapeError("pool_categories: need one label set per forward pass");
  }
  const std::size_t n = dims.classes;
  const std::size_t H = dims.feature_height();
  const std::size_t W = dims.feature_width();
  const std::size_t P = H * W;
  const std::size_t CD = dims.depth_bins;
  const std::size_t CI = dims.image_channels;
  const std::size_t pd = dims.pool_depth;
  const std::size_t pw = dims.pool_width;
  const geometry::BevGrid grid = dims.grid();
  PooledVars out;
  out.counts.assign(n, 0);
  Var img_sum;
  Var vox_sum;
  Var bev_sum;
  auto accumulate = [&](Var& acc, Var term) { acc = acc.valid() ? tape.add(acc, term) : term; };

  for (std::size_t s = 0; s < forwards.size(); ++s) {
    const ForwardVars& f = forwards[s];
    const DetectionTargets& t = labels[s];
    if (t.occupancy.size() != grid.cells()) throw ShapeError("pool_categories: label grid mismatch");
    const std::size_t M = f.features.size();
    Tensor a_img({n, P}, 0.0);
    Tensor a_vox({n, CD * P}, 0.0);
    Tensor a_bev({n, grid.cells()}, 0.0);
    bool any = false;
    for (std::size_t c = 0; c < grid.cells(); ++c) {
      if (t.occupancy[c] <= 0.5 || t.category[c] < 0) continue;
      any = true;
      const auto k = static_cast<std::size_t>(t.category[c]);
      ++out.counts[k];
      const std::size_t cd = c / grid.width_cells;
      const std::size_t cw = c % grid.width_cells;
      const double center = (static_cast<double>(cd) + 0.5 + t.offsets[2 * c]) * static_cast<double>(pd);
      const auto lo = static_cast<double>(cd * pd);
      const auto bin = static_cast<std::size_t>(std::clamp(std::floor(center), lo, lo + static_cast<double>(pd - 1)));
      const double strip = 1.0 / static_cast<double>(H * pw);
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = cw * pw; w < (cw + 1) * pw; ++w) {
          a_img[k * P + h * W + w] += strip / static_cast<double>(M);
          a_vox[k * CD * P + bin * P + h * W + w] += strip;
        }
      a_bev[k * grid.cells() + c] += 1.0;
    }
    if (!any) continue;
    Var ai = tape.constant(std::move(a_img));
    for (Var feat : f.features) accumulate(img_sum, tape.matmul(ai, feat));
    Var vox_rows = tape.transpose(tape.reshape(f.voxel, {CI, CD * P}));
    accumulate(vox_sum, tape.matmul(tape.constant(std::move(a_vox)), vox_rows));
    accumulate(bev_sum, tape.matmul(tape.constant(std::move(a_bev)), f.decoded));
  }
  Tensor norm({n, CI}, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t c = 0; c < CI; ++c) norm[k * CI + c] = out.counts[k] ? 1.0 / static_cast<double>(out.counts[k]) : 0.0;
  if (!img_sum.valid()) {
    Var zero = tape.constant(Tensor({n, CI}, 0.0));
    out.image = out.voxel = out.bev = zero;
    return out;
  }
  Var scale = tape.constant(std::move(norm));
  out.image = tape.mul(img_sum, scale);
  out.voxel = tape.mul(vox_sum, scale);
  out.bev = tape.mul(bev_sum, scale);
  return out;
}

std::pair<ParameterSet, double> supervised_step(const ParameterSet& params, Batch source, const AdaptConfig& cfg,
                                                std::size_t step) {
  Tape tape(params);
  Var loss = source_objective(tape, source, cfg, step_stream(cfg, step, "dropout.source"));
  const double value = tape.value(loss).item();
  nx::GradientSet g = clip(tape.gradient(loss, params), cfg.grad_clip);
  return {nx::gradient_step(params, g, cfg.lr), value};
}

TeacherTargets teacher_targets(const ParameterSet& teacher, Batch target, const AdaptConfig& cfg, std::size_t step) {
  const ModelDims& dims = cfg.dims;
  TeacherTargets out;
  std::vector<std::vector<Tensor>> fused;
  if (cfg.switches.da) fused = teacher_depth(teacher, target, cfg, step_stream(cfg, step, "mc.teacher"));
  for (std::size_t i = 0; i < target.size(); ++i) {
    const SceneSample& s = *target[i];
    Tape tt(teacher);
    ForwardOptions opt;
    if (cfg.switches.da) opt.depth_override = &fused[i];
    ForwardVars f = geometry::forward(tt, dims, s.images, s.cams, opt);
    out.pseudo.push_back(pseudo_labels(geometry::read_detections(tt, f.detection), dims.grid(), cfg.pseudo_threshold));
    TeacherOutputs t;
    for (Var v : f.features) t.features.push_back(tt.value(v));
    t.voxel = tt.value(f.voxel);
    t.cells = tt.value(f.cells);
    out.outputs.push_back(std::move(t));
  }
  return out;
}

Var student_objective(Tape& ts, Batch source, Batch target, const TeacherTargets& teacher, const ParameterSet& disc,
                      const AdaptConfig& cfg, std::size_t step, LossReport* report, ParameterSet* disc_next) {
  const ModelDims& dims = cfg.dims;
  const LossWeights w = cfg.effective_weights();
  const SpaceMask mask = cfg.switches.spaces();
  LossReport local;
  LossReport& rep = report ? *report : local;
  if (disc_next) *disc_next = disc;

  std::vector<ForwardVars> src_fw;
  Var l_sup = source_objective(ts, source, cfg, step_stream(cfg, step, "dropout.source"), &src_fw);
  Var total = ts.scale(l_sup, w.lambda2);
  rep.l_sup = ts.value(l_sup).item();
  if (!needs_target(cfg)) return total;
  if (teacher.pseudo.size() != target.size() || teacher.outputs.size() != target.size())
    throw ShapeError("student_objective: teacher targets do not match the target batch");

  const std::uint64_t tgt_seed = step_stream(cfg, step, "dropout.target");
  std::vector<ForwardVars> tgt_fw;
  Var l_unc;
  Var l_mkt;
  const double B = static_cast<double>(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const SceneSample& s = *target[i];
    ForwardVars f = geometry::forward(ts, dims, s.images, s.cams, train_options(cfg, nx::mix_seed(tgt_seed, i)));
    if (w.lambda1 > 0.0) {
      Var u = geometry::supervised_loss(ts, f.detection, teacher.pseudo[i]);
      if (cfg.switches.da && cfg.depth_weight > 0.0) {
        Var depth;
        for (std::size_t v = 0; v < f.depth.size(); ++v) {
          Var d = geometry::depth_loss(ts, f.depth[v], s.lidar.at(v));
          depth = v == 0 ? d : ts.add(depth, d);
        }
        u = ts.add(u, ts.scale(depth, cfg.depth_weight / static_cast<double>(f.depth.size())));
      }
      l_unc = l_unc.valid() ? ts.add(l_unc, u) : u;
    }
    if (w.lambda3 > 0.0) {
      const TeacherOutputs& t = teacher.outputs[i];
      const double pixels = static_cast<double>(f.features.size() * dims.pixels());
      Var m;
      for (std::size_t v = 0; v < f.features.size(); ++v) {
        Var term = transfer_term(ts, ts.constant(t.features[v]), f.features[v], pixels);
        m = m.valid() ? ts.add(m, term) : term;
      }
      m = ts.add(m, transfer_term(ts, ts.constant(t.voxel), f.voxel,
                                  static_cast<double>(dims.depth_bins * dims.pixels())));
      m = ts.add(m, transfer_term(ts, ts.constant(t.cells), f.cells, static_cast<double>(dims.grid().cells())));
      l_mkt = l_mkt.valid() ? ts.add(l_mkt, m) : m;
    }
    tgt_fw.push_back(std::move(f));
  }
  if (l_unc.valid()) {
    l_unc = ts.scale(l_unc, 1.0 / B);
    rep.l_unc = ts.value(l_unc).item();
    total = ts.add(total, ts.scale(l_unc, w.lambda1));
  }
  if (l_mkt.valid()) {
    l_mkt = ts.scale(l_mkt, 1.0 / B);
    rep.l_mkt = ts.value(l_mkt).item();
    total = ts.add(total, ts.scale(l_mkt, w.lambda3));
  }
  if (w.lambda4 > 0.0) {
    std::vector<DetectionTargets> truth;
    for (const SceneSample* s : source) truth.push_back(DetectionTargets::from_labels(s->labels, dims.grid(), dims.classes));
    const PooledVars ps = pool_categories(ts, dims, src_fw, truth);
    const PooledVars pt = pool_categories(ts, dims, tgt_fw, teacher.pseudo);
    std::vector<bool> valid(dims.classes);
    bool any = false;
    for (std::size_t k = 0; k < dims.classes; ++k) any |= (valid[k] = ps.counts[k] > 0 && pt.counts[k] > 0);
    if (any) {
      Var proto_s = build_prototype(ts, ps.image, ps.voxel, ps.bev, mask);
      Var proto_t = build_prototype(ts, pt.image, pt.voxel, pt.bev, mask);
      const ParameterSet* d = &disc;
      if (disc_next) {
        Tape td(disc);
        Var a = alignment_loss(td, td.constant(ts.value(proto_s)), td.constant(ts.value(proto_t)), disc, valid);
        *disc_next = nx::gradient_step(disc, clip(td.gradient(a, disc), cfg.grad_clip), -cfg.disc_lr);
        d = disc_next;
      }
      Var l_ali = alignment_loss(ts, proto_s, proto_t, *d, valid);
      rep.l_ali = ts.value(l_ali).item();
      total = ts.add(total, ts.scale(l_ali, w.lambda4));
    }
  }
  return total;
}

StepResult adapt_step(const AdaptState& state, Batch source, Batch target, const AdaptConfig& cfg) {
  cfg.validate();
  if (source.empty() || target.empty()) throw std::invalid_argument("adapt_step: both batches must be non-empty");
  const LossWeights w = cfg.effective_weights();
  const std::size_t step = state.step;

  LossReport report;
  report.step = step;
  report.u_mean = batch_uncertainty(state.student, target, cfg, step_stream(cfg, step, "mc.student"));

  TeacherTargets teacher;
  if (needs_target(cfg)) teacher = teacher_targets(state.teacher, target, cfg, step);

  Tape ts(state.student);
  ParameterSet disc_next;
  Var total = student_objective(ts, source, target, teacher, state.disc, cfg, step, &report, &disc_next);
  report.total = total_da_loss(report.l_unc, report.l_sup, report.l_mkt, report.l_ali, w);
  if (!std::isfinite(ts.value(total).item())) throw NumericError("adapt_step: non-finite total loss");

  nx::GradientSet g = clip(ts.gradient(total, state.student), cfg.grad_clip);
  StepResult r;
  r.state.student = nx::gradient_step(state.student, g, cfg.lr);
  r.state.teacher = uema_update(state.teacher, r.state.student, report.u_mean, cfg.effective_uema());
  r.state.disc = std::move(disc_next);
  r.state.step = step + 1;
  r.report = report;
  return r;
}

bool needs_target(const AdaptConfig& cfg) {
  const LossWeights w = cfg.effective_weights();
  return w.lambda1 > 0.0 || w.lambda3 > 0.0 || w.lambda4 > 0.0;
}

}  // namespace bevuda::adaptation
