#include "bevuda/adaptation/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bevuda/errors.hpp"

namespace bevuda::adaptation {

using numerics::Shape;

std::string to_string(Space s) {
  switch (s) {
    case Space::image: return "image";
    case Space::voxel: return "voxel";
    case Space::bev: return "bev";
  }
  return "image";
}

bool SpaceMask::enabled(Space s) const {
  switch (s) {
    case Space::image: return image;
    case Space::voxel: return voxel;
    case Space::bev: return bev;
  }
  return false;
}

void LossWeights::validate() const {
  for (double l : {lambda1, lambda2, lambda3, lambda4}) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("loss weights must be finite and non-negative");
  }
}

void UemaConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("UEMA alpha must lie in (0, 1)");
  if (!(sigma >= 0.0)) throw std::invalid_argument("UEMA sigma must be non-negative");
  if (alpha + 0.5 * sigma > 1.0) throw std::invalid_argument("UEMA requires alpha + 0.5 sigma <= 1");
}

// ---------------------------------------------------------------------------

namespace {

Var embed(Tape& tape, Var x, Space s) {
  const std::string base = "embed." + to_string(s);
  Var h = tape.relu(tape.linear(x, tape.param(base + ".l1.w"), tape.param(base + ".l1.b")));
  return tape.linear(h, tape.param(base + ".l2.w"), tape.param(base + ".l2.b"));
}

Tensor transpose2(const Tensor& t) {
  const std::size_t r = t.extent(0);
  const std::size_t c = t.extent(1);
  Tensor out({c, r}, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  return out;
}

}  // namespace

Var build_prototype(Tape& tape, Var image, Var voxel, Var bev, const SpaceMask& mask, Var* concat_out) {
  const Var inputs[] = {image, voxel, bev};
  const std::size_t n = tape.shape(image).at(0);
  for (Var v : inputs) {
    if (tape.shape(v).size() != 2 || tape.shape(v)[0] != n) {
      throw ShapeError("build_prototype: every space needs the same category count, got " +
                       numerics::to_string(tape.shape(v)) + " vs " + std::to_string(n) + " categories");
    }
  }
  std::vector<Var> blocks;
  for (Space s : kSpaces) {
    if (mask.enabled(s)) {
      blocks.push_back(embed(tape, inputs[static_cast<int>(s)], s));
    } else {
      const std::size_t width = tape.bound_parameters().at("embed." + to_string(s) + ".l2.b").size();
      blocks.push_back(tape.constant(Tensor({n, width}, 0.0)));
    }
  }
  Var cat = tape.concat(blocks, 1);
  if (concat_out) *concat_out = cat;
  return tape.linear(cat, tape.param("embed.shared.w"), tape.param("embed.shared.b"));
}

Prototype build_prototype(const CategoryFeatures& feats, const ParameterSet& params, const SpaceMask& mask) {
  const Tensor* parts[] = {&feats.image, &feats.voxel, &feats.bev};
  for (const Tensor* t : parts) {
    if (t->rank() != 2) throw ShapeError("build_prototype: category features must be (C_I, n)");
    if (t->extent(1) != feats.image.extent(1)) throw ShapeError("build_prototype: category count mismatch");
  }
  Tape tape(params);
  Var cat;
  Var p = build_prototype(tape, tape.constant(transpose2(feats.image)), tape.constant(transpose2(feats.voxel)),
                          tape.constant(transpose2(feats.bev)), mask, &cat);
  return Prototype{transpose2(tape.value(cat)), transpose2(tape.value(p))};
}

// ---------------------------------------------------------------------------

Var discriminate(Tape& tape, const ParameterSet& disc, Var rows) {
  Var h = tape.relu(tape.linear(rows, tape.param(disc, "disc.l1.w"), tape.param(disc, "disc.l1.b")));
  return tape.sigmoid(tape.linear(h, tape.param(disc, "disc.l2.w"), tape.param(disc, "disc.l2.b")));
}

Var alignment_loss(Tape& tape, Var proto_s, Var proto_t, const ParameterSet& disc, const std::vector<bool>& valid) {
  const Shape& ss = tape.shape(proto_s);
  if (ss != tape.shape(proto_t)) throw ShapeError("alignment_loss: prototypes differ in shape");
  const std::size_t n = ss.at(0);
  if (!valid.empty() && valid.size() != n) throw ShapeError("alignment_loss: validity mask length mismatch");
  std::size_t count = 0;
  Tensor weight({n, 1}, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    if (valid.empty() || valid[k]) {
      weight[k] = 1.0;
      ++count;
    }
  }
  if (count == 0) return tape.constant(Tensor::scalar(0.0));
  for (double& w : weight.values()) w /= static_cast<double>(count);
  Var ds = tape.clamp(discriminate(tape, disc, proto_s), kAlignmentEps, 1.0 - kAlignmentEps);
  Var dt = tape.clamp(discriminate(tape, disc, proto_t), kAlignmentEps, 1.0 - kAlignmentEps);
  Var terms = tape.add(tape.log(ds), tape.log(tape.sub(tape.constant(Tensor({n, 1}, 1.0)), dt)));
  return tape.sum(tape.mul(terms, tape.constant(std::move(weight))));
}

double alignment_loss(const Tensor& proto_s, const Tensor& proto_t, const ParameterSet& disc,
                      const std::vector<bool>& valid) {
  if (proto_s.rank() != 2 || proto_s.shape() != proto_t.shape()) {
    throw ShapeError("alignment_loss: prototypes must share a (256, n) shape");
  }
  Tape tape(disc);
  return tape.value(alignment_loss(tape, tape.constant(transpose2(proto_s)), tape.constant(transpose2(proto_t)),
                                   disc, valid))
      .item();
}

double alignment_from_probabilities(std::span<const double> d_source, std::span<const double> d_target) {
  if (d_source.size() != d_target.size() || d_source.empty()) {
    throw std::invalid_argument("alignment_from_probabilities: need matching non-empty inputs");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < d_source.size(); ++k) {
    const double s = std::clamp(d_source[k], kAlignmentEps, 1.0 - kAlignmentEps);
    const double t = std::clamp(d_target[k], kAlignmentEps, 1.0 - kAlignmentEps);
    total += std::log(s) + std::log(1.0 - t);
  }
  return total / static_cast<double>(d_source.size());
}

// ---------------------------------------------------------------------------

Var transfer_term(Tape& tape, Var teacher, Var student, double positions) {
  if (tape.shape(teacher) != tape.shape(student)) {
    throw ShapeError("transfer_loss: teacher " + numerics::to_string(tape.shape(teacher)) + " and student " +
                     numerics::to_string(tape.shape(student)) + " features differ");
  }
  if (!(positions > 0.0)) throw std::invalid_argument("transfer_loss: position count must be positive");
  Var d = tape.sub(student, teacher);
  return tape.scale(tape.sum(tape.mul(d, d)), 1.0 / positions);
}

double transfer_loss(std::span<const Tensor> teacher_feats, std::span<const Tensor> student_feats) {
  if (teacher_feats.size() != student_feats.size()) throw ShapeError("transfer_loss: space counts differ");
  double total = 0.0;
  for (std::size_t l = 0; l < teacher_feats.size(); ++l) {
    const Tensor& t = teacher_feats[l];
    const Tensor& s = student_feats[l];
    if (t.shape() != s.shape()) {
      throw ShapeError("transfer_loss: space " + std::to_string(l) + " shapes " + numerics::to_string(t.shape()) +
                       " and " + numerics::to_string(s.shape()) + " differ");
    }
    const double positions = t.rank() > 1 ? static_cast<double>(t.size() / t.extent(0)) : 1.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) sq += (s[i] - t[i]) * (s[i] - t[i]);
    total += sq / positions;
  }
  return total;
}

// ---------------------------------------------------------------------------

double uema_blend(double teacher, double student, double u_mean, const UemaConfig& cfg) {
  const double w = 1.0 - cfg.alpha - cfg.sigma * u_mean;
  const double v = teacher + w * (student - teacher);
  return std::clamp(v, std::min(teacher, student), std::max(teacher, student));
}

ParameterSet uema_update(const ParameterSet& teacher, const ParameterSet& student, double u_mean,
                         const UemaConfig& cfg) {
  cfg.validate();
  if (!(u_mean >= 0.0 && u_mean <= 0.5)) {
    throw std::invalid_argument("uema_update: uncertainty mean " + std::to_string(u_mean) + " outside [0, 0.5]");
  }
  if (!teacher.same_layout(student)) throw ShapeError("uema_update: teacher and student layouts differ");
  ParameterSet out = teacher;
  for (auto& [name, t] : out) {
    const Tensor& s = student.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = uema_blend(t[i], s[i], u_mean, cfg);
  }
  return out;
}

DetectionTargets pseudo_labels(const DetectionSet& pred, geometry::BevGrid grid, double threshold) {
  const std::size_t N = pred.cells();
  if (grid.cells() != N) throw ShapeError("pseudo_labels: grid size does not match the prediction");
  const std::size_t n = pred.classes();
  DetectionTargets t = DetectionTargets::empty(grid, n);
  for (std::size_t c = 0; c < N; ++c) {
    if (!(pred.occupancy[c] >= threshold)) continue;
    t.occupancy[c] = 1.0;
    t.offsets[2 * c] = pred.offsets[2 * c];
    t.offsets[2 * c + 1] = pred.offsets[2 * c + 1];
    const double* row = pred.class_scores.data() + c * n;
    t.category[c] = static_cast<int>(std::max_element(row, row + n) - row);
  }
  return t;
}

double total_da_loss(double l_unc, double l_sup, double l_mkt, double l_ali, const LossWeights& w) {
  for (double v : {l_unc, l_sup, l_mkt, l_ali}) {
    if (!std::isfinite(v)) throw NumericError("total_da_loss: non-finite component");
  }
  return w.lambda1 * l_unc + w.lambda2 * l_sup + w.lambda3 * l_mkt + w.lambda4 * l_ali;
}

}  // namespace bevuda::adaptation
