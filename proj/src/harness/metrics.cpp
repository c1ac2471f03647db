#include "bevuda/harness/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "bevuda/adaptation/adapt.hpp"
#include "bevuda/errors.hpp"
#include "bevuda/geometry/pipeline.hpp"
#include "bevuda/numerics/rng.hpp"

namespace bevuda::harness {

namespace nx = numerics;
using nx::Tape;
using nx::Var;

double average_precision(std::span<const bool> ranked_hits, std::size_t positives) {
  if (positives == 0) return 0.0;
  const std::size_t n = ranked_hits.size();
  std::vector<double> precision(n);
  std::vector<double> recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += ranked_hits[i];
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(positives);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

namespace {

struct Candidate {
  double score;
  std::size_t scene;
  std::size_t cell;
  double d;
  double w;
};

}  // namespace

MetricsReport evaluate_detections(std::span<const DetectionSet> predictions,
                                  std::span<const std::vector<ObjectLabel>> truth, geometry::BevGrid grid) {
  if (predictions.empty()) throw std::invalid_argument("evaluate: empty evaluation set");
  if (predictions.size() != truth.size()) throw ShapeError("evaluate: one label set per scene required");
  const std::size_t n = predictions[0].classes();
  MetricsReport report;
  report.n_eval_scenes = predictions.size();
  report.per_class_ap.assign(n, 0.0);

  double err_sum = 0.0;
  std::size_t err_count = 0;
  double ap_sum = 0.0;
  std::size_t classes_with_truth = 0;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<Candidate> cands;
    for (std::size_t s = 0; s < predictions.size(); ++s) {
      const DetectionSet& p = predictions[s];
      if (p.cells() != grid.cells() || p.classes() != n) throw ShapeError("evaluate: prediction grid mismatch");
      for (std::size_t c = 0; c < p.cells(); ++c) {
        if (!(p.occupancy[c] > 0.0)) continue;
        const double* row = p.class_scores.data() + c * n;
        if (static_cast<std::size_t>(std::max_element(row, row + n) - row) != k) continue;
        cands.push_back({p.occupancy[c], s, c,
                         static_cast<double>(c / grid.width_cells) + 0.5 + p.offsets[2 * c],
                         static_cast<double>(c % grid.width_cells) + 0.5 + p.offsets[2 * c + 1]});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    std::size_t positives = 0;
    std::vector<std::vector<bool>> used(truth.size());
    for (std::size_t s = 0; s < truth.size(); ++s) {
      used[s].assign(truth[s].size(), false);
      for (const ObjectLabel& l : truth[s]) positives += l.category == k;
    }
    std::vector<bool> hits;
    hits.reserve(cands.size());
    for (const Candidate& c : cands) {
      double best = kMatchRadius;
      std::ptrdiff_t best_j = -1;
      const auto& objs = truth[c.scene];
      for (std::size_t j = 0; j < objs.size(); ++j) {
        if (objs[j].category != k || used[c.scene][j]) continue;
        const double td = static_cast<double>(objs[j].cell_d) + 0.5 + objs[j].offset_d;
        const double tw = static_cast<double>(objs[j].cell_w) + 0.5 + objs[j].offset_w;
        const double dist = std::hypot(c.d - td, c.w - tw);
        if (dist <= best) {
          best = dist;
          best_j = static_cast<std::ptrdiff_t>(j);
        }
      }
      if (best_j >= 0) {
        used[c.scene][static_cast<std::size_t>(best_j)] = true;
        if (c.score >= kTranslationScore) {
          err_sum += best;
          ++err_count;
        }
      }
      hits.push_back(best_j >= 0);
    }
    // std::vector<bool> is not contiguous.
    std::unique_ptr<bool[]> ranked(new bool[hits.size() + 1]);
    std::copy(hits.begin(), hits.end(), ranked.get());
    report.per_class_ap[k] = average_precision(std::span<const bool>(ranked.get(), hits.size()), positives);
    if (positives > 0) {
      ap_sum += report.per_class_ap[k];
      ++classes_with_truth;
    }
  }
  report.simplified_map = classes_with_truth ? ap_sum / static_cast<double>(classes_with_truth) : 0.0;
  report.mean_translation_error = err_count ? err_sum / static_cast<double>(err_count) : 1.0;
  return report;
}

MetricsReport evaluate(const ParameterSet& params, const geometry::ModelDims& dims,
                       std::span<const synth::SceneSample> scenes, std::span<const std::vector<ObjectLabel>> truth) {
  if (scenes.empty()) throw std::invalid_argument("evaluate: empty evaluation corpus");
  std::vector<DetectionSet> preds;
  preds.reserve(scenes.size());
  for (const auto& s : scenes) preds.push_back(geometry::predict(params, dims, s.images, s.cams));
  return evaluate_detections(preds, truth, dims.grid());
}

// ---------------------------------------------------------------------------

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw std::invalid_argument("js_divergence: supports differ in size");
  double sp = 0.0;
  double sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0) || !(q[i] >= 0.0)) throw std::invalid_argument("js_divergence: negative probability");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9) {
    throw std::invalid_argument("js_divergence: inputs must be normalized");
  }
  double kl_p = 0.0;
  double kl_q = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) kl_p += p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) kl_q += q[i] * std::log(q[i] / m);
  }
  return 0.5 * kl_p + 0.5 * kl_q;
}

std::string to_string(FeatureSpace s) {
  switch (s) {
    case FeatureSpace::image: return "image";
    case FeatureSpace::voxel: return "voxel";
    case FeatureSpace::bev: return "bev";
    case FeatureSpace::prototype: return "prototype";
  }
  return "bev";
}

FeatureSpace parse_feature_space(const std::string& name) {
  if (name == "image") return FeatureSpace::image;
  if (name == "voxel") return FeatureSpace::voxel;
  if (name == "bev") return FeatureSpace::bev;
  if (name == "prototype") return FeatureSpace::prototype;
  throw ConfigError("unknown feature space '" + name + "'");
}

double histogram_js(const Tensor& source, const Tensor& target, bool* degenerate) {
  if (source.rank() != 2 || target.rank() != 2 || source.extent(1) != target.extent(1)) {
    throw ShapeError("histogram_js: feature rows must share a channel count");
  }
  const std::size_t C = source.extent(1);
  const std::size_t ns = source.extent(0);
  const std::size_t nt = target.extent(0);
  double total = 0.0;
  std::size_t constant = 0;
  for (std::size_t c = 0; c < C; ++c) {
    double lo = source[c];
    double hi = source[c];
    for (std::size_t i = 0; i < ns; ++i) lo = std::min(lo, source[i * C + c]), hi = std::max(hi, source[i * C + c]);
    for (std::size_t i = 0; i < nt; ++i) lo = std::min(lo, target[i * C + c]), hi = std::max(hi, target[i * C + c]);
    if (!(hi - lo > 1e-12)) {
      ++constant;
      continue;
    }
    auto hist = [&](const Tensor& x, std::size_t rows) {
      std::vector<double> h(kHistogramBins, 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        const double t = (x[i * C + c] - lo) / (hi - lo) * static_cast<double>(kHistogramBins);
        const auto b = std::min(static_cast<std::size_t>(std::max(t, 0.0)), kHistogramBins - 1);
        h[b] += 1.0;
      }
      for (double& v : h) v /= static_cast<double>(rows);
      return h;
    };
    total += js_divergence(hist(source, ns), hist(target, nt));
  }
  if (degenerate) *degenerate = constant == C;
  return total / static_cast<double>(C);
}

double probe_h_divergence(const Tensor& source, const Tensor& target, std::uint64_t seed) {
  if (source.rank() != 2 || target.rank() != 2 || source.extent(1) != target.extent(1)) {
    throw ShapeError("probe_h_divergence: feature rows must share a channel count");
  }
  constexpr std::size_t kMaxRows = 2000;
  constexpr std::size_t kHidden = 16;
  const std::size_t C = source.extent(1);
  const std::size_t n = std::min({source.extent(0), target.extent(0), kMaxRows});
  if (n < 4) throw std::invalid_argument("probe_h_divergence: need at least four rows per domain");
  nx::Rng rng(seed);
  // One permutation over the common row count, shared by both domains.
  const std::size_t pool = std::min(source.extent(0), target.extent(0));
  std::vector<std::size_t> perm(pool);
  std::iota(perm.begin(), perm.end(), 0);
  nx::Rng shuffle = rng.stream("permutation");
  for (std::size_t i = pool; i > 1; --i) std::swap(perm[i - 1], perm[shuffle.below(i)]);
  perm.resize(n);
  const std::size_t half = n / 2;
  const std::size_t test = n - half;

  std::vector<double> mean(C, 0.0);
  std::vector<double> sd(C, 0.0);
  for (std::size_t i = 0; i < half; ++i)
    for (std::size_t c = 0; c < C; ++c) mean[c] += source[perm[i] * C + c] + target[perm[i] * C + c];
  for (double& m : mean) m /= static_cast<double>(2 * half);
  for (std::size_t i = 0; i < half; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const double a = source[perm[i] * C + c] - mean[c];
      const double b = target[perm[i] * C + c] - mean[c];
      sd[c] += a * a + b * b;
    }
  for (double& s : sd) s = std::sqrt(s / static_cast<double>(2 * half)) + 1e-8;

  auto rows = [&](const Tensor& x, std::size_t begin, std::size_t count) {
    Tensor out({count, C}, 0.0);
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t c = 0; c < C; ++c) out[i * C + c] = (x[perm[begin + i] * C + c] - mean[c]) / sd[c];
    return out;
  };
  Tensor train({2 * half, C}, 0.0);
  {
    const Tensor s = rows(source, 0, half);
    const Tensor t = rows(target, 0, half);
    std::copy(s.values().begin(), s.values().end(), train.data());
    std::copy(t.values().begin(), t.values().end(), train.data() + half * C);
  }
  Tensor labels({2 * half, 1}, 0.0);
  for (std::size_t i = 0; i < half; ++i) labels[i] = 1.0;

  ParameterSet probe;
  nx::Rng init = rng.stream("probe");
  Tensor w1({C, kHidden}, 0.0);
  for (double& v : w1.values()) v = init.normal(0.0, std::sqrt(2.0 / static_cast<double>(C)));
  Tensor w2({kHidden, 1}, 0.0);
  for (double& v : w2.values()) v = init.normal(0.0, std::sqrt(1.0 / kHidden));
  probe.insert("l1.w", std::move(w1));
  probe.insert("l1.b", Tensor({kHidden}, 0.0));
  probe.insert("l2.w", std::move(w2));
  probe.insert("l2.b", Tensor({1}, 0.0));

  auto forward = [](Tape& tape, Var x) {
    Var h = tape.relu(tape.linear(x, tape.param("l1.w"), tape.param("l1.b")));
    return tape.sigmoid(tape.linear(h, tape.param("l2.w"), tape.param("l2.b")));
  };
  constexpr double kLr = 0.5;
  for (std::size_t step = 0; step < kProbeSteps; ++step) {
    Tape tape(probe);
    Var p = forward(tape, tape.constant(train));
    Var loss = tape.scale(tape.binary_cross_entropy(p, labels), 1.0 / static_cast<double>(2 * half));
    probe = nx::gradient_step(probe, tape.gradient(loss, probe), kLr);
  }
  auto positive_rate = [&](const Tensor& x) {
    Tape tape(probe);
    const Tensor& p = tape.value(forward(tape, tape.constant(x)));
    std::size_t pos = 0;
    for (double v : p.values()) pos += v > 0.5;
    return static_cast<double>(pos) / static_cast<double>(p.size());
  };
  const double h = 2.0 * std::abs(positive_rate(rows(source, half, test)) - positive_rate(rows(target, half, test)));
  return std::clamp(h, 0.0, 2.0);
}

Tensor collect_features(const ParameterSet& params, const geometry::ModelDims& dims,
                        std::span<const synth::SceneSample> scenes, FeatureSpace space,
                        std::span<const std::vector<ObjectLabel>> labels) {
  if (scenes.empty()) throw std::invalid_argument("collect_features: no scenes");
  if (space == FeatureSpace::prototype && labels.size() != scenes.size()) {
    throw std::invalid_argument("collect_features: the prototype space needs labels for every scene");
  }
  std::vector<double> values;
  std::size_t width = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& s = scenes[i];
    Tape tape(params);
    geometry::ForwardVars f = geometry::forward(tape, dims, s.images, s.cams);
    auto append_rows = [&](const Tensor& rows) {
      width = rows.extent(1);
      values.insert(values.end(), rows.values().begin(), rows.values().end());
    };
    switch (space) {
      case FeatureSpace::image:
        for (Var v : f.features) append_rows(tape.value(v));
        break;
      case FeatureSpace::voxel: {
        const Tensor& vox = tape.value(f.voxel);
        const std::size_t C = vox.extent(0);
        const std::size_t P = vox.size() / C;
        Tensor rows({P, C}, 0.0);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t p = 0; p < P; ++p) rows[p * C + c] = vox[c * P + p];
        append_rows(rows);
        break;
      }
      case FeatureSpace::bev:
        append_rows(tape.value(f.cells));
        break;
      case FeatureSpace::prototype: {
        const auto targets = geometry::DetectionTargets::from_labels(labels[i], dims.grid(), dims.classes);
        const geometry::ForwardVars fw[] = {f};
        const geometry::DetectionTargets tg[] = {targets};
        const adaptation::PooledVars pv = adaptation::pool_categories(tape, dims, fw, tg);
        const Tensor& proto = tape.value(adaptation::build_prototype(tape, pv.image, pv.voxel, pv.bev, {}));
        width = proto.extent(1);
        for (std::size_t k = 0; k < dims.classes; ++k) {
          if (pv.counts[k] == 0) continue;
          values.insert(values.end(), proto.data() + k * width, proto.data() + (k + 1) * width);
        }
        break;
      }
    }
  }
  if (values.empty()) throw std::invalid_argument("collect_features: no feature rows collected");
  const std::size_t count = values.size() / width;
  return Tensor({count, width}, std::move(values));
}

DivergenceReport divergence_report(const ParameterSet& params, const geometry::ModelDims& dims,
                                   std::span<const synth::SceneSample> source,
                                   std::span<const synth::SceneSample> target, FeatureSpace space, std::uint64_t seed,
                                   std::span<const std::vector<ObjectLabel>> source_labels,
                                   std::span<const std::vector<ObjectLabel>> target_labels) {
  if (source.empty() || target.empty()) throw std::invalid_argument("divergence_report: both corpora must be non-empty");
  const Tensor fs = collect_features(params, dims, source, space, source_labels);
  const Tensor ft = collect_features(params, dims, target, space, target_labels);
  DivergenceReport r;
  r.space = space;
  r.js = histogram_js(fs, ft, &r.degenerate);
  r.h_proxy = probe_h_divergence(fs, ft, seed);
  return r;
}

}  // namespace bevuda::harness
