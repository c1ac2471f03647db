#include "bevuda/harness/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "bevuda/numerics/rng.hpp"

namespace bevuda::harness {

namespace nx = numerics;

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  nx::Rng rng(nx::mix_seed(seed, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

namespace {

std::vector<std::vector<const SceneSample*>> make_batches(std::span<const SceneSample> scenes,
                                                          const std::vector<std::size_t>& order,
                                                          std::size_t batch_size) {
  std::vector<std::vector<const SceneSample*>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    std::vector<const SceneSample*> b;
    for (std::size_t j = i; j < std::min(order.size(), i + batch_size); ++j) b.push_back(&scenes[order[j]]);
    batches.push_back(std::move(b));
  }
  return batches;
}

bool diverged(double loss) { return !std::isfinite(loss) || loss > kDivergenceLimit; }

}  // namespace

SourceResult train_source(const nx::ParameterSet& init, std::span<const SceneSample> scenes,
                          const SourceTraining& cfg, std::ostream* csv) {
  cfg.step.validate();
  if (cfg.batch_size == 0) throw std::invalid_argument("train_source: batch size must be positive");
  if (scenes.empty() && cfg.epochs > 0) throw std::invalid_argument("train_source: empty source corpus");
  for (const auto& s : scenes) {
    if (s.labels.empty()) throw std::invalid_argument("train_source: source scenes must be labeled");
  }
  geometry::check_layout(init, cfg.step.dims);
  SourceResult r{init, {}};
  if (csv) *csv << kSourceCsvHeader << '\n';
  const std::uint64_t shuffle = nx::mix_seed(cfg.step.seed, nx::stream_id("shuffle.source"));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0.0;
    const auto batches = make_batches(scenes, epoch_order(scenes.size(), shuffle, epoch), cfg.batch_size);
    for (const auto& b : batches) {
      std::pair<nx::ParameterSet, double> next;
      try {
        next = adaptation::supervised_step(r.params, b, cfg.step, step);
      } catch (const NumericError& e) {
        throw DivergenceError(std::string("source training diverged: ") + e.what(), r.params);
      }
      if (diverged(next.second) || !std::all_of(next.first.begin(), next.first.end(),
                                                [](const auto& kv) { return kv.second.all_finite(); })) {
        throw DivergenceError("source training diverged at step " + std::to_string(step), r.params);
      }
      if (csv) {
        char line[96];
        std::snprintf(line, sizeof line, "%zu,%zu,%.10g\n", epoch + 1, step, next.second);
        *csv << line;
      }
      r.params = std::move(next.first);
      sum += next.second;
      ++step;
    }
    r.epoch_loss.push_back(sum / static_cast<double>(batches.size()));
  }
  return r;
}

AdaptResult run_adaptation(const nx::ParameterSet& source_params, std::span<const SceneSample> source,
                           std::span<const SceneSample> target, const AdaptationRun& cfg, std::ostream* csv) {
  cfg.step.validate();
  if (cfg.batch_size == 0) throw std::invalid_argument("run_adaptation: batch size must be positive");
  if (source.empty() || target.empty()) throw std::invalid_argument("run_adaptation: both corpora must be non-empty");
  AdaptResult r;
  r.state = adaptation::init_adaptation(source_params, cfg.step.dims, cfg.step.seed);
  if (csv) *csv << adaptation::kLossCsvHeader << '\n';
  const std::uint64_t src_shuffle = nx::mix_seed(cfg.step.seed, nx::stream_id("shuffle.source"));
  const std::uint64_t tgt_shuffle = nx::mix_seed(cfg.step.seed, nx::stream_id("shuffle.target"));
  std::size_t src_epoch = 0;
  auto src_batches = make_batches(source, epoch_order(source.size(), src_shuffle, src_epoch), cfg.batch_size);
  std::size_t src_next = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& tb : make_batches(target, epoch_order(target.size(), tgt_shuffle, epoch), cfg.batch_size)) {
      if (src_next == src_batches.size()) {
        src_batches = make_batches(source, epoch_order(source.size(), src_shuffle, ++src_epoch), cfg.batch_size);
        src_next = 0;
      }
      adaptation::StepResult next;
      try {
        next = adaptation::adapt_step(r.state, src_batches[src_next++], tb, cfg.step);
      } catch (const NumericError& e) {
        throw DivergenceError(std::string("adaptation diverged: ") + e.what(), r.state.student);
      }
      if (diverged(next.report.total)) {
        throw DivergenceError("adaptation diverged at step " + std::to_string(r.state.step), r.state.student);
      }
      if (csv) adaptation::write_loss_row(*csv, next.report);
      r.reports.push_back(next.report);
      r.state = std::move(next.state);
    }
  }
  return r;
}

}  // namespace bevuda::harness
