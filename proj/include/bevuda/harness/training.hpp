#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "bevuda/adaptation/adapt.hpp"
#include "bevuda/errors.hpp"

namespace bevuda::harness {

using adaptation::AdaptConfig;
using adaptation::AdaptState;
using adaptation::LossReport;
using synth::SceneSample;

/// Training left the valid range (non-finite loss or loss above
/// kDivergenceLimit). Carries the last parameters that were still good.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, numerics::ParameterSet last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const numerics::ParameterSet& last_good() const noexcept { return last_good_; }

 private:
  numerics::ParameterSet last_good_;
};

inline constexpr double kDivergenceLimit = 1e6;

struct SourceTraining {
  /// Step settings (lr, depth weight, dropout, clipping, seed).
  AdaptConfig step;
  std::size_t epochs = 8;
  std::size_t batch_size = 4;
};

inline constexpr const char* kSourceCsvHeader = "epoch,step,l_sup";

struct SourceResult {
  numerics::ParameterSet params;
  std::vector<double> epoch_loss;  // mean L_SUP per epoch
};

/// Minimizes L_SUP over shuffled mini-batches, starting from `init`. Writes
/// one CSV row per step when `csv` is given.
SourceResult train_source(const numerics::ParameterSet& init, std::span<const SceneSample> scenes,
                          const SourceTraining& cfg, std::ostream* csv = nullptr);

struct AdaptationRun {
  AdaptConfig step;
  std::size_t epochs = 4;
  std::size_t batch_size = 4;
};

struct AdaptResult {
  AdaptState state;
  std::vector<LossReport> reports;
};

/// Epochs of adapt_step over shuffled target batches; source batches cycle
/// through their own shuffled order. Teacher and student start from
/// `source_params`.
AdaptResult run_adaptation(const numerics::ParameterSet& source_params, std::span<const SceneSample> source,
                           std::span<const SceneSample> target, const AdaptationRun& cfg,
                           std::ostream* csv = nullptr);

/// Seeded shuffle of 0..n-1 for one epoch of one stream.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

}  // namespace bevuda::harness
