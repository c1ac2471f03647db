#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bevuda/harness/metrics.hpp"

namespace bevuda::harness {

// CSV schemas, version 1. per_class_ap is a ';'-separated list.
inline constexpr const char* kMetricsCsvHeader =
    "run,repeat,seed,simplified_map,mean_translation_error,n_eval_scenes,per_class_ap";
inline constexpr const char* kDivergenceCsvHeader = "run,repeat,seed,space,js,h_proxy,degenerate";
inline constexpr const char* kSummaryCsvHeader =
    "run,repeats,map_mean,map_std,ate_mean,ate_std,js_mean,js_std,h_proxy_mean,h_proxy_std";

struct MetricsRow {
  std::string run;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  MetricsReport metrics;
};

struct DivergenceRow {
  std::string run;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  DivergenceReport divergence;
};

void write_metrics_row(std::ostream& os, const MetricsRow& row);
void write_divergence_row(std::ostream& os, const DivergenceRow& row);

/// Parses a CSV written with the matching header. Throws FormatError on a
/// wrong header or malformed line.
std::vector<MetricsRow> read_metrics_csv(std::istream& in);
std::vector<DivergenceRow> read_divergence_csv(std::istream& in);

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

Stat mean_std(const std::vector<double>& values);

struct SummaryRow {
  std::string run;
  std::size_t repeats = 0;
  Stat map;
  Stat translation_error;
  std::optional<Stat> js;
  std::optional<Stat> h_proxy;
};

/// One row per run name, sorted by name. Divergence columns are filled for
/// runs that have divergence rows.
std::vector<SummaryRow> summarize(const std::vector<MetricsRow>& metrics,
                                  const std::vector<DivergenceRow>& divergences = {});

/// Fixed-width text table, one method row per run. An empty list yields the
/// header alone.
std::string format_table(const std::vector<SummaryRow>& rows, const std::string& title = "");
std::string summary_csv(const std::vector<SummaryRow>& rows);

}  // namespace bevuda::harness
