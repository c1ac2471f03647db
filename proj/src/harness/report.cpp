#include "bevuda/harness/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "bevuda/errors.hpp"

namespace bevuda::harness {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

void check_name(const std::string& run) {
  if (run.empty() || run.find_first_of(",\n\r") != std::string::npos) {
    throw std::invalid_argument("run name must be non-empty and free of commas and newlines: '" + run + "'");
  }
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double to_double(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("line " + std::to_string(line) + ": bad number '" + s + "'");
  }
}

std::uint64_t to_u64(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size() || s.front() == '-') throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("line " + std::to_string(line) + ": bad integer '" + s + "'");
  }
}

// Rows of a CSV with the given header, each split into exactly `columns` fields.
std::vector<std::vector<std::string>> read_rows(std::istream& in, const char* header) {
  std::string line;
  if (!std::getline(in, line) || line != header) throw FormatError("expected CSV header '" + std::string(header) + "'");
  const std::size_t columns = split(header, ',').size();
  std::vector<std::vector<std::string>> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != columns) {
      throw FormatError("line " + std::to_string(n) + ": expected " + std::to_string(columns) + " fields, got " +
                        std::to_string(fields.size()));
    }
    fields.push_back(std::to_string(n));
    rows.push_back(std::move(fields));
  }
  return rows;
}

std::string cell(const std::optional<Stat>& s) {
  if (!s) return "-";
  return fmt("%.4f", s->mean) + " +- " + fmt("%.4f", s->std);
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace

void write_metrics_row(std::ostream& os, const MetricsRow& row) {
  check_name(row.run);
  const MetricsReport& m = row.metrics;
  std::string ap;
  for (std::size_t k = 0; k < m.per_class_ap.size(); ++k) {
    if (k) ap += ';';
    ap += fmt("%.10g", m.per_class_ap[k]);
  }
  os << row.run << ',' << row.repeat << ',' << row.seed << ',' << fmt("%.10g", m.simplified_map) << ','
     << fmt("%.10g", m.mean_translation_error) << ',' << m.n_eval_scenes << ',' << ap << '\n';
}

void write_divergence_row(std::ostream& os, const DivergenceRow& row) {
  check_name(row.run);
  const DivergenceReport& d = row.divergence;
  os << row.run << ',' << row.repeat << ',' << row.seed << ',' << to_string(d.space) << ',' << fmt("%.10g", d.js)
     << ',' << fmt("%.10g", d.h_proxy) << ',' << (d.degenerate ? 1 : 0) << '\n';
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::vector<MetricsRow> out;
  for (const auto& f : read_rows(in, kMetricsCsvHeader)) {
    const std::size_t n = std::stoul(f.back());
    MetricsRow r;
    r.run = f[0];
    r.repeat = to_u64(f[1], n);
    r.seed = to_u64(f[2], n);
    r.metrics.simplified_map = to_double(f[3], n);
    r.metrics.mean_translation_error = to_double(f[4], n);
    r.metrics.n_eval_scenes = to_u64(f[5], n);
    if (!f[6].empty())
      for (const auto& ap : split(f[6], ';')) r.metrics.per_class_ap.push_back(to_double(ap, n));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<DivergenceRow> read_divergence_csv(std::istream& in) {
  std::vector<DivergenceRow> out;
  for (const auto& f : read_rows(in, kDivergenceCsvHeader)) {
    const std::size_t n = std::stoul(f.back());
    DivergenceRow r;
    r.run = f[0];
    r.repeat = to_u64(f[1], n);
    r.seed = to_u64(f[2], n);
    try {
      r.divergence.space = parse_feature_space(f[3]);
    } catch (const std::exception& e) {
      throw FormatError("line " + std::to_string(n) + ": " + e.what());
    }
    r.divergence.js = to_double(f[4], n);
    r.divergence.h_proxy = to_double(f[5], n);
    if (f[6] != "0" && f[6] != "1") throw FormatError("line " + std::to_string(n) + ": degenerate must be 0 or 1");
    r.divergence.degenerate = f[6] == "1";
    out.push_back(std::move(r));
  }
  return out;
}

Stat mean_std(const std::vector<double>& values) {
  Stat s;
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::vector<SummaryRow> summarize(const std::vector<MetricsRow>& metrics, const std::vector<DivergenceRow>& divergences) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_run;
  for (const auto& r : metrics) {
    auto& [map, ate] = by_run[r.run];
    map.push_back(r.metrics.simplified_map);
    ate.push_back(r.metrics.mean_translation_error);
  }
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> div_by_run;
  for (const auto& r : divergences) {
    auto& [js, h] = div_by_run[r.run];
    js.push_back(r.divergence.js);
    h.push_back(r.divergence.h_proxy);
  }
  std::vector<SummaryRow> out;
  for (const auto& [run, v] : by_run) {
    SummaryRow row;
    row.run = run;
    row.repeats = v.first.size();
    row.map = mean_std(v.first);
    row.translation_error = mean_std(v.second);
    if (auto it = div_by_run.find(run); it != div_by_run.end()) {
      row.js = mean_std(it->second.first);
      row.h_proxy = mean_std(it->second.second);
    }
    out.push_back(std::move(row));
  }
  return out;
}

std::string format_table(const std::vector<SummaryRow>& rows, const std::string& title) {
  const std::vector<std::string> header = {"Method", "n", "mAP", "mATE", "JS (nats)", "d_H proxy"};
  std::vector<std::vector<std::string>> body;
  for (const auto& r : rows) {
    body.push_back({r.run, std::to_string(r.repeats), cell(r.map), cell(r.translation_error), cell(r.js),
                    cell(r.h_proxy)});
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& b : body) width[c] = std::max(width[c], b[c].size());
  }
  auto line = [&](const std::vector<std::string>& cols) {
    std::string s;
    for (std::size_t c = 0; c < cols.size(); ++c) s += (c ? " | " : "") + pad(cols[c], width[c]);
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s + '\n';
  };
  std::string out;
  if (!title.empty()) out += title + '\n';
  out += line(header);
  std::size_t total = 3 * (header.size() - 1);
  for (std::size_t w : width) total += w;
  out += std::string(total, '-') + '\n';
  for (const auto& b : body) out += line(b);
  return out;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << kSummaryCsvHeader << '\n';
  auto pair = [](const std::optional<Stat>& s) {
    return s ? fmt("%.10g", s->mean) + ',' + fmt("%.10g", s->std) : std::string(",");
  };
  for (const auto& r : rows) {
    os << r.run << ',' << r.repeats << ',' << pair(r.map) << ',' << pair(r.translation_error) << ',' << pair(r.js)
       << ',' << pair(r.h_proxy) << '\n';
  }
  return os.str();
}

}  // namespace bevuda::harness
