#include "bevuda/numerics/parameters.hpp"

#include <algorithm>
#include <cmath>

#include "bevuda/errors.hpp"

namespace bevuda::numerics {

void ParameterSet::insert(const std::string& name, Tensor value) {
  if (name.empty()) {
    throw UsageError("parameter names must be non-empty");
  }
  if (!entries_.emplace(name, std::move(value)).second) {
    throw UsageError("duplicate parameter name '" + name + "'");
  }
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw UsageError("unknown parameter '" + name + "'");
  }
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw UsageError("unknown parameter '" + name + "'");
  }
  return it->second;
}

std::size_t ParameterSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
  }
  return true;
}

const Tensor& GradientSet::at(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) {
    throw UsageError("no gradient for '" + name + "'");
  }
  return it->second;
}

GradientSet GradientSet::zeros_like(const ParameterSet& params) {
  GradientSet g;
  for (const auto& [name, t] : params) {
    g.entries.emplace(name, Tensor(t.shape(), 0.0));
  }
  return g;
}

double max_relative_error(const GradientSet& a, const GradientSet& b, double floor) {
  if (a.entries.size() != b.entries.size()) {
    throw ShapeError("gradient sets have different key counts");
  }
  double worst = 0.0;
  for (const auto& [name, ta] : a.entries) {
    const Tensor& tb = b.at(name);
    if (ta.shape() != tb.shape()) {
      throw ShapeError("gradient '" + name + "' shapes differ");
    }
    for (std::size_t i = 0; i < ta.size(); ++i) {
      const double denom = std::max({std::abs(ta[i]), std::abs(tb[i]), floor});
      worst = std::max(worst, std::abs(ta[i] - tb[i]) / denom);
    }
  }
  return worst;
}

ParameterSet gradient_step(const ParameterSet& params, const GradientSet& grads,
                           double learning_rate) {
  if (grads.entries.size() != params.size()) {
    throw ShapeError("gradient key set does not match parameter key set");
  }
  ParameterSet out = params;
  for (auto& [name, t] : out) {
    const Tensor& g = grads.at(name);
    if (g.shape() != t.shape()) {
      throw ShapeError("gradient for '" + name + "' has shape " + to_string(g.shape()));
    }
    for (std::size_t i = 0; i < t.size(); ++i) t[i] -= learning_rate * g[i];
  }
  return out;
}

}  // namespace bevuda::numerics
