#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bevuda/numerics/tensor.hpp"

namespace bevuda::numerics {

/// Named, ordered collection of parameter tensors.
///
/// Names are hierarchical ("encoder.patch.w"); iteration order is the
/// lexicographic name order, which is also the checkpoint order.
class ParameterSet {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  using Map = std::map<std::string, Tensor>;

  void insert(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const noexcept;
  std::vector<std::string> names() const;

  Map::const_iterator begin() const noexcept { return entries_.begin(); }
  Map::const_iterator end() const noexcept { return entries_.end(); }
  Map::iterator begin() noexcept { return entries_.begin(); }
  Map::iterator end() noexcept { return entries_.end(); }

  /// True when both sets have the same names with the same shapes.
  bool same_layout(const ParameterSet& other) const;

  std::uint32_t version() const noexcept { return version_; }
  void set_version(std::uint32_t v) noexcept { version_ = v; }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  Map entries_;
  std::uint32_t version_ = kFormatVersion;
};

/// Gradient of a scalar with respect to every entry of a ParameterSet.
struct GradientSet {
  std::map<std::string, Tensor> entries;

  const Tensor& at(const std::string& name) const;
  /// Zero tensors matching every entry of `params`.
  static GradientSet zeros_like(const ParameterSet& params);
};

/// Largest entry-wise |a - b| / max(|a|, |b|, floor) across two gradient sets
/// with identical key sets.
double max_relative_error(const GradientSet& a, const GradientSet& b, double floor = 1e-5);

/// params - learning_rate * grads, entry-wise. Keys must match.
ParameterSet gradient_step(const ParameterSet& params, const GradientSet& grads,
                           double learning_rate);

}  // namespace bevuda::numerics
