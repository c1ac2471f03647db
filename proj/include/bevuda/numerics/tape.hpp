#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bevuda/numerics/parameters.hpp"
#include "bevuda/numerics/tensor.hpp"

namespace bevuda::numerics {

/// Kernel and stride of a 3D (depth, height, width) pooling window.
struct Pool3d {
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::array<std::size_t, 3> stride{1, 1, 1};
};

/// floor((extent - kernel) / stride) + 1. Throws ShapeError when the kernel
/// exceeds the extent or the stride is zero.
std::size_t pooled_extent(std::size_t extent, std::size_t kernel, std::size_t stride);

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  std::size_t index() const noexcept { return index_; }
  std::uint64_t tape_id() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != 0; }

 private:
  friend class Tape;
  Var(std::uint64_t tape, std::size_t index) : tape_(tape), index_(index) {}
  std::uint64_t tape_ = 0;
  std::size_t index_ = 0;
};

/// Eager reverse-mode tape over a fixed primitive vocabulary.
///
/// Every primitive computes its value immediately, validating shapes first
/// and rejecting non-finite results with a NumericError that names the
/// node. `gradient()` replays the recorded nodes backwards.
///
/// A Tape keeps references to the ParameterSets passed to `param()`; they
/// must outlive it.
class Tape {
 public:
  explicit Tape(const ParameterSet& params);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf for `name` in the bound parameter set (one leaf per name).
  Var param(const std::string& name);
  Var param(const ParameterSet& set, const std::string& name);

  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::uint64_t id() const noexcept { return id_; }
  const ParameterSet& bound_parameters() const noexcept { return *params_; }

  // x (N, I), weight (I, O), bias (O) -> (N, O)
  Var linear(Var x, Var weight, Var bias);
  Var linear(Var x, Var weight);
  // a (N, K), b (K, M) -> (N, M); with transpose_b, b is (M, K).
  Var matmul(Var a, Var b, bool transpose_b = false);

  Var relu(Var x);
  Var sigmoid(Var x);
  Var log(Var x);
  Var clamp(Var x, double lo, double hi);
  Var softmax(Var x, std::size_t axis);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, double factor);

  Var sum(Var x);
  Var mean(Var x);
  Var mse(Var a, Var b);
  /// Summed binary cross-entropy of probabilities `p` against targets in
  /// [0, 1]; p is clamped to [1e-12, 1 - 1e-12].
  Var binary_cross_entropy(Var p, const Tensor& target);

  // a (C, P), b (D, P) -> (C, D, P)
  Var outer(Var a, Var b);
  // x (C, D, H, W) -> (C, D', H', W'), mean over each window
  Var avg_pool3d(Var x, const Pool3d& pool);
  Var dropout(Var x, const Tensor& mask);

  Var reshape(Var x, Shape shape);
  Var transpose(Var x);  // 2-D only
  Var concat(std::span<const Var> parts, std::size_t axis);
  Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);

  /// Gradient of the scalar `loss` with respect to every entry of `wrt`.
  /// Entries not reachable from the loss get zero tensors.
  GradientSet gradient(Var loss, const ParameterSet& wrt) const;

 private:
  using Grads = std::vector<std::vector<double>>;
  using Backward = std::function<void(const Tape&, Grads&, const std::vector<double>&)>;

  struct Node {
    Tensor value;
    std::string op;
    Backward backward;
    const ParameterSet* owner = nullptr;
    std::string param_name;
  };

  Var push(std::string op, Tensor value, Backward backward);
  const Node& node(Var v) const;
  std::vector<double>& grad_of(Grads& grads, std::size_t index) const;

  std::uint64_t id_;
  const ParameterSet* params_;
  std::deque<Node> nodes_;  // stable references across push
  std::map<std::pair<const ParameterSet*, std::string>, std::size_t> leaves_;
};

/// Gradient of a scalar loss recorded on `tape` with respect to `params`.
/// Throws UsageError when `loss` was not produced by this tape.
GradientSet differentiate(const Tape& tape, Var loss, const ParameterSet& params);

/// A graph is any function that records primitives on a tape from a list of
/// input leaves and returns its output.
using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

Tensor evaluate(const GraphFn& graph, const ParameterSet& params, const std::vector<Tensor>& inputs);

/// Scalar value and reverse-mode gradient of `graph` with respect to `params`.
std::pair<double, GradientSet> value_and_gradient(const GraphFn& graph, const ParameterSet& params,
                                                  const std::vector<Tensor>& inputs);

/// Central-difference gradient estimate of a scalar graph: for each selected
/// scalar parameter, (f(x + step) - f(x - step)) / (2 step).
///
/// With `max_entries_per_tensor` > 0 only that many evenly spaced entries of
/// each tensor are probed; the rest are reported as NaN so callers can mask
/// them.
GradientSet finite_difference_gradient(const GraphFn& graph, const ParameterSet& params,
                                       const std::vector<Tensor>& inputs, double step,
                                       std::size_t max_entries_per_tensor = 0);

/// Max relative error between `analytic` and a (possibly partial, NaN-masked)
/// finite-difference estimate.
double gradient_check_error(const GradientSet& analytic, const GradientSet& numeric,
                            double floor = 1e-5);

}  // namespace bevuda::numerics
