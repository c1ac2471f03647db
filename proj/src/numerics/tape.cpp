#include "bevuda/numerics/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "bevuda/errors.hpp"

namespace bevuda::numerics {

namespace {

std::atomic<std::uint64_t> g_next_tape_id{1};

constexpr double kProbFloor = 1e-12;

void require(bool ok, const std::string& op, const std::string& what) {
  if (!ok) throw ShapeError(op + ": " + what);
}

void require_rank(const Tensor& t, std::size_t rank, const std::string& op) {
  require(t.rank() == rank, op,
          "expected rank " + std::to_string(rank) + ", got shape " + to_string(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const std::string& op) {
  require(a.shape() == b.shape(), op, to_string(a.shape()) + " vs " + to_string(b.shape()));
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

std::size_t pooled_extent(std::size_t extent, std::size_t kernel, std::size_t stride) {
  if (stride == 0) throw ShapeError("pool stride must be >= 1");
  if (kernel == 0) throw ShapeError("pool kernel must be >= 1");
  if (kernel > extent) {
    throw ShapeError("pool kernel " + std::to_string(kernel) + " exceeds input extent " +
                     std::to_string(extent));
  }
  return (extent - kernel) / stride + 1;
}

Tape::Tape(const ParameterSet& params) : id_(g_next_tape_id++), params_(&params) {}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_id() != id_ || v.index() >= nodes_.size()) {
    throw UsageError("variable does not belong to this tape");
  }
  return nodes_[v.index()];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Var Tape::push(std::string op, Tensor value, Backward backward) {
  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by node #" + std::to_string(nodes_.size()) +
                       " (" + op + ")");
  }
  nodes_.push_back(Node{std::move(value), std::move(op), std::move(backward), nullptr, {}});
  return Var(id_, nodes_.size() - 1);
}

std::vector<double>& Tape::grad_of(Grads& grads, std::size_t index) const {
  auto& g = grads[index];
  if (g.empty()) g.assign(nodes_[index].value.size(), 0.0);
  return g;
}

Var Tape::constant(Tensor value) { return push("constant", std::move(value), nullptr); }

Var Tape::param(const std::string& name) { return param(*params_, name); }

Var Tape::param(const ParameterSet& set, const std::string& name) {
  auto key = std::make_pair(&set, name);
  if (auto it = leaves_.find(key); it != leaves_.end()) return Var(id_, it->second);
  Var v = push("param:" + name, set.at(name), nullptr);
  nodes_.back().owner = &set;
  nodes_.back().param_name = name;
  leaves_.emplace(std::move(key), v.index());
  return v;
}

Var Tape::linear(Var x, Var weight, Var bias) {
  const Tensor& b = value(bias);
  const Tensor& w = value(weight);
  require(b.rank() == 1 && w.rank() == 2 && b.extent(0) == w.extent(1), "linear",
          "bias " + to_string(b.shape()) + " does not match weight " + to_string(w.shape()));
  Var y = linear(x, weight);
  Tensor out = value(y);
  const std::size_t n = out.extent(0);
  const std::size_t o = out.extent(1);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < o; ++c) out[r * o + c] += b[c];
  const std::size_t yi = y.index();
  const std::size_t bi = bias.index();
  return push("linear", std::move(out), [yi, bi, n, o](const Tape& t, Grads& gs, const std::vector<double>& g) {
    auto& gy = t.grad_of(gs, yi);
    auto& gb = t.grad_of(gs, bi);
    for (std::size_t k = 0; k < g.size(); ++k) gy[k] += g[k];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < o; ++c) gb[c] += g[r * o + c];
  });
}

Var Tape::linear(Var x, Var weight) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(weight);
  require_rank(xv, 2, "linear");
  require_rank(wv, 2, "linear");
  require(xv.extent(1) == wv.extent(0), "linear",
          "input " + to_string(xv.shape()) + " does not match weight " + to_string(wv.shape()));
  return matmul(x, weight, false);
}

Var Tape::matmul(Var a, Var b, bool transpose_b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const std::size_t n = av.extent(0);
  const std::size_t k = av.extent(1);
  const std::size_t m = transpose_b ? bv.extent(0) : bv.extent(1);
  require((transpose_b ? bv.extent(1) : bv.extent(0)) == k, "matmul",
          to_string(av.shape()) + " x " + to_string(bv.shape()) + (transpose_b ? "^T" : ""));
  Tensor out({n, m}, 0.0);
  if (!transpose_b) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < k; ++i) {
        const double x = av[r * k + i];
        if (x == 0.0) continue;
        const double* brow = bv.data() + i * m;
        double* orow = out.data() + r * m;
        for (std::size_t c = 0; c < m; ++c) orow[c] += x * brow[c];
      }
  } else {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) {
        double acc = 0.0;
        const double* arow = av.data() + r * k;
        const double* brow = bv.data() + c * k;
        for (std::size_t i = 0; i < k; ++i) acc += arow[i] * brow[i];
        out[r * m + c] = acc;
      }
  }
  const std::size_t ai = a.index();
  const std::size_t bi = b.index();
  return push("matmul", std::move(out),
              [ai, bi, n, k, m, transpose_b](const Tape& t, Grads& gs, const std::vector<double>& g) {
                const Tensor& A = t.nodes_[ai].value;
                const Tensor& B = t.nodes_[bi].value;
                auto& ga = t.grad_of(gs, ai);
                for (std::size_t r = 0; r < n; ++r)
                  for (std::size_t c = 0; c < m; ++c) {
                    const double gv = g[r * m + c];
                    if (gv == 0.0) continue;
                    for (std::size_t i = 0; i < k; ++i)
                      ga[r * k + i] += gv * (transpose_b ? B[c * k + i] : B[i * m + c]);
                  }
                auto& gb = t.grad_of(gs, bi);
                for (std::size_t r = 0; r < n; ++r)
                  for (std::size_t i = 0; i < k; ++i) {
                    const double x = A[r * k + i];
                    if (x == 0.0) continue;
                    for (std::size_t c = 0; c < m; ++c) {
                      if (transpose_b)
                        gb[c * k + i] += x * g[r * m + c];
                      else
                        gb[i * m + c] += x * g[r * m + c];
                    }
                  }
              });
}

Var Tape::relu(Var x) {
  Tensor out = value(x);
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  const std::size_t xi = x.index();
  return push("relu", std::move(out), [xi](const Tape& t, Grads& gs, const std::vector<double>& g) {
    const Tensor& X = t.nodes_[xi].value;
    auto& gx = t.grad_of(gs, xi);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X[i] > 0.0) gx[i] += g[i];
  });
}

Var Tape::sigmoid(Var x) {
  Tensor out = value(x);
  for (double& v : out.values()) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  const std::size_t xi = x.index();
  Var y = push("sigmoid", std::move(out), nullptr);
  const std::size_t yi = y.index();
  nodes_[yi].backward = [xi, yi](const Tape& t, Grads& gs, const std::vector<double>& g) {
    const Tensor& Y = t.nodes_[yi].value;
    auto& gx = t.grad_of(gs, xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * Y[i] * (1.0 - Y[i]);
  };
  return y;
}

Var Tape::log(Var x) {
  Tensor out = value(x);
  for (double& v : out.values()) {
    if (!(v > 0.0)) {
      throw NumericError("log of non-positive value at node #" + std::to_string(nodes_.size()));
    }
    v = std::log(v);
  }
  const std::size_t xi = x.index();
  return push("log", std::move(out), [xi](const Tape& t, Grads& gs, const std::vector<double>& g) {
    const Tensor& X = t.nodes_[xi].value;
    auto& gx = t.grad_of(gs, xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / X[i];
  });
}

Var Tape::clamp(Var x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
  Tensor out = value(x);
  for (double& v : out.values()) v = std::clamp(v, lo, hi);
  const std::size_t xi = x.index();
  return push("clamp", std::move(out), [xi, lo, hi](const Tape& t, Grads& gs, const std::vector<double>& g) {
    const Tensor& X = t.nodes_[xi].value;
    auto& gx = t.grad_of(gs, xi);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X[i] > lo && X[i] < hi) gx[i] += g[i];
  });
}

Var Tape::softmax(Var x, std::size_t axis) {
  const Tensor& xv = value(x);
  require(axis < xv.rank(), "softmax", "axis out of range for " + to_string(xv.shape()));
  const AxisSplit s = split_at(xv.shape(), axis);
  Tensor out = xv;
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.len; ++j) mx = std::max(mx, out[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        double& v = out[base + j * s.inner];
        v = std::exp(v - mx);
        z += v;
      }
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] /= z;
    }
  const std::size_t xi = x.index();
  Var y = push("softmax", std::move(out), nullptr);
  const std::size_t yi = y.index();
  nodes_[yi].backward = [xi, yi, s](const Tape& t, Grads& gs, const std::vector<double>& g) {
    const Tensor& Y = t.nodes_[yi].value;
    auto& gx = t.grad_of(gs, xi);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) dot += g[base + j * s.inner] * Y[base + j * s.inner];
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t k = base + j * s.inner;
          gx[k] += Y[k] * (g[k] - dot);
        }
      }
  };
  return y;
}

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_same(av, bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ai = a.index();
  const std::size_t bi = b.index();
  return push("add", std::move(out), [ai, bi](const Tape& t, Grads& gs, const std::vector<double>& g) {
    auto& ga = t.grad_of(gs, ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    auto& gb = t.grad_of(gs, bi);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

Var Tape::sub(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_same(av, bv, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.index();
  const std::size_t bi = b.index();
  return push("sub", std::move(out), [ai, bi](const Tape& t, Grads& gs, const std::vector<double>& g) {
    auto& ga = t.grad_of(gs, ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    auto& gb = t.grad_of(gs, bi);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_same(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.index();
  const std::size_t bi = b.index();
  return push("mul", std::move(out), [ai, bi](const Tape& t, Grads& gs, const std::vector<double>& g) {
    const Tensor& A = t.nodes_[ai].value;
    const Tensor& B = t.nodes_[bi].value;
    auto& ga = t.grad_of(gs, ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    auto& gb = t.grad_of(gs, bi);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
  });
}

Var Tape::scale(Var x, double factor) {
  Tensor out = value(x);
  for (double& v : out.values()) v *= factor;
  const std::size_t xi = x.index();
  return push("scale", std::move(out), [xi, factor](const Tape& t, Grads& gs, const std::vector<double>& g) {
    auto& gx = t.grad_of(gs, xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

Var Tape::sum(Var x) {
  const std::size_t xi = x.index();
  return push("sum", Tensor::scalar(numerics::sum(value(x))),
              [xi](const Tape& t, Grads& gs, const std::vector<double>& g) {
                auto& gx = t.grad_of(gs, xi);
                for (double& v : gx) v += g[0];
              });
}

Var Tape::mean(Var x) {
  const double n = static_cast<double>(value(x).size());
  const std::size_t xi = x.index();
  return push("mean", Tensor::scalar(numerics::sum(value(x)) / n),
              [xi, n](const Tape& t, Grads& gs, const std::vector<double>& g) {
                auto& gx = t.grad_of(gs, xi);
                for (double& v : gx) v += g[0] / n;
              });
}

Var Tape::mse(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_same(av, bv, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    acc += d * d;
  }
  const double n = static_cast<double>(av.size());
  const std::size_t ai = a.index();
  const std::size_t bi = b.index();
  return push("mse", Tensor::scalar(acc / n), [ai, bi, n](const Tape& t, Grads& gs, const std::vector<double>& g) {
    const Tensor& A = t.nodes_[ai].value;
    const Tensor& B = t.nodes_[bi].value;
    auto& ga = t.grad_of(gs, ai);
    auto& gb = t.grad_of(gs, bi);
    for (std::size_t i = 0; i < A.size(); ++i) {
      const double d = 2.0 * (A[i] - B[i]) / n * g[0];
      ga[i] += d;
      gb[i] -= d;
    }
  });
}

Var Tape::binary_cross_entropy(Var p, const Tensor& target) {
  const Tensor& pv = value(p);
  require_same(pv, target, "binary_cross_entropy");
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double tv = target[i];
    if (!(tv >= 0.0 && tv <= 1.0)) {
      throw std::invalid_argument("binary_cross_entropy: targets must lie in [0, 1]");
    }
    const double q = std::clamp(pv[i], kProbFloor, 1.0 - kProbFloor);
    acc -= tv * std::log(q) + (1.0 - tv) * std::log(1.0 - q);
  }
  const std::size_t pi = p.index();
  return push("bce", Tensor::scalar(acc), [pi, target](const Tape& t, Grads& gs, const std::vector<double>& g) {
    const Tensor& P = t.nodes_[pi].value;
    auto& gp = t.grad_of(gs, pi);
    for (std::size_t i = 0; i < P.size(); ++i) {
      const double q = P[i];
      if (q <= kProbFloor || q >= 1.0 - kProbFloor) continue;
      gp[i] += g[0] * (q - target[i]) / (q * (1.0 - q));
    }
  });
}

Var Tape::outer(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_rank(av, 2, "outer");
  require_rank(bv, 2, "outer");
  require(av.extent(1) == bv.extent(1), "outer",
          "position extents differ: " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  const std::size_t c = av.extent(0);
  const std::size_t d = bv.extent(0);
  const std::size_t p = av.extent(1);
  Tensor out({c, d, p}, 0.0);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t di = 0; di < d; ++di) {
      double* o = out.data() + (ci * d + di) * p;
      const double* ar = av.data() + ci * p;
      const double* br = bv.data() + di * p;
      for (std::size_t k = 0; k < p; ++k) o[k] = ar[k] * br[k];
    }
  const std::size_t ai = a.index();
  const std::size_t bi = b.index();
  return push("outer", std::move(out), [ai, bi, c, d, p](const Tape& t, Grads& gs, const std::vector<double>& g) {
    const Tensor& A = t.nodes_[ai].value;
    const Tensor& B = t.nodes_[bi].value;
    auto& ga = t.grad_of(gs, ai);
    auto& gb = t.grad_of(gs, bi);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t di = 0; di < d; ++di) {
        const double* gr = g.data() + (ci * d + di) * p;
        for (std::size_t k = 0; k < p; ++k) {
          ga[ci * p + k] += gr[k] * B[di * p + k];
          gb[di * p + k] += gr[k] * A[ci * p + k];
        }
      }
  });
}

Var Tape::avg_pool3d(Var x, const Pool3d& pool) {
  const Tensor& xv = value(x);
  require_rank(xv, 4, "avg_pool3d");
  const std::size_t C = xv.extent(0), D = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
  const auto [kd, kh, kw] = pool.kernel;
  const auto [sd, sh, sw] = pool.stride;
  const std::size_t Do = pooled_extent(D, kd, sd);
  const std::size_t Ho = pooled_extent(H, kh, sh);
  const std::size_t Wo = pooled_extent(W, kw, sw);
  const double inv = 1.0 / static_cast<double>(kd * kh * kw);
  Tensor out({C, Do, Ho, Wo}, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t od = 0; od < Do; ++od)
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (std::size_t a = 0; a < kd; ++a)
            for (std::size_t b = 0; b < kh; ++b) {
              const double* row = xv.data() + ((c * D + od * sd + a) * H + oh * sh + b) * W + ow * sw;
              for (std::size_t e = 0; e < kw; ++e) acc += row[e];
            }
          out[((c * Do + od) * Ho + oh) * Wo + ow] = acc * inv;
        }
  const std::size_t xi = x.index();
  return push("avg_pool3d", std::move(out),
              [xi, C, D, H, W, Do, Ho, Wo, pool, inv](const Tape& t, Grads& gs, const std::vector<double>& g) {
                const auto [kd, kh, kw] = pool.kernel;
                const auto [sd, sh, sw] = pool.stride;
                auto& gx = t.grad_of(gs, xi);
                for (std::size_t c = 0; c < C; ++c)
                  for (std::size_t od = 0; od < Do; ++od)
                    for (std::size_t oh = 0; oh < Ho; ++oh)
                      for (std::size_t ow = 0; ow < Wo; ++ow) {
                        const double gv = g[((c * Do + od) * Ho + oh) * Wo + ow] * inv;
                        for (std::size_t a = 0; a < kd; ++a)
                          for (std::size_t b = 0; b < kh; ++b) {
                            double* row = gx.data() + ((c * D + od * sd + a) * H + oh * sh + b) * W + ow * sw;
                            for (std::size_t e = 0; e < kw; ++e) row[e] += gv;
                          }
                      }
              });
}

Var Tape::dropout(Var x, const Tensor& mask) {
  const Tensor& xv = value(x);
  require_same(xv, mask, "dropout");
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t xi = x.index();
  return push("dropout", std::move(out), [xi, mask](const Tape& t, Grads& gs, const std::vector<double>& g) {
    auto& gx = t.grad_of(gs, xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

Var Tape::reshape(Var x, Shape shape) {
  Tensor out = value(x).reshaped(std::move(shape));
  const std::size_t xi = x.index();
  return push("reshape", std::move(out), [xi](const Tape& t, Grads& gs, const std::vector<double>& g) {
    auto& gx = t.grad_of(gs, xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var Tape::transpose(Var x) {
  const Tensor& xv = value(x);
  require_rank(xv, 2, "transpose");
  const std::size_t r = xv.extent(0);
  const std::size_t c = xv.extent(1);
  Tensor out({c, r}, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  const std::size_t xi = x.index();
  return push("transpose", std::move(out), [xi, r, c](const Tape& t, Grads& gs, const std::vector<double>& g) {
    auto& gx = t.grad_of(gs, xi);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

Var Tape::concat(std::span<const Var> parts, std::size_t axis) {
  require(!parts.empty(), "concat", "no inputs");
  const Shape& first = value(parts[0]).shape();
  require(axis < first.size(), "concat", "axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  std::vector<std::size_t> indices;
  for (Var p : parts) {
    const Shape& s = value(p).shape();
    require(s.size() == first.size(), "concat", "rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      require(d == axis || s[d] == first[d], "concat",
              to_string(s) + " incompatible with " + to_string(first));
    lens.push_back(s[axis]);
    indices.push_back(p.index());
    out_shape[axis] += s[axis];
  }
  const AxisSplit so = split_at(out_shape, axis);
  Tensor out(out_shape, 0.0);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = value(parts[k]);
    const std::size_t block = lens[k] * so.inner;
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy_n(pv.data() + o * block, block, out.data() + (o * so.len + offset) * so.inner);
    offset += lens[k];
  }
  return push("concat", std::move(out), [indices, lens, so](const Tape& t, Grads& gs, const std::vector<double>& g) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < indices.size(); ++k) {
      auto& gp = t.grad_of(gs, indices[k]);
      const std::size_t block = lens[k] * so.inner;
      for (std::size_t o = 0; o < so.outer; ++o) {
        const double* src = g.data() + (o * so.len + offset) * so.inner;
        double* dst = gp.data() + o * block;
        for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
      }
      offset += lens[k];
    }
  });
}

Var Tape::slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& xv = value(x);
  require(axis < xv.rank(), "slice", "axis out of range");
  require(begin < end && end <= xv.extent(axis), "slice",
          "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
              to_string(xv.shape()));
  const AxisSplit s = split_at(xv.shape(), axis);
  Shape out_shape = xv.shape();
  out_shape[axis] = end - begin;
  Tensor out(out_shape, 0.0);
  const std::size_t block = (end - begin) * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.data() + (o * s.len + begin) * s.inner, block, out.data() + o * block);
  const std::size_t xi = x.index();
  return push("slice", std::move(out), [xi, s, begin, block](const Tape& t, Grads& gs, const std::vector<double>& g) {
    auto& gx = t.grad_of(gs, xi);
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* dst = gx.data() + (o * s.len + begin) * s.inner;
      const double* src = g.data() + o * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

GradientSet Tape::gradient(Var loss, const ParameterSet& wrt) const {
  const Node& out = node(loss);
  if (out.value.size() != 1) {
    throw ShapeError("gradient: loss must be a scalar, got " + to_string(out.value.shape()));
  }
  Grads grads(nodes_.size());
  grads[loss.index()].assign(1, 1.0);
  for (std::size_t i = loss.index() + 1; i-- > 0;) {
    if (grads[i].empty() || !nodes_[i].backward) continue;
    nodes_[i].backward(*this, grads, grads[i]);
  }
  GradientSet result = GradientSet::zeros_like(wrt);
  for (const auto& [key, index] : leaves_) {
    if (key.first != &wrt || grads[index].empty()) continue;
    Tensor& dst = result.entries.at(key.second);
    std::copy(grads[index].begin(), grads[index].end(), dst.data());
  }
  return result;
}

GradientSet differentiate(const Tape& tape, Var loss, const ParameterSet& params) {
  if (!loss.valid() || loss.tape_id() != tape.id() || loss.index() >= tape.node_count()) {
    throw UsageError("differentiate: loss was not produced by a forward pass on this tape");
  }
  return tape.gradient(loss, params);
}

namespace {

Var run_graph(Tape& tape, const GraphFn& graph, const std::vector<Tensor>& inputs) {
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.constant(t));
  return graph(tape, leaves);
}

}  // namespace

Tensor evaluate(const GraphFn& graph, const ParameterSet& params, const std::vector<Tensor>& inputs) {
  Tape tape(params);
  return tape.value(run_graph(tape, graph, inputs));
}

std::pair<double, GradientSet> value_and_gradient(const GraphFn& graph, const ParameterSet& params,
                                                  const std::vector<Tensor>& inputs) {
  Tape tape(params);
  Var loss = run_graph(tape, graph, inputs);
  return {tape.value(loss).item(), differentiate(tape, loss, params)};
}

GradientSet finite_difference_gradient(const GraphFn& graph, const ParameterSet& params,
                                       const std::vector<Tensor>& inputs, double step,
                                       std::size_t max_entries_per_tensor) {
  if (!(step > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  GradientSet out = GradientSet::zeros_like(params);
  ParameterSet probe = params;
  for (auto& [name, tensor] : probe) {
    Tensor& g = out.entries.at(name);
    const std::size_t n = tensor.size();
    std::size_t stride = 1;
    if (max_entries_per_tensor > 0 && n > max_entries_per_tensor) {
      stride = (n + max_entries_per_tensor - 1) / max_entries_per_tensor;
      std::fill(g.values().begin(), g.values().end(), std::numeric_limits<double>::quiet_NaN());
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double original = tensor[i];
      tensor[i] = original + step;
      const double up = evaluate(graph, probe, inputs).item();
      tensor[i] = original - step;
      const double down = evaluate(graph, probe, inputs).item();
      tensor[i] = original;
      g[i] = (up - down) / (2.0 * step);
    }
  }
  return out;
}

double gradient_check_error(const GradientSet& analytic, const GradientSet& numeric, double floor) {
  double worst = 0.0;
  for (const auto& [name, a] : analytic.entries) {
    const Tensor& n = numeric.at(name);
    if (a.shape() != n.shape()) throw ShapeError("gradient_check_error: shape mismatch for " + name);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (std::isnan(n[i])) continue;
      const double denom = std::max({std::abs(a[i]), std::abs(n[i]), floor});
      worst = std::max(worst, std::abs(a[i] - n[i]) / denom);
    }
  }
  return worst;
}

}  // namespace bevuda::numerics
