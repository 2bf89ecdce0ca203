#include "multilane/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "multilane/errors.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

std::vector<Real>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), Real(0));
  return grad;
}

}  // namespace detail

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TapeEntry {
  NodePtr out;
  Tape::BackwardFn fn;
};

thread_local std::vector<TapeEntry> g_tape;
thread_local int g_no_grad_depth = 0;

void validate_shape(const Shape& shape) {
  for (auto extent : shape) {
    if (extent == 0) {
      throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    }
  }
}

NodePtr make_node(Shape shape, std::vector<Real> data, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->leaf = !requires_grad;
  return node;
}

bool tracks(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// `out` is an op result; `fn` propagates out.grad into the captured inputs.
Tensor finish(NodePtr out, bool tracked, Tape::BackwardFn fn) {
  out->leaf = false;
  if (tracked) {
    out->requires_grad = true;
    Tape::record(out, std::move(fn));
  }
  return Tensor(std::move(out));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_rank2(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                         shape_string(t.shape()));
  }
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& x, const char* op, Forward forward, Derivative derivative) {
  require_defined(x, op);
  const auto in = x.values();
  std::vector<Real> data(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) data[i] = forward(in[i]);
  const bool tracked = tracks({&x});
  auto out = make_node(x.shape(), std::move(data), false);
  return finish(out, tracked, [xn = x.node(), derivative](Node& o) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += o.grad[i] * derivative(xn->data[i], o.data[i]);
    }
  });
}

struct AxisSplit {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), Real(0)); }

Tensor Tensor::full(Shape shape, Real value) {
  validate_shape(shape);
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<Real>(n, value), false));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values) {
  validate_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                         " values for shape " + shape_string(shape));
  }
  return Tensor(make_node(std::move(shape), std::move(values), false));
}

Tensor Tensor::scalar(Real value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape()));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return defined() ? node_->data.size() : 0; }

std::span<const Real> Tensor::values() const {
  require_defined(*this, "values");
  return node_->data;
}

std::span<Real> Tensor::mutable_values() {
  require_defined(*this, "mutable_values");
  if (!node_->leaf) throw ContractError("mutable_values: only leaf tensors may be written");
  return node_->data;
}

std::vector<Real> Tensor::to_vector() const {
  auto v = values();
  return {v.begin(), v.end()};
}

Real Tensor::at(std::size_t i) const { return values()[i]; }

Real Tensor::at(std::size_t row, std::size_t col) const {
  return values()[row * shape().back() + col];
}

Real Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item: tensor of shape " + shape_string(shape()) + " is not scalar");
  }
  return node_->data[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  require_defined(*this, "set_requires_grad");
  if (flag && node_->detached) {
    throw ContractError("set_requires_grad: detached tensors never accumulate gradient");
  }
  if (!node_->leaf) throw ContractError("set_requires_grad: only leaf tensors");
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::is_detached() const { return defined() && node_->detached; }
bool Tensor::is_leaf() const { return defined() && node_->leaf; }
bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const Real> Tensor::grad() const {
  require_defined(*this, "grad");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (defined()) node_->grad.clear();
}

Tensor Tensor::clone() const {
  require_defined(*this, "clone");
  return Tensor(make_node(node_->shape, node_->data, false));
}

// ---------------------------------------------------------------------------
// Tape

std::size_t Tape::size() { return g_tape.size(); }

void Tape::clear() { g_tape.clear(); }

void Tape::record(std::shared_ptr<detail::Node> out, BackwardFn fn) {
  g_tape.push_back({std::move(out), std::move(fn)});
}

void Tape::run_backward() {
  for (auto it = g_tape.rbegin(); it != g_tape.rend(); ++it) {
    if (!it->out->grad.empty()) it->fn(*it->out);
  }
  g_tape.clear();
}

bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad() || loss.is_leaf()) {
    throw ContractError("backward: loss does not depend on any trainable tensor");
  }
  if (Tape::size() == 0) throw ContractError("backward: tape is empty");
  auto& g = loss.node()->grad_buffer();
  g[0] += Real(1);
  Tape::run_backward();
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents disagree " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const Real* A = a.values().data();
  const Real* B = b.values().data();
  std::vector<Real> c(m * n, Real(0));
  for (std::size_t i = 0; i < m; ++i) {
    Real* row = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = A[i * k + p];
      const Real* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  const bool tracked = tracks({&a, &b});
  auto out = make_node({m, n}, std::move(c), false);
  return finish(out, tracked, [an = a.node(), bn = b.node(), m, k, n](Node& o) {
    const Real* G = o.grad.data();
    if (an->requires_grad) {
      auto& ga = an->grad_buffer();
      const Real* B = bn->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const Real* grow = G + i * n;
          const Real* brow = B + p * n;
          Real acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      const Real* A = an->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const Real* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const Real av = A[i * k + p];
          Real* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  const auto in = x.values();
  std::vector<Real> data(in.size());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) data[j * r + i] = in[i * c + j];
  }
  const bool tracked = tracks({&x});
  auto out = make_node({c, r}, std::move(data), false);
  return finish(out, tracked, [xn = x.node(), r, c](Node& o) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.values(), y = b.values();
  std::vector<Real> data(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) data[i] = x[i] + y[i];
  const bool tracked = tracks({&a, &b});
  auto out = make_node(a.shape(), std::move(data), false);
  return finish(out, tracked, [an = a.node(), bn = b.node()](Node& o) {
    for (const auto& n : {an, bn}) {
      if (!n->requires_grad) continue;
      auto& g = n->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.values(), y = b.values();
  std::vector<Real> data(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) data[i] = x[i] - y[i];
  const bool tracked = tracks({&a, &b});
  auto out = make_node(a.shape(), std::move(data), false);
  return finish(out, tracked, [an = a.node(), bn = b.node()](Node& o) {
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.values(), y = b.values();
  std::vector<Real> data(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) data[i] = x[i] * y[i];
  const bool tracked = tracks({&a, &b});
  auto out = make_node(a.shape(), std::move(data), false);
  return finish(out, tracked, [an = a.node(), bn = b.node()](Node& o) {
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->data[i];
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_row");
  require_defined(bias, "add_row");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (bias.numel() != c) {
    throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " vs rows of " +
                         shape_string(x.shape()));
  }
  const auto in = x.values(), b = bias.values();
  std::vector<Real> data(in.size());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) data[i * c + j] = in[i * c + j] + b[j];
  }
  const bool tracked = tracks({&x, &bias});
  auto out = make_node(x.shape(), std::move(data), false);
  return finish(out, tracked, [xn = x.node(), bn = bias.node(), r, c](Node& o) {
    if (xn->requires_grad) {
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
      }
    }
  });
}

Tensor scale(const Tensor& x, Real factor) {
  return unary(
      x, "scale", [factor](Real v) { return v * factor; },
      [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& x, Real shift) {
  return unary(
      x, "add_scalar", [shift](Real v) { return v + shift; }, [](Real, Real) { return Real(1); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid", [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  return unary(
      x, "gelu",
      [](Real v) {
        const Real u = Real(kGeluC) * (v + Real(kGeluA) * v * v * v);
        return Real(0.5) * v * (Real(1) + std::tanh(u));
      },
      [](Real v, Real) {
        const Real u = Real(kGeluC) * (v + Real(kGeluA) * v * v * v);
        const Real t = std::tanh(u);
        const Real du = Real(kGeluC) * (Real(1) + Real(3 * kGeluA) * v * v);
        return Real(0.5) * (Real(1) + t) + Real(0.5) * v * (Real(1) - t * t) * du;
      });
}

Tensor log(const Tensor& x) {
  require_defined(x, "log");
  for (Real v : x.values()) {
    if (!(v > 0)) throw NumericError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      x, "log", [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor pow_scalar(const Tensor& x, Real exponent) {
  return unary(
      x, "pow_scalar", [exponent](Real v) { return std::pow(v, exponent); },
      [exponent](Real v, Real) { return exponent * std::pow(v, exponent - Real(1)); });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
  return unary(
      x, "clamp", [lo, hi](Real v) { return std::clamp(v, lo, hi); },
      [lo, hi](Real v, Real) { return (v >= lo && v <= hi) ? Real(1) : Real(0); });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  Real acc = 0;
  for (Real v : x.values()) acc += v;
  const bool tracked = tracks({&x});
  auto out = make_node({1}, {acc}, false);
  return finish(out, tracked, [xn = x.node()](Node& o) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

// ---------------------------------------------------------------------------
// Layout

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_string(first));
  }
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_string(first) + " and " +
                           shape_string(s));
    }
    shape[axis] += s[axis];
  }
  const AxisSplit whole = split_axis(shape, axis);
  std::vector<Real> data(shape_numel(shape));
  std::size_t offset = 0;  // along axis
  for (const auto& p : parts) {
    const AxisSplit part = split_axis(p.shape(), axis);
    const auto in = p.values();
    const std::size_t chunk = part.extent * part.inner;
    for (std::size_t o = 0; o < part.outer; ++o) {
      std::copy_n(in.data() + o * chunk, chunk,
                  data.data() + o * whole.extent * whole.inner + offset * whole.inner);
    }
    offset += part.extent;
  }
  bool tracked = false;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    tracked = tracked || (grad_enabled() && p.requires_grad());
    nodes.push_back(p.node());
  }
  auto out = make_node(shape, std::move(data), false);
  return finish(out, tracked, [nodes = std::move(nodes), axis, whole](Node& o) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      const AxisSplit part = split_axis(n->shape, axis);
      if (n->requires_grad) {
        auto& g = n->grad_buffer();
        const std::size_t chunk = part.extent * part.inner;
        for (std::size_t p = 0; p < part.outer; ++p) {
          const Real* src = o.grad.data() + p * whole.extent * whole.inner + offset * whole.inner;
          for (std::size_t i = 0; i < chunk; ++i) g[p * chunk + i] += src[i];
        }
      }
      offset += part.extent;
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined(x, "slice");
  const Shape& in_shape = x.shape();
  if (axis >= in_shape.size() || begin >= end || end > in_shape[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " invalid for " +
                         shape_string(in_shape));
  }
  Shape shape = in_shape;
  shape[axis] = end - begin;
  const AxisSplit whole = split_axis(in_shape, axis);
  const std::size_t chunk = (end - begin) * whole.inner;
  const auto in = x.values();
  std::vector<Real> data(whole.outer * chunk);
  for (std::size_t o = 0; o < whole.outer; ++o) {
    std::copy_n(in.data() + o * whole.extent * whole.inner + begin * whole.inner, chunk,
                data.data() + o * chunk);
  }
  const bool tracked = tracks({&x});
  auto out = make_node(std::move(shape), std::move(data), false);
  return finish(out, tracked, [xn = x.node(), whole, begin, chunk](Node& o) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::size_t p = 0; p < whole.outer; ++p) {
      Real* dst = g.data() + p * whole.extent * whole.inner + begin * whole.inner;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += o.grad[p * chunk + i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  validate_shape(shape);
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  const bool tracked = tracks({&x});
  auto out = make_node(std::move(shape), x.to_vector(), false);
  return finish(out, tracked, [xn = x.node()](Node& o) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor detach(const Tensor& x) {
  require_defined(x, "detach");
  auto node = make_node(x.shape(), x.to_vector(), false);
  node->detached = true;
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& x, int axis) {
  require_defined(x, "softmax");
  const int rank = static_cast<int>(x.rank());
  const int resolved = axis < 0 ? axis + rank : axis;
  if (resolved < 0 || resolved >= rank) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_string(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), static_cast<std::size_t>(resolved));
  const auto in = x.values();
  for (Real v : in) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  }
  std::vector<Real> data(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      Real hi = in[base];
      for (std::size_t k = 1; k < s.extent; ++k) hi = std::max(hi, in[base + k * s.inner]);
      Real total = 0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const Real e = std::exp(in[base + k * s.inner] - hi);
        data[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) data[base + k * s.inner] /= total;
    }
  }
  const bool tracked = tracks({&x});
  auto out = make_node(x.shape(), std::move(data), false);
  return finish(out, tracked, [xn = x.node(), s](Node& o) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::size_t p = 0; p < s.outer; ++p) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = p * s.extent * s.inner + i;
        Real dot = 0;
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = base + k * s.inner;
          dot += o.grad[idx] * o.data[idx];
        }
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = base + k * s.inner;
          g[idx] += o.data[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  require_defined(x, "layer_norm");
  require_defined(gamma, "layer_norm");
  require_defined(beta, "layer_norm");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " vs input " + shape_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto in = x.values(), gm = gamma.values(), bt = beta.values();
  std::vector<Real> data(in.size());
  std::vector<Real> xhat(in.size());
  std::vector<Real> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = in.data() + r * d;
    Real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Real>(d);
    const Real inv = Real(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (row[j] - mu) * inv;
      xhat[r * d + j] = h;
      data[r * d + j] = h * gm[j] + bt[j];
    }
  }
  const bool tracked = tracks({&x, &gamma, &beta});
  auto out = make_node(x.shape(), std::move(data), false);
  return finish(out, tracked,
                [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat),
                 inv_std = std::move(inv_std), rows, d](Node& o) {
                  const Real* G = o.grad.data();
                  if (gn->requires_grad) {
                    auto& g = gn->grad_buffer();
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < d; ++j) g[j] += G[r * d + j] * xhat[r * d + j];
                    }
                  }
                  if (bn->requires_grad) {
                    auto& g = bn->grad_buffer();
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < d; ++j) g[j] += G[r * d + j];
                    }
                  }
                  if (xn->requires_grad) {
                    auto& g = xn->grad_buffer();
                    const Real inv_d = Real(1) / static_cast<Real>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      Real sum_dh = 0, sum_dh_h = 0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const Real dh = G[r * d + j] * gn->data[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[r * d + j];
                      }
                      for (std::size_t j = 0; j < d; ++j) {
                        const Real dh = G[r * d + j] * gn->data[j];
                        g[r * d + j] += inv_std[r] * inv_d *
                                        (static_cast<Real>(d) * dh - sum_dh -
                                         xhat[r * d + j] * sum_dh_h);
                      }
                    }
                  }
                });
}

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
