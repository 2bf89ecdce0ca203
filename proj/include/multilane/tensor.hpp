#pragma once

#include "multilane/precision.hpp"

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

#ifdef MULTILANE_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool detached = false;
  bool leaf = true;

  std::vector<Real>& grad_buffer();
};

}  // namespace detail

/// Dense row-major array with optional gradient.
///
/// Copies share the underlying storage (handle semantics); use clone() for a
/// deep copy. Values produced by ops are immutable; only leaves created
/// through the factories may be written through mutable_values().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, Real value);
  static Tensor from(Shape shape, std::vector<Real> values);
  static Tensor scalar(Real value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Real> values() const;
  std::span<Real> mutable_values();
  std::vector<Real> to_vector() const;
  Real at(std::size_t i) const;
  Real at(std::size_t row, std::size_t col) const;
  Real item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_detached() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const Real> grad() const;
  void zero_grad();

  Tensor clone() const;
  const void* id() const { return node_.get(); }

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Thread-local record of differentiable ops executed since the last
/// backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(detail::Node& out)>;

  static std::size_t size();
  static void clear();
  static void record(std::shared_ptr<detail::Node> out, BackwardFn fn);
  static void run_backward();
};

bool grad_enabled();

/// Disables recording for the lifetime of the guard (nestable).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
/// `loss`, then clears the tape.
void backward(const Tensor& loss);

// 2-D product. Gradients: dA = G Bᵀ, dB = Aᵀ G.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x [n×d] + bias [d], broadcast over rows.
Tensor add_row(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, Real factor);
Tensor add_scalar(const Tensor& x, Real shift);

Tensor sigmoid(const Tensor& x);
// Tanh approximation.
Tensor gelu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor pow_scalar(const Tensor& x, Real exponent);
Tensor clamp(const Tensor& x, Real lo, Real hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
Tensor detach(const Tensor& x);

// Max-subtracted softmax. `axis` may be negative (counted from the end).
Tensor softmax(const Tensor& x, int axis = -1);

// Row-wise normalization over the last extent D followed by the affine map.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Real eps = Real(1e-6));

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
