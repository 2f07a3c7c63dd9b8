#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace xspec::ad {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct Node;
}

// One node of a define-by-run reverse-mode graph. Values are float32.
// A Tensor is a cheap shared handle; copying it aliases the node.
//
// The graph is rebuilt on every optimization step. backward() walks the
// recorded graph once in reverse topological order and accumulates
// gradients into every node created with requires_grad. Recording is
// skipped entirely when no input requires a gradient or a NoGradGuard is
// active, so the same forward code serves both training and evaluation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int axis) const;
  int rank() const;
  int64_t size() const;

  std::span<const float> values() const;
  // Direct mutation of stored values; meant for leaf parameters between
  // steps (optimizer updates), never for nodes inside a live graph.
  std::span<float> values_mut();

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const float> grad() const;
  // Allocates a zero gradient buffer on first use.
  std::span<float> grad_mut();
  void zero_grad();

  // Value of a one-element tensor.
  float item() const;

  const char* op_name() const;

  detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> node_ptr() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording for its scope (thread-local).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// When on, every op validates its output for NaN/Inf and backward
// validates gradients, reporting the offending op by name. Off by
// default; tests and debug runs switch it on.
void set_finite_checks(bool on);
bool finite_checks();

// ---- Primitive ops ----------------------------------------------------
// Elementwise binaries require identical shapes; use broadcast_to first
// (the b* helpers below do it for you).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, float c);
Tensor mul(const Tensor& a, float c);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n)
Tensor transpose(const Tensor& a);                // 2-D

Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor power(const Tensor& a, float exponent);
Tensor reciprocal(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor max(const Tensor& a, const Tensor& b);  // elementwise; ties favor a

Tensor sum(const Tensor& a);   // -> scalar
Tensor mean(const Tensor& a);  // -> scalar
// Sum over one axis, keeping it as size 1.
Tensor sum_axis(const Tensor& a, int axis);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor reshape(const Tensor& a, Shape shape);
// Expand axes of size 1 to the target shape (ranks must match).
Tensor broadcast_to(const Tensor& a, const Shape& shape);

// y_i = sum_{j<i} x_j along the last axis.
Tensor cumsum_exclusive(const Tensor& a);

// Broadcasting conveniences.
Tensor badd(const Tensor& a, const Tensor& b);
Tensor bsub(const Tensor& a, const Tensor& b);
Tensor bmul(const Tensor& a, const Tensor& b);

// ---- Custom-op hook ----------------------------------------------------
// Builds a node from precomputed forward values. `backward` receives the
// node's output gradient and must accumulate into the inputs it captured
// (guarding on requires_grad). Not recorded under NoGradGuard or when no
// input requires gradients.
using BackwardFn = std::function<void(std::span<const float> out_grad)>;
Tensor make_op(const char* name, Shape out_shape, std::vector<float> value,
               const std::vector<Tensor>& inputs, BackwardFn backward);

// Accumulate `g` into `t`'s gradient if it requires one.
void accumulate_grad(const Tensor& t, std::span<const float> g);

// ---- Backward ----------------------------------------------------------
// Seeds d(root)/d(root) = 1 and propagates to every requires_grad node
// reachable through the recorded graph. root must be a finite scalar.
void backward(const Tensor& root);

}  // namespace xspec::ad
