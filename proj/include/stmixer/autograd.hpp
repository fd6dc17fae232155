#pragma once

// Reverse-mode differentiation over a dynamically recorded graph.
//
// Every op returns a Var holding its forward value. When gradient recording is
// enabled and at least one input requires a gradient, the result keeps strong
// references to its inputs plus a closure that pushes the result's gradient
// back into them. Var::backward() runs the closures in reverse topological
// order. Leaves (parameters) accumulate gradients across calls.

#include <functional>
#include <memory>
#include <vector>

#include "stmixer/tensor.hpp"

namespace stmx {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Lazily allocates a zero gradient buffer matching value.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var();
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  // Leaf-only mutation (optimizers, finite differences).
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad_buffer(); }
  Tensor& mutable_grad() { return node_->grad_buffer(); }
  const Shape& dims() const { return node_->value.dims(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;

  // Seeds d(self)/d(self) = 1 for a one-element Var and propagates.
  void backward() const;
  // Propagates an explicit upstream gradient.
  void backward(const Tensor& seed) const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Scoped switch that disables graph recording on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds a result node. `backward` receives the result node; its grad is
// populated. Inputs that do not require gradients must be skipped by the
// closure (check Node::requires_grad).
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

Var constant(Tensor value);

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var exp(const Var& x);
// log(max(x, floor)); the gradient is zero where clamped.
Var log_clamped(const Var& x, double floor = 1e-12);
Var abs(const Var& x);
Var square(const Var& x);

// x[..., D] + b[D].
Var add_bias(const Var& x, const Var& bias);
// x[..., K] . w[K, M] -> [..., M].
Var matmul(const Var& x, const Var& w);
Var linear(const Var& x, const Var& w, const Var& b);
// a[B, M, K] . b[B, K, N] (or b[B, N, K] transposed) -> [B, M, N].
Var bmm(const Var& a, const Var& b, bool transpose_b = false);

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps);
Var softmax(const Var& x);  // over the last axis

Var reshape(const Var& x, Shape dims);
Var permute(const Var& x, const std::vector<std::size_t>& axes);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end);
Var index_select(const Var& x, std::size_t axis, const std::vector<std::size_t>& indices);
// Mean over one axis; the axis is removed.
Var mean_axis(const Var& x, std::size_t axis);
// Inserts a new axis of extent n at `axis` by copying.
Var repeat_new_axis(const Var& x, std::size_t axis, std::size_t n);
// out[j] = x[source[j]] (flat offsets); the backward pass scatter-adds.
Var gather(const Var& x, Shape out_dims, std::vector<std::size_t> source);
Var sum(const Var& x);
Var mean(const Var& x);
Var sum_of(const std::vector<Var>& terms);

}  // namespace stmx
