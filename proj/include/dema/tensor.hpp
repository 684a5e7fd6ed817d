#pragma once

// Dense float64 tensors with a reverse-mode tape.
//
// A Tensor is a shared handle to a Node. Ops executed while gradient recording
// is enabled (see NoGradGuard) and with at least one input that requires a
// gradient attach a backward closure to their result; backward() walks the
// recorded graph in reverse topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dema/alloc.hpp"
#include "dema/errors.hpp"

namespace dema {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  // Adds `g` into this node's gradient, allocating it on first use.
  void accumulate(std::span<const double> g);
  std::span<double> grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::span<const double> values, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Direct mutation bypasses the tape; only use on leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  // Fresh leaf holding a copy of the value, detached from any graph.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Gradient recording is on by default; this guard disables it for a scope.
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

// Builds an op result. The backward closure is only attached when recording is
// enabled and some parent requires a gradient.
Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents,
                   detail::BackwardFn backward);

// Runs reverse-mode accumulation from a scalar loss.
void backward(const Tensor& loss);

// ---- structural ----
Tensor reshape(const Tensor& x, Shape shape);
// Swaps the first two axes of a rank >= 2 tensor.
Tensor swap_leading(const Tensor& x);
// Slice [begin, end) along the last axis.
Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_last(const Tensor& a, const Tensor& b);

// ---- arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
// x[..., j] + bias[j]
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x[..., j] * w[j]
Tensor mul_lastdim(const Tensor& x, const Tensor& w);

// 2-D matrix product; also accepts a leading batch of rows for `a` via linear().
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] · weight[in, out] (+ bias[out]).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());

// ---- elementwise nonlinearities ----
Tensor exp(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor square(const Tensor& x);

// Normalizes over the last axis; gamma/beta are optional affine parameters.
Tensor layer_norm(const Tensor& x, double eps, const Tensor& gamma = Tensor(),
                  const Tensor& beta = Tensor());

enum class ConvPadding { Same, Causal };
// Depthwise 1-D convolution along axis 1 of x[B, L, C] with kernel[C, K].
// Both paddings zero-fill and keep L; Causal puts all K-1 pad slots on the left.
Tensor conv1d(const Tensor& x, const Tensor& kernel, ConvPadding padding,
              const Tensor& bias = Tensor());

// Softmax over the last axis.
Tensor softmax(const Tensor& x);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean over every axis except the last; result has shape [last].
Tensor mean_rows(const Tensor& x);
// Mean of (a - b)^2, restricted to weight != 0 entries when weight is given.
Tensor mse(const Tensor& a, const Tensor& b, std::span<const double> weight = {});

// Finite-value check used at module boundaries.
void require_finite(std::span<const double> values, const char* what);

}  // namespace dema
