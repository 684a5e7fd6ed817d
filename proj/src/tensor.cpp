#include "dema/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace dema {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

void Node::accumulate(std::span<const double> g) {
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

std::span<double> Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, Buffer value) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    fail(ErrorKind::Dimension, std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                   " vs " + shape_string(b.shape()));
}

detail::Node& parent(detail::Node& self, std::size_t i) { return *self.parents[i]; }

// Applies y = f(x) elementwise with dy/dx = df(x, y).
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  Buffer out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  auto node = new_node(std::move(shape), Buffer(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::span<const double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    fail(ErrorKind::Dimension, "Tensor::from: " + std::to_string(values.size()) +
                                   " values do not fill shape " + shape_string(shape));
  auto node = new_node(std::move(shape), Buffer(values.begin(), values.end()));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  return from(std::move(shape), std::span<const double>(values.begin(), values.size()),
              requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({}, value, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank())
    fail(ErrorKind::Dimension, "axis " + std::to_string(axis) + " out of range for shape " +
                                   shape_string(shape()));
  return shape()[axis];
}

double Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::Contract, "item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) fail(ErrorKind::Dimension, "at(): wrong index rank");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape()[axis]) fail(ErrorKind::Dimension, "at(): index out of range");
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return {node_->grad.begin(), node_->grad.end()};
}

Tensor Tensor::detach() const {
  auto node = new_node(shape(), node_->value);
  return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents,
                   detail::BackwardFn backward_fn) {
  auto node = new_node(std::move(shape), std::move(value));
  if (t_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.defined() ? p.node_ptr() : new_node({}, {}));
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    fail(ErrorKind::Contract, "backward() requires a scalar loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(std::vector<double>{1.0});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values)
    if (!std::isfinite(v)) fail(ErrorKind::Numeric, std::string(what) + ": non-finite input");
}

// ---------------------------------------------------------------- structural

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    fail(ErrorKind::Dimension, "reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  return make_result(std::move(shape), x.node()->value, {x}, [](detail::Node& self) {
    auto& p = parent(self, 0);
    if (p.requires_grad) p.accumulate(self.grad);
  });
}

Tensor swap_leading(const Tensor& x) {
  if (x.rank() < 2) fail(ErrorKind::Dimension, "swap_leading needs rank >= 2");
  const std::size_t a = x.dim(0), b = x.dim(1);
  const std::size_t inner = x.numel() / (a * b);
  Shape shape = x.shape();
  std::swap(shape[0], shape[1]);
  Buffer out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      std::copy_n(in.begin() + (i * b + j) * inner, inner, out.begin() + (j * a + i) * inner);
  return make_result(std::move(shape), std::move(out), {x}, [a, b, inner](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j)
        for (std::size_t k = 0; k < inner; ++k)
          g[(i * b + j) * inner + k] += self.grad[(j * a + i) * inner + k];
  });
}

Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t width = x.shape().back();
  if (begin >= end || end > width) fail(ErrorKind::Dimension, "slice_last: bad range");
  const std::size_t rows = x.numel() / width;
  const std::size_t w = end - begin;
  Shape shape = x.shape();
  shape.back() = w;
  Buffer out(rows * w);
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(in.begin() + r * width + begin, w, out.begin() + r * w);
  return make_result(std::move(shape), std::move(out), {x},
                     [rows, width, begin, w](detail::Node& self) {
                       auto& p = parent(self, 0);
                       if (!p.requires_grad) return;
                       auto g = p.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t k = 0; k < w; ++k)
                           g[r * width + begin + k] += self.grad[r * w + k];
                     });
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  const std::size_t wa = a.shape().back(), wb = b.shape().back();
  Shape sa(a.shape().begin(), a.shape().end() - 1), sb(b.shape().begin(), b.shape().end() - 1);
  if (sa != sb) fail(ErrorKind::Dimension, "concat_last: leading shapes differ");
  const std::size_t rows = a.numel() / wa;
  Shape shape = a.shape();
  shape.back() = wa + wb;
  Buffer out(rows * (wa + wb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().begin() + r * wa, wa, out.begin() + r * (wa + wb));
    std::copy_n(b.data().begin() + r * wb, wb, out.begin() + r * (wa + wb) + wa);
  }
  return make_result(std::move(shape), std::move(out), {a, b}, [rows, wa, wb](detail::Node& self) {
    const std::size_t w = wa + wb;
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < wa; ++k) g[r * wa + k] += self.grad[r * w + k];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < wb; ++k) g[r * wb + k] += self.grad[r * w + wa + k];
    }
  });
}

// ---------------------------------------------------------------- arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int k = 0; k < 2; ++k)
      if (parent(self, k).requires_grad) parent(self, k).accumulate(self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
    auto& pb = parent(self, 1);
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t width = bias.numel();
  if (x.rank() == 0 || x.shape().back() != width)
    fail(ErrorKind::Dimension, "add_bias: bias " + shape_string(bias.shape()) +
                                   " does not match " + shape_string(x.shape()));
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + bias.data()[i % width];
  return make_result(x.shape(), std::move(out), {x, bias}, [width](detail::Node& self) {
    if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
    auto& pb = parent(self, 1);
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % width] += self.grad[i];
    }
  });
}

Tensor mul_lastdim(const Tensor& x, const Tensor& w) {
  const std::size_t width = w.numel();
  if (x.rank() == 0 || x.shape().back() != width)
    fail(ErrorKind::Dimension, "mul_lastdim: shape mismatch");
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * w.data()[i % width];
  return make_result(x.shape(), std::move(out), {x, w}, [width](detail::Node& self) {
    auto& px = parent(self, 0);
    auto& pw = parent(self, 1);
    if (px.requires_grad) {
      auto g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pw.value[i % width];
    }
    if (pw.requires_grad) {
      auto g = pw.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % width] += self.grad[i] * px.value[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    fail(ErrorKind::Dimension, "matmul expects rank-2 operands");
  if (a.dim(1) != b.dim(0))
    fail(ErrorKind::Dimension, "matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                                   shape_string(b.shape()));
  return linear(a, b);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) fail(ErrorKind::Dimension, "linear: weight must be rank 2");
  const std::size_t in = weight.dim(0), out_w = weight.dim(1);
  if (x.rank() == 0 || x.shape().back() != in)
    fail(ErrorKind::Dimension, "linear: input " + shape_string(x.shape()) + " vs weight " +
                                   shape_string(weight.shape()));
  if (bias.defined() && bias.numel() != out_w)
    fail(ErrorKind::Dimension, "linear: bias width mismatch");
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_w;
  Buffer out(rows * out_w);
  MutMap y(out.data(), rows, out_w);
  y.noalias() = ConstMap(x.data().data(), rows, in) * ConstMap(weight.data().data(), in, out_w);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < out_w; ++c) out[r * out_w + c] += bias.data()[c];
  }
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result(std::move(shape), std::move(out), std::move(parents),
                     [rows, in, out_w](detail::Node& self) {
                       ConstMap gy(self.grad.data(), rows, out_w);
                       auto& px = parent(self, 0);
                       auto& pw = parent(self, 1);
                       if (px.requires_grad) {
                         MutMap gx(px.grad_buffer().data(), rows, in);
                         gx.noalias() += gy * ConstMap(pw.value.data(), in, out_w).transpose();
                       }
                       if (pw.requires_grad) {
                         MutMap gw(pw.grad_buffer().data(), in, out_w);
                         gw.noalias() += ConstMap(px.value.data(), rows, in).transpose() * gy;
                       }
                       if (self.parents.size() > 2 && parent(self, 2).requires_grad) {
                         auto gb = parent(self, 2).grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < out_w; ++c) gb[c] += gy(r, c);
                       }
                     });
}

// ---------------------------------------------------------------- nonlinear

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Tensor softplus(const Tensor& x) {
  require_finite(x.data(), "softplus");
  return unary(
      x, [](double v) { return v > 30.0 ? v : (v < -30.0 ? std::exp(v) : std::log1p(std::exp(v))); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor sigmoid(const Tensor& x) {
  require_finite(x.data(), "sigmoid");
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + k * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
      });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor layer_norm(const Tensor& x, double eps, const Tensor& gamma, const Tensor& beta) {
  expect(eps > 0, ErrorKind::Config, "layer_norm: eps must be positive");
  require_finite(x.data(), "layer_norm");
  const std::size_t width = x.shape().back();
  if ((gamma.defined() && gamma.numel() != width) || (beta.defined() && beta.numel() != width))
    fail(ErrorKind::Dimension, "layer_norm: affine width mismatch");
  const std::size_t rows = x.numel() / width;
  Buffer out(x.numel());
  Buffer xhat(x.numel());
  std::vector<double> inv_std(rows);
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * width;
    double mu = 0;
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= static_cast<double>(width);
    double var = 0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (row[j] - mu) * inv_std[r];
      xhat[r * width + j] = h;
      double y = h;
      if (gamma.defined()) y *= gamma.data()[j];
      if (beta.defined()) y += beta.data()[j];
      out[r * width + j] = y;
    }
  }
  std::vector<Tensor> parents{x};
  const bool has_gamma = gamma.defined(), has_beta = beta.defined();
  if (has_gamma) parents.push_back(gamma);
  if (has_beta) parents.push_back(beta);
  return make_result(
      x.shape(), std::move(out), std::move(parents),
      [rows, width, has_gamma, has_beta, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = parent(self, 0);
        detail::Node* pg = has_gamma ? &parent(self, 1) : nullptr;
        detail::Node* pb = has_beta ? &parent(self, has_gamma ? 2 : 1) : nullptr;
        std::vector<double> gh(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gy = self.grad.data() + r * width;
          const double* h = xhat.data() + r * width;
          if (pg && pg->requires_grad) {
            auto g = pg->grad_buffer();
            for (std::size_t j = 0; j < width; ++j) g[j] += gy[j] * h[j];
          }
          if (pb && pb->requires_grad) {
            auto g = pb->grad_buffer();
            for (std::size_t j = 0; j < width; ++j) g[j] += gy[j];
          }
          if (!px.requires_grad) continue;
          double mean_g = 0, mean_gh = 0;
          for (std::size_t j = 0; j < width; ++j) {
            gh[j] = gy[j] * (pg ? pg->value[j] : 1.0);
            mean_g += gh[j];
            mean_gh += gh[j] * h[j];
          }
          mean_g /= static_cast<double>(width);
          mean_gh /= static_cast<double>(width);
          auto g = px.grad_buffer();
          for (std::size_t j = 0; j < width; ++j)
            g[r * width + j] += inv_std[r] * (gh[j] - mean_g - h[j] * mean_gh);
        }
      });
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, ConvPadding padding, const Tensor& bias) {
  if (x.rank() != 3 || kernel.rank() != 2 || kernel.dim(0) != x.dim(2))
    fail(ErrorKind::Dimension, "conv1d: expects x[B,L,C] and kernel[C,K], got " +
                                   shape_string(x.shape()) + " and " +
                                   shape_string(kernel.shape()));
  if (bias.defined() && bias.numel() != x.dim(2))
    fail(ErrorKind::Dimension, "conv1d: bias width mismatch");
  require_finite(x.data(), "conv1d");
  const std::size_t batch = x.dim(0), len = x.dim(1), ch = x.dim(2), k = kernel.dim(1);
  const std::ptrdiff_t pad_left =
      padding == ConvPadding::Causal ? static_cast<std::ptrdiff_t>(k) - 1
                                     : (static_cast<std::ptrdiff_t>(k) - 1) / 2;
  Buffer out(x.numel(), 0.0);
  auto in = x.data();
  auto w = kernel.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < len; ++l) {
      double* y = out.data() + (b * len + l) * ch;
      if (bias.defined())
        for (std::size_t c = 0; c < ch; ++c) y[c] = bias.data()[c];
      for (std::size_t t = 0; t < k; ++t) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l) - pad_left + static_cast<std::ptrdiff_t>(t);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        const double* xs = in.data() + (b * len + static_cast<std::size_t>(src)) * ch;
        for (std::size_t c = 0; c < ch; ++c) y[c] += w[c * k + t] * xs[c];
      }
    }
  std::vector<Tensor> parents{x, kernel};
  if (bias.defined()) parents.push_back(bias);
  return make_result(
      x.shape(), std::move(out), std::move(parents),
      [batch, len, ch, k, pad_left](detail::Node& self) {
        auto& px = parent(self, 0);
        auto& pk = parent(self, 1);
        std::span<double> gx, gk;
        if (px.requires_grad) gx = px.grad_buffer();
        if (pk.requires_grad) gk = pk.grad_buffer();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t l = 0; l < len; ++l) {
            const double* gy = self.grad.data() + (b * len + l) * ch;
            for (std::size_t t = 0; t < k; ++t) {
              const std::ptrdiff_t src =
                  static_cast<std::ptrdiff_t>(l) - pad_left + static_cast<std::ptrdiff_t>(t);
              if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
              const std::size_t base = (b * len + static_cast<std::size_t>(src)) * ch;
              for (std::size_t c = 0; c < ch; ++c) {
                if (!gx.empty()) gx[base + c] += gy[c] * pk.value[c * k + t];
                if (!gk.empty()) gk[c * k + t] += gy[c] * px.value[base + c];
              }
            }
          }
        if (self.parents.size() > 2 && parent(self, 2).requires_grad) {
          auto gb = parent(self, 2).grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % ch] += self.grad[i];
        }
      });
}

Tensor softmax(const Tensor& x) {
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * width;
    const double m = *std::max_element(row, row + width);
    double z = 0;
    for (std::size_t j = 0; j < width; ++j) z += (out[r * width + j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] /= z;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, width](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto g = p.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0;
      for (std::size_t j = 0; j < width; ++j)
        dot += self.grad[r * width + j] * self.value[r * width + j];
      for (std::size_t j = 0; j < width; ++j)
        g[r * width + j] += self.value[r * width + j] * (self.grad[r * width + j] - dot);
    }
  });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.data()) s += v;
  return make_result({}, Buffer{s}, {x}, [](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    for (auto& g : p.grad_buffer()) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(std::max<std::size_t>(x.numel(), 1)));
}

Tensor mean_rows(const Tensor& x) {
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  Buffer out(width, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < width; ++j) out[j] += x.data()[r * width + j];
  for (auto& v : out) v /= static_cast<double>(rows);
  return make_result({width}, std::move(out), {x}, [rows, width](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i % width] / static_cast<double>(rows);
  });
}

Tensor mse(const Tensor& a, const Tensor& b, std::span<const double> weight) {
  check_same_shape(a, b, "mse");
  if (!weight.empty() && weight.size() != a.numel())
    fail(ErrorKind::Dimension, "mse: weight size mismatch");
  double total = 0, wsum = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double w = weight.empty() ? 1.0 : weight[i];
    if (w == 0.0) continue;
    const double d = a.data()[i] - b.data()[i];
    total += w * d * d;
    wsum += w;
  }
  const double norm = wsum > 0 ? wsum : 1.0;
  std::vector<double> w(weight.begin(), weight.end());
  return make_result({}, Buffer{total / norm}, {a, b}, [norm, w = std::move(w)](detail::Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    const double g0 = self.grad[0];
    for (std::size_t i = 0; i < pa.value.size(); ++i) {
      const double wi = w.empty() ? 1.0 : w[i];
      if (wi == 0.0) continue;
      const double d = 2.0 * wi * (pa.value[i] - pb.value[i]) / norm * g0;
      if (pa.requires_grad) pa.grad_buffer()[i] += d;
      if (pb.requires_grad) pb.grad_buffer()[i] -= d;
    }
  });
}

}  // namespace dema
