#include "cmrc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace cmrc {

namespace {

thread_local bool t_grad_enabled = true;

std::size_t product(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension in " + shape_str(shape));
  }
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a) {
  throw std::invalid_argument(std::string(op) + ": unsupported shape " + shape_str(a));
}

using NodePtr = std::shared_ptr<Tensor::Node>;

// Builds the output node; the backward closure is attached only when recording.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<NodePtr> inputs, std::function<void(Tensor::Node&)> backward_fn) {
  auto node = std::make_shared<Tensor::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool record = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) {
      if (in->requires_grad) {
        record = true;
        break;
      }
    }
  }
  if (record) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

bool is_matrix(const Tensor& t) { return t.dim() == 2; }

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() noexcept { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  std::vector<double> values(product(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (product(shape) != values.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape shape{values.size()};
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  if (dim() != 2) shape_error("rows", shape());
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (dim() != 2) shape_error("cols", shape());
  return shape()[1];
}

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

std::vector<double> Tensor::to_vector() const { return node_->value; }

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }
bool Tensor::has_grad() const { return node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  if (!has_grad()) node_->grad.assign(node_->value.size(), 0.0);
}

bool Tensor::all_finite() const {
  return std::all_of(node_->value.begin(), node_->value.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }
Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->value, requires_grad); }

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw std::invalid_argument("backward: root must be a scalar, got " +
                                (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<Tensor::Node*> order;
  std::unordered_set<Tensor::Node*> visited;
  std::vector<std::pair<Tensor::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Tensor::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Tensor::Node* node : order) {
    if (node->backward) node->grad.assign(node->value.size(), 0.0);
  }
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor::Node* node = *it;
    if (node->backward) {
      node->backward(*node);
      // Interior buffers are single-use.
      std::vector<double>().swap(node->grad);
    }
  }
}

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_result("add", a.shape(), std::move(out), {a.node(), b.node()}, [an = a.node(), bn = b.node()](Tensor::Node& o) {
      if (an->requires_grad) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      }
    });
  }
  if (is_matrix(a) && b.dim() == 1 && b.numel() == a.cols()) {
    const std::size_t n = a.rows(), c = a.cols();
    std::vector<double> out(a.numel());
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c; ++j) out[r * c + j] = av[r * c + j] + bv[j];
    return make_result("add_bias", a.shape(), std::move(out), {a.node(), b.node()},
                       [an = a.node(), bn = b.node(), n, c](Tensor::Node& o) {
                         if (an->requires_grad) {
                           auto& g = an->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                         }
                         if (bn->requires_grad) {
                           auto& g = bn->grad_buffer();
                           for (std::size_t r = 0; r < n; ++r)
                             for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[r * c + j];
                         }
                       });
  }
  shape_error("add", a.shape(), b.shape());
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result("sub", a.shape(), std::move(out), {a.node(), b.node()}, [an = a.node(), bn = b.node()](Tensor::Node& o) {
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
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result("mul", a.shape(), std::move(out), {a.node(), b.node()}, [an = a.node(), bn = b.node()](Tensor::Node& o) {
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->value[i];
    }
  });
}

Tensor affine(const Tensor& a, double scale_by, double shift) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale_by * av[i] + shift;
  return make_result("affine", a.shape(), std::move(out), {a.node()}, [an = a.node(), scale_by](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale_by * o.grad[i];
  });
}

Tensor scale(const Tensor& a, double s) { return affine(a, s, 0.0); }
Tensor neg(const Tensor& a) { return affine(a, -1.0, 0.0); }

Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
  return make_result("square", a.shape(), std::move(out), {a.node()}, [an = a.node()](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * an->value[i] * o.grad[i];
  });
}

Tensor squared_difference(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("squared_difference", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = av[i] - bv[i];
    out[i] = d * d;
  }
  return make_result("squared_difference", a.shape(), std::move(out), {a.node(), b.node()},
                     [an = a.node(), bn = b.node()](Tensor::Node& o) {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) {
                         const double d = 2.0 * (an->value[i] - bn->value[i]) * o.grad[i];
                         if (an->requires_grad) an->grad_buffer()[i] += d;
                         if (bn->requires_grad) bn->grad_buffer()[i] -= d;
                       }
                     });
}

// ---------------------------------------------------------------------------
// products

namespace {

// out[n,m] += a[n,k] * b[k,m]
void gemm_nn(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[n,m] += a[n,k] * b[m,k]^T
void gemm_nt(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out[i * m + j] += s;
    }
  }
}

// out[k,m] += a[n,k]^T * b[n,m]
void gemm_tn(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* orow = out + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (!is_matrix(a) || !is_matrix(b) || a.cols() != b.rows()) shape_error("matmul", a.shape(), b.shape());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
  return make_result("matmul", {n, m}, std::move(out), {a.node(), b.node()},
                     [an = a.node(), bn = b.node(), n, k, m](Tensor::Node& o) {
                       if (an->requires_grad) gemm_nt(o.grad.data(), bn->value.data(), an->grad_buffer().data(), n, m, k);
                       if (bn->requires_grad) gemm_tn(an->value.data(), o.grad.data(), bn->grad_buffer().data(), n, k, m);
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (!is_matrix(a) || !is_matrix(b) || a.cols() != b.cols()) shape_error("matmul_nt", a.shape(), b.shape());
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  std::vector<double> out(n * m, 0.0);
  gemm_nt(a.data().data(), b.data().data(), out.data(), n, k, m);
  return make_result("matmul_nt", {n, m}, std::move(out), {a.node(), b.node()},
                     [an = a.node(), bn = b.node(), n, k, m](Tensor::Node& o) {
                       // dA = G B, dB = G^T A
                       if (an->requires_grad) gemm_nn(o.grad.data(), bn->value.data(), an->grad_buffer().data(), n, m, k);
                       if (bn->requires_grad) gemm_tn(o.grad.data(), an->value.data(), bn->grad_buffer().data(), n, m, k);
                     });
}

Tensor matvec(const Tensor& a, const Tensor& x) {
  if (!is_matrix(a) || x.dim() != 1 || a.cols() != x.numel()) shape_error("matvec", a.shape(), x.shape());
  const std::size_t n = a.rows(), k = a.cols();
  std::vector<double> out(n, 0.0);
  gemm_nt(a.data().data(), x.data().data(), out.data(), n, k, 1);
  return make_result("matvec", {n}, std::move(out), {a.node(), x.node()}, [an = a.node(), xn = x.node(), n, k](Tensor::Node& o) {
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) g[i * k + p] += o.grad[i] * xn->value[p];
    }
    if (xn->requires_grad) {
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) g[p] += o.grad[i] * an->value[i * k + p];
    }
  });
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
  }
  return make_result("gelu", a.shape(), std::move(out), {a.node()}, [an = a.node()](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = an->value[i];
      const double t = std::tanh(c * (x + k * x * x * x));
      const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      g[i] += o.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return make_result("sigmoid", a.shape(), std::move(out), {a.node()}, [an = a.node()](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.value[i] * (1.0 - o.value[i]);
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  return make_result("exp", a.shape(), std::move(out), {a.node()}, [an = a.node()](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.value[i];
  });
}

Tensor log(const Tensor& a, double floor) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(av[i], floor));
  return make_result("log", a.shape(), std::move(out), {a.node()}, [an = a.node(), floor](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (an->value[i] > floor) g[i] += o.grad[i] / an->value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// normalizations

Tensor softmax(const Tensor& a) {
  const std::size_t c = last_dim(a);
  const std::size_t n = a.numel() / c;
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = av.data() + r * c;
    double* y = out.data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  return make_result("softmax", a.shape(), std::move(out), {a.node()}, [an = a.node(), n, c](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = o.value.data() + r * c;
      const double* gy = o.grad.data() + r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t c = last_dim(a);
  const std::size_t n = a.numel() / c;
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = av.data() + r * c;
    double* y = out.data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) y[j] = x[j] - lse;
  }
  return make_result("log_softmax", a.shape(), std::move(out), {a.node()}, [an = a.node(), n, c](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = o.value.data() + r * c;
      const double* gy = o.grad.data() + r * c;
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += gy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += gy[j] - std::exp(y[j]) * total;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = last_dim(x);
  if (gamma.dim() != 1 || gamma.numel() != c) shape_error("layer_norm", x.shape(), gamma.shape());
  if (beta.dim() != 1 || beta.numel() != c) shape_error("layer_norm", x.shape(), beta.shape());
  const std::size_t n = x.numel() / c;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(n);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (xr[j] - mu) * inv_std[r];
      out[r * c + j] = xhat[r * c + j] * gv[j] + bv[j];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat), inv_std = std::move(inv_std), n,
       c](Tensor::Node& o) {
        if (gn->requires_grad) {
          auto& g = gn->grad_buffer();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[r * c + j] * xhat[r * c + j];
        }
        if (bn->requires_grad) {
          auto& g = bn->grad_buffer();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[r * c + j];
        }
        if (xn->requires_grad) {
          auto& g = xn->grad_buffer();
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t r = 0; r < n; ++r) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = o.grad[r * c + j] * gn->value[j];
              sum_d += d;
              sum_dx += d * xhat[r * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const double d = o.grad[r * c + j] * gn->value[j];
              g[r * c + j] += inv_std[r] * (d - inv_c * sum_d - xhat[r * c + j] * inv_c * sum_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// indexing and layout

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (!is_matrix(table) || ids.empty()) shape_error("embedding", table.shape(), Shape{ids.size()});
  const std::size_t vocab = table.rows(), h = table.cols();
  std::vector<double> out(ids.size() * h);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table " + shape_str(table.shape()));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * h, h, out.data() + i * h);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result("embedding", {ids.size(), h}, std::move(out), {table.node()},
                     [tn = table.node(), idx = std::move(idx), h](Tensor::Node& o) {
                       auto& g = tn->grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         double* dst = g.data() + static_cast<std::size_t>(idx[i]) * h;
                         const double* src = o.grad.data() + i * h;
                         for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
                       }
                     });
}

Tensor row(const Tensor& a, std::size_t r) {
  if (!is_matrix(a) || r >= a.rows()) shape_error("row", a.shape());
  const std::size_t c = a.cols();
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(r * c),
                          a.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
  return make_result("row", {c}, std::move(out), {a.node()}, [an = a.node(), r, c](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t j = 0; j < c; ++j) g[r * c + j] += o.grad[j];
  });
}

Tensor pick(const Tensor& a, std::size_t i) {
  if (i >= a.numel()) {
    throw std::out_of_range("pick: index " + std::to_string(i) + " outside " + shape_str(a.shape()));
  }
  return make_result("pick", {1}, {a.data()[i]}, {a.node()}, [an = a.node(), i](Tensor::Node& o) {
    an->grad_buffer()[i] += o.grad[0];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  if (!is_matrix(a) || count == 0 || begin + count > a.cols()) shape_error("slice_cols", a.shape());
  const std::size_t n = a.rows(), c = a.cols();
  std::vector<double> out(n * count);
  auto av = a.data();
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(av.data() + r * c + begin, count, out.data() + r * count);
  return make_result("slice_cols", {n, count}, std::move(out), {a.node()},
                     [an = a.node(), n, c, begin, count](Tensor::Node& o) {
                       auto& g = an->grad_buffer();
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t j = 0; j < count; ++j) g[r * c + begin + j] += o.grad[r * count + j];
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (!is_matrix(p) || p.rows() != n) shape_error("concat_cols", parts.front().shape(), p.shape());
    total += p.cols();
  }
  std::vector<double> out(n * total);
  std::vector<NodePtr> inputs;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    auto pv = p.data();
    for (std::size_t r = 0; r < n; ++r) std::copy_n(pv.data() + r * c, c, out.data() + r * total + offset);
    offset += c;
    inputs.push_back(p.node());
  }
  auto captured = inputs;
  return make_result("concat_cols", {n, total}, std::move(out), std::move(inputs),
                     [parts = std::move(captured), n, total](Tensor::Node& o) {
                       std::size_t off = 0;
                       for (const auto& p : parts) {
                         const std::size_t c = p->shape[1];
                         if (p->requires_grad) {
                           auto& g = p->grad_buffer();
                           for (std::size_t r = 0; r < n; ++r)
                             for (std::size_t j = 0; j < c; ++j) g[r * c + j] += o.grad[r * total + off + j];
                         }
                         off += c;
                       }
                     });
}

Tensor stack_rows(const std::vector<Tensor>& rows_in) {
  if (rows_in.empty()) throw std::invalid_argument("stack_rows: no inputs");
  const std::size_t c = rows_in.front().numel();
  std::vector<double> out;
  out.reserve(rows_in.size() * c);
  std::vector<NodePtr> inputs;
  for (const auto& r : rows_in) {
    if (r.dim() != 1 || r.numel() != c) shape_error("stack_rows", rows_in.front().shape(), r.shape());
    out.insert(out.end(), r.data().begin(), r.data().end());
    inputs.push_back(r.node());
  }
  auto captured = inputs;
  return make_result("stack_rows", {rows_in.size(), c}, std::move(out), std::move(inputs),
                     [parts = std::move(captured), c](Tensor::Node& o) {
                       for (std::size_t r = 0; r < parts.size(); ++r) {
                         if (!parts[r]->requires_grad) continue;
                         auto& g = parts[r]->grad_buffer();
                         for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[r * c + j];
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  validate_shape(shape);
  if (product(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  return make_result("reshape", std::move(shape), a.to_vector(), {a.node()}, [an = a.node()](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  auto av = a.data();
  const double s = std::accumulate(av.begin(), av.end(), 0.0);
  return make_result("sum", {1}, {s}, {a.node()}, [an = a.node()](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  auto av = a.data();
  const double inv = 1.0 / static_cast<double>(a.numel());
  const double s = std::accumulate(av.begin(), av.end(), 0.0) * inv;
  return make_result("mean", {1}, {s}, {a.node()}, [an = a.node(), inv](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (double& v : g) v += o.grad[0] * inv;
  });
}

Tensor mean_rows(const Tensor& a) {
  if (!is_matrix(a)) shape_error("mean_rows", a.shape());
  const std::size_t n = a.rows(), c = a.cols();
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<double> out(c, 0.0);
  auto av = a.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out[j] += av[r * c + j];
  for (double& v : out) v *= inv;
  return make_result("mean_rows", {c}, std::move(out), {a.node()}, [an = a.node(), n, c, inv](Tensor::Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += o.grad[j] * inv;
  });
}

Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: no inputs");
  const Shape& shape = terms.front().shape();
  std::vector<double> out(terms.front().numel(), 0.0);
  std::vector<NodePtr> inputs;
  for (const auto& t : terms) {
    if (t.shape() != shape) shape_error("add_n", shape, t.shape());
    auto tv = t.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += tv[i];
    inputs.push_back(t.node());
  }
  auto captured = inputs;
  return make_result("add_n", shape, std::move(out), std::move(inputs), [parts = std::move(captured)](Tensor::Node& o) {
    for (const auto& p : parts) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b) {
  if (!is_matrix(a) || !is_matrix(b) || a.cols() != b.cols()) shape_error("pairwise_sq_dist", a.shape(), b.shape());
  const std::size_t n = a.rows(), m = b.rows(), c = a.cols();
  std::vector<double> out(n * m);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double d = av[i * c + k] - bv[j * c + k];
        s += d * d;
      }
      out[i * m + j] = s;
    }
  return make_result("pairwise_sq_dist", {n, m}, std::move(out), {a.node(), b.node()},
                     [an = a.node(), bn = b.node(), n, m, c](Tensor::Node& o) {
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < m; ++j) {
                           const double go = 2.0 * o.grad[i * m + j];
                           for (std::size_t k = 0; k < c; ++k) {
                             const double d = go * (an->value[i * c + k] - bn->value[j * c + k]);
                             if (an->requires_grad) an->grad_buffer()[i * c + k] += d;
                             if (bn->requires_grad) bn->grad_buffer()[j * c + k] -= d;
                           }
                         }
                     });
}

}  // namespace ops
}  // namespace cmrc
