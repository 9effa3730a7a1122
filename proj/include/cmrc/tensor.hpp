#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cmrc {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

// Dense row-major float64 array that can take part in a define-by-run
// gradient graph. Copies share storage; use detach()/clone() for a new buffer.
class Tensor {
 public:
  struct Node;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;  // 2-D only
  std::size_t cols() const;  // 2-D only

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates zeros when absent
  void zero_grad();

  bool all_finite() const;

  // Leaf copy of the values, outside any graph.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

struct Tensor::Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

// Graph recording is on by default; this disables it for the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

// Reverse pass from a one-element root. Gradients accumulate into leaves;
// call zero_grad() on parameters between passes.
void backward(const Tensor& root);

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);  // b may be a row vector broadcast over a 2-D a
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& a, double scale, double shift);  // scale*a + shift
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor squared_difference(const Tensor& a, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);     // [n,k] x [k,m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [n,k] x [m,k]^T
Tensor matvec(const Tensor& a, const Tensor& x);     // [n,k] x [k]

// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
// log(max(a, floor)); zero gradient where the floor is active.
Tensor log(const Tensor& a, double floor = 1e-12);

// Normalizations over the last axis.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor row(const Tensor& a, std::size_t r);
Tensor pick(const Tensor& a, std::size_t i);  // one element as a scalar
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor stack_rows(const std::vector<Tensor>& rows);
Tensor reshape(const Tensor& a, Shape shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // [n,c] -> [c]
Tensor add_n(const std::vector<Tensor>& terms);  // same-shape sum
Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b);  // [n,c],[m,c] -> [n,m]

}  // namespace ops

}  // namespace cmrc
