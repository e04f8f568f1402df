#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "icaps/rng.hpp"

namespace icaps {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tensor;

// Adjoint callback: given the node's output and incoming gradient, produce
// one gradient per parent (undefined Tensor for parents that need none).
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& out, const Tensor& grad_out)>;

struct Node {
  Shape shape;
  std::vector<float> value;
  bool requires_grad = false;
  std::shared_ptr<Node> grad;  // lazily allocated accumulator, same shape
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;  // empty for leaves and detached results
  uint64_t seq = 0;     // creation order; backward processes in reverse
  const char* op = "leaf";
};

// Value-semantics handle onto a shared autodiff node. Tensors are immutable
// after creation except for gradient accumulation and in-place parameter
// updates on leaves between steps.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, float v, bool requires_grad = false);
  static Tensor from_vector(Shape s, std::vector<float> v, bool requires_grad = false);
  static Tensor scalar(float v);
  static Tensor uniform(Shape s, Rng& rng, float lo, float hi, bool requires_grad = false);
  static Tensor normal(Shape s, Rng& rng, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }

  const float* data() const { return n_->value.data(); }
  const std::vector<float>& values() const { return n_->value; }
  // In-place mutation is reserved for leaves (parameter updates, test setup).
  float* mutable_data();

  float item() const;
  float at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool v);

  Tensor grad() const;  // undefined if no gradient accumulated
  void zero_grad();
  void accumulate_grad(const Tensor& g);

  Tensor detach() const;

  // Reverse-mode sweep from a scalar; accumulates into leaf .grad buffers.
  void backward() const;

  std::shared_ptr<Node> node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

// Gradients of `loss` w.r.t. `wrt` as tensors (leaf .grad is not touched).
// With create_graph the returned gradients are themselves differentiable.
std::vector<Tensor> grad_of(const Tensor& loss, const std::vector<Tensor>& wrt,
                            bool create_graph = false);

bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// --- elementwise, broadcasting over trailing dimensions ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float c);
Tensor mul_scalar(const Tensor& a, float c);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, float slope);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
// lo + relu(x-lo) - relu(x-hi): identity inside, flat outside.
Tensor clamp(const Tensor& a, float lo, float hi);

// --- linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // 2-D

// --- convolution family (cross-correlation convention, NCHW) ---
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int padding);
Tensor conv_transpose2d(const Tensor& x, const Tensor& kernel, int stride, int padding);
// dL/dkernel of conv2d given input x and output gradient g; also serves as
// the kernel adjoint of conv_transpose2d with arguments swapped.
Tensor conv2d_kernel_grad(const Tensor& x, const Tensor& g, int kh, int kw,
                          int stride, int padding);

// --- reductions and shape ---
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, int axis, bool keepdim = false);
Tensor softmax(const Tensor& a, int axis);
// L2 norm over the last axis; subgradient 0 at the origin.
Tensor l2norm_lastdim(const Tensor& a, bool keepdim = false);
Tensor reshape(const Tensor& a, Shape s);
Tensor broadcast_to(const Tensor& a, const Shape& s);
Tensor sum_to(const Tensor& a, const Shape& s);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor permute(const Tensor& a, const std::vector<int>& axes);

// --- gather/select (first-order adjoints) ---
Tensor select_index(const Tensor& a, const std::vector<int>& idx);  // [n,k] -> [n]
Tensor select_row(const Tensor& a, const std::vector<int>& idx);    // [n,k,L] -> [n,L]

// --- capsule-specific contractions (first-order adjoints) ---
// u: [n,N,d], W: [N,k,L,d] -> uhat [n,N,k,L], uhat[n,i,j,:] = W[i,j] . u[n,i,:]
Tensor caps_predict(const Tensor& u, const Tensor& w);
// uhat: [n,N,k,L], coupling (constant): [n,N,k] -> [n,k,L]
Tensor caps_weighted_sum(const Tensor& uhat, const Tensor& coupling);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

struct GradCheckReport {
  float max_rel_err = 0.0f;
  int coords_checked = 0;
  bool ok = false;
  std::string note;
};

// Central finite differences against the analytic gradient on up to
// `max_coords` random coordinates. Relative error uses a unit floor:
// |analytic - numeric| / max(1, |analytic|, |numeric|). NaN anywhere fails.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           float eps, float tol, int max_coords, Rng& rng);

}  // namespace icaps
