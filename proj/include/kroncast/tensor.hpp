#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace kroncast {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One node of the define-by-run tape. Ops create fresh nodes; leaves
// (parameters, constants) persist across passes. A node's backward_fn
// scatters its grad into the parents' grads.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Immutable dense tensor of doubles with reverse-mode autodiff.
//
// Values are row-major. Ops validate shapes and reject non-finite results
// (NaN/Inf surfaces as an error at the op that produced it, never silently
// downstream). The tape lives in the nodes themselves: each forward builds
// fresh interior nodes, backward() walks them once, and interior nodes are
// freed when the last Tensor handle drops. One logical execution context
// owns a given graph; parallel batch items must build separate graphs.
class Tensor {
 public:
  Tensor() = default;

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::int64_t dim(int axis) const { return n_->shape[static_cast<size_t>(axis)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(n_->value.size()); }
  const std::vector<double>& data() const { return n_->value; }

  double item() const;
  double at(const std::vector<std::int64_t>& index) const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool on);

  const std::vector<double>& grad() const;
  void zero_grad() { n_->ensure_grad(); std::fill(n_->grad.begin(), n_->grad.end(), 0.0); }

  // In-place value update; leaves only (optimizer steps, checkpoint load).
  std::vector<double>& leaf_data();

  std::shared_ptr<detail::Node> node() const { return n_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> n_;
};

// ---- factories ----
Tensor constant(Shape shape, std::vector<double> value);
Tensor constant_scalar(double value);
Tensor zeros(Shape shape);
Tensor full(Shape shape, double value);
Tensor parameter(Shape shape, std::vector<double> value);

// Generic op constructor for fused/custom ops defined outside this file.
// backward_fn receives the finished node (grad filled) and must accumulate
// into parents' grads. Parents that do not require grad may be skipped.
Tensor make_op(const char* name, Shape out_shape, std::vector<double> out_value,
               std::vector<Tensor> parents, std::function<void(detail::Node&)> backward_fn);

// ---- elementwise (suffix broadcasting: rhs shape may equal a trailing
//      suffix of lhs shape, or be a single element) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);          // zero divisor -> domain error
Tensor divide_guarded(const Tensor& a, const Tensor& b, double eps);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);                              // non-positive -> domain error
Tensor log_guarded(const Tensor& x, double eps);          // log(x + eps)
Tensor log1p(const Tensor& x);                            // safe for x >= 0
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor power(const Tensor& x, double exponent);

Tensor softmax_lastdim(const Tensor& x);

// ---- reductions ----
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean_axis(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- structure ----
Tensor matmul(const Tensor& a, const Tensor& b);          // 2-D x 2-D
Tensor transpose(const Tensor& x);                        // 2-D
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len);
Tensor stop_grad(const Tensor& x);

// ---- normalization ----
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-8);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-8);

// Dispatch by tag; covers the documented op vocabulary. Axis ops read the
// axis from `axis`; power reads `scalar`; slice reads (axis, start, len);
// reshape reads `shape_arg`.
Tensor forward_op(const std::string& op_name, const std::vector<Tensor>& inputs,
                  int axis = -1, double scalar = 0.0, Shape shape_arg = {},
                  std::int64_t start = 0, std::int64_t len = -1);

// ---- autodiff ----
// loss must be scalar; fills .grad() on every requires_grad node reachable
// through the tape. Grads accumulate; call zero_grad on params first.
void backward(const Tensor& loss);

// backward + explicit parameter audit: parameters not reachable from the
// loss keep a zero gradient and are reported by name in `warnings`.
void backward(const Tensor& loss, const std::vector<std::pair<std::string, Tensor>>& params,
              std::vector<std::string>* warnings);

// Central-difference gradient audit. f must be deterministic (it is invoked
// repeatedly); a non-deterministic f is detected and rejected. Returns
// max over all parameter elements of
//   |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double h = 1e-5);

}  // namespace kroncast
