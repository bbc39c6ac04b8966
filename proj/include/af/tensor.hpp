#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "af/error.hpp"

namespace af {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Eigen::ArrayXd value;
  Eigen::ArrayXd grad;  // sized lazily by backward()
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates d(root)/d(parent) into each parent's grad given this->grad.
  std::function<void(Node&)> backward_fn;
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

// Dense float64 n-d array with an optional autodiff tape attachment.  Value
// semantics on the handle; the underlying node is shared.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);
  static Tensor from_array(Shape shape, Eigen::ArrayXd data);
  static Tensor from_vector(Shape shape, const std::vector<double>& data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return node_->value.size(); }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t axis) const { return node_->shape[static_cast<size_t>(axis)]; }

  const Eigen::ArrayXd& array() const { return node_->value; }
  Eigen::ArrayXd& mutable_array() { return node_->value; }  // leaves only
  double operator[](std::int64_t i) const { return node_->value[i]; }
  double scalar_value() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v);

  const Eigen::ArrayXd& grad() const;
  void zero_grad();

  // Detached copy sharing nothing with the tape.
  Tensor detach() const;
  Tensor clone_leaf() const { return detach(); }

  // Reverse pass from a scalar root.  Grads of every reachable node are
  // zeroed first, then accumulated, so repeated calls are bit-identical.
  void backward() const;

  const char* op_name() const { return node_->op; }
  detail::NodePtr node() const { return node_; }
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

 private:
  detail::NodePtr node_;
};

// ---- elementwise and structural ops -----------------------------------
// Binary ops broadcast right-aligned (numpy rules) via an explicit
// broadcast node, so gradients reduce correctly.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

// y = a * x + b with scalar coefficients.
Tensor affine(const Tensor& x, double a, double b);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::int64_t axis);
Tensor mean_axis(const Tensor& a, std::int64_t axis);
// Per-slice max along `axis`; returned tensor is detached by construction
// (used for max-shift tricks where the shift must be constant).
Tensor max_axis_detached(const Tensor& a, std::int64_t axis);

Tensor reshape(const Tensor& a, Shape shape);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor slice(const Tensor& a, std::int64_t axis, std::int64_t start, std::int64_t len);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
// Index-select along an axis (covers permutations and subsampling masks).
Tensor gather(const Tensor& a, std::int64_t axis, const std::vector<std::int64_t>& indices);
// Adjoint of gather: place slices at `indices` of an axis of length dim.
Tensor scatter(const Tensor& a, std::int64_t axis, const std::vector<std::int64_t>& indices,
               std::int64_t dim);

// ---- linear algebra (rank-2) -------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor matinv(const Tensor& a);
Tensor diag_embed(const Tensor& v);
Tensor diag_part(const Tensor& m);

// ---- imaging primitives -------------------------------------------------
// Circular 2-D convolution of [h,w] or [B,h,w] with an odd-sized kernel.
Tensor circconv2(const Tensor& x, const Tensor& kernel);
// Unitary 2-D FFT over trailing [2,h,w] channel-pair (real, imag);
// `inverse` applies the adjoint.  Own analytic backward rule.
Tensor fft2(const Tensor& x, bool inverse = false);

// ---- oracles -------------------------------------------------------------
// Max over coordinates of |analytic - central difference| / (|cd| + 1e-12).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                         double h);

// Operator sugar.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double s, const Tensor& a) { return affine(a, s, 0.0); }
inline Tensor operator*(const Tensor& a, double s) { return affine(a, s, 0.0); }
inline Tensor operator+(const Tensor& a, double s) { return affine(a, 1.0, s); }
inline Tensor operator-(const Tensor& a, double s) { return affine(a, 1.0, -s); }

}  // namespace af
