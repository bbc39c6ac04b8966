#include "af/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace af {

using detail::Node;
using detail::NodePtr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (auto d : shape)
    if (d <= 0) throw ConfigError("tensor shape must have positive dims, got " + shape_str(shape));
}

NodePtr make_leaf(Shape shape, Eigen::ArrayXd value) {
  check_shape(shape);
  if (value.size() != shape_size(shape))
    throw ConfigError("tensor data length " + std::to_string(value.size()) +
                      " does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

// Central op constructor: records parents and the backward rule only when a
// parent carries gradient, and rejects non-finite results at the source.
Tensor make_op(const char* op, Shape shape, Eigen::ArrayXd value,
               std::vector<NodePtr> parents, std::function<void(Node&)> backward_fn) {
  if (!value.allFinite())
    throw NumericError(std::string("non-finite result in op '") + op + "'");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  for (const auto& p : parents)
    if (p->requires_grad) needs = true;
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(n);
}

void accumulate(Node& parent, const Eigen::ArrayXd& g) {
  if (!parent.requires_grad) return;
  parent.grad += g;
}

// (outer, dim, inner) decomposition of a row-major tensor around one axis.
struct AxisSplit {
  std::int64_t outer, dim, inner;
};

AxisSplit split_axis(const Shape& shape, std::int64_t axis) {
  if (axis < 0 || axis >= static_cast<std::int64_t>(shape.size()))
    throw UsageError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSplit s{1, shape[static_cast<size_t>(axis)], 1};
  for (std::int64_t i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  const size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    std::int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    std::int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw ConfigError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                        " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor binary_op(const char* op, const Tensor& a, const Tensor& b,
                 const std::function<Eigen::ArrayXd(const Eigen::ArrayXd&, const Eigen::ArrayXd&)>& fwd,
                 const std::function<void(Node&, const NodePtr&, const NodePtr&)>& bwd) {
  if (a.shape() != b.shape()) {
    Shape target = broadcast_shapes(op, a.shape(), b.shape());
    return binary_op(op, broadcast_to(a, target), broadcast_to(b, target), fwd, bwd);
  }
  NodePtr pa = a.node(), pb = b.node();
  return make_op(op, a.shape(), fwd(pa->value, pb->value), {pa, pb},
                 [pa, pb, bwd](Node& self) { bwd(self, pa, pb); });
}

}  // namespace

// ---- Tensor basics --------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  check_shape(shape);
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(shape_size(shape));
  return Tensor(make_leaf(std::move(shape), std::move(v)));
}

Tensor Tensor::full(Shape shape, double x) {
  check_shape(shape);
  Eigen::ArrayXd v = Eigen::ArrayXd::Constant(shape_size(shape), x);
  return Tensor(make_leaf(std::move(shape), std::move(v)));
}

Tensor Tensor::scalar(double x) {
  Eigen::ArrayXd v(1);
  v[0] = x;
  return Tensor(make_leaf(Shape{}, std::move(v)));
}

Tensor Tensor::from_array(Shape shape, Eigen::ArrayXd data) {
  return Tensor(make_leaf(std::move(shape), std::move(data)));
}

Tensor Tensor::from_vector(Shape shape, const std::vector<double>& data) {
  Eigen::ArrayXd v = Eigen::Map<const Eigen::ArrayXd>(data.data(), static_cast<Eigen::Index>(data.size()));
  return Tensor(make_leaf(std::move(shape), std::move(v)));
}

double Tensor::scalar_value() const {
  if (size() != 1) throw UsageError("scalar_value() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
  if (!node_->parents.empty())
    throw UsageError("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = v;
  if (v && node_->grad.size() != node_->value.size())
    node_->grad = Eigen::ArrayXd::Zero(node_->value.size());
  return *this;
}

const Eigen::ArrayXd& Tensor::grad() const {
  if (!node_->requires_grad) throw UsageError("grad() on tensor without requires_grad");
  if (node_->grad.size() != node_->value.size()) {
    node_->grad = Eigen::ArrayXd::Zero(node_->value.size());
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad = Eigen::ArrayXd::Zero(node_->value.size());
}

Tensor Tensor::detach() const {
  return Tensor(make_leaf(node_->shape, node_->value));
}

void Tensor::backward() const {
  if (size() != 1) throw UsageError("backward() requires a scalar root, got " + shape_str(shape()));
  // Deterministic post-order over parents.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad = Eigen::ArrayXd::Zero(n->value.size());
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](const auto& x, const auto& y) { return Eigen::ArrayXd(x + y); },
      [](Node& self, const NodePtr& pa, const NodePtr& pb) {
        accumulate(*pa, self.grad);
        accumulate(*pb, self.grad);
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](const auto& x, const auto& y) { return Eigen::ArrayXd(x - y); },
      [](Node& self, const NodePtr& pa, const NodePtr& pb) {
        accumulate(*pa, self.grad);
        accumulate(*pb, Eigen::ArrayXd(-self.grad));
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](const auto& x, const auto& y) { return Eigen::ArrayXd(x * y); },
      [](Node& self, const NodePtr& pa, const NodePtr& pb) {
        accumulate(*pa, Eigen::ArrayXd(self.grad * pb->value));
        accumulate(*pb, Eigen::ArrayXd(self.grad * pa->value));
      });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](const auto& x, const auto& y) { return Eigen::ArrayXd(x / y); },
      [](Node& self, const NodePtr& pa, const NodePtr& pb) {
        accumulate(*pa, Eigen::ArrayXd(self.grad / pb->value));
        accumulate(*pb, Eigen::ArrayXd(-self.grad * pa->value / (pb->value * pb->value)));
      });
}

Tensor neg(const Tensor& a) { return affine(a, -1.0, 0.0); }

Tensor affine(const Tensor& x, double a, double b) {
  NodePtr p = x.node();
  return make_op("affine", x.shape(), Eigen::ArrayXd(p->value * a + b), {p},
                 [p, a](Node& self) { accumulate(*p, Eigen::ArrayXd(self.grad * a)); });
}

namespace {

Tensor unary_op(const char* op, const Tensor& x,
                Eigen::ArrayXd value,
                std::function<Eigen::ArrayXd(const Node&, const Node&)> dfn) {
  NodePtr p = x.node();
  return make_op(op, x.shape(), std::move(value), {p},
                 [p, dfn](Node& self) { accumulate(*p, dfn(self, *p)); });
}

}  // namespace

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, Eigen::ArrayXd(a.array().exp()),
                  [](const Node& self, const Node&) { return Eigen::ArrayXd(self.grad * self.value); });
}

Tensor log(const Tensor& a) {
  return unary_op("log", a, Eigen::ArrayXd(a.array().log()),
                  [](const Node& self, const Node& p) { return Eigen::ArrayXd(self.grad / p.value); });
}

Tensor tanh(const Tensor& a) {
  return unary_op("tanh", a, Eigen::ArrayXd(a.array().tanh()),
                  [](const Node& self, const Node&) {
                    return Eigen::ArrayXd(self.grad * (1.0 - self.value * self.value));
                  });
}

Tensor softplus(const Tensor& a) {
  // log(1 + e^x) evaluated stably from either side.
  Eigen::ArrayXd v = (a.array() > 0.0)
                         .select(a.array() + (-a.array()).exp().log1p(), a.array().exp().log1p());
  return unary_op("softplus", a, std::move(v), [](const Node& self, const Node& p) {
    return Eigen::ArrayXd(self.grad / (1.0 + (-p.value).exp()));
  });
}

Tensor abs(const Tensor& a) {
  return unary_op("abs", a, Eigen::ArrayXd(a.array().abs()),
                  [](const Node& self, const Node& p) {
                    return Eigen::ArrayXd(self.grad * p.value.sign());
                  });
}

Tensor sin(const Tensor& a) {
  return unary_op("sin", a, Eigen::ArrayXd(a.array().sin()),
                  [](const Node& self, const Node& p) { return Eigen::ArrayXd(self.grad * p.value.cos()); });
}

Tensor cos(const Tensor& a) {
  return unary_op("cos", a, Eigen::ArrayXd(a.array().cos()),
                  [](const Node& self, const Node& p) { return Eigen::ArrayXd(-self.grad * p.value.sin()); });
}

Tensor square(const Tensor& a) { return mul(a, a); }

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
  NodePtr p = a.node();
  Eigen::ArrayXd v(1);
  v[0] = p->value.sum();
  return make_op("sum", Shape{}, std::move(v), {p}, [p](Node& self) {
    accumulate(*p, Eigen::ArrayXd(Eigen::ArrayXd::Constant(p->value.size(), self.grad[0])));
  });
}

Tensor mean(const Tensor& a) { return affine(sum(a), 1.0 / static_cast<double>(a.size()), 0.0); }

Tensor sum_axis(const Tensor& a, std::int64_t axis) {
  AxisSplit s = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Eigen::ArrayXd v(s.outer * s.inner);
  const double* src = a.array().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    CMapMat block(src + o * s.dim * s.inner, s.dim, s.inner);
    Eigen::Map<Eigen::RowVectorXd>(v.data() + o * s.inner, s.inner) = block.colwise().sum();
  }
  NodePtr p = a.node();
  return make_op("sum_axis", std::move(out_shape), std::move(v), {p}, [p, s](Node& self) {
    if (!p->requires_grad) return;
    double* dst = p->grad.data();
    const double* g = self.grad.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      MapMat block(dst + o * s.dim * s.inner, s.dim, s.inner);
      block.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(g + o * s.inner, s.inner);
    }
  });
}

Tensor mean_axis(const Tensor& a, std::int64_t axis) {
  double d = static_cast<double>(a.shape()[static_cast<size_t>(axis)]);
  return affine(sum_axis(a, axis), 1.0 / d, 0.0);
}

Tensor max_axis_detached(const Tensor& a, std::int64_t axis) {
  AxisSplit s = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Eigen::ArrayXd v(s.outer * s.inner);
  const double* src = a.array().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    CMapMat block(src + o * s.dim * s.inner, s.dim, s.inner);
    Eigen::Map<Eigen::RowVectorXd>(v.data() + o * s.inner, s.inner) = block.colwise().maxCoeff();
  }
  return Tensor::from_array(std::move(out_shape), std::move(v));
}

// ---- structure --------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape(shape);
  if (shape_size(shape) != a.size())
    throw ConfigError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                      " changes element count");
  NodePtr p = a.node();
  return make_op("reshape", std::move(shape), p->value, {p},
                 [p](Node& self) { accumulate(*p, self.grad); });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  check_shape(shape);
  const Shape& as = a.shape();
  const size_t r = shape.size(), ra = as.size();
  if (ra > r)
    throw ConfigError("broadcast " + shape_str(as) + " -> " + shape_str(shape) + " drops rank");
  bool suffix = true;
  for (size_t i = 0; i < ra; ++i)
    if (as[i] != shape[r - ra + i]) suffix = false;

  NodePtr p = a.node();
  const std::int64_t n_out = shape_size(shape);

  if (suffix) {
    // Fast path: replicate a contiguous block.
    const std::int64_t inner = a.size();
    const std::int64_t outer = n_out / inner;
    Eigen::ArrayXd v(n_out);
    MapMat out(v.data(), outer, inner);
    out.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(p->value.data(), inner);
    return make_op("broadcast", shape, std::move(v), {p}, [p, outer, inner](Node& self) {
      if (!p->requires_grad) return;
      CMapMat g(self.grad.data(), outer, inner);
      Eigen::Map<Eigen::RowVectorXd>(p->grad.data(), inner) += g.colwise().sum();
    });
  }

  // General right-aligned broadcast with size-1 expansion.
  std::vector<std::int64_t> src_stride(r, 0);
  {
    std::vector<std::int64_t> as_stride(ra);
    std::int64_t acc = 1;
    for (size_t i = ra; i-- > 0;) {
      as_stride[i] = acc;
      acc *= as[i];
    }
    for (size_t i = 0; i < ra; ++i) {
      size_t oi = r - ra + i;
      if (as[i] == shape[oi]) src_stride[oi] = as_stride[i];
      else if (as[i] == 1) src_stride[oi] = 0;
      else
        throw ConfigError("broadcast " + shape_str(as) + " -> " + shape_str(shape) +
                          " incompatible");
    }
  }
  Eigen::ArrayXd v(n_out);
  std::vector<std::int64_t> idx(r, 0);
  std::vector<std::int64_t> src_of(static_cast<size_t>(n_out));
  for (std::int64_t flat = 0; flat < n_out; ++flat) {
    std::int64_t sidx = 0;
    for (size_t i = 0; i < r; ++i) sidx += idx[i] * src_stride[i];
    v[flat] = p->value[sidx];
    src_of[static_cast<size_t>(flat)] = sidx;
    for (size_t i = r; i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  return make_op("broadcast", shape, std::move(v), {p}, [p, src_of](Node& self) {
    if (!p->requires_grad) return;
    for (size_t flat = 0; flat < src_of.size(); ++flat)
      p->grad[src_of[flat]] += self.grad[static_cast<std::int64_t>(flat)];
  });
}

Tensor slice(const Tensor& a, std::int64_t axis, std::int64_t start, std::int64_t len) {
  AxisSplit s = split_axis(a.shape(), axis);
  if (start < 0 || len <= 0 || start + len > s.dim)
    throw ConfigError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                      ") out of range for axis of size " + std::to_string(s.dim));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  Eigen::ArrayXd v(s.outer * len * s.inner);
  const double* src = a.array().data();
  for (std::int64_t o = 0; o < s.outer; ++o)
    std::copy_n(src + (o * s.dim + start) * s.inner, len * s.inner, v.data() + o * len * s.inner);
  NodePtr p = a.node();
  return make_op("slice", std::move(out_shape), std::move(v), {p}, [p, s, start, len](Node& self) {
    if (!p->requires_grad) return;
    for (std::int64_t o = 0; o < s.outer; ++o)
      Eigen::Map<Eigen::ArrayXd>(p->grad.data() + (o * s.dim + start) * s.inner, len * s.inner) +=
          Eigen::Map<const Eigen::ArrayXd>(self.grad.data() + o * len * s.inner, len * s.inner);
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  for (size_t i = 1; i < parts.size(); ++i) {
    Shape si = parts[i].shape();
    if (si.size() != out_shape.size())
      throw ConfigError("concat rank mismatch");
    for (size_t d = 0; d < si.size(); ++d)
      if (d != static_cast<size_t>(axis) && si[d] != out_shape[d])
        throw ConfigError("concat shape mismatch at axis " + std::to_string(d));
    out_shape[static_cast<size_t>(axis)] += si[static_cast<size_t>(axis)];
  }
  AxisSplit so = split_axis(out_shape, axis);
  Eigen::ArrayXd v(shape_size(out_shape));
  std::vector<NodePtr> ps;
  std::vector<std::int64_t> dims;
  for (const auto& t : parts) {
    ps.push_back(t.node());
    dims.push_back(t.shape()[static_cast<size_t>(axis)]);
  }
  std::int64_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const double* src = ps[k]->value.data();
    for (std::int64_t o = 0; o < so.outer; ++o)
      std::copy_n(src + o * dims[k] * so.inner, dims[k] * so.inner,
                  v.data() + (o * so.dim + off) * so.inner);
    off += dims[k];
  }
  return make_op("concat", out_shape, std::move(v), ps, [ps, dims, so](Node& self) {
    std::int64_t off2 = 0;
    for (size_t k = 0; k < ps.size(); ++k) {
      if (ps[k]->requires_grad) {
        for (std::int64_t o = 0; o < so.outer; ++o)
          Eigen::Map<Eigen::ArrayXd>(ps[k]->grad.data() + o * dims[k] * so.inner,
                                     dims[k] * so.inner) +=
              Eigen::Map<const Eigen::ArrayXd>(self.grad.data() + (o * so.dim + off2) * so.inner,
                                               dims[k] * so.inner);
      }
      off2 += dims[k];
    }
  });
}

Tensor gather(const Tensor& a, std::int64_t axis, const std::vector<std::int64_t>& indices) {
  AxisSplit s = split_axis(a.shape(), axis);
  for (auto i : indices)
    if (i < 0 || i >= s.dim)
      throw ConfigError("gather index " + std::to_string(i) + " out of range [0," +
                        std::to_string(s.dim) + ")");
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = static_cast<std::int64_t>(indices.size());
  const std::int64_t m = static_cast<std::int64_t>(indices.size());
  Eigen::ArrayXd v(s.outer * m * s.inner);
  const double* src = a.array().data();
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t j = 0; j < m; ++j)
      std::copy_n(src + (o * s.dim + indices[static_cast<size_t>(j)]) * s.inner, s.inner,
                  v.data() + (o * m + j) * s.inner);
  NodePtr p = a.node();
  return make_op("gather", std::move(out_shape), std::move(v), {p}, [p, s, m, indices](Node& self) {
    if (!p->requires_grad) return;
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t j = 0; j < m; ++j)
        Eigen::Map<Eigen::ArrayXd>(
            p->grad.data() + (o * s.dim + indices[static_cast<size_t>(j)]) * s.inner, s.inner) +=
            Eigen::Map<const Eigen::ArrayXd>(self.grad.data() + (o * m + j) * s.inner, s.inner);
  });
}

Tensor scatter(const Tensor& a, std::int64_t axis, const std::vector<std::int64_t>& indices,
               std::int64_t dim) {
  AxisSplit s = split_axis(a.shape(), axis);
  if (s.dim != static_cast<std::int64_t>(indices.size()))
    throw ConfigError("scatter needs one index per input slice");
  for (auto i : indices)
    if (i < 0 || i >= dim) throw ConfigError("scatter index out of range");
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = dim;
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(s.outer * dim * s.inner);
  const double* src = a.array().data();
  const std::int64_t m = s.dim;
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t j = 0; j < m; ++j)
      Eigen::Map<Eigen::ArrayXd>(v.data() + (o * dim + indices[static_cast<size_t>(j)]) * s.inner,
                                 s.inner) +=
          Eigen::Map<const Eigen::ArrayXd>(src + (o * m + j) * s.inner, s.inner);
  NodePtr p = a.node();
  return make_op("scatter", std::move(out_shape), std::move(v), {p},
                 [p, s, m, dim, indices](Node& self) {
                   if (!p->requires_grad) return;
                   for (std::int64_t o = 0; o < s.outer; ++o)
                     for (std::int64_t j = 0; j < m; ++j)
                       Eigen::Map<Eigen::ArrayXd>(p->grad.data() + (o * m + j) * s.inner, s.inner) +=
                           Eigen::Map<const Eigen::ArrayXd>(
                               self.grad.data() +
                                   (o * dim + indices[static_cast<size_t>(j)]) * s.inner,
                               s.inner);
                 });
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ConfigError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ConfigError("matmul inner dims differ: " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  NodePtr pa = a.node(), pb = b.node();
  Eigen::ArrayXd v(m * n);
  MapMat(v.data(), m, n).noalias() =
      CMapMat(pa->value.data(), m, k) * CMapMat(pb->value.data(), k, n);
  return make_op("matmul", Shape{m, n}, std::move(v), {pa, pb}, [pa, pb, m, k, n](Node& self) {
    CMapMat g(self.grad.data(), m, n);
    if (pa->requires_grad)
      MapMat(pa->grad.data(), m, k).noalias() += g * CMapMat(pb->value.data(), k, n).transpose();
    if (pb->requires_grad)
      MapMat(pb->grad.data(), k, n).noalias() += CMapMat(pa->value.data(), m, k).transpose() * g;
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ConfigError("transpose expects rank-2");
  const std::int64_t m = a.dim(0), n = a.dim(1);
  NodePtr p = a.node();
  Eigen::ArrayXd v(m * n);
  MapMat(v.data(), n, m) = CMapMat(p->value.data(), m, n).transpose();
  return make_op("transpose", Shape{n, m}, std::move(v), {p}, [p, m, n](Node& self) {
    if (!p->requires_grad) return;
    MapMat(p->grad.data(), m, n) += CMapMat(self.grad.data(), n, m).transpose();
  });
}

Tensor matinv(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw ConfigError("matinv expects a square matrix");
  const std::int64_t n = a.dim(0);
  NodePtr p = a.node();
  Eigen::ArrayXd v(n * n);
  MapMat(v.data(), n, n) = CMapMat(p->value.data(), n, n).inverse();
  return make_op("matinv", a.shape(), std::move(v), {p}, [p, n](Node& self) {
    if (!p->requires_grad) return;
    CMapMat y(self.value.data(), n, n);
    CMapMat g(self.grad.data(), n, n);
    MapMat(p->grad.data(), n, n).noalias() -= y.transpose() * g * y.transpose();
  });
}

Tensor diag_embed(const Tensor& v) {
  if (v.rank() != 1) throw ConfigError("diag_embed expects rank-1");
  const std::int64_t n = v.dim(0);
  NodePtr p = v.node();
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(n * n);
  for (std::int64_t i = 0; i < n; ++i) out[i * n + i] = p->value[i];
  return make_op("diag_embed", Shape{n, n}, std::move(out), {p}, [p, n](Node& self) {
    if (!p->requires_grad) return;
    for (std::int64_t i = 0; i < n; ++i) p->grad[i] += self.grad[i * n + i];
  });
}

Tensor diag_part(const Tensor& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) throw ConfigError("diag_part expects square rank-2");
  const std::int64_t n = m.dim(0);
  NodePtr p = m.node();
  Eigen::ArrayXd out(n);
  for (std::int64_t i = 0; i < n; ++i) out[i] = p->value[i * n + i];
  return make_op("diag_part", Shape{n}, std::move(out), {p}, [p, n](Node& self) {
    if (!p->requires_grad) return;
    for (std::int64_t i = 0; i < n; ++i) p->grad[i * n + i] += self.grad[i];
  });
}

// ---- imaging primitives -------------------------------------------------------

namespace {

struct ImageDims {
  std::int64_t batch, h, w;
};

ImageDims image_dims(const Tensor& x, const char* op) {
  if (x.rank() == 2) return {1, x.dim(0), x.dim(1)};
  if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2)};
  throw ConfigError(std::string(op) + " expects [h,w] or [B,h,w], got " + shape_str(x.shape()));
}

inline std::int64_t wrap(std::int64_t i, std::int64_t n) {
  i %= n;
  return i < 0 ? i + n : i;
}

}  // namespace

Tensor circconv2(const Tensor& x, const Tensor& kernel) {
  if (kernel.rank() != 2) throw ConfigError("circconv2 kernel must be rank-2");
  const std::int64_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("circconv2 kernel dims must be odd");
  ImageDims d = image_dims(x, "circconv2");
  const std::int64_t ch = kh / 2, cw = kw / 2;
  NodePtr px = x.node(), pk = kernel.node();
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(d.batch * d.h * d.w);
  const double* xd = px->value.data();
  const double* kd = pk->value.data();
  for (std::int64_t b = 0; b < d.batch; ++b) {
    const double* xi = xd + b * d.h * d.w;
    double* yo = v.data() + b * d.h * d.w;
    for (std::int64_t i = 0; i < d.h; ++i)
      for (std::int64_t j = 0; j < d.w; ++j) {
        double acc = 0.0;
        for (std::int64_t u = 0; u < kh; ++u) {
          const std::int64_t ii = wrap(i - (u - ch), d.h);
          for (std::int64_t vv = 0; vv < kw; ++vv)
            acc += kd[u * kw + vv] * xi[ii * d.w + wrap(j - (vv - cw), d.w)];
        }
        yo[i * d.w + j] = acc;
      }
  }
  return make_op("circconv2", x.shape(), std::move(v), {px, pk}, [px, pk, d, kh, kw, ch, cw](Node& self) {
    const double* g = self.grad.data();
    const double* kd2 = pk->value.data();
    const double* xd2 = px->value.data();
    for (std::int64_t b = 0; b < d.batch; ++b) {
      const double* gb = g + b * d.h * d.w;
      if (px->requires_grad) {
        double* gx = px->grad.data() + b * d.h * d.w;
        for (std::int64_t i = 0; i < d.h; ++i)
          for (std::int64_t j = 0; j < d.w; ++j) {
            double acc = 0.0;
            for (std::int64_t u = 0; u < kh; ++u) {
              const std::int64_t ii = wrap(i + (u - ch), d.h);
              for (std::int64_t vv = 0; vv < kw; ++vv)
                acc += kd2[u * kw + vv] * gb[ii * d.w + wrap(j + (vv - cw), d.w)];
            }
            gx[i * d.w + j] += acc;
          }
      }
      if (pk->requires_grad) {
        const double* xb = xd2 + b * d.h * d.w;
        for (std::int64_t u = 0; u < kh; ++u)
          for (std::int64_t vv = 0; vv < kw; ++vv) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < d.h; ++i)
              for (std::int64_t j = 0; j < d.w; ++j)
                acc += gb[i * d.w + j] * xb[wrap(i - (u - ch), d.h) * d.w + wrap(j - (vv - cw), d.w)];
            pk->grad[u * kw + vv] += acc;
          }
      }
    }
  });
}

namespace {

// Unitary DFT along one axis of an interleaved (re, im) plane pair.
// Direct O(n^2); desk-scale images keep n small.
void dft_axis(const double* re_in, const double* im_in, double* re_out, double* im_out,
              std::int64_t rows, std::int64_t cols, bool along_cols, bool inverse) {
  const std::int64_t n = along_cols ? cols : rows;
  const std::int64_t m = along_cols ? rows : cols;
  const double sgn = inverse ? 1.0 : -1.0;
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  std::vector<double> c(static_cast<size_t>(n) * n), s(static_cast<size_t>(n) * n);
  for (std::int64_t k = 0; k < n; ++k)
    for (std::int64_t t = 0; t < n; ++t) {
      double ang = sgn * 2.0 * M_PI * static_cast<double>(k * t % n) / static_cast<double>(n);
      c[static_cast<size_t>(k * n + t)] = std::cos(ang);
      s[static_cast<size_t>(k * n + t)] = std::sin(ang);
    }
  for (std::int64_t line = 0; line < m; ++line) {
    for (std::int64_t k = 0; k < n; ++k) {
      double ar = 0.0, ai = 0.0;
      for (std::int64_t t = 0; t < n; ++t) {
        std::int64_t idx = along_cols ? line * cols + t : t * cols + line;
        const double cr = c[static_cast<size_t>(k * n + t)], ci = s[static_cast<size_t>(k * n + t)];
        ar += re_in[idx] * cr - im_in[idx] * ci;
        ai += re_in[idx] * ci + im_in[idx] * cr;
      }
      std::int64_t odx = along_cols ? line * cols + k : k * cols + line;
      re_out[odx] = ar * scale;
      im_out[odx] = ai * scale;
    }
  }
}

void fft2_plane(const double* re_in, const double* im_in, double* re_out, double* im_out,
                std::int64_t h, std::int64_t w, bool inverse) {
  std::vector<double> tr(static_cast<size_t>(h * w)), ti(static_cast<size_t>(h * w));
  dft_axis(re_in, im_in, tr.data(), ti.data(), h, w, /*along_cols=*/true, inverse);
  dft_axis(tr.data(), ti.data(), re_out, im_out, h, w, /*along_cols=*/false, inverse);
}

}  // namespace

Tensor fft2(const Tensor& x, bool inverse) {
  const auto& sh = x.shape();
  if (sh.size() < 3 || sh[sh.size() - 3] != 2)
    throw ConfigError("fft2 expects trailing dims [2,h,w], got " + shape_str(sh));
  const std::int64_t w = sh[sh.size() - 1], h = sh[sh.size() - 2];
  const std::int64_t plane = h * w;
  const std::int64_t batch = x.size() / (2 * plane);
  NodePtr p = x.node();
  Eigen::ArrayXd v(x.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    const double* re = p->value.data() + b * 2 * plane;
    fft2_plane(re, re + plane, v.data() + b * 2 * plane, v.data() + b * 2 * plane + plane, h, w,
               inverse);
  }
  const char* op = inverse ? "ifft2" : "fft2";
  return make_op(op, sh, std::move(v), {p}, [p, batch, plane, h, w, inverse](Node& self) {
    if (!p->requires_grad) return;
    // Adjoint of a unitary transform is its inverse.
    Eigen::ArrayXd g(self.grad.size());
    for (std::int64_t b = 0; b < batch; ++b) {
      const double* re = self.grad.data() + b * 2 * plane;
      fft2_plane(re, re + plane, g.data() + b * 2 * plane, g.data() + b * 2 * plane + plane, h, w,
                 !inverse);
    }
    p->grad += g;
  });
}

// ---- finite differences ----------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                         double h) {
  if (h <= 0) throw UsageError("finite_diff_check requires h > 0");
  Tensor x = point.detach();
  x.set_requires_grad(true);
  Tensor y = fn(x);
  if (y.size() != 1) throw UsageError("finite_diff_check needs a scalar-valued function");
  y.backward();
  Eigen::ArrayXd analytic = x.grad();

  double max_rel = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Tensor xp = point.detach();
    xp.mutable_array()[i] += h;
    Tensor xm = point.detach();
    xm.mutable_array()[i] -= h;
    double fd = (fn(xp).scalar_value() - fn(xm).scalar_value()) / (2.0 * h);
    double rel = std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-12);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace af
