#include "kroncast/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace kroncast {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

namespace {

using detail::Node;

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::domain_error(std::string("op '") + op + "' produced a non-finite value");
    }
  }
}

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  if (numel(shape) != static_cast<std::int64_t>(value.size())) {
    throw std::invalid_argument("tensor value length does not match shape " + shape_str(shape));
  }
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

// rhs must be a single element or its shape a trailing suffix of lhs's;
// then rhs flat index = lhs flat index % rhs size (row-major).
void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (b.size() == 1) return;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(sa) + " vs " +
                                shape_str(sb));
  }
  for (size_t i = 0; i < sb.size(); ++i) {
    if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i]) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(sa) + " vs " +
                                  shape_str(sb) + " (rhs must be a trailing suffix or scalar)");
    }
  }
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

}  // namespace

double Tensor::item() const {
  require_defined(*this, "item");
  if (size() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(size()) + " elements");
  return n_->value[0];
}

double Tensor::at(const std::vector<std::int64_t>& index) const {
  require_defined(*this, "at");
  if (index.size() != n_->shape.size()) throw std::invalid_argument("at(): rank mismatch");
  std::int64_t flat = 0;
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= n_->shape[i]) throw std::out_of_range("at(): index out of range");
    flat = flat * n_->shape[i] + index[i];
  }
  return n_->value[static_cast<size_t>(flat)];
}

void Tensor::set_requires_grad(bool on) {
  require_defined(*this, "set_requires_grad");
  if (!n_->is_leaf) throw std::invalid_argument("set_requires_grad: only leaf tensors");
  n_->requires_grad = on;
}

const std::vector<double>& Tensor::grad() const {
  require_defined(*this, "grad");
  if (!n_->requires_grad) throw std::invalid_argument("grad(): tensor does not require grad");
  n_->ensure_grad();
  return n_->grad;
}

std::vector<double>& Tensor::leaf_data() {
  require_defined(*this, "leaf_data");
  if (!n_->is_leaf) throw std::invalid_argument("leaf_data: only leaf tensors");
  return n_->value;
}

Tensor constant(Shape shape, std::vector<double> value) {
  return Tensor(new_node(std::move(shape), std::move(value)));
}

Tensor constant_scalar(double value) { return constant({1}, {value}); }

Tensor zeros(Shape shape) {
  auto n = numel(shape);
  return constant(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor full(Shape shape, double value) {
  auto n = numel(shape);
  return constant(std::move(shape), std::vector<double>(static_cast<size_t>(n), value));
}

Tensor parameter(Shape shape, std::vector<double> value) {
  auto n = new_node(std::move(shape), std::move(value));
  n->requires_grad = true;
  return Tensor(n);
}

Tensor make_op(const char* name, Shape out_shape, std::vector<double> out_value,
               std::vector<Tensor> parents, std::function<void(detail::Node&)> backward_fn) {
  check_finite(out_value, name);
  auto n = new_node(std::move(out_shape), std::move(out_value));
  n->is_leaf = false;
  n->op = name;
  bool needs = false;
  for (const auto& p : parents) {
    if (p.defined() && p.node()->requires_grad) needs = true;
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(n);
}

// ---- elementwise ----

namespace {

template <typename F, typename DA, typename DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  require_defined(a, name);
  require_defined(b, name);
  check_broadcast(a, b, name);
  const auto& av = a.data();
  const auto& bv = b.data();
  const size_t bn = bv.size();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i % bn]);
  return make_op(name, a.shape(), std::move(out), {a, b}, [da, db](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const size_t bn2 = pb.value.size();
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) {
        pa.grad[i] += n.grad[i] * da(pa.value[i], pb.value[i % bn2], n.value[i]);
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) {
        pb.grad[i % bn2] += n.grad[i] * db(pa.value[i], pb.value[i % bn2], n.value[i]);
      }
    }
  });
}

template <typename F, typename D>
Tensor unary_op(const char* name, const Tensor& x, F f, D dfdx) {
  require_defined(x, name);
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_op(name, x.shape(), std::move(out), {x}, [dfdx](Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      p.grad[i] += n.grad[i] * dfdx(p.value[i], n.value[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op("add", a, b, [](double x, double y) { return x + y; },
                   [](double, double, double) { return 1.0; },
                   [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op("sub", a, b, [](double x, double y) { return x - y; },
                   [](double, double, double) { return 1.0; },
                   [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op("mul", a, b, [](double x, double y) { return x * y; },
                   [](double, double y, double) { return y; },
                   [](double x, double, double) { return x; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  for (double y : b.data()) {
    if (y == 0.0) throw std::domain_error("div: zero divisor (use divide_guarded)");
  }
  return binary_op("div", a, b, [](double x, double y) { return x / y; },
                   [](double, double y, double) { return 1.0 / y; },
                   [](double, double y, double out) { return -out / y; });
}

Tensor divide_guarded(const Tensor& a, const Tensor& b, double eps) {
  // guard assumes a nonnegative denominator (all current call sites)
  return binary_op("div_guarded", a, b, [eps](double x, double y) { return x / (y + eps); },
                   [eps](double, double y, double) { return 1.0 / (y + eps); },
                   [eps](double, double y, double out) { return -out / (y + eps); });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op("add_scalar", a, [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op("mul_scalar", a, [c](double x) { return x * c; },
                  [c](double, double) { return c; });
}

Tensor exp(const Tensor& x) {
  return unary_op("exp", x, [](double v) { return std::exp(v); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (v <= 0.0) throw std::domain_error("log: non-positive operand (use log_guarded)");
  }
  return unary_op("log", x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

Tensor log_guarded(const Tensor& x, double eps) {
  return unary_op("log_guarded", x, [eps](double v) { return std::log(v + eps); },
                  [eps](double v, double) { return 1.0 / (v + eps); });
}

Tensor log1p(const Tensor& x) {
  for (double v : x.data()) {
    if (v <= -1.0) throw std::domain_error("log1p: operand <= -1");
  }
  return unary_op("log1p", x, [](double v) { return std::log1p(v); },
                  [](double v, double) { return 1.0 / (1.0 + v); });
}

Tensor sigmoid(const Tensor& x) {
  auto sig = [](double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  };
  return unary_op("sigmoid", x, sig, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  auto sig = [](double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  };
  return unary_op("silu", x, [sig](double v) { return v * sig(v); },
                  [sig](double v, double) {
                    double s = sig(v);
                    return s + v * s * (1.0 - s);
                  });
}

Tensor abs(const Tensor& x) {
  return unary_op("abs", x, [](double v) { return std::fabs(v); },
                  [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor power(const Tensor& x, double exponent) {
  if (exponent != std::floor(exponent)) {
    for (double v : x.data()) {
      if (v < 0.0) throw std::domain_error("power: negative base with fractional exponent");
    }
  }
  return unary_op("power", x, [exponent](double v) { return std::pow(v, exponent); },
                  [exponent](double v, double) { return exponent * std::pow(v, exponent - 1.0); });
}

Tensor softmax_lastdim(const Tensor& x) {
  require_defined(x, "softmax_lastdim");
  if (x.rank() < 1) throw std::invalid_argument("softmax_lastdim: rank >= 1 required");
  const std::int64_t cols = x.shape().back();
  const std::int64_t rows = x.size() / cols;
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * cols;
    double* orow = out.data() + r * cols;
    double mx = row[0];
    for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      orow[c] = std::exp(row[c] - mx);
      sum += orow[c];
    }
    for (std::int64_t c = 0; c < cols; ++c) orow[c] /= sum;
  }
  return make_op("softmax_lastdim", x.shape(), std::move(out), {x}, [cols](Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const std::int64_t rows2 = static_cast<std::int64_t>(n.value.size()) / cols;
    for (std::int64_t r = 0; r < rows2; ++r) {
      const double* y = n.value.data() + r * cols;
      const double* gy = n.grad.data() + r * cols;
      double dot = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
      double* gx = p.grad.data() + r * cols;
      for (std::int64_t c = 0; c < cols; ++c) gx[c] += y[c] * (gy[c] - dot);
    }
  });
}

// ---- reductions ----

namespace {

void axis_extents(const Shape& s, int axis, std::int64_t& outer, std::int64_t& len,
                  std::int64_t& inner, const char* op) {
  if (axis < 0 || static_cast<size_t>(axis) >= s.size()) {
    throw std::invalid_argument(std::string(op) + ": axis out of range for " + shape_str(s));
  }
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  len = s[static_cast<size_t>(axis)];
  inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

Tensor sum_axis(const Tensor& x, int axis) {
  require_defined(x, "sum_axis");
  std::int64_t outer, len, inner;
  axis_extents(x.shape(), axis, outer, len, inner, "sum_axis");
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
  const auto& xv = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t j = 0; j < len; ++j) {
      const double* src = xv.data() + (o * len + j) * inner;
      double* dst = out.data() + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return make_op("sum_axis", std::move(out_shape), std::move(out), {x}, [outer, len, inner](Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::int64_t o = 0; o < outer; ++o) {
      const double* g = n.grad.data() + o * inner;
      for (std::int64_t j = 0; j < len; ++j) {
        double* dst = p.grad.data() + (o * len + j) * inner;
        for (std::int64_t i = 0; i < inner; ++i) dst[i] += g[i];
      }
    }
  });
}

Tensor mean_axis(const Tensor& x, int axis) {
  double inv = 1.0 / static_cast<double>(x.dim(axis));
  return mul_scalar(sum_axis(x, axis), inv);
}

Tensor sum_all(const Tensor& x) {
  return sum_axis(reshape(x, {x.size()}), 0);
}

Tensor mean_all(const Tensor& x) {
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// ---- structure ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: expects 2-D operands, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<size_t>(m * n));
  {
    ConstMap A(a.data().data(), m, k);
    ConstMap B(b.data().data(), k, n);
    MutMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& nd) {
    auto& pa = *nd.parents[0];
    auto& pb = *nd.parents[1];
    ConstMap G(nd.grad.data(), m, n);
    if (pa.requires_grad) {
      pa.ensure_grad();
      ConstMap B(pb.value.data(), k, n);
      MutMap GA(pa.grad.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      ConstMap A(pa.value.data(), m, k);
      MutMap GB(pb.grad.data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() != 2) throw std::invalid_argument("transpose: expects 2-D, got " + shape_str(x.shape()));
  const std::int64_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(static_cast<size_t>(r * c));
  const auto& xv = x.data();
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  }
  return make_op("transpose", {c, r}, std::move(out), {x}, [r, c](Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::int64_t i = 0; i < r; ++i) {
      for (std::int64_t j = 0; j < c; ++j) p.grad[i * c + j] += n.grad[j * r + i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  return make_op("reshape", std::move(shape), x.data(), {x}, [](Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& base = parts[0].shape();
  if (axis < 0 || static_cast<size_t>(axis) >= base.size()) {
    throw std::invalid_argument("concat: axis out of range");
  }
  Shape out_shape = base;
  std::int64_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i) {
      if (i != axis && p.dim(i) != base[static_cast<size_t>(i)]) {
        throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                    shape_str(base));
      }
    }
    total_axis += p.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = total_axis;

  std::int64_t outer, len, inner;
  axis_extents(out_shape, axis, outer, len, inner, "concat");
  (void)len;
  std::vector<double> out(static_cast<size_t>(numel(out_shape)));
  std::vector<std::int64_t> offsets;  // axis offset of each part
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t plen = p.dim(axis);
    const auto& pv = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(pv.data() + o * plen * inner, pv.data() + (o + 1) * plen * inner,
                out.data() + (o * total_axis + off) * inner);
    }
    off += plen;
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_op("concat", std::move(out_shape), std::move(out), std::move(parents),
                 [outer, inner, total_axis, offsets, axis](Node& n) {
                   for (size_t pi = 0; pi < n.parents.size(); ++pi) {
                     auto& p = *n.parents[pi];
                     if (!p.requires_grad) continue;
                     p.ensure_grad();
                     const std::int64_t plen = p.shape[static_cast<size_t>(axis)];
                     const std::int64_t poff = offsets[pi];
                     for (std::int64_t o = 0; o < outer; ++o) {
                       const double* g = n.grad.data() + (o * total_axis + poff) * inner;
                       double* dst = p.grad.data() + o * plen * inner;
                       for (std::int64_t i = 0; i < plen * inner; ++i) dst[i] += g[i];
                     }
                   }
                 });
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  require_defined(x, "slice");
  std::int64_t outer, alen, inner;
  axis_extents(x.shape(), axis, outer, alen, inner, "slice");
  if (start < 0 || len <= 0 || start + len > alen) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of bounds for axis size " +
                                std::to_string(alen));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  std::vector<double> out(static_cast<size_t>(outer * len * inner));
  const auto& xv = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(xv.data() + (o * alen + start) * inner, xv.data() + (o * alen + start + len) * inner,
              out.data() + o * len * inner);
  }
  return make_op("slice", std::move(out_shape), std::move(out), {x},
                 [outer, alen, inner, start, len](Node& n) {
                   auto& p = *n.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (std::int64_t o = 0; o < outer; ++o) {
                     const double* g = n.grad.data() + o * len * inner;
                     double* dst = p.grad.data() + (o * alen + start) * inner;
                     for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                   }
                 });
}

Tensor stop_grad(const Tensor& x) {
  require_defined(x, "stop_grad");
  return constant(x.shape(), x.data());
}

// ---- normalization ----

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  require_defined(x, "rmsnorm");
  require_defined(gain, "rmsnorm");
  const std::int64_t d = x.shape().back();
  if (gain.size() != d) throw std::invalid_argument("rmsnorm: gain length must equal last dim");
  const std::int64_t rows = x.size() / d;
  const auto& xv = x.data();
  const auto& gv = gain.data();
  std::vector<double> out(xv.size());
  std::vector<double> rms(static_cast<size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double sq = 0.0;
    for (std::int64_t c = 0; c < d; ++c) sq += row[c] * row[c];
    double rr = std::sqrt(sq / static_cast<double>(d) + eps);
    rms[static_cast<size_t>(r)] = rr;
    for (std::int64_t c = 0; c < d; ++c) out[r * d + c] = gv[c] * row[c] / rr;
  }
  return make_op("rmsnorm", x.shape(), std::move(out), {x, gain}, [d, rms](Node& n) {
    auto& px = *n.parents[0];
    auto& pg = *n.parents[1];
    const std::int64_t rows2 = static_cast<std::int64_t>(n.value.size()) / d;
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::int64_t r = 0; r < rows2; ++r) {
        const double* xrow = px.value.data() + r * d;
        const double* grow = n.grad.data() + r * d;
        const double* gv2 = pg.value.data();
        double rr = rms[static_cast<size_t>(r)];
        double s = 0.0;
        for (std::int64_t c = 0; c < d; ++c) s += grow[c] * gv2[c] * xrow[c];
        double* gx = px.grad.data() + r * d;
        for (std::int64_t c = 0; c < d; ++c) {
          gx[c] += grow[c] * gv2[c] / rr - xrow[c] * s / (static_cast<double>(d) * rr * rr * rr);
        }
      }
    }
    if (pg.requires_grad) {
      pg.ensure_grad();
      for (std::int64_t r = 0; r < rows2; ++r) {
        const double* xrow = px.value.data() + r * d;
        const double* grow = n.grad.data() + r * d;
        double rr = rms[static_cast<size_t>(r)];
        for (std::int64_t c = 0; c < d; ++c) pg.grad[c] += grow[c] * xrow[c] / rr;
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layernorm");
  const std::int64_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw std::invalid_argument("layernorm: gain/bias length must equal last dim");
  }
  const std::int64_t rows = x.size() / d;
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  std::vector<double> out(xv.size());
  std::vector<double> mu(static_cast<size_t>(rows)), sd(static_cast<size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double m = 0.0;
    for (std::int64_t c = 0; c < d; ++c) m += row[c];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::int64_t c = 0; c < d; ++c) v += (row[c] - m) * (row[c] - m);
    v /= static_cast<double>(d);
    double s = std::sqrt(v + eps);
    mu[static_cast<size_t>(r)] = m;
    sd[static_cast<size_t>(r)] = s;
    for (std::int64_t c = 0; c < d; ++c) out[r * d + c] = gv[c] * (row[c] - m) / s + bv[c];
  }
  return make_op("layernorm", x.shape(), std::move(out), {x, gain, bias}, [d, mu, sd](Node& n) {
    auto& px = *n.parents[0];
    auto& pg = *n.parents[1];
    auto& pb = *n.parents[2];
    const std::int64_t rows2 = static_cast<std::int64_t>(n.value.size()) / d;
    const double dn = static_cast<double>(d);
    for (std::int64_t r = 0; r < rows2; ++r) {
      const double* xrow = px.value.data() + r * d;
      const double* grow = n.grad.data() + r * d;
      const double m = mu[static_cast<size_t>(r)];
      const double s = sd[static_cast<size_t>(r)];
      if (px.requires_grad) {
        px.ensure_grad();
        const double* gv2 = pg.value.data();
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::int64_t c = 0; c < d; ++c) {
          sum_g += grow[c] * gv2[c];
          sum_gx += grow[c] * gv2[c] * (xrow[c] - m);
        }
        double* gx = px.grad.data() + r * d;
        for (std::int64_t c = 0; c < d; ++c) {
          double xc = (xrow[c] - m) / s;
          gx[c] += (grow[c] * gv2[c] - sum_g / dn - xc * sum_gx / (dn * s)) / s;
        }
      }
      if (pg.requires_grad) {
        pg.ensure_grad();
        for (std::int64_t c = 0; c < d; ++c) pg.grad[c] += grow[c] * (xrow[c] - m) / s;
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::int64_t c = 0; c < d; ++c) pb.grad[c] += grow[c];
      }
    }
  });
}

Tensor forward_op(const std::string& op_name, const std::vector<Tensor>& inputs, int axis,
                  double scalar, Shape shape_arg, std::int64_t start, std::int64_t len) {
  auto need = [&](size_t n) {
    if (inputs.size() != n) {
      throw std::invalid_argument("forward_op '" + op_name + "': expected " + std::to_string(n) +
                                  " inputs, got " + std::to_string(inputs.size()));
    }
  };
  if (op_name == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
  if (op_name == "add") { need(2); return add(inputs[0], inputs[1]); }
  if (op_name == "sub") { need(2); return sub(inputs[0], inputs[1]); }
  if (op_name == "mul") { need(2); return mul(inputs[0], inputs[1]); }
  if (op_name == "div") { need(2); return divide(inputs[0], inputs[1]); }
  if (op_name == "exp") { need(1); return exp(inputs[0]); }
  if (op_name == "log") { need(1); return log(inputs[0]); }
  if (op_name == "sigmoid") { need(1); return sigmoid(inputs[0]); }
  if (op_name == "softmax_lastdim") { need(1); return softmax_lastdim(inputs[0]); }
  if (op_name == "abs") { need(1); return abs(inputs[0]); }
  if (op_name == "sum_axis") { need(1); return sum_axis(inputs[0], axis); }
  if (op_name == "mean_axis") { need(1); return mean_axis(inputs[0], axis); }
  if (op_name == "transpose") { need(1); return transpose(inputs[0]); }
  if (op_name == "power") { need(1); return power(inputs[0], scalar); }
  if (op_name == "rmsnorm") { need(2); return rmsnorm(inputs[0], inputs[1]); }
  if (op_name == "concat") { return concat(inputs, axis); }
  if (op_name == "reshape") { need(1); return reshape(inputs[0], std::move(shape_arg)); }
  if (op_name == "slice") { need(1); return slice(inputs[0], axis, start, len); }
  throw std::invalid_argument("forward_op: unknown op '" + op_name + "'");
}

// ---- autodiff ----

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; grad flows in reverse of `order`.
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      Node* child = node->parents[next_child].get();
      ++next_child;
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  Node* root = loss.node().get();
  if (!root->requires_grad) return;  // nothing reachable requires grad
  auto order = topo_order(root);
  for (Node* n : order) n->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

void backward(const Tensor& loss, const std::vector<std::pair<std::string, Tensor>>& params,
              std::vector<std::string>* warnings) {
  std::unordered_set<Node*> reachable;
  if (loss.node()->requires_grad) {
    for (Node* n : topo_order(loss.node().get())) reachable.insert(n);
  }
  backward(loss);
  if (warnings) {
    for (const auto& [name, p] : params) {
      p.node()->ensure_grad();
      if (!reachable.count(p.node().get())) {
        warnings->push_back("parameter '" + name + "' is not part of the loss graph; gradient is zero");
      }
    }
  }
}

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double h) {
  for (const auto& p : params) {
    if (!p.defined() || !p.requires_grad()) {
      throw std::invalid_argument("finite_diff_check: all params must require grad");
    }
  }
  Tensor l0 = f();
  double base = l0.item();
  if (f().item() != base) {
    throw std::invalid_argument("finite_diff_check: f is not deterministic (fix the RngStream)");
  }
  for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
  backward(l0);

  double max_rel = 0.0;
  for (const auto& p : params) {
    auto& data = const_cast<Tensor&>(p).leaf_data();
    const auto& g = p.grad();
    for (size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double fp = f().item();
      data[i] = saved - h;
      const double fm = f().item();
      data[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = g[i];
      const double rel = std::fabs(analytic - numeric) /
                         (std::fabs(analytic) + std::fabs(numeric) + 1e-12);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace kroncast
