#pragma once

// Dense float64 tensors with a tape-style reverse-mode differentiator.
//
// A Tensor is a handle to a graph node: copies share storage, clone() makes a
// deep copy. Every op on tensors that require gradients records a backward
// closure; grad() walks the recorded expression from a scalar loss. The
// expression is rebuilt for every evaluation, nothing is cached.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "amid/errors.hpp"
#include "amid/numerics/random.hpp"

namespace amid {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;
};

inline thread_local bool grad_disabled = false;

inline void accumulate(Node& node, std::size_t i, double g) {
  if (node.requires_grad) node.grad[i] += g;
}

}  // namespace detail

// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled) { detail::grad_disabled = true; }
  ~NoGradGuard() { detail::grad_disabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->grad.assign(node_->value.size(), 0.0);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false) {
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = amid::uniform(rng, lo, hi);
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const double> values() const { return node_->value; }
  // Direct writes bypass the tape; meant for initialisation and optimisers.
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }

  double item() const {
    if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  double operator[](std::size_t flat) const { return node_->value.at(flat); }

  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw IndexError("at: index rank mismatch");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      if (i >= node_->shape[axis]) throw IndexError("at: index out of range");
      flat = flat * node_->shape[axis] + i;
      ++axis;
    }
    return node_->value[flat];
  }

  // Same values, cut from the tape.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  // Deep copy as a fresh leaf.
  Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(values);
  bool needs = false;
  if (!grad_disabled) {
    for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* in : inputs) node->inputs.push_back(in->node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                          const std::vector<Tensor>& inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(values);
  bool needs = false;
  if (!grad_disabled) {
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

// Numpy-style broadcasting: shapes are right-aligned, each dim equal or 1.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;
  std::vector<std::size_t> b_stride;
  bool identical = false;
};

inline std::vector<std::size_t> strides_for(const Shape& padded, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = out.size(); i-- > 0;) {
    strides[i] = padded[i] == 1 && out[i] != 1 ? 0 : s;
    s *= padded[i];
  }
  return strides;
}

inline Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast plan;
  if (a == b) {
    plan.out = a;
    plan.identical = true;
    return plan;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  plan.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    plan.out[i] = std::max(pa[i], pb[i]);
  }
  plan.a_stride = strides_for(pa, plan.out);
  plan.b_stride = strides_for(pb, plan.out);
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& plan, F&& f) {
  const std::size_t n = shape_numel(plan.out);
  if (plan.identical) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = plan.out.size();
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      ia += plan.a_stride[d];
      ib += plan.b_stride[d];
      if (counter[d] < plan.out[d]) break;
      ia -= plan.a_stride[d] * counter[d];
      ib -= plan.b_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
}

// dfa(a, b) and dfb(a, b) are the partial derivatives of f at (a, b).
template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  auto plan = plan_broadcast(op, a.shape(), b.shape());
  std::vector<double> out(shape_numel(plan.out));
  const auto av = a.values();
  const auto bv = b.values();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = f(av[ia], bv[ib]); });
  Shape out_shape = plan.out;
  return make_result(op, std::move(out_shape), std::move(out), {&a, &b},
                     [plan = std::move(plan), dfa, dfb](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                         const double g = self.grad[o];
                         if (g == 0.0) return;
                         const double x = na.value[ia];
                         const double y = nb.value[ib];
                         accumulate(na, ia, g * dfa(x, y));
                         accumulate(nb, ib, g * dfb(x, y));
                       });
                     });
}

// df(x, y) is the derivative given input x and output y.
template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result(op, a.shape(), std::move(out), {&a}, [df](Node& self) {
    Node& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      accumulate(in, i, self.grad[i] * df(in.value[i], self.value[i]));
    }
  });
}

// Splits a shape around `axis` into (outer, n, inner) extents.
inline std::tuple<std::size_t, std::size_t, std::size_t> axis_extents(const char* op, const Shape& shape,
                                                                      std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

// ---- elementwise arithmetic -------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(
      "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(
      "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }

// ---- nonlinearities --------------------------------------------------------

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary("sigmoid", a, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary("softplus", a, detail::stable_softplus,
                       [](double x, double) { return detail::stable_sigmoid(x); });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// Subgradient 0 at the origin.
inline Tensor abs(const Tensor& a) {
  return detail::unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// Gradient passes only where lo < x < hi.
inline Tensor clip(const Tensor& a, double lo, double hi) {
  return detail::unary(
      "clip", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return x > lo && x < hi ? 1.0 : 0.0; });
}

inline Tensor detach(const Tensor& a) { return a.detach(); }

// ---- shape manipulation ----------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> values(a.values().begin(), a.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(values), {&a}, [](detail::Node& self) {
    detail::Node& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) detail::accumulate(in, i, self.grad[i]);
  });
}

// Swaps the last two axes of a rank-2 or rank-3 tensor.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2 && a.rank() != 3) throw ShapeError("transpose: expected rank 2 or 3, got " + shape_str(a.shape()));
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
  std::vector<double> out(batch * r * c);
  const auto av = a.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = av[b * r * c + i * c + j];
  Shape shape = a.rank() == 3 ? Shape{batch, c, r} : Shape{c, r};
  return detail::make_result("transpose", std::move(shape), std::move(out), {&a}, [batch, r, c](detail::Node& self) {
    detail::Node& in = *self.inputs[0];
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          detail::accumulate(in, b * r * c + i * c + j, self.grad[b * r * c + j * r + i]);
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  auto [outer, total, inner] = detail::axis_extents("concat", out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    const auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset));
    }
    widths.push_back(w);
    offset += w;
  }
  const std::size_t row = total * inner;
  return detail::make_result("concat", std::move(out_shape), std::move(out), parts,
                             [widths, outer, row](detail::Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 detail::Node& in = *self.inputs[k];
                                 if (in.requires_grad) {
                                   for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t i = 0; i < widths[k]; ++i)
                                       in.grad[o * widths[k] + i] += self.grad[o * row + offset + i];
                                 }
                                 offset += widths[k];
                               }
                             });
}

// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  auto [outer, n, inner] = detail::axis_extents("slice", a.shape(), axis);
  if (begin > end || end > n) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                     shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t w = (end - begin) * inner;
  std::vector<double> out(outer * w);
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * n * inner + begin * inner), w,
                out.begin() + static_cast<std::ptrdiff_t>(o * w));
  }
  return detail::make_result("slice", std::move(out_shape), std::move(out), {&a},
                             [outer = outer, n = n, inner = inner, begin, w](detail::Node& self) {
                               detail::Node& in = *self.inputs[0];
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t i = 0; i < w; ++i)
                                   in.grad[o * n * inner + begin * inner + i] += self.grad[o * w + i];
                             });
}

// Rows of a rank-2 table selected by ids. Rows listed in `frozen_row` never
// receive gradient (used for the padding embedding).
inline Tensor gather(const Tensor& table, std::span<const std::size_t> ids,
                     std::optional<std::size_t> frozen_row = std::nullopt) {
  if (table.rank() != 2) throw ShapeError("gather: table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t rows = table.dim(0), width = table.dim(1);
  std::vector<double> out(ids.size() * width);
  const auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw IndexError("gather: id " + std::to_string(ids[i]) + " out of range for " + std::to_string(rows) +
                       " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return detail::make_result("gather", {ids.size(), width}, std::move(out), {&table},
                             [idx = std::move(idx), width, frozen_row](detail::Node& self) {
                               detail::Node& in = *self.inputs[0];
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 if (frozen_row && idx[i] == *frozen_row) continue;
                                 for (std::size_t j = 0; j < width; ++j)
                                   in.grad[idx[i] * width + j] += self.grad[i * width + j];
                               }
                             });
}

// ---- linear algebra --------------------------------------------------------

namespace detail {

// out[m x n] += a[m x k] * b[k x n]
inline void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// ga[m x k] += g[m x n] * b^T ; gb[k x n] += a^T * g
inline void gemm_backward(const double* g, const Node& na, const Node& nb, Node& ia, Node& ib, std::size_t a_off,
                          std::size_t b_off, std::size_t g_off, std::size_t m, std::size_t k, std::size_t n) {
  if (ia.requires_grad) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g[g_off + i * n + j] * nb.value[b_off + p * n + j];
        ia.grad[a_off + i * k + p] += s;
      }
  }
  if (ib.requires_grad) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = na.value[a_off + i * k + p];
        if (av == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) ib.grad[b_off + p * n + j] += av * g[g_off + i * n + j];
      }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  return detail::make_result("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    detail::gemm_backward(self.grad.data(), *self.inputs[0], *self.inputs[1], *self.inputs[0], *self.inputs[1], 0,
                          0, 0, m, k, n);
  });
}

// Batched matmul: [B x m x k] * [B x k x n] -> [B x m x n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm_acc(a.values().data() + s * m * k, b.values().data() + s * k * n, out.data() + s * m * n, m, k, n);
  }
  return detail::make_result("bmm", {batch, m, n}, std::move(out), {&a, &b}, [batch, m, k, n](detail::Node& self) {
    for (std::size_t s = 0; s < batch; ++s) {
      detail::gemm_backward(self.grad.data(), *self.inputs[0], *self.inputs[1], *self.inputs[0], *self.inputs[1],
                            s * m * k, s * k * n, s * m * n, m, k, n);
    }
  });
}

// ---- reductions --------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  const auto av = a.values();
  const double s = std::accumulate(av.begin(), av.end(), 0.0);
  return detail::make_result("sum", {}, {s}, {&a}, [](detail::Node& self) {
    detail::Node& in = *self.inputs[0];
    for (auto& g : in.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// Sum over `axis`; the axis is removed from the shape.
inline Tensor sum(const Tensor& a, std::size_t axis) {
  auto [outer, n, inner] = detail::axis_extents("sum", a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(outer * inner, 0.0);
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] += av[(o * n + i) * inner + j];
  return detail::make_result("sum_axis", std::move(out_shape), std::move(out), {&a},
                             [outer = outer, n = n, inner = inner](detail::Node& self) {
                               detail::Node& in = *self.inputs[0];
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < inner; ++j)
                                     in.grad[(o * n + i) * inner + j] += self.grad[o * inner + j];
                             });
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
  auto [outer, n, inner] = detail::axis_extents("mean", a.shape(), axis);
  if (n == 0) throw ShapeError("mean: empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

// Max over `axis` (axis removed). Gradient goes to the first maximiser.
inline Tensor max(const Tensor& a, std::size_t axis) {
  auto [outer, n, inner] = detail::axis_extents("max", a.shape(), axis);
  if (n == 0) throw ShapeError("max: empty axis");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(outer * inner);
  std::vector<std::size_t> arg(outer * inner);
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) {
      std::size_t best = (o * n) * inner + j;
      for (std::size_t i = 1; i < n; ++i) {
        const std::size_t idx = (o * n + i) * inner + j;
        if (av[idx] > av[best]) best = idx;
      }
      out[o * inner + j] = av[best];
      arg[o * inner + j] = best;
    }
  return detail::make_result("max", std::move(out_shape), std::move(out), {&a},
                             [arg = std::move(arg)](detail::Node& self) {
                               detail::Node& in = *self.inputs[0];
                               for (std::size_t i = 0; i < arg.size(); ++i) in.grad[arg[i]] += self.grad[i];
                             });
}

// Sum of squared entries over a set of tensors (squared Frobenius norm).
inline Tensor squared_norm(std::span<const Tensor> tensors) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& t : tensors) total = add(total, sum(square(t)));
  return total;
}

// ---- differentiation -------------------------------------------------------

namespace detail {

inline std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // inputs before consumers
}

}  // namespace detail

// d loss / d param for each param, in the order given. Params the loss does not
// depend on get zero tensors. Leaf params also keep the result in grad().
inline std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> params) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("grad: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  std::vector<Tensor> result;
  result.reserve(params.size());
  if (!loss.requires_grad()) {
    for (const auto& p : params) result.push_back(Tensor::zeros(p.shape()));
    return result;
  }
  auto order = detail::topological_order(loss.node().get());
  std::unordered_set<detail::Node*> reached(order.begin(), order.end());
  for (auto* node : order) node->grad.assign(node->value.size(), 0.0);
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
  for (const auto& p : params) {
    auto* node = p.node().get();
    if (reached.count(node)) {
      result.emplace_back(p.shape(), node->grad);
    } else {
      if (node->requires_grad) node->grad.assign(node->value.size(), 0.0);
      result.push_back(Tensor::zeros(p.shape()));
    }
  }
  // Interior buffers are not needed once the leaves have their gradients.
  for (auto* node : order) {
    if (!node->inputs.empty()) std::vector<double>().swap(node->grad);
  }
  return result;
}

// Largest |analytic - central difference| / max(1, |analytic|) over every
// entry of every param. `build` must be deterministic.
inline double finite_diff_check(const std::function<Tensor()>& build, std::span<Tensor> params, double h = 1e-5) {
  if (!(h > 0)) throw ContractError("finite_diff_check: h must be positive");
  const Tensor loss = build();
  const auto analytic = grad(loss, std::span<const Tensor>(params.data(), params.size()));
  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = build().item();
      values[i] = saved - h;
      const double down = build().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::fabs(a - numeric) / std::max(1.0, std::fabs(a)));
    }
  }
  return worst;
}

}  // namespace amid
