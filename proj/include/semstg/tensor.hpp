#pragma once

#include "semstg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

/**
 * @file tensor.hpp
 * @brief Dense float64 tensors with tape-free reverse-mode differentiation.
 *
 * Every differentiable result keeps shared references to its inputs together
 * with a backward rule. `ComputationRecord::trace` walks that graph into a
 * topological order; replaying the rules in reverse populates `grad` on every
 * leaf that requires it. Only the operator set the trajectory model needs is
 * provided.
 */

namespace semstg
{

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape & shape)
{
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape & shape)
{
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor;

namespace detail
{

struct Node
{
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node &)> backward;

  void ensure_grad()
  {
    if (grad.size() != values.size()) {
      grad.assign(values.size(), 0.0);
    }
  }

  bool input_needs_grad(std::size_t i) const { return inputs[i] && inputs[i]->requires_grad; }
};

inline thread_local int no_grad_depth = 0;

inline bool grad_enabled() { return no_grad_depth == 0; }

}  // namespace detail

/// Disables graph recording for the lifetime of the guard (evaluation, finite differences).
class NoGradGuard
{
public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard & operator=(const NoGradGuard &) = delete;
};

class Tensor
{
public:
  Tensor() = default;

  /// Leaf tensor. Rejects shape/size mismatch and non-finite values.
  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false)
  {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError(
        "shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
        " values, got " + std::to_string(values.size()));
    }
    for (double v : values) {
      if (!std::isfinite(v)) {
        throw DomainError("non-finite value in leaf tensor of shape " + shape_str(shape));
      }
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) {
      node->ensure_grad();
    }
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false)
  {
    const auto n = shape_numel(shape);
    return from_values(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false)
  {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false)
  {
    return from_values({}, {value}, requires_grad);
  }

  static Tensor eye(std::size_t n)
  {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      v[i * n + i] = 1.0;
    }
    return from_values({n, n}, std::move(v));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape & shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->values.size(); }

  /// Extent of an axis; negative axes count from the back.
  std::size_t size(int axis) const
  {
    const int d = static_cast<int>(dim());
    const int a = axis < 0 ? axis + d : axis;
    if (a < 0 || a >= d) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    }
    return shape()[static_cast<std::size_t>(a)];
  }

  std::span<const double> values() const { return node_->values; }

  double item() const
  {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->values[0];
  }

  double at(std::initializer_list<std::size_t> index) const
  {
    if (index.size() != dim()) {
      throw ShapeError("index rank mismatch for " + shape_str(shape()));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      if (i >= shape()[axis]) {
        throw ShapeError("index out of range for " + shape_str(shape()));
      }
      flat = flat * shape()[axis] + i;
      ++axis;
    }
    return node_->values[flat];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  const std::string & op() const { return node_->op; }

  /// Empty span when no gradient is tracked.
  std::span<const double> grad() const { return node_->grad; }

  void zero_grad()
  {
    if (node_->requires_grad) {
      std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }
  }

  /// In-place access to a leaf's storage (optimizer updates, checkpoint loads).
  std::span<double> mutable_values()
  {
    if (!node_->leaf) {
      throw ContractError("mutable_values() on non-leaf tensor produced by '" + node_->op + "'");
    }
    return node_->values;
  }

  std::span<double> mutable_grad()
  {
    if (!node_->requires_grad) {
      throw ContractError("mutable_grad() on tensor without gradient tracking");
    }
    node_->ensure_grad();
    return node_->grad;
  }

  /// Copy of the values as a new constant leaf.
  Tensor detach() const { return from_values(shape(), node_->values, false); }

  /// Reverse pass from a scalar; see ComputationRecord.
  void backward() const;

  const std::shared_ptr<detail::Node> & node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

/**
 * @brief Topologically ordered list of the operations that produced a value.
 *
 * Inputs of every entry precede it. `backward` zeroes all intermediate
 * gradients, seeds the root with 1 and replays the rules in reverse order;
 * leaf gradients accumulate across calls.
 */
class ComputationRecord
{
public:
  static ComputationRecord trace(const Tensor & root)
  {
    ComputationRecord rec;
    rec.root_ = root.node();
    if (!rec.root_->requires_grad) {
      return rec;
    }
    std::unordered_set<const detail::Node *> seen;
    std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
    auto visit = [&](const std::shared_ptr<detail::Node> & n) {
      if (n && n->requires_grad && !n->leaf && seen.insert(n.get()).second) {
        stack.emplace_back(n, 0);
      }
    };
    visit(rec.root_);
    while (!stack.empty()) {
      const std::size_t top = stack.size() - 1;
      const auto node = stack[top].first;
      if (stack[top].second < node->inputs.size()) {
        visit(node->inputs[stack[top].second++]);
        continue;
      }
      stack.pop_back();
      rec.order_.push_back(node);
    }
    return rec;
  }

  std::size_t size() const noexcept { return order_.size(); }

  std::vector<std::string> op_names() const
  {
    std::vector<std::string> names;
    names.reserve(order_.size());
    for (const auto & n : order_) {
      names.push_back(n->op);
    }
    return names;
  }

  const std::vector<std::shared_ptr<detail::Node>> & nodes() const noexcept { return order_; }

  void backward() const
  {
    if (!root_) {
      throw ContractError("backward() on empty record");
    }
    if (root_->values.size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root_->shape));
    }
    if (!root_->requires_grad) {
      return;
    }
    for (const auto & n : order_) {
      n->grad.assign(n->values.size(), 0.0);
    }
    root_->ensure_grad();
    root_->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      (*it)->backward(**it);
    }
  }

private:
  std::shared_ptr<detail::Node> root_;
  std::vector<std::shared_ptr<detail::Node>> order_;
};

inline void Tensor::backward() const { ComputationRecord::trace(*this).backward(); }

namespace detail
{

inline Tensor make_result(
  std::string op, Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
  std::function<void(Node &)> backward)
{
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->leaf = false;
  node->op = std::move(op);
  bool track = false;
  if (grad_enabled()) {
    for (const auto & t : inputs) {
      track = track || (t.defined() && t.requires_grad());
    }
  }
  if (track) {
    node->requires_grad = true;
    for (const auto & t : inputs) {
      node->inputs.push_back(t.defined() ? t.node() : nullptr);
    }
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

inline Tensor make_result(
  std::string op, Shape shape, std::vector<double> values, const std::vector<Tensor> & inputs,
  std::function<void(Node &)> backward)
{
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->leaf = false;
  node->op = std::move(op);
  bool track = false;
  if (grad_enabled()) {
    for (const auto & t : inputs) {
      track = track || t.requires_grad();
    }
  }
  if (track) {
    node->requires_grad = true;
    for (const auto & t : inputs) {
      node->inputs.push_back(t.node());
    }
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

/// Trailing-dimension broadcast of two shapes.
inline Shape broadcast_shapes(const Shape & a, const Shape & b, const std::string & op)
{
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(op + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// For every flat index of `out`, the flat index of the broadcast source `in`.
inline std::vector<std::size_t> broadcast_index(const Shape & in, const Shape & out)
{
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = rank; i-- > offset;) {
    const std::size_t d = in[i - offset];
    in_stride[i] = d == 1 ? 0 : stride;
    stride *= d;
  }
  const std::size_t total = shape_numel(out);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    map[flat] = src;
    for (std::size_t i = rank; i-- > 0;) {
      ++counter[i];
      src += in_stride[i];
      if (counter[i] < out[i]) {
        break;
      }
      src -= in_stride[i] * counter[i];
      counter[i] = 0;
    }
  }
  return map;
}

template <class Fwd, class Da, class Db>
Tensor binary(const std::string & op, const Tensor & a, const Tensor & b, Fwd f, Da da, Db db)
{
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), op);
  const std::size_t n = shape_numel(out_shape);
  const bool same = a.shape() == out_shape && b.shape() == out_shape;
  auto ia = std::make_shared<std::vector<std::size_t>>();
  auto ib = std::make_shared<std::vector<std::size_t>>();
  if (!same) {
    *ia = broadcast_index(a.shape(), out_shape);
    *ib = broadcast_index(b.shape(), out_shape);
  }
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(av[same ? i : (*ia)[i]], bv[same ? i : (*ib)[i]]);
  }
  return make_result(op, out_shape, std::move(out), {a, b}, [same, ia, ib, da, db](Node & self) {
    const auto & x = self.inputs[0]->values;
    const auto & y = self.inputs[1]->values;
    const bool ga = self.input_needs_grad(0);
    const bool gb = self.input_needs_grad(1);
    if (ga) self.inputs[0]->ensure_grad();
    if (gb) self.inputs[1]->ensure_grad();
    for (std::size_t i = 0; i < self.values.size(); ++i) {
      const std::size_t ja = same ? i : (*ia)[i];
      const std::size_t jb = same ? i : (*ib)[i];
      const double g = self.grad[i];
      if (ga) self.inputs[0]->grad[ja] += g * da(x[ja], y[jb], self.values[i]);
      if (gb) self.inputs[1]->grad[jb] += g * db(x[ja], y[jb], self.values[i]);
    }
  });
}

}  // namespace detail

/**
 * @brief Elementwise unary map with a caller-provided derivative.
 *
 * `derivative(x, y)` receives the input and the forward output. Used for every
 * built-in unary primitive and for custom operations in verification fixtures.
 */
inline Tensor map_unary(
  const Tensor & x, std::string op, std::function<double(double)> fn,
  std::function<double(double, double)> derivative)
{
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  std::transform(xv.begin(), xv.end(), out.begin(), fn);
  return detail::make_result(std::move(op), x.shape(), std::move(out), {x}, [derivative](detail::Node & self) {
    auto & in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.values.size(); ++i) {
      in.grad[i] += self.grad[i] * derivative(in.values[i], self.values[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor & a, const Tensor & b)
{
  return detail::binary(
    "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
    [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor & a, const Tensor & b)
{
  return detail::binary(
    "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
    [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor & a, const Tensor & b)
{
  return detail::binary(
    "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
    [](double x, double, double) { return x; });
}

inline Tensor operator+(const Tensor & a, const Tensor & b) { return add(a, b); }
inline Tensor operator-(const Tensor & a, const Tensor & b) { return sub(a, b); }
inline Tensor operator*(const Tensor & a, const Tensor & b) { return mul(a, b); }

inline Tensor add_scalar(const Tensor & x, double c)
{
  return map_unary(x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor & x, double c)
{
  return map_unary(x, "mul_scalar", [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Tensor operator*(const Tensor & x, double c) { return mul_scalar(x, c); }
inline Tensor operator*(double c, const Tensor & x) { return mul_scalar(x, c); }
inline Tensor operator+(const Tensor & x, double c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor & x) { return mul_scalar(x, -1.0); }

inline Tensor exp(const Tensor & x)
{
  return map_unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor tanh(const Tensor & x)
{
  return map_unary(
    x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

/// |x|; the derivative at exactly 0 is taken from the positive side.
inline Tensor abs(const Tensor & x)
{
  return map_unary(
    x, "abs", [](double v) { return std::fabs(v); }, [](double v, double) { return v >= 0.0 ? 1.0 : -1.0; });
}

inline constexpr double kDomainEps = 1e-12;

inline Tensor reciprocal(const Tensor & x)
{
  for (double v : x.values()) {
    if (std::fabs(v) < kDomainEps || !std::isfinite(v)) {
      throw DomainError("reciprocal: argument " + std::to_string(v) + " too close to zero");
    }
  }
  return map_unary(
    x, "reciprocal", [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

inline Tensor sqrt(const Tensor & x)
{
  for (double v : x.values()) {
    if (v < kDomainEps || !std::isfinite(v)) {
      throw DomainError("sqrt: argument " + std::to_string(v) + " negative or too close to zero");
    }
  }
  return map_unary(
    x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor log(const Tensor & x)
{
  for (double v : x.values()) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw DomainError("log: argument " + std::to_string(v) + " not positive");
    }
  }
  return map_unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor square(const Tensor & x)
{
  return map_unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// max(x, lo) with pass-through gradient above the floor.
inline Tensor clamp_min(const Tensor & x, double lo)
{
  return map_unary(
    x, "clamp_min", [lo](double v) { return std::max(v, lo); },
    [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

/**
 * @brief Parametric ReLU with one learnable slope shared across the tensor.
 *
 * The derivative at x == 0 is the positive-side value 1.
 */
inline Tensor prelu(const Tensor & x, const Tensor & slope)
{
  if (slope.numel() != 1) {
    throw ShapeError("prelu: slope must hold one value, got " + shape_str(slope.shape()));
  }
  const double a = slope.values()[0];
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = xv[i] >= 0.0 ? xv[i] : a * xv[i];
  }
  return detail::make_result("prelu", x.shape(), std::move(out), {x, slope}, [](detail::Node & self) {
    auto & in = *self.inputs[0];
    auto & sl = *self.inputs[1];
    const double a = sl.values[0];
    if (self.input_needs_grad(0)) {
      in.ensure_grad();
      for (std::size_t i = 0; i < self.values.size(); ++i) {
        in.grad[i] += self.grad[i] * (in.values[i] >= 0.0 ? 1.0 : a);
      }
    }
    if (self.input_needs_grad(1)) {
      sl.ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.values.size(); ++i) {
        if (in.values[i] < 0.0) acc += self.grad[i] * in.values[i];
      }
      sl.grad[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor & x)
{
  const auto xv = x.values();
  long double acc = 0.0L;  // extended accumulator keeps large reductions close to correctly rounded
  for (double v : xv) acc += v;
  const double s = static_cast<double>(acc);
  return detail::make_result("sum", {}, {s}, {x}, [](detail::Node & self) {
    auto & in = *self.inputs[0];
    in.ensure_grad();
    for (double & g : in.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor & x)
{
  if (x.numel() == 0) {
    throw ContractError("mean of empty tensor");
  }
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Sum over the last axis, keeping it with extent 1.
inline Tensor sum_last(const Tensor & x)
{
  if (x.dim() == 0) {
    throw ShapeError("sum_last on a 0-d tensor");
  }
  const std::size_t inner = x.shape().back();
  const std::size_t outer = inner == 0 ? 0 : x.numel() / inner;
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  std::vector<double> out(outer, 0.0);
  const auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o] += xv[o * inner + i];
  }
  return detail::make_result("sum_last", out_shape, std::move(out), {x}, [inner](detail::Node & self) {
    auto & in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t o = 0; o < self.values.size(); ++o) {
      for (std::size_t i = 0; i < inner; ++i) in.grad[o * inner + i] += self.grad[o];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor & x, Shape shape)
{
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](detail::Node & self) {
    auto & in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

/// Axis permutation: output axis i is input axis perm[i].
inline Tensor permute(const Tensor & x, const std::vector<std::size_t> & perm)
{
  const std::size_t rank = x.dim();
  if (perm.size() != rank) {
    throw ShapeError("permute: rank mismatch for " + shape_str(x.shape()));
  }
  std::vector<bool> used(rank, false);
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (perm[i] >= rank || used[perm[i]]) {
      throw ShapeError("permute: invalid permutation for " + shape_str(x.shape()));
    }
    used[perm[i]] = true;
    out_shape[i] = x.shape()[perm[i]];
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];

  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t flat = 0; flat < x.numel(); ++flat) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < rank; ++i) s += counter[i] * in_stride[perm[i]];
    (*src)[flat] = s;
    for (std::size_t i = rank; i-- > 0;) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*src)[i]];
  return detail::make_result("permute", out_shape, std::move(out), {x}, [src](detail::Node & self) {
    auto & in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[(*src)[i]] += self.grad[i];
  });
}

/// Swap the last two axes.
inline Tensor transpose(const Tensor & x)
{
  if (x.dim() < 2) {
    throw ShapeError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  }
  std::vector<std::size_t> perm(x.dim());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

/// Sub-range [start, start+length) along one axis.
inline Tensor slice(const Tensor & x, std::size_t axis, std::size_t start, std::size_t length)
{
  if (axis >= x.dim() || start + length > x.shape()[axis]) {
    throw ShapeError(
      "slice: range [" + std::to_string(start) + "," + std::to_string(start + length) + ") on axis " +
      std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.shape()[i];
  const std::size_t extent = x.shape()[axis];
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const auto xv = x.values();
  std::vector<double> out;
  out.reserve(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const auto first = xv.begin() + static_cast<std::ptrdiff_t>((o * extent + start) * inner);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(length * inner));
  }
  return detail::make_result(
    "slice", out_shape, std::move(out), {x}, [outer, inner, extent, start, length](detail::Node & self) {
      auto & in = *self.inputs[0];
      in.ensure_grad();
      std::size_t k = 0;
      for (std::size_t o = 0; o < outer; ++o) {
        const std::size_t base = (o * extent + start) * inner;
        for (std::size_t i = 0; i < length * inner; ++i) in.grad[base + i] += self.grad[k++];
      }
    });
}

/// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor> & parts, std::size_t axis)
{
  if (parts.empty()) {
    throw ContractError("concat of zero tensors");
  }
  const Shape & ref = parts.front().shape();
  if (axis >= ref.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
  }
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto & p : parts) {
    bool ok = p.dim() == ref.size();
    for (std::size_t i = 0; ok && i < ref.size(); ++i) ok = i == axis || p.shape()[i] == ref[i];
    if (!ok) {
      throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(ref));
    }
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  auto chunk = std::make_shared<std::vector<std::size_t>>();
  for (const auto & p : parts) chunk->push_back(p.shape()[axis] * inner);

  std::vector<double> out;
  out.reserve(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto v = parts[k].values();
      const auto first = v.begin() + static_cast<std::ptrdiff_t>(o * (*chunk)[k]);
      out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>((*chunk)[k]));
    }
  }
  return detail::make_result("concat", out_shape, std::move(out), parts, [outer, chunk](detail::Node & self) {
    std::size_t pos = 0;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < chunk->size(); ++k) {
        if (self.input_needs_grad(k)) {
          auto & in = *self.inputs[k];
          in.ensure_grad();
          for (std::size_t i = 0; i < (*chunk)[k]; ++i) in.grad[o * (*chunk)[k] + i] += self.grad[pos + i];
        }
        pos += (*chunk)[k];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/**
 * @brief Batched matrix product a[..., m, k] x b[..., k, n] with broadcast batch axes.
 */
inline Tensor matmul(const Tensor & a, const Tensor & b)
{
  if (a.dim() < 2 || b.dim() < 2 || a.size(-1) != b.size(-2)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.size(-2);
  const std::size_t k = a.size(-1);
  const std::size_t n = b.size(-1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shapes(a_batch, b_batch, "matmul");
  } catch (const ShapeError &) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  auto ia = std::make_shared<std::vector<std::size_t>>(detail::broadcast_index(a_batch, batch));
  auto ib = std::make_shared<std::vector<std::size_t>>(detail::broadcast_index(b_batch, batch));
  const std::size_t nb = shape_numel(batch);

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(nb * m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t bi = 0; bi < nb; ++bi) {
    const double * pa = av.data() + (*ia)[bi] * m * k;
    const double * pb = bv.data() + (*ib)[bi] * k * n;
    double * pc = out.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aik = pa[i * k + p];
        for (std::size_t j = 0; j < n; ++j) pc[i * n + j] += aik * pb[p * n + j];
      }
    }
  }
  return detail::make_result("matmul", out_shape, std::move(out), {a, b}, [ia, ib, nb, m, k, n](detail::Node & self) {
    auto & na = *self.inputs[0];
    auto & nbn = *self.inputs[1];
    const bool ga = self.input_needs_grad(0);
    const bool gb = self.input_needs_grad(1);
    if (ga) na.ensure_grad();
    if (gb) nbn.ensure_grad();
    for (std::size_t bi = 0; bi < nb; ++bi) {
      const double * pa = na.values.data() + (*ia)[bi] * m * k;
      const double * pb = nbn.values.data() + (*ib)[bi] * k * n;
      const double * g = self.grad.data() + bi * m * n;
      if (ga) {
        double * da = na.grad.data() + (*ia)[bi] * m * k;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
            da[i * k + p] += acc;
          }
        }
      }
      if (gb) {
        double * db = nbn.grad.data() + (*ib)[bi] * k * n;
        for (std::size_t p = 0; p < k; ++p) {
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) acc += pa[i * k + p] * g[i * n + j];
            db[p * n + j] += acc;
          }
        }
      }
    }
  });
}

/**
 * @brief Convolution along the middle (time) axis of x[ch_in, T, N].
 *
 * kernel is [ch_out, ch_in, kT]; bias, when defined, is [ch_out]. Each of the
 * N positions is convolved independently with zero padding on both ends.
 * Output is [ch_out, T + 2*padding - kT + 1, N].
 */
inline Tensor conv_temporal(const Tensor & x, const Tensor & kernel, const Tensor & bias, std::size_t padding)
{
  if (x.dim() != 3 || kernel.dim() != 3 || kernel.size(1) != x.size(0)) {
    throw ShapeError(
      "conv_temporal: input " + shape_str(x.shape()) + " incompatible with kernel " + shape_str(kernel.shape()));
  }
  const std::size_t cin = x.size(0);
  const std::size_t t_in = x.size(1);
  const std::size_t nodes = x.size(2);
  const std::size_t cout = kernel.size(0);
  const std::size_t kt = kernel.size(2);
  if (kt > t_in + 2 * padding || kt == 0) {
    throw ShapeError(
      "conv_temporal: kernel extent " + std::to_string(kt) + " exceeds padded input length " +
      std::to_string(t_in + 2 * padding));
  }
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != cout)) {
    throw ShapeError("conv_temporal: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout));
  }
  const std::size_t t_out = t_in + 2 * padding - kt + 1;
  const auto xv = x.values();
  const auto wv = kernel.values();
  std::vector<double> out(cout * t_out * nodes, 0.0);
  for (std::size_t co = 0; co < cout; ++co) {
    const double b0 = bias.defined() ? bias.values()[co] : 0.0;
    for (std::size_t t = 0; t < t_out; ++t) {
      double * row = out.data() + (co * t_out + t) * nodes;
      std::fill(row, row + nodes, b0);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t k = 0; k < kt; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(padding);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
          const double w = wv[(co * cin + ci) * kt + k];
          const double * xr = xv.data() + (ci * t_in + static_cast<std::size_t>(src)) * nodes;
          for (std::size_t n = 0; n < nodes; ++n) row[n] += w * xr[n];
        }
      }
    }
  }
  std::vector<Tensor> inputs{x, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(
    "conv_temporal", {cout, t_out, nodes}, std::move(out), inputs,
    [cin, t_in, nodes, cout, kt, t_out, padding](detail::Node & self) {
      auto & nx = *self.inputs[0];
      auto & nw = *self.inputs[1];
      const bool gx = self.input_needs_grad(0);
      const bool gw = self.input_needs_grad(1);
      const bool gbias = self.inputs.size() > 2 && self.input_needs_grad(2);
      if (gx) nx.ensure_grad();
      if (gw) nw.ensure_grad();
      if (gbias) self.inputs[2]->ensure_grad();
      for (std::size_t co = 0; co < cout; ++co) {
        for (std::size_t t = 0; t < t_out; ++t) {
          const double * g = self.grad.data() + (co * t_out + t) * nodes;
          if (gbias) {
            double acc = 0.0;
            for (std::size_t n = 0; n < nodes; ++n) acc += g[n];
            self.inputs[2]->grad[co] += acc;
          }
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t k = 0; k < kt; ++k) {
              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(padding);
              if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
              const std::size_t widx = (co * cin + ci) * kt + k;
              const std::size_t xoff = (ci * t_in + static_cast<std::size_t>(src)) * nodes;
              if (gw) {
                double acc = 0.0;
                for (std::size_t n = 0; n < nodes; ++n) acc += g[n] * nx.values[xoff + n];
                nw.grad[widx] += acc;
              }
              if (gx) {
                const double w = nw.values[widx];
                for (std::size_t n = 0; n < nodes; ++n) nx.grad[xoff + n] += w * g[n];
              }
            }
          }
        }
      }
    });
}

inline Tensor conv_temporal(const Tensor & x, const Tensor & kernel, std::size_t padding)
{
  return conv_temporal(x, kernel, Tensor(), padding);
}

}  // namespace semstg
