#pragma once

// Dense float64 tensors with tape-free reverse-mode differentiation. Every op
// output keeps references to its operands and a closure implementing the
// backward rule; `backward` orders the reachable nodes topologically and runs
// each closure once.

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

#include "clipbench/error.hpp"

namespace clipbench {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  const char* op = "leaf";

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimension must be positive: " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; intended for leaves (optimizers, initializers).
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated.
  std::vector<double> grad() const {
    return node_->grad.empty() ? std::vector<double>(numel(), 0.0) : node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Same values, no history, no gradient.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  const char* op_name() const { return node_->op; }
  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Builds an op result. When any operand requires a gradient (and recording is
// enabled) the result records its operands and backward rule.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> operands,
                          detail::BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& t : operands) needs = needs || (t.defined() && t.requires_grad());
  if (!needs) return out;
  auto* n = out.node();
  n->requires_grad = true;
  n->op = op;
  for (const auto& t : operands)
    if (t.defined()) n->parents.push_back(t.handle());
  n->backward = std::move(backward);
  return out;
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          const std::vector<Tensor>& operands,
                          detail::BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& t : operands) needs = needs || t.requires_grad();
  if (!needs) return out;
  auto* n = out.node();
  n->requires_grad = true;
  n->op = op;
  for (const auto& t : operands) n->parents.push_back(t.handle());
  n->backward = std::move(backward);
  return out;
}

// Gradient buffer of an operand if it participates in differentiation,
// otherwise an empty span. Backward rules skip empty spans.
inline std::span<double> grad_sink(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return t.node()->grad_buffer();
}

// Reverse-topological evaluation order of everything reachable from a root.
class Graph {
 public:
  explicit Graph(const Tensor& root) {
    // Iterative post-order DFS; each node is emitted after all its parents.
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  // Operands precede results.
  const std::vector<detail::Node*>& topological_order() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<detail::Node*> order_;
};

// Accumulates d(loss)/d(x) into every reachable tensor with requires_grad.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) return;
  Graph graph(loss);
  auto g = loss.node()->grad_buffer();
  g[0] += 1.0;
  const auto& order = graph.topological_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

}  // namespace clipbench
