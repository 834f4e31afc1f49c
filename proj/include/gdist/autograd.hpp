#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gdist/tensor.hpp"

namespace gdist::ag {

/// One value in the dynamic computation graph. Leaves with requires_grad are parameters
/// (or probed inputs); interior nodes carry a closure that pushes `grad` into parents.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.shape() != value.shape() || grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
  }
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

class Var {
public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var parameter(Tensor value) { return Var(std::move(value), true); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }

  void zero_grad() {
    if (node_->grad.size()) node_->grad.fill(0.0);
  }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

private:
  std::shared_ptr<Node> node_;
};

/// Build an interior node. The closure is dropped when no parent needs a gradient.
inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.node());
      n->backward = std::move(backward);
    }
  }
  return Var(std::move(n));
}

/// Gradient buffer of parent i, or nullptr when that parent is constant.
inline double* parent_grad(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  if (!p || !p->requires_grad) return nullptr;
  return p->grad_buffer().data();
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate.
inline void backward(const Var& root) {
  if (root.value().size() != 1) throw ShapeError("backward() requires a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size()) n->backward(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node* n : order)
    if (n->backward) n->grad = Tensor();
}

}  // namespace gdist::ag
