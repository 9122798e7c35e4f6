// Reverse-mode automatic differentiation over Tensor values.
//
// Every differentiable op produces a Var whose node remembers its inputs and a
// backward rule. Nodes carry a monotonically increasing sequence number, so
// creation order is a valid topological order; GradTape linearises the
// reachable sub-graph of a scalar output in that order and replays it in
// reverse. Gradients are retained on leaves only.
#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mdust/tensor.hpp"

namespace mdust {

namespace detail {

inline std::atomic<std::uint64_t>& sequence_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const noexcept { return inputs.empty(); }

  // Zero-initialised gradient buffer, allocated on first use.
  T* grad_buffer() {
    if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
    return grad.ptr();
  }
};

}  // namespace detail

inline bool grad_enabled() noexcept { return detail::grad_mode_flag(); }

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Var {
 public:
  using Node = detail::Node<T>;

  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->seq = detail::sequence_counter().fetch_add(1);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  // Direct mutation is for optimisers and checkpoint loading only.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t rank() const { return node_->value.rank(); }
  std::size_t size() const { return node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

  void backward() const;

  // Builds a result node. Inputs are only retained when grad mode is on and
  // at least one of them requires a gradient.
  static Var make(Tensor<T> value, const char* op, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    Var out(std::move(value));
    out.node_->op = op;
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const Var& v : inputs) needs = needs || v.requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (Var& v : inputs) out.node_->inputs.push_back(v.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  std::shared_ptr<Node> node_;
};

// Linearised record of the operations reachable from one scalar output.
template <typename T>
class GradTape {
 public:
  using Node = detail::Node<T>;

  static GradTape record(const Var<T>& root) {
    GradTape tape;
    tape.root_ = root.node();
    if (!root.requires_grad()) return tape;
    std::unordered_set<const Node*> seen;
    std::vector<Node*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      tape.records_.push_back(n);
      for (const auto& in : n->inputs) {
        if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
      }
    }
    std::sort(tape.records_.begin(), tape.records_.end(), [](const Node* a, const Node* b) { return a->seq < b->seq; });
    return tape;
  }

  // Ordered oldest first; every record's inputs precede it.
  const std::vector<Node*>& records() const noexcept { return records_; }

  void replay() {
    if (!root_ || !root_->requires_grad) return;
    root_->grad = Tensor<T>::ones(root_->value.shape());
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      Node* n = *it;
      if (n->is_leaf()) continue;
      if (!n->grad.empty() && n->backward) n->backward(*n);
      n->grad = Tensor<T>();
    }
  }

 private:
  std::shared_ptr<Node> root_;
  std::vector<Node*> records_;
};

template <typename T>
void Var<T>::backward() const {
  if (node_->value.size() != 1) {
    throw ShapeError("backward() needs a scalar output, got shape " + to_string(node_->value.shape()));
  }
  GradTape<T>::record(*this).replay();
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  return Var<T>(std::move(value), true);
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

}  // namespace mdust
