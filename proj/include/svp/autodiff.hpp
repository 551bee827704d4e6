#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "svp/tensor.hpp"

namespace svp::ad {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
// sweep over ids is a valid topological order for backpropagation.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    const char* op = "";
    Tensor<T> value;
    const Tensor<T>* external = nullptr;  // parameter leaves reference net storage
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::ptrdiff_t parameter = -1;
    bool needs_grad = false;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> input(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.op = "input";
    n.value = std::move(value);
    n.needs_grad = grad_enabled_ && requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<T> parameter(const Tensor<T>& value, std::size_t index) {
    Node n;
    n.op = "parameter";
    n.external = &value;
    n.parameter = static_cast<std::ptrdiff_t>(index);
    n.needs_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<T> record(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn bw) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (std::size_t i : inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    n.inputs = std::move(inputs);
    if (n.needs_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient buffer of a node, zero-filled on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && value(id).size() > 0) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  void backward(Var<T> root, const Tensor<T>& seed) {
    if (root.tape != this) throw std::invalid_argument("backward: variable from another tape");
    if (!grad_enabled_) throw std::logic_error("backward: tape was recorded without gradients");
    require_same_shape(value(root.id), seed, "backward seed");
    Tensor<T>& g = grad(root.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward(*this, id);
    }
    backward_done_ = true;
  }

  void backward(Var<T> root) {
    if (value(root.id).size() != 1) throw std::invalid_argument("backward: root is not a scalar");
    backward(root, Tensor<T>(value(root.id).shape(), T(1)));
  }

  bool backward_done() const { return backward_done_; }

  // Sum of leaf gradients per parameter index; parameters never touched get zeros.
  std::vector<Tensor<T>> parameter_gradients(const std::vector<const Tensor<T>*>& params) const {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (const auto* p : params) out.emplace_back(p->shape());
    for (const Node& n : nodes_) {
      if (n.parameter < 0 || n.grad.empty()) continue;
      auto& dst = out.at(static_cast<std::size_t>(n.parameter));
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
    return out;
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_[id]; }

 private:
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

}  // namespace svp::ad
