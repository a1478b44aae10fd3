#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "stochca/tensor.hpp"

namespace stochca {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/**
 * Define-by-run record of a forward pass.
 *
 * Nodes are appended in evaluation order, so the node list is already a
 * topological order and backward() is a single reverse sweep. A tape built
 * in inference mode stores values only: no backward rules are kept and
 * frozen parameters may be read.
 */
class Tape {
 public:
  enum class Mode { record, inference };

  // Propagates the output gradient into the inputs' gradient slots.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return mode_ == Mode::record; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Number of nodes that carry a backward rule.
  std::size_t recorded_ops() const noexcept {
    std::size_t n = 0;
    for (const auto& node : nodes_) n += node.backward ? 1 : 0;
    return n;
  }

  Var constant(Tensor value) {
    Node node;
    node.value = std::move(value);
    return push(std::move(node));
  }

  /// Leaf for a parameter; the parameter must outlive the tape and stay unmodified.
  Var param(const Parameter& p) {
    if (recording() && p.frozen)
      throw InvariantViolation("frozen parameter '" + p.name + "' entered a gradient tape");
    Node node;
    node.external = &p.value;
    node.param = recording() ? &p : nullptr;
    node.needs_grad = recording();
    return push(std::move(node));
  }

  /// Constant leaf that refers to caller-owned storage instead of copying it.
  Var constant_ref(const Tensor& value) {
    Node node;
    node.external = &value;
    return push(std::move(node));
  }

  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
             BackwardFn backward) {
    return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
             BackwardFn backward) {
    if (!value.all_finite())
      throw NumericError(std::string(op) + ": non-finite value in output");
    Node node;
    node.value = std::move(value);
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape != this) throw ContractError(std::string(op) + ": input from a different tape");
      needs = needs || nodes_[in.id].needs_grad;
    }
    if (recording() && needs) {
      node.needs_grad = true;
      node.backward = std::move(backward);
    }
    return push(std::move(node));
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient slot of a node, created zero-filled on first access.
  Tensor& grad(Var v) {
    Node& n = nodes_[v.id];
    if (!n.has_grad) {
      n.grad = Tensor(value(v).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(Var v) const { return nodes_[v.id].has_grad; }

  /// Reverse sweep from a scalar output; accumulates into reachable parameters.
  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss from a different tape");
    if (!recording()) throw ContractError("backward: tape was built in inference mode");
    if (value(loss).size() != 1)
      throw ContractError("backward: loss must be scalar, got " + shape_str(value(loss).shape()));
    grad(loss).fill(1.0);
    for (std::uint32_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) {
        if (n.param->frozen)
          throw InvariantViolation("gradient reached frozen parameter '" + n.param->name + "'");
        if (!n.param->grad) n.param->grad = Tensor(n.param->value.shape());
        kernels::axpy(1.0, n.grad, *n.param->grad);
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    const Parameter* param = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Mode mode_;
  std::deque<Node> nodes_;  // stable addresses across push_back
};

inline const Tensor& Var::value() const { return tape->value(*this); }

/// Accumulates `g` into the gradient of `v` if it participates in differentiation.
inline void accumulate(Tape& tape, Var v, const Tensor& g) {
  if (!tape.needs_grad(v)) return;
  kernels::axpy(1.0, g, tape.grad(v));
}

}  // namespace stochca
