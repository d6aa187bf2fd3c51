#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <vector>

#include "pda/numerics/tensor.hpp"

namespace pda::num {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Gradient sink handed to backward rules. Accumulates into input adjoints
// and skips inputs that do not lead back to a learnable leaf.
class Adjoints {
 public:
  Adjoints(const Tape& tape, std::vector<Tensor>& grads) : tape_(tape), grads_(grads) {}

  bool wants(std::size_t id) const;
  void add(std::size_t id, const Tensor& g);

 private:
  const Tape& tape_;
  std::vector<Tensor>& grads_;
};

using BackwardRule = std::function<void(const Tensor& grad_out, Adjoints& adj)>;

// Gradients for learnable leaves, keyed by node id.
using GradientMap = std::map<std::size_t, Tensor>;

// Append-only record of a computation. Nodes are stored in creation order,
// which is a topological order because every op's inputs already exist.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(Tensor value);
  Var constant(Tensor value);
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardRule rule);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool is_parameter(std::size_t id) const { return nodes_.at(id).parameter; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Reverse sweep from a 1x1 loss. Every learnable leaf gets an entry
  // (zeros when the loss does not depend on it); nothing else does.
  GradientMap backward(Var loss) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardRule rule;
    bool requires_grad = false;
    bool parameter = false;
  };
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace pda::num
