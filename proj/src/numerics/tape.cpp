#include "pda/numerics/tape.hpp"

#include "pda/errors.hpp"

namespace pda::num {

bool Adjoints::wants(std::size_t id) const { return tape_.requires_grad(id); }

void Adjoints::add(std::size_t id, const Tensor& g) {
  if (!tape_.requires_grad(id)) return;
  Tensor& slot = grads_[id];
  if (slot.empty()) {
    if (!g.same_shape(tape_.value(id))) {
      throw DimensionError("adjoint " + g.shape_string() + " for node of shape " + tape_.value(id).shape_string());
    }
    slot = g;
  } else {
    slot += g;
  }
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, true});
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, false});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardRule rule) {
  bool needs = false;
  for (auto in : inputs) {
    if (in >= nodes_.size()) throw ContractError("op input refers to a node that does not exist yet");
    needs = needs || nodes_[in].requires_grad;
  }
  // Rules on nodes that cannot reach a parameter are never invoked.
  nodes_.push_back(Node{std::move(value), std::move(inputs), needs ? std::move(rule) : BackwardRule{}, needs, false});
  return Var{this, nodes_.size() - 1};
}

GradientMap Tape::backward(Var loss) const {
  if (loss.tape != this) throw ContractError("loss node belongs to a different tape");
  const Tensor& lv = value(loss.id);
  if (lv.size() != 1) throw ContractError("backward needs a scalar loss, got " + lv.shape_string());

  std::vector<Tensor> grads(nodes_.size());
  Adjoints adj(*this, grads);
  if (nodes_[loss.id].requires_grad) grads[loss.id] = Tensor(1, 1, 1.0);

  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || !node.rule) continue;
    node.rule(grads[i], adj);
  }

  GradientMap out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].parameter) continue;
    const Tensor& v = nodes_[i].value;
    out.emplace(i, grads[i].empty() ? Tensor(v.shape(), std::vector<double>(v.size(), 0.0)) : std::move(grads[i]));
  }
  return out;
}

}  // namespace pda::num
