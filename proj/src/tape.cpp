#include "fel/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace fel {

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{"leaf", {}, std::move(value), {}, nullptr, nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Tensor& parameter) {
  auto it = bindings_.find(&parameter);
  if (it != bindings_.end()) return Var{this, it->second};
  nodes_.push_back(Node{"param", {}, parameter, {}, nullptr, &parameter});
  const int id = static_cast<int>(nodes_.size()) - 1;
  bindings_.emplace(&parameter, id);
  return Var{this, id};
}

Var Tape::record(const char* op, const std::vector<int>& inputs, Tensor value,
                 BackwardFn fn) {
  nodes_.push_back(Node{op, inputs, std::move(value), {}, std::move(fn), nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

int Tape::check(Var v) const {
  if (v.tape != this)
    throw std::invalid_argument("tape: variable belongs to a different tape");
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("tape: variable id out of range");
  return v.id;
}

const Tensor& Tape::value(Var v) const { return nodes_[static_cast<std::size_t>(check(v))].value; }

const std::vector<double>& Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(check(v))];
  if (!backward_done_)
    throw std::logic_error("tape: gradients requested before backward()");
  return n.grad;
}

std::vector<double>& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad.assign(n.value.data.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  const int root = check(loss);
  if (backward_done_)
    throw std::logic_error("tape: backward() called twice without a fresh tape");
  if (nodes_[static_cast<std::size_t>(root)].value.size() != 1)
    throw std::invalid_argument("tape: loss must be a scalar, got shape " +
                                shape_str(nodes_[static_cast<std::size_t>(root)].value.shape));

  std::vector<char> reachable(static_cast<std::size_t>(root) + 1, 0);
  reachable[static_cast<std::size_t>(root)] = 1;
  for (int id = root; id >= 0; --id) {
    if (!reachable[static_cast<std::size_t>(id)]) continue;
    for (int in : nodes_[static_cast<std::size_t>(id)].inputs)
      reachable[static_cast<std::size_t>(in)] = 1;
  }

  if (!bindings_.empty()) {
    bool any_param_reachable = false;
    for (const auto& [tensor, id] : bindings_) {
      (void)tensor;
      if (id <= root && reachable[static_cast<std::size_t>(id)]) {
        any_param_reachable = true;
        break;
      }
    }
    if (!any_param_reachable)
      throw std::invalid_argument(
          "tape: loss is detached from every bound parameter");
  }

  grad_buf(root)[0] = 1.0;
  for (int id = root; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!reachable[static_cast<std::size_t>(id)] || !n.backward) continue;
    if (n.grad.empty()) continue;
    n.backward(*this, id);
  }

  for (auto& [tensor, id] : bindings_) {
    if (id > root || !reachable[static_cast<std::size_t>(id)]) continue;
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) continue;
    tensor->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) tensor->grad[i] += n.grad[i];
  }
  backward_done_ = true;
}

std::string Tape::first_nonfinite() const {
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    for (double v : nodes_[id].value.data) {
      if (!std::isfinite(v))
        return std::string(nodes_[id].op) + "#" + std::to_string(id);
    }
  }
  return {};
}

}  // namespace fel
