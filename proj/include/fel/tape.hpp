#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fel/tensor.hpp"

namespace fel {

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

// Define-by-run differentiation tape. Nodes are appended in execution order,
// so every node's inputs precede it and one reverse sweep visits each node
// exactly once. A tape is built per forward pass and discarded afterwards.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int node_id)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Source node holding a constant input.
  Var leaf(Tensor value);

  // Source node bound to a parameter tensor. Repeated calls with the same
  // tensor return the same node, so shared parameters accumulate gradients
  // from every use. The tensor must outlive the tape.
  Var param(Tensor& parameter);

  // Runs one reverse sweep from a scalar loss and adds each bound
  // parameter's total derivative into its grad buffer.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  const std::vector<double>& grad(Var v) const;

  // --- op implementation interface ---
  Var record(const char* op, const std::vector<int>& inputs, Tensor value,
             BackwardFn fn);
  const Tensor& node_value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  std::vector<double>& grad_buf(int id);
  const std::vector<int>& node_inputs(int id) const {
    return nodes_[static_cast<std::size_t>(id)].inputs;
  }
  const char* node_op(int id) const { return nodes_[static_cast<std::size_t>(id)].op; }
  // Constant leaves consume no gradient; ops may skip computing it for them.
  bool wants_grad(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.bound != nullptr || static_cast<bool>(n.backward);
  }

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  // Name and index of the first node whose value contains a non-finite
  // entry, or empty string when everything is finite.
  std::string first_nonfinite() const;

 private:
  struct Node {
    const char* op;
    std::vector<int> inputs;
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    Tensor* bound = nullptr;
  };

  int check(Var v) const;

  // deque, not vector: recording never moves existing nodes, so references
  // from value()/node_value() stay valid while the graph keeps growing
  std::deque<Node> nodes_;
  std::unordered_map<Tensor*, int> bindings_;
  bool backward_done_ = false;
};

}  // namespace fel
