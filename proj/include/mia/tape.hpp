#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mia/tensor.hpp"

namespace mia {

/// Ordered record of executed operations for reverse-mode differentiation.
///
/// Nodes are appended as operations run, so inputs always precede the node
/// that consumes them and a reverse sweep visits them in topological order.
/// A tape and the tensors it records are confined to one thread.
class Tape {
public:
  using BackwardFn = std::function<void()>;

  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // With recording off every op runs forward only (decoding, evaluation).
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  /// Registers `out` as produced by `op` from `inputs`. The backward rule reads
  /// out.grad() and accumulates into the inputs' grad buffers. Nothing is
  /// recorded when no input requires a gradient.
  Tensor record(std::string op, std::vector<Tensor> inputs, Tensor out, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!recording_ || !needs) return out;
    out.set_requires_grad(true);
    nodes_.push_back(Node{std::move(op), std::move(inputs), out, std::move(backward)});
    return out;
  }

  void backward(Tensor loss) {
    if (consumed_) throw ContractError("backward called twice on the same tape without reset()");
    if (loss.numel() != 1)
      throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  // Index and name of the first recorded op whose output holds NaN/Inf.
  std::optional<std::pair<std::size_t, std::string>> first_non_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (!nodes_[i].output.all_finite()) return std::make_pair(i, nodes_[i].op);
    return std::nullopt;
  }

private:
  std::vector<Node> nodes_;
  bool recording_ = true;
  bool consumed_ = false;
};

} // namespace mia
