#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "geopix/tensor.hpp"

namespace geopix {

/// Learnable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  // Accumulator written by Tape::backward; not part of the logical value.
  mutable BasicTensor<T> grad;
  bool trainable = true;
  bool decay = true;

  Parameter() = default;
  Parameter(std::string n, BasicTensor<T> v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), decay(wd) {}

  void zero_grad() const {
    if (grad.shape() != value.shape()) {
      grad = BasicTensor<T>::zeros(value.shape());
    } else {
      grad.fill(T{0});
    }
  }
};

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  std::size_t numel() const { return tape->value(id).numel(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Reverse-mode gradient tape for a single step on a single thread.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order; backward walks it once in reverse.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> constant(BasicTensor<T> v) { return push(std::move(v), false, nullptr, {}, {}); }

  Var<T> leaf(BasicTensor<T> v, bool requires_grad = true) {
    return push(std::move(v), requires_grad && grad_enabled_, nullptr, {}, {});
  }

  /// Leaf bound to a Parameter; repeated calls return the same node. After
  /// backward() the node gradient is added into `p.grad`.
  Var<T> param(const Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>{this, it->second};
    Var<T> v = push(p.value, grad_enabled_ && p.trainable, &p, {}, {});
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  /// Records an op output. The node requires grad iff any input does.
  Var<T> record(BasicTensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn,
                const char* op_name) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn), op_name);
  }

  Var<T> record(BasicTensor<T> value, const std::vector<Var<T>>& inputs, Backward fn, const char* op_name) {
    if (!value.all_finite()) {
      throw NumericalError(std::string("non-finite value produced by ") + op_name);
    }
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (in.tape != this) throw UsageError(std::string(op_name) + ": inputs from a different tape");
      ids.push_back(in.id);
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), needs, nullptr, std::move(ids), needs ? std::move(fn) : Backward{});
  }

  const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  /// Gradient buffer of a node, allocated (zeroed) on first access.
  BasicTensor<T>& grad(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = BasicTensor<T>::zeros(n.value.shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every leaf that requires grad.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw UsageError("backward: loss from a different tape");
    if (loss.numel() != 1) throw DimensionError("backward: loss must hold one element");
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
        auto g = n.param->grad.values();
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
      }
    }
  }

  /// Running hash of branch decisions taken by non-smooth ops (relu signs,
  /// max selections). Two evaluations with equal signatures lie on the same
  /// smooth piece of the function.
  void note_branch(std::uint64_t bits) noexcept {
    signature_ ^= bits + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  }
  std::uint64_t branch_signature() const noexcept { return signature_; }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    const Parameter<T>* param = nullptr;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  Var<T> push(BasicTensor<T> v, bool requires_grad, const Parameter<T>* p, std::vector<std::size_t> ins,
              Backward fn) {
    nodes_.push_back(Node{std::move(v), {}, requires_grad, p, std::move(ins), std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  bool grad_enabled_;
  // deque: references to earlier node values stay valid while ops append.
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  std::uint64_t signature_ = 0;
};

}  // namespace geopix
