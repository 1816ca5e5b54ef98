#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tensor/tensor.hpp"

namespace magmix {

// A named trainable tensor plus its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;       // subject to decoupled weight decay
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros_like(value)), decay(wd) {}

  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
class Tape;

template <typename T>
struct Node {
  Tensor<T> value;
  const Tensor<T>* external = nullptr;  // leaf that aliases a Parameter's value
  Parameter<T>* param = nullptr;
  Tensor<T> grad;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into its inputs' grads.
  std::function<void(Node&)> backward;
  Tape<T>* tape = nullptr;

  const Tensor<T>& val() const { return external ? *external : value; }
  const Shape& shape() const { return val().shape(); }

  // Zero-initialized on first touch so fan-out contributions add up.
  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>::zeros_like(val());
      has_grad = true;
    }
    return grad;
  }
  Tensor<T>* input_grad(std::size_t i) {
    Node& in = *inputs[i];
    return in.requires_grad ? &in.grad_buffer() : nullptr;
  }
};

// Handle to a value on the tape (or a detached constant when tape is null).
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->val(); }
  const Shape& shape() const { return node_->shape(); }
  Index dim(int axis) const { return value().dim(axis); }
  int ndim() const { return value().ndim(); }
  bool requires_grad() const { return node_->requires_grad; }
  // Gradient after Tape::backward; empty tensor if none flowed here.
  const Tensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->has_grad; }
  Tape<T>* tape() const { return node_->tape; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

enum class GradMode { Record, Off };

// Records operations in execution order (which is a topological order) and
// replays their backward rules in reverse. Single owner; not thread-safe.
template <typename T>
class Tape {
 public:
  explicit Tape(GradMode mode = GradMode::Record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return mode_ == GradMode::Record; }

  // Constant input. Never requires grad.
  Var<T> input(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->tape = this;
    return Var<T>(std::move(node));
  }

  // Differentiable leaf owned by the caller (gradient lands in leaf.grad()).
  Var<T> leaf(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->tape = this;
    node->requires_grad = recording();
    if (node->requires_grad) nodes_.push_back(node);
    return Var<T>(std::move(node));
  }

  // Leaf aliasing a parameter; backward accumulates into param.grad.
  Var<T> param(Parameter<T>& p) {
    auto node = std::make_shared<Node<T>>();
    node->external = &p.value;
    node->param = &p;
    node->tape = this;
    node->requires_grad = recording() && p.trainable;
    if (node->requires_grad) nodes_.push_back(node);
    return Var<T>(std::move(node));
  }

  // Called by ops. Keeps the node (and through it, its inputs) alive only
  // when a gradient can flow through it.
  void record(const std::shared_ptr<Node<T>>& node, Index mult_adds, Index scratch_elems) {
    activation_elems_ += node->value.size() + scratch_elems;
    mult_adds_ += mult_adds;
    ++op_count_;
    if (node->requires_grad) nodes_.push_back(node);
  }

  void backward(const Var<T>& root) {
    Node<T>& r = *root.node();
    if (r.tape != this) throw ConfigError("backward root belongs to a different tape");
    if (r.val().size() != 1) throw ShapeError("backward root must be a scalar, got " + shape_str(r.shape()));
    if (!r.requires_grad) return;
    r.grad_buffer()[0] += T{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (!n.has_grad) continue;
      if (n.backward) {
        n.backward(n);
        if (&n != &r) {
          n.grad = Tensor<T>();  // interior grads are not needed past this point
          n.has_grad = false;
        }
      } else if (n.param) {
        auto& dst = n.param->grad;
        const auto& src = n.grad;
        for (Index i = 0; i < src.size(); ++i) dst[i] += src[i];
      }
    }
  }

  void clear() {
    nodes_.clear();
    activation_elems_ = 0;
    mult_adds_ = 0;
    op_count_ = 0;
  }

  std::size_t recorded() const noexcept { return nodes_.size(); }
  Index activation_elems() const noexcept { return activation_elems_; }
  Index mult_adds() const noexcept { return mult_adds_; }
  Index op_count() const noexcept { return op_count_; }

 private:
  GradMode mode_;
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  Index activation_elems_ = 0;
  Index mult_adds_ = 0;
  Index op_count_ = 0;
};

namespace detail {

// Builds the output node of an op; the backward rule is retained only if some
// input requires grad. Non-finite outputs are rejected here.
template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward, Index mult_adds = 0, Index scratch_elems = 0) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  Tape<T>* tape = nullptr;
  bool needs = false;
  for (const Var<T>& v : inputs) {
    if (!v) continue;
    if (v.tape()) {
      if (tape && v.tape() != tape) throw ConfigError("operation mixes values from different tapes");
      tape = v.tape();
    }
    needs = needs || v.requires_grad();
  }
  node->tape = tape;
  if (needs && tape && tape->recording()) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& v : inputs) node->inputs.push_back(v ? v.node() : std::make_shared<Node<T>>());
    node->backward = std::move(backward);
  }
  if (tape) tape->record(node, mult_adds, scratch_elems);
  return Var<T>(std::move(node));
}

}  // namespace detail

}  // namespace magmix
