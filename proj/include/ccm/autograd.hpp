#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ccm/tensor.hpp"

namespace ccm {

// Gradient recording is on by default and thread-local. A NoGradGuard scope
// evaluates ops without recording, which is how stopgrad teachers run.
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  BasicTensor<T> value;
  BasicTensor<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const noexcept { return !backward_fn; }
  bool has_grad() const noexcept { return !grad.empty(); }

  void accumulate(const BasicTensor<T>& g) {
    if (grad.empty()) {
      grad = g;
      return;
    }
    T* dst = grad.ptr();
    const T* src = g.ptr();
    for (int64_t i = 0, n = grad.numel(); i < n; ++i) dst[i] += src[i];
  }

  // Returns a zero-filled gradient buffer for in-place accumulation.
  BasicTensor<T>& grad_buffer() {
    if (grad.empty()) grad = BasicTensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class BasicVar {
 public:
  BasicVar() = default;
  explicit BasicVar(BasicTensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit BasicVar(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const BasicTensor<T>& value() const { return node_->value; }
  BasicTensor<T>& mutable_value() { return node_->value; }
  const BasicTensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t numel() const { return node_->value.numel(); }
  int64_t dim(int i) const { return node_->value.dim(i); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Var = BasicVar<float>;
using Var64 = BasicVar<double>;

// Creates an op output node. Records the graph only when grad mode is on and
// at least one input requires grad; otherwise the result is a constant.
template <class T>
BasicVar<T> make_result(BasicTensor<T> value, std::vector<std::shared_ptr<Node<T>>> inputs,
                        std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return BasicVar<T>(std::move(node));
}

// Reverse-mode sweep from a scalar. Throws UsageError when the scalar was not
// produced by recorded ops.
template <class T>
void backward(const BasicVar<T>& loss);

// Stopgrad: same value, no graph.
template <class T>
BasicVar<T> detach(const BasicVar<T>& x) {
  return BasicVar<T>(x.value(), false);
}

}  // namespace ccm
