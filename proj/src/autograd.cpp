#include "ccm/autograd.hpp"

#include <unordered_set>

namespace ccm {
namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

template <class T>
void backward(const BasicVar<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError("backward requires a scalar loss");
  if (!loss.requires_grad() || loss.node()->is_leaf())
    throw UsageError("backward on a scalar that was not produced by recorded ops");

  // Post-order DFS gives a topological order; iterate it in reverse.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && !child->is_leaf() && seen.insert(child).second)
        stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  loss.node()->grad = BasicTensor<T>(loss.shape(), T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->has_grad()) continue;
    node->backward_fn(*node);
    // Interior gradients are not needed after propagation.
    if (node != loss.node().get()) node->grad = BasicTensor<T>();
  }
}

template void backward<float>(const BasicVar<float>&);
template void backward<double>(const BasicVar<double>&);

}  // namespace ccm
