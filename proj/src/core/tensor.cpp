// SPDX-License-Identifier: Apache-2.0

#include "edmb/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace edmb {

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw Error("shape " + shape_str(shape) + " has a non-positive dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<Node>()) {
  const std::size_t n = shape_numel(shape);
  node_->shape = std::move(shape);
  node_->data.assign(n, fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node>()) {
  const std::size_t n = shape_numel(shape);
  if (n != data.size()) {
    throw Error("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
int Tensor<T>::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw Error("dimension index out of range for shape " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(i)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw Error("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

namespace {

template <typename T, typename Range>
Tensor<T> make_result_impl(Shape shape, std::vector<T> data, const Range& inputs, const char* op,
                           std::function<void(typename Tensor<T>::Node&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  auto* node = out.node();
  node->op = op;
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const Tensor<T>* in : inputs) {
    if (in && in->defined() && in->requires_grad()) any = true;
  }
  if (!any) return out;
  node->requires_grad = true;
  for (const Tensor<T>* in : inputs) {
    if (in && in->defined()) node->parents.push_back(in->node_ptr());
  }
  node->backward_fn = std::move(backward_fn);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, const char* op,
                      std::function<void(typename Tensor<T>::Node&)> backward_fn) {
  return make_result_impl<T>(std::move(shape), std::move(data), inputs, op, std::move(backward_fn));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      const char* op,
                      std::function<void(typename Tensor<T>::Node&)> backward_fn) {
  std::vector<const Tensor<T>*> ptrs;
  ptrs.reserve(inputs.size());
  for (const auto& t : inputs) ptrs.push_back(&t);
  return make_result_impl<T>(std::move(shape), std::move(data), ptrs, op, std::move(backward_fn));
}

template <typename T>
Graph<T>::Graph(const Tensor<T>& root) {
  using Node = typename Tensor<T>::Node;
  if (!root.defined()) return;
  std::unordered_set<const Node*> done;
  // Iterative post-order DFS; an explicit stack keeps deep ViM stacks safe.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  std::unordered_set<const Node*> on_stack{root.node()};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !done.count(parent) && !on_stack.count(parent)) {
        on_stack.insert(parent);
        stack.emplace_back(parent, 0);
      }
      continue;
    }
    done.insert(node);
    on_stack.erase(node);
    order_.push_back(node);
    stack.pop_back();
  }
}

template <typename T>
void backward(Tensor<T>& loss) {
  if (!loss.defined()) throw Error("backward: undefined loss tensor");
  if (loss.numel() != 1) {
    throw Error("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  auto* root = loss.node();
  if (root->consumed) throw Error("backward: graph already consumed; run a new forward pass first");
  if (!root->requires_grad) throw Error("backward: loss does not depend on any tensor requiring grad");

  Graph<T> graph(loss);
  root->grad_buffer()[0] += T(1);
  const auto& order = graph.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (auto* node : order) {
    node->grad_buffer();
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->parents.clear();
      node->consumed = true;
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;
template void backward<float>(Tensor<float>&);
template void backward<double>(Tensor<double>&);
template Tensor<float> make_result(Shape, std::vector<float>, std::initializer_list<const Tensor<float>*>,
                                   const char*, std::function<void(Tensor<float>::Node&)>);
template Tensor<double> make_result(Shape, std::vector<double>,
                                    std::initializer_list<const Tensor<double>*>, const char*,
                                    std::function<void(Tensor<double>::Node&)>);
template Tensor<float> make_result(Shape, std::vector<float>, const std::vector<Tensor<float>>&,
                                   const char*, std::function<void(Tensor<float>::Node&)>);
template Tensor<double> make_result(Shape, std::vector<double>, const std::vector<Tensor<double>>&,
                                    const char*, std::function<void(Tensor<double>::Node&)>);

}  // namespace edmb
