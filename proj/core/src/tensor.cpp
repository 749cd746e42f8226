#include "fuselm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "fuselm/rng.hpp"

namespace fuselm {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

namespace detail {

void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
}

namespace {
thread_local int g_no_grad_depth = 0;
}

bool grad_enabled() { return g_no_grad_depth == 0; }

}  // namespace detail

NoGradGuard::NoGradGuard() { ++detail::g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --detail::g_no_grad_depth; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto node = std::make_shared<detail::TensorNode>();
  node->values.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node_->values.begin(), t.node_->values.end(), value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.node_->values) v = stddev * rng.next_normal();
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw DimensionError("shape() on undefined tensor");
  return node_->shape;
}

int64_t Tensor::dim(int i) const {
  const Shape& s = shape();
  if (i < 0 || i >= static_cast<int>(s.size())) {
    throw DimensionError("dim index " + std::to_string(i) + " out of range for " +
                         shape_str(s));
  }
  return s[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const {
  if (!node_) throw DimensionError("numel() on undefined tensor");
  return node_->numel();
}

std::span<const double> Tensor::values() const {
  if (!node_) throw DimensionError("values() on undefined tensor");
  return node_->values;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw DimensionError("mutable_values() on undefined tensor");
  return node_->values;
}

double Tensor::scalar_value() const {
  if (numel() != 1) {
    throw DimensionError("scalar_value() on tensor of shape " + shape_str(shape()));
  }
  return node_->values[0];
}

double Tensor::at(int64_t i) const {
  if (i < 0 || i >= numel()) {
    throw DimensionError("flat index " + std::to_string(i) + " out of range");
  }
  return node_->values[static_cast<size_t>(i)];
}

double Tensor::at(int64_t i, int64_t j) const {
  if (rank() != 2) throw DimensionError("at(i,j) needs a rank-2 tensor");
  int64_t rows = dim(0), cols = dim(1);
  if (i < 0 || i >= rows || j < 0 || j >= cols) {
    throw DimensionError("index (" + std::to_string(i) + "," + std::to_string(j) +
                         ") out of range for " + shape_str(shape()));
  }
  return node_->values[static_cast<size_t>(i * cols + j)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_) throw DimensionError("set_requires_grad on undefined tensor");
  node_->requires_grad = value;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) {
    throw GraphStateError("grad() requested but no gradient has been accumulated");
  }
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw DimensionError("mutable_grad on undefined tensor");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

Tensor Tensor::detach_copy() const {
  if (!node_) return Tensor();
  return from_values(node_->shape, node_->values, false);
}

Graph Graph::trace(const Tensor& root) {
  Graph g;
  if (!root.defined()) throw DimensionError("trace() on undefined tensor");
  if (!root.node()->requires_grad) return g;
  // Iterative post-order DFS over grad-requiring parents. Post-order yields
  // forward-topological `order` (producers before consumers... strictly:
  // every node is emitted after all nodes it depends on), so backward
  // iterates it in reverse.
  std::unordered_set<detail::TensorNode*> seen;
  struct Frame {
    std::shared_ptr<detail::TensorNode> node;
    size_t next_parent = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      auto parent = top.node->parents[top.next_parent++];
      if (parent->requires_grad && !seen.count(parent.get())) {
        seen.insert(parent.get());
        stack.push_back({std::move(parent), 0});
      }
    } else {
      g.order.push_back(top.node);
      stack.pop_back();
    }
  }
  return g;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw DimensionError("backward() on undefined tensor");
  if (loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " +
                         shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (root->consumed) {
    throw GraphStateError("backward() called twice through the same graph");
  }
  if (!root->requires_grad) {
    throw GraphStateError(
        "backward() on a tensor with no gradient-tracked inputs");
  }
  if (!std::isfinite(root->values[0])) {
    throw NumericError("backward() on non-finite loss");
  }

  Graph g = Graph::trace(loss);
  root->ensure_grad();
  root->grad[0] += 1.0;

  // Reverse topological sweep. Consumers of a node all run before the node's
  // own backward_fn, so its grad is complete when read.
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    detail::TensorNode& node = **it;
    if (node.consumed) {
      // Interior node spent by an earlier pass (shared subexpression across
      // two losses). Propagating partially would corrupt gradients silently.
      throw GraphStateError("backward() reached an already-consumed subgraph");
    }
    if (node.backward_fn) {
      if (!node.grad.empty()) {
        node.backward_fn(node);
      }
      node.consumed = true;
      // The tape through this node is spent: release the closure and edges so
      // a second pass cannot run and intermediate memory dies with the sweep.
      node.backward_fn = nullptr;
      node.parents.clear();
      node.grad.clear();
      node.grad.shrink_to_fit();
    }
  }
  root->consumed = true;
}

}  // namespace fuselm
