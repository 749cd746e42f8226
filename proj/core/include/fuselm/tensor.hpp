#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fuselm/error.hpp"

namespace fuselm {

class Rng;

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

namespace detail {

// One node of the reverse-mode tape. A Tensor is a shared handle to this.
// `backward_fn` reads this node's grad and accumulates into the parents'
// grads; it is released after it runs so a graph can be walked only once.
struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool consumed = false;  // a backward pass already ran through this node
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  void ensure_grad();  // allocate zero-filled grad buffer if absent
};

bool grad_enabled();

}  // namespace detail

// Dense row-major double tensor with reverse-mode autodiff. Handles share
// the underlying node: copying a Tensor aliases storage and graph identity.
class Tensor {
 public:
  Tensor() = default;  // undefined tensor; most operations reject it

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // I.i.d. normal entries, mean 0, given stddev.
  static Tensor randn(Shape shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t dim(int i) const;
  int64_t numel() const;

  std::span<const double> values() const;
  // Mutable access to raw storage. Not recorded on the tape: callers use this
  // for initialization and optimizer updates, never inside a traced forward.
  std::span<double> mutable_values();

  double scalar_value() const;           // numel()==1
  double at(int64_t i) const;             // rank 1 (or flat index)
  double at(int64_t i, int64_t j) const;  // rank 2

  bool requires_grad() const;
  void set_requires_grad(bool value);

  // True once a backward pass has deposited gradient into this tensor.
  bool has_grad() const;
  std::span<const double> grad() const;  // GraphStateError if !has_grad()
  std::span<double> mutable_grad();      // allocates if absent
  void zero_grad();                      // drop the gradient buffer entirely

  // Detached copy of the values: no graph history, requires_grad false.
  Tensor detach_copy() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Reverse topological view of the expression tree hanging off a root.
// `order` lists nodes so that every node appears after all its consumers
// were listed before it (i.e. forward topological order; backward walks it
// in reverse).
struct Graph {
  std::vector<std::shared_ptr<detail::TensorNode>> order;
  static Graph trace(const Tensor& root);
};

// Runs reverse-mode accumulation from `loss` (must be scalar). Seeds dL/dL=1
// and adds into the .grad of every reachable tensor that requires grad.
// Gradients accumulate additively across calls on *different* graphs that
// share leaves; walking the *same* graph twice throws GraphStateError.
void backward(const Tensor& loss);

// While alive, newly created ops record no graph (outputs are constants).
// Nestable; thread-local.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// A named handle on a parameter tensor, used by optimizers and checkpoints.
struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamRefs = std::vector<NamedParam>;

}  // namespace fuselm
