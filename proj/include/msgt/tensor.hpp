#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "msgt/errors.hpp"

namespace msgt {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
// Row-major strides for a contiguous array of the given shape.
std::vector<Index> shape_strides(const Shape& shape);

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Global switch for graph recording. Disabled inside NoGradGuard scopes
// (evaluation, optimizer updates, finite differencing).
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

std::uint64_t next_sequence();

template <typename Scalar>
struct Node {
  Shape shape;
  Vector<Scalar> data;
  Vector<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t sequence = next_sequence();
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  Vector<Scalar>& ensure_grad() {
    if (grad.size() != data.size()) grad = Vector<Scalar>::Zero(data.size());
    return grad;
  }
};

}  // namespace detail

// Dense row-major n-dimensional array with optional gradient.
//
// A Tensor is a shared handle: copies alias the same storage and graph node,
// mirroring how parameters are threaded through the model. Use clone() or
// detach() for an independent copy.
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::Node<Scalar>;
  using VectorType = Vector<Scalar>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, VectorType data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }
  static Tensor full(const Shape& shape, Scalar value);
  static Tensor from(const Shape& shape, std::initializer_list<Scalar> values);
  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  // Extent of an axis; negative axes count from the back.
  Index dim(int axis) const;
  Index numel() const { return static_cast<Index>(node_->data.size()); }

  VectorType& data() { return node_->data; }
  const VectorType& data() const { return node_->data; }
  Scalar* raw() { return node_->data.data(); }
  const Scalar* raw() const { return node_->data.data(); }

  Scalar at(std::initializer_list<Index> index) const;
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->data.size() && node_->data.size() > 0; }
  VectorType& grad() { return node_->ensure_grad(); }
  const VectorType& grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.resize(0); }

  // Reverse-mode sweep from this scalar. Throws ContractError for non-scalars.
  void backward();

  Tensor detach() const;
  Tensor clone() const { return detach(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }
  const char* op_name() const { return node_->op; }

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of the operations that produced a root tensor.
//
// Nodes are ordered by creation sequence, which is a topological order
// because every operation allocates its output after its inputs exist.
template <typename Scalar>
class ComputeGraph {
 public:
  using Node = detail::Node<Scalar>;

  static ComputeGraph trace(const Tensor<Scalar>& root);

  // Operations in execution order (inputs before consumers). Leaves excluded.
  const std::vector<Node*>& operations() const { return ops_; }

  // Seeds d(root)/d(root) = 1 and replays adjoints in reverse order. Returns
  // the number of operations visited; each is visited exactly once.
  std::size_t backward(bool release = true);

 private:
  std::shared_ptr<Node> root_;
  std::vector<Node*> ops_;
};

// Builds an operation result. Records the graph edge only when grad mode is
// on and at least one input requires a gradient.
template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, Vector<Scalar> data,
                           std::vector<Tensor<Scalar>> inputs,
                           std::function<void(detail::Node<Scalar>&)> backward);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class ComputeGraph<float>;
extern template class ComputeGraph<double>;

}  // namespace msgt
