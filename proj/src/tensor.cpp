#include "msgt/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "msgt/flop_counter.hpp"

namespace msgt {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<Index> shape_strides(const Shape& shape) {
  std::vector<Index> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

namespace {
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_sequence = 0;
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

FlopCounter& FlopCounter::local() {
  thread_local FlopCounter counter;
  return counter;
}

namespace detail {
std::uint64_t next_sequence() { return ++g_sequence; }
}  // namespace detail

namespace {
void check_shape(const Shape& shape) {
  for (Index e : shape)
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
}
}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<Node>()) {
  check_shape(shape);
  node_->data = VectorType::Zero(shape_numel(shape));
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, VectorType data, bool requires_grad) : node_(std::make_shared<Node>()) {
  check_shape(shape);
  if (shape_numel(shape) != data.size())
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  node_->data = std::move(data);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(const Shape& shape, Scalar value) {
  Tensor t(shape);
  t.data().setConstant(value);
  return t;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from(const Shape& shape, std::initializer_list<Scalar> values) {
  VectorType v(static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), v.data());
  return Tensor(shape, std::move(v));
}

template <typename Scalar>
Index Tensor<Scalar>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  return node_->shape[a];
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(std::initializer_list<Index> index) const {
  if (static_cast<int>(index.size()) != rank()) throw IndexError("index rank mismatch for " + shape_str(shape()));
  Index flat = 0;
  int axis = 0;
  for (Index i : index) {
    if (i < 0 || i >= node_->shape[axis]) throw IndexError("index out of range for " + shape_str(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
  return node_->data[0];
}

template <typename Scalar>
void Tensor<Scalar>::backward() {
  ComputeGraph<Scalar>::trace(*this).backward();
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(node_->shape, node_->data, false);
}

template <typename Scalar>
ComputeGraph<Scalar> ComputeGraph<Scalar>::trace(const Tensor<Scalar>& root) {
  ComputeGraph g;
  g.root_ = root.node_ptr();
  std::vector<Node*> stack{root.node()};
  std::unordered_set<Node*> seen{root.node()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!n->is_leaf()) g.ops_.push_back(n);
    for (const auto& in : n->inputs) {
      if (seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(g.ops_.begin(), g.ops_.end(), [](const Node* a, const Node* b) { return a->sequence < b->sequence; });
  return g;
}

template <typename Scalar>
std::size_t ComputeGraph<Scalar>::backward(bool release) {
  if (root_->data.size() != 1)
    throw ContractError("backward() requires a scalar objective, got shape " + shape_str(root_->shape));
  if (!root_->requires_grad) throw ContractError("backward() on a tensor that does not require grad");
  root_->ensure_grad()[0] += Scalar(1);
  std::size_t visited = 0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == n->data.size() && n->backward) n->backward(*n);
    ++visited;
  }
  if (release) {
    for (Node* n : ops_) {
      n->backward = nullptr;
      n->inputs.clear();
    }
  }
  return visited;
}

template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, Vector<Scalar> data, std::vector<Tensor<Scalar>> inputs,
                           std::function<void(detail::Node<Scalar>&)> backward) {
  Tensor<Scalar> out(std::move(shape), std::move(data));
  auto* node = out.node();
  node->op = op;
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
  node->backward = std::move(backward);
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template class ComputeGraph<float>;
template class ComputeGraph<double>;
template Tensor<float> make_result(const char*, Shape, Vector<float>, std::vector<Tensor<float>>,
                                   std::function<void(detail::Node<float>&)>);
template Tensor<double> make_result(const char*, Shape, Vector<double>, std::vector<Tensor<double>>,
                                    std::function<void(detail::Node<double>&)>);

}  // namespace msgt
