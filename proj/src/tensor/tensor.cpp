// SPDX-License-Identifier: Apache-2.0
#include "mcvt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mcvt {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {
thread_local bool grad_mode_enabled = true;

void check_shape(const Shape& shape, std::size_t size) {
  for (auto extent : shape) {
    if (extent <= 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  if (static_cast<std::size_t>(numel(shape)) != size) {
    throw DimensionError("shape " + to_string(shape) + " does not hold " + std::to_string(size) +
                         " values");
  }
}
}  // namespace

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
NoGradGuard::~NoGradGuard() { GradMode::set_enabled(previous_); }

template <typename T>
std::span<T> TensorNode<T>::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  return grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : Tensor(from_buffer(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad)) {}

template <typename T>
Tensor<T> Tensor<T>::from_buffer(Shape shape, Buffer<T> data, bool requires_grad) {
  check_shape(shape, data.size());
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->data.size(), T(0));
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = static_cast<std::size_t>(mcvt::numel(shape));
  return from_buffer(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(mcvt::numel(shape));
  return from_buffer(std::move(shape), Buffer<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_buffer(Shape{}, Buffer<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_op(const char* op, Shape shape, Buffer<T> data,
                             std::vector<Tensor> inputs, BackwardFn<T> backward) {
  if (static_cast<std::size_t>(mcvt::numel(shape)) != data.size()) {
    throw std::logic_error(std::string(op) + ": result buffer does not match shape " +
                           to_string(shape));
  }
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
#ifndef NDEBUG
  const auto finite = [](std::span<const T> values) {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
  };
  if (!finite(node->data) &&
      std::all_of(inputs.begin(), inputs.end(), [&](const Tensor& t) { return finite(t.data()); })) {
    throw std::domain_error(std::string(op) + ": non-finite output from finite inputs");
  }
#endif
  const bool record =
      GradMode::enabled() &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (record) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    for (auto& input : inputs) {
      if (input.requires_grad()) node->inputs.push_back(input.node_);
    }
  }
  return Tensor(std::move(node));
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw ContractError("undefined tensor");
  return node_->shape;
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

template <typename T>
std::int64_t Tensor<T>::numel() const {
  return static_cast<std::int64_t>(node_->data.size());
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!node_) throw ContractError("undefined tensor");
  return node_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_) throw ContractError("undefined tensor");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + to_string(s));
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[axis]) throw DimensionError("index out of range for " + to_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[static_cast<std::size_t>(flat)];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  if (!node_->is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = value;
  if (value) {
    node_->grad_buffer();
  } else {
    node_->grad.clear();
  }
}

template <typename T>
void Tensor<T>::retain_grad() {
  node_->retain_grad = true;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient buffer");
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_sink() const {
  if (!node_ || !node_->requires_grad) return {};
  return node_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_buffer(shape(), node_->data, false);
}

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> values(node_->data.begin(), node_->data.end());
  return Tensor<U>(shape(), std::move(values), false);
}

template <typename T>
Tape<T>::Tape(const Tensor<T>& root) {
  if (!root.requires_grad()) return;
  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode<T>* child = node->inputs[next++].get();
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

template <typename T>
void Tape<T>::run_backward() {
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (node->is_leaf()) continue;
    if (!node->grad.empty()) node->backward(*node);
    if (!node->retain_grad) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss is not recorded on the tape");
  Tape<T> tape(loss);
  loss.node()->grad_buffer()[0] += T(1);
  tape.run_backward();
}

template struct TensorNode<float>;
template struct TensorNode<double>;
template class Tensor<float>;
template class Tensor<double>;
template Tensor<double> Tensor<float>::cast<double>() const;
template Tensor<float> Tensor<double>::cast<float>() const;
template Tensor<float> Tensor<float>::cast<float>() const;
template Tensor<double> Tensor<double>::cast<double>() const;
template class Tape<float>;
template class Tape<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace mcvt
