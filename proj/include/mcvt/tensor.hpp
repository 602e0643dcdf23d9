// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap shared handle onto a node. Every op that sees at least
// one input requiring a gradient (and runs while GradMode is enabled) records
// its inputs and a backward closure on the output node; backward() then walks
// the recorded graph in reverse topological order.

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcvt {

using Shape = std::vector<std::int64_t>;

// Cache-line aligned storage. Vectorised Eigen reductions peel a scalar head
// whose length depends on the address, so unaligned buffers would make the
// summation order (and the low bits) depend on heap history.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Incompatible tensor extents.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value (indivisible extents, wrong channel count, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Violated precondition of an API call (non-scalar loss, empty input, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Thread-local switch controlling whether ops record onto the graph.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct TensorNode;

template <typename T>
using BackwardFn = std::function<void(const TensorNode<T>& self)>;

template <typename T>
struct TensorNode {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool retain_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  BackwardFn<T> backward;
  const char* op = "leaf";

  bool is_leaf() const { return !backward; }
  std::span<T> grad_buffer();
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor from_buffer(Shape shape, Buffer<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  // Creates an op result. The backward closure is kept only when recording is
  // enabled and some input requires a gradient.
  static Tensor from_op(const char* op, Shape shape, Buffer<T> data,
                        std::vector<Tensor> inputs, BackwardFn<T> backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  void retain_grad();
  bool has_grad() const;
  std::span<const T> grad() const;
  // Gradient sink used inside backward closures; empty when no grad is needed.
  std::span<T> grad_sink() const;
  void zero_grad();

  /// Copy of the values with no graph history.
  Tensor detach() const;
  /// Same values converted to another precision, no graph history.
  template <typename U>
  Tensor<U> cast() const;

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode<T>> node_;
};

/// Topologically ordered view of the graph reachable from a root tensor:
/// every node appears after all of its recorded inputs.
template <typename T>
class Tape {
 public:
  explicit Tape(const Tensor<T>& root);
  const std::vector<TensorNode<T>*>& nodes() const { return order_; }
  /// Propagates gradients from root (which must already hold its seed
  /// gradient) back to every leaf. Intermediate gradient buffers are released
  /// afterwards unless retained.
  void run_backward();

 private:
  std::vector<TensorNode<T>*> order_;
};

/// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every leaf that
/// requires one. Repeated calls accumulate.
template <typename T>
void backward(const Tensor<T>& loss);

// ---------------------------------------------------------------------------
// Elementwise and reduction ops. Broadcasting is limited to add_bias and the
// scalar forms.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T value);
/// x + bias where bias.shape equals a trailing suffix of x.shape.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// Exact (erf-based) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
/// Reduces one axis away.
template <typename T> Tensor<T> sum_axis(const Tensor<T>& x, int axis);
template <typename T> Tensor<T> mean_axis(const Tensor<T>& x, int axis);

/// Max-subtracted softmax along one axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] * [k x n] -> [m x n]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x[..., in] * weight[in x out] (+ bias[out]) -> [..., out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {});

/// 3x3 convolution, stride 1, zero padding 1. x: [B, Cin, H, W],
/// weight: [Cout, Cin, 3, 3], bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {});

// ---------------------------------------------------------------------------
// Layout

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// [A, B, C] -> [A, C, B]
template <typename T> Tensor<T> transpose_last2(const Tensor<T>& x);
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

// ---------------------------------------------------------------------------
// Gradient checking

/// While alive, fingerprints which side of zero every ReLU input on this
/// thread falls on. Two evaluations with equal fingerprints ran through the
/// same linear pieces of the network.
class ActivationPatternMonitor {
 public:
  ActivationPatternMonitor();
  ~ActivationPatternMonitor();
  ActivationPatternMonitor(const ActivationPatternMonitor&) = delete;
  ActivationPatternMonitor& operator=(const ActivationPatternMonitor&) = delete;

  std::uint64_t fingerprint() const { return hash_; }

  static bool active();
  template <typename T>
  static void observe(std::span<const T> inputs);

 private:
  ActivationPatternMonitor* previous_;
  std::uint64_t hash_ = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// When set, at most this many randomly chosen coordinates are probed per
  /// tensor; otherwise every coordinate is.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
  /// A central difference whose two sides change some ReLU's active set
  /// straddles a kink and does not estimate the derivative. Such coordinates
  /// are re-probed with the step divided by 10 until both sides match the
  /// unperturbed pattern or the step falls below min_step.
  bool refine_at_kinks = true;
  double min_step = 1e-9;
};

struct GradCheckReport {
  double max_error = 0.0;
  std::size_t coordinates = 0;
  /// Coordinates re-probed with a smaller step because of a kink.
  std::size_t refined = 0;
  /// Coordinates still straddling a kink at min_step (their error counts).
  std::size_t unresolved = 0;
};

/// Max over probed coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
/// where numeric is the central difference with the configured step.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double step = 1e-5);

/// Same metric over the coordinates of several leaf tensors that f() reads
/// directly (typically model parameters). Gradients on the leaves are reset.
double grad_check_leaves(const std::function<Tensor<double>()>& f,
                         const std::vector<Tensor<double>>& leaves,
                         const GradCheckOptions& options = {});

GradCheckReport grad_check_report(const std::function<Tensor<double>()>& f,
                                  const std::vector<Tensor<double>>& leaves,
                                  const GradCheckOptions& options = {});

}  // namespace mcvt
