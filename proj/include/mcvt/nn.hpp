// SPDX-License-Identifier: Apache-2.0
//
// Layer vocabulary shared by the convolutional and transformer stages.
//
// Token tensors are laid out [N, T, D]: N independent sequences (one per
// view image), T tokens per sequence, D embedding width. Feature maps are
// [N, C, H, W].

#pragma once

#include <string>
#include <vector>

#include "mcvt/rng.hpp"
#include "mcvt/tensor.hpp"

namespace mcvt::nn {

/// Train-mode batch norm over a channel holding a single element.
class DegenerateStatisticsError : public ContractError {
 public:
  using ContractError::ContractError;
};

enum class StateKind { parameter, buffer };

template <typename T>
struct StateEntry {
  std::string name;
  Tensor<T> tensor;
  StateKind kind;
};

/// Learned parameters and persistent buffers in registration order. The
/// order is deterministic and defines the checkpoint layout.
template <typename T>
class StateList {
 public:
  void add_parameter(std::string name, const Tensor<T>& tensor) {
    entries_.push_back({std::move(name), tensor, StateKind::parameter});
  }
  void add_buffer(std::string name, const Tensor<T>& tensor) {
    entries_.push_back({std::move(name), tensor, StateKind::buffer});
  }
  const std::vector<StateEntry<T>>& entries() const { return entries_; }
  std::vector<Tensor<T>> parameters() const;
  std::int64_t parameter_count() const;

 private:
  std::vector<StateEntry<T>> entries_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives

/// Per-channel normalization of [N, C, H, W]. In train mode the batch
/// statistics are used and the running estimates are updated in place
/// (running = (1 - momentum) * running + momentum * batch, unbiased variance).
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool train, T momentum, T eps);

/// Normalizes over the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

/// Scaled dot-product self-attention. qkv is [N, T, 3D] holding the query,
/// key and value projections side by side; heads split D evenly. Returns the
/// concatenated head outputs [N, T, D].
template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, int heads);

/// Softmax attention weights [N, heads, T, T] for the same input (no tape).
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& qkv, int heads);

/// [N, C, H, W] -> [N, (H/P)*(W/P), C*P*P]; patches in row-major grid order,
/// features ordered (channel, row, column) within a patch.
template <typename T>
Tensor<T> patchify(const Tensor<T>& maps, std::int64_t patch);

/// [N, P, D] with token [D] -> [N, P + 1, D], token placed at row 0.
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& tokens, const Tensor<T>& token);

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = true);

template <typename T>
struct Linear {
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(StateList<T>& state, const std::string& prefix) const;

  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out] or undefined
};

template <typename T>
struct Conv3x3 {
  Conv3x3() = default;
  /// He-normal weights.
  Conv3x3(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias);
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias); }
  void collect(StateList<T>& state, const std::string& prefix) const;

  Tensor<T> weight;  // [out, in, 3, 3]
  Tensor<T> bias;
};

template <typename T>
struct BatchNorm2d {
  BatchNorm2d() = default;
  BatchNorm2d(std::int64_t channels, T momentum, T eps);
  Tensor<T> forward(const Tensor<T>& x, bool train);
  void collect(StateList<T>& state, const std::string& prefix) const;

  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

template <typename T>
struct LayerNorm {
  LayerNorm() = default;
  LayerNorm(std::int64_t width, T eps);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
  void collect(StateList<T>& state, const std::string& prefix) const;

  Tensor<T> gamma, beta;
  T eps = T(1e-6);
};

template <typename T>
struct MultiHeadAttention {
  MultiHeadAttention() = default;
  MultiHeadAttention(std::int64_t width, int heads, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(StateList<T>& state, const std::string& prefix) const;

  Linear<T> qkv;
  Linear<T> proj;
  int heads = 1;
};

template <typename T>
struct Mlp {
  Mlp() = default;
  Mlp(std::int64_t width, std::int64_t hidden, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
  void collect(StateList<T>& state, const std::string& prefix) const;

  Linear<T> fc1, fc2;
};

/// Pre-norm encoder block: y1 = x + MSA(LN1(x)); y = y1 + MLP(LN2(y1)).
template <typename T>
struct TransformerBlock {
  TransformerBlock() = default;
  TransformerBlock(std::int64_t width, int heads, std::int64_t mlp_hidden, T ln_eps, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(StateList<T>& state, const std::string& prefix) const;

  LayerNorm<T> ln1;
  MultiHeadAttention<T> attn;
  LayerNorm<T> ln2;
  Mlp<T> mlp;
};

/// Splits feature maps into patches, projects each to the embedding width,
/// prepends the class token and adds positional embeddings:
/// tokens = [cls, proj(p_1), ..., proj(p_w)] + pos.
template <typename T>
struct PatchEmbed {
  PatchEmbed() = default;
  PatchEmbed(std::int64_t channels, std::int64_t image_size, std::int64_t patch, std::int64_t width, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& maps) const;
  void collect(StateList<T>& state, const std::string& prefix) const;
  std::int64_t patch_count() const { return pos.dim(0) - 1; }

  Linear<T> proj;
  Tensor<T> cls;  // [D]
  Tensor<T> pos;  // [p_w + 1, D]
  std::int64_t patch = 1;
};

}  // namespace mcvt::nn
