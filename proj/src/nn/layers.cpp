// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "mcvt/nn.hpp"

namespace mcvt::nn {

template <typename T>
std::vector<Tensor<T>> StateList<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& e : entries_) {
    if (e.kind == StateKind::parameter) out.push_back(e.tensor);
  }
  return out;
}

template <typename T>
std::int64_t StateList<T>::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& e : entries_) {
    if (e.kind == StateKind::parameter) total += e.tensor.numel();
  }
  return total;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::vector<T> values(static_cast<std::size_t>(numel(shape)));
  for (auto& v : values) v = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Linear<T>::Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias)
    : weight(normal_tensor<T>({in, out}, 0.02, rng)) {
  if (with_bias) bias = Tensor<T>::zeros({out}, true);
}

template <typename T>
void Linear<T>::collect(StateList<T>& state, const std::string& prefix) const {
  state.add_parameter(prefix + ".weight", weight);
  if (bias.defined()) state.add_parameter(prefix + ".bias", bias);
}

template <typename T>
Conv3x3<T>::Conv3x3(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias)
    : weight(normal_tensor<T>({out, in, 3, 3}, std::sqrt(2.0 / static_cast<double>(in * 9)), rng)) {
  if (with_bias) bias = Tensor<T>::zeros({out}, true);
}

template <typename T>
void Conv3x3<T>::collect(StateList<T>& state, const std::string& prefix) const {
  state.add_parameter(prefix + ".weight", weight);
  if (bias.defined()) state.add_parameter(prefix + ".bias", bias);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::int64_t channels, T momentum_, T eps_)
    : gamma(Tensor<T>::full({channels}, T(1), true)),
      beta(Tensor<T>::zeros({channels}, true)),
      running_mean(Tensor<T>::zeros({channels})),
      running_var(Tensor<T>::full({channels}, T(1))),
      momentum(momentum_),
      eps(eps_) {}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, bool train) {
  return batch_norm2d(x, gamma, beta, running_mean, running_var, train, momentum, eps);
}

template <typename T>
void BatchNorm2d<T>::collect(StateList<T>& state, const std::string& prefix) const {
  state.add_parameter(prefix + ".gamma", gamma);
  state.add_parameter(prefix + ".beta", beta);
  state.add_buffer(prefix + ".running_mean", running_mean);
  state.add_buffer(prefix + ".running_var", running_var);
}

template <typename T>
LayerNorm<T>::LayerNorm(std::int64_t width, T eps_)
    : gamma(Tensor<T>::full({width}, T(1), true)), beta(Tensor<T>::zeros({width}, true)), eps(eps_) {}

template <typename T>
void LayerNorm<T>::collect(StateList<T>& state, const std::string& prefix) const {
  state.add_parameter(prefix + ".gamma", gamma);
  state.add_parameter(prefix + ".beta", beta);
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(std::int64_t width, int heads_, Rng& rng)
    : qkv(width, 3 * width, rng), proj(width, width, rng), heads(heads_) {
  if (heads <= 0 || width % heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::operator()(const Tensor<T>& x) const {
  return proj(attention(qkv(x), heads));
}

template <typename T>
void MultiHeadAttention<T>::collect(StateList<T>& state, const std::string& prefix) const {
  qkv.collect(state, prefix + ".qkv");
  proj.collect(state, prefix + ".proj");
}

template <typename T>
Mlp<T>::Mlp(std::int64_t width, std::int64_t hidden, Rng& rng) : fc1(width, hidden, rng), fc2(hidden, width, rng) {}

template <typename T>
void Mlp<T>::collect(StateList<T>& state, const std::string& prefix) const {
  fc1.collect(state, prefix + ".fc1");
  fc2.collect(state, prefix + ".fc2");
}

template <typename T>
TransformerBlock<T>::TransformerBlock(std::int64_t width, int heads, std::int64_t mlp_hidden, T ln_eps, Rng& rng)
    : ln1(width, ln_eps), attn(width, heads, rng), ln2(width, ln_eps), mlp(width, mlp_hidden, rng) {}

template <typename T>
Tensor<T> TransformerBlock<T>::operator()(const Tensor<T>& x) const {
  const auto y1 = add(x, attn(ln1(x)));
  return add(y1, mlp(ln2(y1)));
}

template <typename T>
void TransformerBlock<T>::collect(StateList<T>& state, const std::string& prefix) const {
  ln1.collect(state, prefix + ".ln1");
  attn.collect(state, prefix + ".attn");
  ln2.collect(state, prefix + ".ln2");
  mlp.collect(state, prefix + ".mlp");
}

template <typename T>
PatchEmbed<T>::PatchEmbed(std::int64_t channels, std::int64_t image_size, std::int64_t patch_, std::int64_t width,
                          Rng& rng)
    : patch(patch_) {
  if (patch <= 0 || image_size % patch != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by patch size " +
                      std::to_string(patch));
  }
  const auto grid = image_size / patch;
  proj = Linear<T>(channels * patch * patch, width, rng);
  cls = normal_tensor<T>({width}, 0.02, rng);
  pos = normal_tensor<T>({grid * grid + 1, width}, 0.02, rng);
}

template <typename T>
Tensor<T> PatchEmbed<T>::operator()(const Tensor<T>& maps) const {
  const auto tokens = prepend_token(proj(patchify(maps, patch)), cls);
  if (tokens.dim(1) != pos.dim(0)) {
    throw ConfigError("patch embedding built for " + std::to_string(pos.dim(0) - 1) + " patches, input has " +
                      std::to_string(tokens.dim(1) - 1));
  }
  return add_bias(tokens, pos);
}

template <typename T>
void PatchEmbed<T>::collect(StateList<T>& state, const std::string& prefix) const {
  proj.collect(state, prefix + ".proj");
  state.add_parameter(prefix + ".cls_token", cls);
  state.add_parameter(prefix + ".pos_embed", pos);
}

#define MCVT_INSTANTIATE_LAYERS(T)                                           \
  template class StateList<T>;                                               \
  template Tensor<T> normal_tensor<T>(Shape, double, Rng&, bool);            \
  template struct Linear<T>;                                                 \
  template struct Conv3x3<T>;                                                \
  template struct BatchNorm2d<T>;                                            \
  template struct LayerNorm<T>;                                              \
  template struct MultiHeadAttention<T>;                                     \
  template struct Mlp<T>;                                                    \
  template struct TransformerBlock<T>;                                       \
  template struct PatchEmbed<T>;

MCVT_INSTANTIATE_LAYERS(float)
MCVT_INSTANTIATE_LAYERS(double)

}  // namespace mcvt::nn
