// SPDX-License-Identifier: Apache-2.0
//
// Multi-view fusion of backbone outputs and the classification head.
//
// For each modality the backbone yields, per object and view j, patch tokens
// e_j [P, D] and a class token c_j [D]. The strategies combine them as
//
//   ACF   C = mean_j c_j
//   ECF   C = sum_j w_j c_j,   w_j = H(c_j) / sum_k H(c_k)
//   AEF   E = mean over views and patches of e_j
//   GEEF  [E, C_ECF]
//
// where H(c) = -sum_d p_d ln p_d with p = softmax(c). When every entropy is
// zero the weights fall back to uniform. The final feature concatenates the
// per-modality parts, RGB first.

#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "mcvt/nn.hpp"
#include "mcvt/tensor.hpp"

namespace mcvt::fusion {

enum class Strategy { acf, ecf, aef, geef };

inline constexpr Strategy kAllStrategies[] = {Strategy::acf, Strategy::ecf, Strategy::aef, Strategy::geef};

std::string_view name(Strategy strategy);
/// Accepts the lower- or upper-case names; throws ConfigError otherwise.
Strategy parse_strategy(std::string_view text);
/// Number of D-wide parts each modality contributes to the fused feature.
int parts_per_modality(Strategy strategy);

template <typename T>
struct ModalityViews {
  Tensor<T> patch_tokens;  // [B, L, P, D]
  Tensor<T> cls_tokens;    // [B, L, D]
};

/// Fusion input: one entry per active modality, RGB before depth.
template <typename T>
struct FusionBundle {
  std::vector<ModalityViews<T>> modalities;
};

template <typename T>
struct FusedModality {
  Tensor<T> pooled_patches;  // E, [B, D]; AEF and GEEF only
  Tensor<T> class_token;     // C, [B, D]; ACF, ECF and GEEF
  Tensor<T> weights;         // w, [B, L]; ECF and GEEF
};

template <typename T>
struct FusedRepresentation {
  std::vector<FusedModality<T>> modalities;
  Tensor<T> feature;  // [B, d_fuse]
};

/// Entropy (natural log) of softmax(token); 0 * ln 0 counts as 0.
template <typename T>
double view_entropy(std::span<const T> cls_token);

/// w_j = H_j / sum_k H_k; uniform when the sum is zero or all entropies are
/// equal (where the two expressions coincide).
std::vector<double> entropy_weights(std::span<const double> entropies);

/// Differentiable entropies of each row of [R, D] -> [R].
template <typename T>
Tensor<T> row_entropies(const Tensor<T>& rows);

/// Differentiable normalization of entropies [B, L] -> weights [B, L].
template <typename T>
Tensor<T> normalize_entropies(const Tensor<T>& entropies);

/// sum_j w[b, j] * tokens[b, j, :] for tokens [B, L, D] and w [B, L].
template <typename T>
Tensor<T> weighted_view_sum(const Tensor<T>& tokens, const Tensor<T>& weights);

template <typename T>
FusedRepresentation<T> fuse(const FusionBundle<T>& bundle, Strategy strategy);

/// Two-layer MLP (hidden width = input width, GELU) mapping the fused feature
/// to class logits.
template <typename T>
struct ClassifierHead {
  ClassifierHead() = default;
  ClassifierHead(std::int64_t feature_width, std::int64_t classes, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& feature) const;
  void collect(nn::StateList<T>& state, const std::string& prefix) const;

  nn::Linear<T> fc1, fc2;
};

}  // namespace mcvt::fusion
