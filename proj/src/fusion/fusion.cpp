// SPDX-License-Identifier: Apache-2.0
#include "mcvt/fusion.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <memory>
#include <string>

namespace mcvt::fusion {

std::string_view name(Strategy strategy) {
  switch (strategy) {
    case Strategy::acf: return "ACF";
    case Strategy::ecf: return "ECF";
    case Strategy::aef: return "AEF";
    case Strategy::geef: return "GEEF";
  }
  return "?";
}

Strategy parse_strategy(std::string_view text) {
  std::string upper(text);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  for (auto s : kAllStrategies) {
    if (name(s) == upper) return s;
  }
  throw ConfigError("unknown fusion strategy '" + std::string(text) + "' (expected acf, ecf, aef or geef)");
}

int parts_per_modality(Strategy strategy) { return strategy == Strategy::geef ? 2 : 1; }

namespace {

// Entropy of softmax(x) over n values via a stable log-softmax; fills logp.
template <typename T>
T entropy_of(const T* x, std::int64_t n, T* logp) {
  T peak = x[0];
  for (std::int64_t i = 1; i < n; ++i) peak = std::max(peak, x[i]);
  T total = T(0);
  for (std::int64_t i = 0; i < n; ++i) total += std::exp(x[i] - peak);
  const T log_total = std::log(total);
  T h = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    logp[i] = x[i] - peak - log_total;
    h -= std::exp(logp[i]) * logp[i];
  }
  return h;
}

template <typename T>
bool all_equal(const T* values, std::int64_t n) {
  return std::all_of(values, values + n, [&](T v) { return v == values[0]; });
}

}  // namespace

template <typename T>
double view_entropy(std::span<const T> cls_token) {
  if (cls_token.empty()) throw ContractError("view_entropy: empty token");
  std::vector<double> x(cls_token.begin(), cls_token.end());
  std::vector<double> logp(x.size());
  return entropy_of(x.data(), static_cast<std::int64_t>(x.size()), logp.data());
}

std::vector<double> entropy_weights(std::span<const double> entropies) {
  if (entropies.empty()) throw ContractError("entropy_weights: no views");
  const auto l = static_cast<double>(entropies.size());
  double total = 0.0;
  for (double h : entropies) total += h;
  std::vector<double> w(entropies.size());
  if (total <= 0.0 || all_equal(entropies.data(), static_cast<std::int64_t>(entropies.size()))) {
    std::fill(w.begin(), w.end(), 1.0 / l);
  } else {
    for (std::size_t j = 0; j < w.size(); ++j) w[j] = entropies[j] / total;
  }
  return w;
}

template <typename T>
Tensor<T> row_entropies(const Tensor<T>& rows) {
  if (rows.rank() != 2) throw DimensionError("row_entropies: expected [R, D], got " + to_string(rows.shape()));
  const auto r = rows.dim(0), d = rows.dim(1);
  auto logp = std::make_shared<Buffer<T>>(static_cast<std::size_t>(r * d));
  Buffer<T> out(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) out[i] = entropy_of(rows.data().data() + i * d, d, logp->data() + i * d);
  return Tensor<T>::from_op("row_entropies", {r}, std::move(out), {rows}, [rows, logp, r, d](const TensorNode<T>& self) {
    auto g = rows.grad_sink();
    if (g.empty()) return;
    // dH/dx_k = -p_k (ln p_k + H)
    for (std::int64_t i = 0; i < r; ++i) {
      const T h = self.data[i];
      const T gi = self.grad[i];
      for (std::int64_t k = 0; k < d; ++k) {
        const T lp = (*logp)[i * d + k];
        g[i * d + k] -= gi * std::exp(lp) * (lp + h);
      }
    }
  });
}

template <typename T>
Tensor<T> normalize_entropies(const Tensor<T>& entropies) {
  if (entropies.rank() != 2) {
    throw DimensionError("normalize_entropies: expected [B, L], got " + to_string(entropies.shape()));
  }
  const auto b = entropies.dim(0), l = entropies.dim(1);
  const auto in = entropies.data();
  Buffer<T> out(in.size());
  auto totals = std::make_shared<Buffer<T>>(static_cast<std::size_t>(b));
  for (std::int64_t i = 0; i < b; ++i) {
    const T* h = in.data() + i * l;
    T total = T(0);
    for (std::int64_t j = 0; j < l; ++j) total += h[j];
    (*totals)[i] = total;
    const bool uniform = total <= T(0) || all_equal(h, l);
    for (std::int64_t j = 0; j < l; ++j) out[i * l + j] = uniform ? T(1) / static_cast<T>(l) : h[j] / total;
  }
  return Tensor<T>::from_op("normalize_entropies", {b, l}, std::move(out), {entropies},
                            [entropies, totals, b, l](const TensorNode<T>& self) {
                              auto g = entropies.grad_sink();
                              if (g.empty()) return;
                              for (std::int64_t i = 0; i < b; ++i) {
                                const T total = (*totals)[i];
                                if (total <= T(0)) continue;  // constant fallback
                                T dot = T(0);
                                for (std::int64_t j = 0; j < l; ++j) dot += self.grad[i * l + j] * self.data[i * l + j];
                                for (std::int64_t j = 0; j < l; ++j) g[i * l + j] += (self.grad[i * l + j] - dot) / total;
                              }
                            });
}

template <typename T>
Tensor<T> weighted_view_sum(const Tensor<T>& tokens, const Tensor<T>& weights) {
  if (tokens.rank() != 3 || weights.rank() != 2 || tokens.dim(0) != weights.dim(0) ||
      tokens.dim(1) != weights.dim(1)) {
    throw DimensionError("weighted_view_sum: tokens " + to_string(tokens.shape()) + " vs weights " +
                         to_string(weights.shape()));
  }
  const auto b = tokens.dim(0), l = tokens.dim(1), d = tokens.dim(2);
  const auto x = tokens.data();
  const auto w = weights.data();
  Buffer<T> out(static_cast<std::size_t>(b * d), T(0));
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t j = 0; j < l; ++j) {
      const T wj = w[i * l + j];
      const T* src = x.data() + (i * l + j) * d;
      T* dst = out.data() + i * d;
      for (std::int64_t k = 0; k < d; ++k) dst[k] += wj * src[k];
    }
  }
  return Tensor<T>::from_op("weighted_view_sum", {b, d}, std::move(out), {tokens, weights},
                            [tokens, weights, b, l, d](const TensorNode<T>& self) {
                              auto gt = tokens.grad_sink();
                              auto gw = weights.grad_sink();
                              const auto x = tokens.data();
                              const auto w = weights.data();
                              for (std::int64_t i = 0; i < b; ++i) {
                                const T* g = self.grad.data() + i * d;
                                for (std::int64_t j = 0; j < l; ++j) {
                                  if (!gt.empty()) {
                                    T* dst = gt.data() + (i * l + j) * d;
                                    for (std::int64_t k = 0; k < d; ++k) dst[k] += w[i * l + j] * g[k];
                                  }
                                  if (!gw.empty()) {
                                    const T* src = x.data() + (i * l + j) * d;
                                    T acc = T(0);
                                    for (std::int64_t k = 0; k < d; ++k) acc += g[k] * src[k];
                                    gw[i * l + j] += acc;
                                  }
                                }
                              }
                            });
}

template <typename T>
FusedRepresentation<T> fuse(const FusionBundle<T>& bundle, Strategy strategy) {
  if (bundle.modalities.empty()) throw ContractError("fuse: bundle has no modalities");
  FusedRepresentation<T> result;
  std::vector<Tensor<T>> parts;
  for (const auto& views : bundle.modalities) {
    const auto& cls = views.cls_tokens;
    const auto& patches = views.patch_tokens;
    if (cls.rank() != 3 || patches.rank() != 4 || cls.dim(0) != patches.dim(0) || cls.dim(1) != patches.dim(1) ||
        cls.dim(2) != patches.dim(3)) {
      throw DimensionError("fuse: class tokens " + to_string(cls.shape()) + " and patch tokens " +
                           to_string(patches.shape()) + " disagree");
    }
    const auto b = cls.dim(0), l = cls.dim(1), d = cls.dim(2);
    if (l < 1) throw ContractError("fuse: empty view list");
    FusedModality<T> fused;
    if (strategy == Strategy::aef || strategy == Strategy::geef) {
      fused.pooled_patches = mean_axis(reshape(patches, {b, l * patches.dim(2), d}), 1);
      parts.push_back(fused.pooled_patches);
    }
    if (strategy == Strategy::acf) {
      // Uniform weights through the same weighted sum keeps ACF and the
      // equal-entropy ECF case bit-identical.
      fused.class_token = weighted_view_sum(cls, Tensor<T>::full({b, l}, T(1) / static_cast<T>(l)));
      parts.push_back(fused.class_token);
    } else if (strategy == Strategy::ecf || strategy == Strategy::geef) {
      const auto h = reshape(row_entropies(reshape(cls, {b * l, d})), {b, l});
      fused.weights = normalize_entropies(h);
      fused.class_token = weighted_view_sum(cls, fused.weights);
      parts.push_back(fused.class_token);
    }
    result.modalities.push_back(std::move(fused));
  }
  result.feature = parts.size() == 1 ? parts.front() : concat(parts, 1);
  return result;
}

template <typename T>
ClassifierHead<T>::ClassifierHead(std::int64_t feature_width, std::int64_t classes, Rng& rng)
    : fc1(feature_width, feature_width, rng), fc2(feature_width, classes, rng) {}

template <typename T>
Tensor<T> ClassifierHead<T>::operator()(const Tensor<T>& feature) const {
  if (feature.rank() < 1 || feature.dim(-1) != fc1.weight.dim(0)) {
    throw ConfigError("classifier head expects width " + std::to_string(fc1.weight.dim(0)) + ", got feature " +
                      to_string(feature.shape()));
  }
  return fc2(gelu(fc1(feature)));
}

template <typename T>
void ClassifierHead<T>::collect(nn::StateList<T>& state, const std::string& prefix) const {
  fc1.collect(state, prefix + ".fc1");
  fc2.collect(state, prefix + ".fc2");
}

#define MCVT_INSTANTIATE_FUSION(T)                                              \
  template double view_entropy<T>(std::span<const T>);                          \
  template Tensor<T> row_entropies(const Tensor<T>&);                           \
  template Tensor<T> normalize_entropies(const Tensor<T>&);                     \
  template Tensor<T> weighted_view_sum(const Tensor<T>&, const Tensor<T>&);     \
  template FusedRepresentation<T> fuse(const FusionBundle<T>&, Strategy);       \
  template struct ClassifierHead<T>;

MCVT_INSTANTIATE_FUSION(float)
MCVT_INSTANTIATE_FUSION(double)

}  // namespace mcvt::fusion
