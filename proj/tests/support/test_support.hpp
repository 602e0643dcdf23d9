// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit and acceptance tests: random tensors and
// independently coded reference implementations.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "mcvt/model.hpp"
#include "mcvt/rng.hpp"
#include "mcvt/tensor.hpp"

namespace mcvt::testing {

template <typename T = double>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::vector<T> data(static_cast<std::size_t>(numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

template <typename T>
bool bit_equal(std::span<const T> a, std::span<const T> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

/// Overwrites a tensor's values in place.
template <typename T>
void fill(Tensor<T> t, T value) {
  for (auto& v : t.mutable_data()) v = value;
}

// ---------------------------------------------------------------------------
// Fusion reference: plain loops over std::vector, no tensor code.

struct NaiveModality {
  // patches[j][p][d], cls[j][d] for one object
  std::vector<std::vector<std::vector<double>>> patches;
  std::vector<std::vector<double>> cls;
};

struct NaiveFused {
  std::vector<double> pooled;    // E
  std::vector<double> weighted;  // C
  std::vector<double> weights;   // w
};

inline double naive_entropy(const std::vector<double>& token, double log_base = M_E) {
  double peak = token[0];
  for (double v : token) peak = std::max(peak, v);
  double z = 0.0;
  for (double v : token) z += std::exp(v - peak);
  double h = 0.0;
  for (double v : token) {
    const double p = std::exp(v - peak) / z;
    if (p > 0.0) h -= p * std::log(p) / std::log(log_base);
  }
  return h;
}

inline NaiveFused naive_geef(const NaiveModality& m, double log_base = M_E) {
  const std::size_t l = m.cls.size(), d = m.cls[0].size();
  NaiveFused out;
  out.pooled.assign(d, 0.0);
  std::size_t count = 0;
  for (const auto& view : m.patches) {
    for (const auto& patch : view) {
      for (std::size_t k = 0; k < d; ++k) out.pooled[k] += patch[k];
      ++count;
    }
  }
  for (auto& v : out.pooled) v /= static_cast<double>(count);
  std::vector<double> h(l);
  double total = 0.0;
  for (std::size_t j = 0; j < l; ++j) total += (h[j] = naive_entropy(m.cls[j], log_base));
  bool equal = true;
  for (std::size_t j = 1; j < l; ++j) equal = equal && h[j] == h[0];
  out.weights.resize(l);
  for (std::size_t j = 0; j < l; ++j) out.weights[j] = (total <= 0.0 || equal) ? 1.0 / double(l) : h[j] / total;
  out.weighted.assign(d, 0.0);
  for (std::size_t j = 0; j < l; ++j) {
    for (std::size_t k = 0; k < d; ++k) out.weighted[k] += out.weights[j] * m.cls[j][k];
  }
  return out;
}

/// Object b of a [B, L, P, D] / [B, L, D] pair.
template <typename T>
NaiveModality naive_modality(const fusion::ModalityViews<T>& views, std::int64_t b) {
  const auto l = views.cls_tokens.dim(1), p = views.patch_tokens.dim(2), d = views.cls_tokens.dim(2);
  NaiveModality m;
  m.cls.assign(l, std::vector<double>(d));
  m.patches.assign(l, std::vector<std::vector<double>>(p, std::vector<double>(d)));
  const auto cls = views.cls_tokens.data();
  const auto patches = views.patch_tokens.data();
  for (std::int64_t j = 0; j < l; ++j) {
    for (std::int64_t k = 0; k < d; ++k) m.cls[j][k] = cls[(b * l + j) * d + k];
    for (std::int64_t q = 0; q < p; ++q) {
      for (std::int64_t k = 0; k < d; ++k) m.patches[j][q][k] = patches[((b * l + j) * p + q) * d + k];
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Mid-residual reference: direct convolution and batch norm loops on a single
// [P, D] token matrix (one image), train-mode statistics.

inline std::vector<double> naive_conv3x3(const std::vector<double>& x, const std::vector<double>& w, int n, int c,
                                         int g) {
  // x[n][c][g][g], w[c][c][3][3] -> y[n][c][g][g]
  std::vector<double> y(x.size(), 0.0);
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < c; ++o)
      for (int r = 0; r < g; ++r)
        for (int s = 0; s < g; ++s) {
          double acc = 0.0;
          for (int ci = 0; ci < c; ++ci)
            for (int kr = 0; kr < 3; ++kr)
              for (int ks = 0; ks < 3; ++ks) {
                const int rr = r + kr - 1, ss = s + ks - 1;
                if (rr < 0 || rr >= g || ss < 0 || ss >= g) continue;
                acc += w[((o * c + ci) * 3 + kr) * 3 + ks] * x[((i * c + ci) * g + rr) * g + ss];
              }
          y[((i * c + o) * g + r) * g + s] = acc;
        }
  return y;
}

inline void naive_batch_norm(std::vector<double>& x, const std::vector<double>& gamma, const std::vector<double>& beta,
                             int n, int c, int hw, double eps) {
  for (int ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < hw; ++k) mean += x[(i * c + ch) * hw + k];
    mean /= n * hw;
    double var = 0.0;
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < hw; ++k) var += std::pow(x[(i * c + ch) * hw + k] - mean, 2);
    var /= n * hw;
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < hw; ++k) {
        double& v = x[(i * c + ch) * hw + k];
        v = gamma[ch] * (v - mean) / std::sqrt(var + eps) + beta[ch];
      }
  }
}

/// tokens: [N][P][D] flattened; returns the same layout.
template <typename T>
std::vector<double> naive_mid_residual(const ResidualBlock<T>& block, const std::vector<double>& tokens, int n, int p,
                                       int d, double eps) {
  const int g = static_cast<int>(std::lround(std::sqrt(double(p))));
  std::vector<double> map(tokens.size());
  for (int i = 0; i < n; ++i)
    for (int q = 0; q < p; ++q)
      for (int k = 0; k < d; ++k) map[(i * d + k) * p + q] = tokens[(i * p + q) * d + k];
  const auto vec = [](const Tensor<T>& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  auto h = naive_conv3x3(map, vec(block.conv1.weight), n, d, g);
  naive_batch_norm(h, vec(block.bn1.gamma), vec(block.bn1.beta), n, d, p, eps);
  for (auto& v : h) v = std::max(0.0, v);
  h = naive_conv3x3(h, vec(block.conv2.weight), n, d, g);
  naive_batch_norm(h, vec(block.bn2.gamma), vec(block.bn2.beta), n, d, p, eps);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::max(0.0, h[i] + map[i]);
  std::vector<double> out(tokens.size());
  for (int i = 0; i < n; ++i)
    for (int q = 0; q < p; ++q)
      for (int k = 0; k < d; ++k) out[(i * p + q) * d + k] = h[(i * d + k) * p + q];
  return out;
}

// ---------------------------------------------------------------------------
// Closed-form parameter count, layer by layer.

inline std::int64_t closed_form_param_count(const ModelConfig& c) {
  const std::int64_t d = c.embed_dim, sc = c.stem_channels, pw = c.patch_count();
  const std::int64_t p2 = std::int64_t(c.patch_size) * c.patch_size;
  const auto conv = [](std::int64_t in, std::int64_t out) { return in * out * 9; };  // no bias
  const auto bn = [](std::int64_t ch) { return 2 * ch; };
  const auto lin = [](std::int64_t in, std::int64_t out) { return in * out + out; };
  const std::int64_t stem_rgb = conv(3, sc) + bn(sc);
  const std::int64_t stem_depth = conv(1, sc) + bn(sc);
  const std::int64_t residual_sc = 2 * (conv(sc, sc) + bn(sc));
  const std::int64_t residual_d = 2 * (conv(d, d) + bn(d));
  const std::int64_t embed = lin(sc * p2, d) + d + (pw + 1) * d;
  const std::int64_t hidden = d * c.mlp_ratio;
  const std::int64_t transformer = 2 * (2 * d) + lin(d, 3 * d) + lin(d, d) + lin(d, hidden) + lin(hidden, d);
  const std::int64_t backbone = c.pre_blocks * residual_sc + embed + (c.local_blocks + c.global_blocks) * transformer +
                                c.mid_blocks * residual_d;
  std::int64_t total = 0;
  if (uses_rgb(c.modality)) total += stem_rgb;
  if (uses_depth(c.modality)) total += stem_depth;
  total += backbone;
  if (c.modality == Modality::rgbd && !c.shared_backbone) total += backbone;
  const std::int64_t fused = d * fusion::parts_per_modality(c.fusion) * modality_count(c.modality);
  total += lin(fused, fused) + lin(fused, c.num_classes);
  return total;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mcvt_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace mcvt::testing
