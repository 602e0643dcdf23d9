// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Core>
#include <cmath>
#include <memory>

#include "mcvt/nn.hpp"

namespace mcvt::nn {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void require_vector(const char* op, const Tensor<T>& v, std::int64_t length) {
  if (v.rank() != 1 || v.dim(0) != length) {
    throw DimensionError(std::string(op) + ": expected parameter of shape [" + std::to_string(length) + "], got " +
                         to_string(v.shape()));
  }
}

struct AttentionGeometry {
  std::int64_t batch, tokens, width;
  int heads;
  std::int64_t head_dim() const { return width / heads; }
};

template <typename T>
AttentionGeometry attention_geometry(const Tensor<T>& qkv, int heads) {
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0) {
    throw DimensionError("attention: expected [N, T, 3D] input, got " + to_string(qkv.shape()));
  }
  const auto width = qkv.dim(2) / 3;
  if (heads <= 0 || width % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  return {qkv.dim(0), qkv.dim(1), width, heads};
}

// Fills probs [N, heads, T, T] and, when out is non-null, the head outputs.
template <typename T>
void attention_forward(const T* qkv, const AttentionGeometry& g, T* probs, T* out) {
  const auto hd = g.head_dim();
  const auto t = g.tokens;
  const auto row = 3 * g.width;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  for (std::int64_t n = 0; n < g.batch; ++n) {
    const T* base = qkv + n * t * row;
    for (int h = 0; h < g.heads; ++h) {
      ConstStridedMap<T> q(base + h * hd, t, hd, Eigen::OuterStride<>(row));
      ConstStridedMap<T> k(base + g.width + h * hd, t, hd, Eigen::OuterStride<>(row));
      ConstStridedMap<T> v(base + 2 * g.width + h * hd, t, hd, Eigen::OuterStride<>(row));
      MatrixMap<T> p(probs + (n * g.heads + h) * t * t, t, t);
      p.noalias() = (q * k.transpose()) * scale;
      for (std::int64_t i = 0; i < t; ++i) {
        auto r = p.row(i);
        const T peak = r.maxCoeff();
        T total = T(0);
        for (std::int64_t j = 0; j < t; ++j) {
          r(j) = std::exp(r(j) - peak);
          total += r(j);
        }
        r /= total;
      }
      if (out) {
        StridedMap<T> o(out + n * t * g.width + h * hd, t, hd, Eigen::OuterStride<>(g.width));
        o.noalias() = p * v;
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool train, T momentum, T eps) {
  if (x.rank() != 4) throw DimensionError("batch_norm2d: expected [N, C, H, W], got " + to_string(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require_vector("batch_norm2d", gamma, c);
  require_vector("batch_norm2d", beta, c);
  require_vector("batch_norm2d", running_mean, c);
  require_vector("batch_norm2d", running_var, c);
  const auto count = n * hw;
  if (train && count <= 1) {
    throw DegenerateStatisticsError("batch_norm2d: train mode needs more than one element per channel, shape " +
                                    to_string(x.shape()));
  }
  const auto in = x.data();
  auto mean = std::make_shared<Buffer<T>>(static_cast<std::size_t>(c));
  auto inv_std = std::make_shared<Buffer<T>>(static_cast<std::size_t>(c));
  if (train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T total = T(0);
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = in.data() + (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) total += p[i];
      }
      const T mu = total / static_cast<T>(count);
      T sq = T(0);
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = in.data() + (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const T var = sq / static_cast<T>(count);
      (*mean)[ch] = mu;
      (*inv_std)[ch] = T(1) / std::sqrt(var + eps);
      rm[ch] = (T(1) - momentum) * rm[ch] + momentum * mu;
      rv[ch] = (T(1) - momentum) * rv[ch] + momentum * var * static_cast<T>(count) / static_cast<T>(count - 1);
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      (*mean)[ch] = running_mean.data()[ch];
      (*inv_std)[ch] = T(1) / std::sqrt(running_var.data()[ch] + eps);
    }
  }
  Buffer<T> out(in.size());
  const auto gm = gamma.data();
  const auto bt = beta.data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* p = in.data() + (b * c + ch) * hw;
      T* q = out.data() + (b * c + ch) * hw;
      const T mu = (*mean)[ch], is = (*inv_std)[ch], ga = gm[ch], be = bt[ch];
      for (std::int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mu) * is * ga + be;
    }
  }
  return Tensor<T>::from_op(
      "batch_norm2d", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, mean, inv_std, train, n, c, hw, count](const TensorNode<T>& self) {
        const auto in = x.data();
        const auto gm = gamma.data();
        auto gx = x.grad_sink();
        auto gg = gamma.grad_sink();
        auto gb = beta.grad_sink();
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T mu = (*mean)[ch], is = (*inv_std)[ch];
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::int64_t b = 0; b < n; ++b) {
            const T* p = in.data() + (b * c + ch) * hw;
            const T* dy = self.grad.data() + (b * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * (p[i] - mu) * is;
            }
          }
          if (!gg.empty()) gg[ch] += sum_dy_xhat;
          if (!gb.empty()) gb[ch] += sum_dy;
          if (gx.empty()) continue;
          const T factor = gm[ch] * is;
          const T mean_dy = sum_dy / static_cast<T>(count);
          const T mean_dy_xhat = sum_dy_xhat / static_cast<T>(count);
          for (std::int64_t b = 0; b < n; ++b) {
            const T* p = in.data() + (b * c + ch) * hw;
            const T* dy = self.grad.data() + (b * c + ch) * hw;
            T* dx = gx.data() + (b * c + ch) * hw;
            if (train) {
              for (std::int64_t i = 0; i < hw; ++i) {
                const T xhat = (p[i] - mu) * is;
                dx[i] += factor * (dy[i] - mean_dy - xhat * mean_dy_xhat);
              }
            } else {
              for (std::int64_t i = 0; i < hw; ++i) dx[i] += factor * dy[i];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const auto d = x.dim(-1);
  require_vector("layer_norm", gamma, d);
  require_vector("layer_norm", beta, d);
  const auto rows = x.numel() / d;
  const auto in = x.data();
  auto xhat = std::make_shared<Buffer<T>>(in.size());
  auto inv_std = std::make_shared<Buffer<T>>(static_cast<std::size_t>(rows));
  Buffer<T> out(in.size());
  const auto gm = gamma.data();
  const auto bt = beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* p = in.data() + r * d;
    T mu = T(0);
    for (std::int64_t i = 0; i < d; ++i) mu += p[i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::int64_t i = 0; i < d; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    T* xh = xhat->data() + r * d;
    T* q = out.data() + r * d;
    for (std::int64_t i = 0; i < d; ++i) {
      xh[i] = (p[i] - mu) * is;
      q[i] = xh[i] * gm[i] + bt[i];
    }
  }
  return Tensor<T>::from_op(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, rows, d](const TensorNode<T>& self) {
        auto gx = x.grad_sink();
        auto gg = gamma.grad_sink();
        auto gb = beta.grad_sink();
        const auto gm = gamma.data();
        Buffer<T> scaled(static_cast<std::size_t>(d));
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * d;
          const T* xh = xhat->data() + r * d;
          if (!gg.empty()) {
            for (std::int64_t i = 0; i < d; ++i) gg[i] += dy[i] * xh[i];
          }
          if (!gb.empty()) {
            for (std::int64_t i = 0; i < d; ++i) gb[i] += dy[i];
          }
          if (gx.empty()) continue;
          T mean_g = T(0), mean_gx = T(0);
          for (std::int64_t i = 0; i < d; ++i) {
            scaled[i] = dy[i] * gm[i];
            mean_g += scaled[i];
            mean_gx += scaled[i] * xh[i];
          }
          mean_g /= static_cast<T>(d);
          mean_gx /= static_cast<T>(d);
          T* dx = gx.data() + r * d;
          const T is = (*inv_std)[r];
          for (std::int64_t i = 0; i < d; ++i) dx[i] += is * (scaled[i] - mean_g - xh[i] * mean_gx);
        }
      });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, int heads) {
  const auto g = attention_geometry(qkv, heads);
  auto probs = std::make_shared<Buffer<T>>(static_cast<std::size_t>(g.batch * g.heads * g.tokens * g.tokens));
  Buffer<T> out(static_cast<std::size_t>(g.batch * g.tokens * g.width));
  attention_forward(qkv.data().data(), g, probs->data(), out.data());
  return Tensor<T>::from_op(
      "attention", {g.batch, g.tokens, g.width}, std::move(out), {qkv}, [qkv, probs, g](const TensorNode<T>& self) {
        auto gqkv = qkv.grad_sink();
        if (gqkv.empty()) return;
        const auto hd = g.head_dim();
        const auto t = g.tokens;
        const auto row = 3 * g.width;
        const T scale = T(1) / std::sqrt(static_cast<T>(hd));
        RowMatrix<T> dp(t, t);
        for (std::int64_t n = 0; n < g.batch; ++n) {
          const T* base = qkv.data().data() + n * t * row;
          T* gbase = gqkv.data() + n * t * row;
          for (int h = 0; h < g.heads; ++h) {
            ConstStridedMap<T> q(base + h * hd, t, hd, Eigen::OuterStride<>(row));
            ConstStridedMap<T> k(base + g.width + h * hd, t, hd, Eigen::OuterStride<>(row));
            ConstStridedMap<T> v(base + 2 * g.width + h * hd, t, hd, Eigen::OuterStride<>(row));
            StridedMap<T> dq(gbase + h * hd, t, hd, Eigen::OuterStride<>(row));
            StridedMap<T> dk(gbase + g.width + h * hd, t, hd, Eigen::OuterStride<>(row));
            StridedMap<T> dv(gbase + 2 * g.width + h * hd, t, hd, Eigen::OuterStride<>(row));
            ConstMatrixMap<T> p(probs->data() + (n * g.heads + h) * t * t, t, t);
            ConstStridedMap<T> dout(self.grad.data() + n * t * g.width + h * hd, t, hd,
                                    Eigen::OuterStride<>(g.width));
            dv.noalias() += p.transpose() * dout;
            dp.noalias() = dout * v.transpose();
            for (std::int64_t i = 0; i < t; ++i) {
              const T dot = dp.row(i).dot(p.row(i));
              dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix() * scale;
            }
            dq.noalias() += dp * k;
            dk.noalias() += dp.transpose() * q;
          }
        }
      });
}

template <typename T>
Tensor<T> attention_weights(const Tensor<T>& qkv, int heads) {
  const auto g = attention_geometry(qkv, heads);
  Buffer<T> probs(static_cast<std::size_t>(g.batch * g.heads * g.tokens * g.tokens));
  attention_forward<T>(qkv.data().data(), g, probs.data(), nullptr);
  return Tensor<T>::from_buffer({g.batch, static_cast<std::int64_t>(g.heads), g.tokens, g.tokens}, std::move(probs));
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& maps, std::int64_t patch) {
  if (maps.rank() != 4) throw DimensionError("patchify: expected [N, C, H, W], got " + to_string(maps.shape()));
  const auto n = maps.dim(0), c = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("patchify: extent " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by patch size " + std::to_string(patch));
  }
  const auto gh = h / patch, gw = w / patch, feat = c * patch * patch;
  Buffer<T> out(maps.data().size());
  const auto in = maps.data();
  // Index map shared by forward and backward: out[idx] = in[src[idx]].
  auto src = std::make_shared<std::vector<std::int64_t>>(out.size());
  std::size_t idx = 0;
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t py = 0; py < gh; ++py) {
      for (std::int64_t px = 0; px < gw; ++px) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          for (std::int64_t iy = 0; iy < patch; ++iy) {
            for (std::int64_t ix = 0; ix < patch; ++ix) {
              const auto s = ((b * c + ch) * h + py * patch + iy) * w + px * patch + ix;
              (*src)[idx] = s;
              out[idx++] = in[static_cast<std::size_t>(s)];
            }
          }
        }
      }
    }
  }
  return Tensor<T>::from_op("patchify", {n, gh * gw, feat}, std::move(out), {maps}, [maps, src](const TensorNode<T>& self) {
    auto g = maps.grad_sink();
    for (std::size_t i = 0; i < self.grad.size() && !g.empty(); ++i) g[(*src)[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> prepend_token(const Tensor<T>& tokens, const Tensor<T>& token) {
  if (tokens.rank() != 3) throw DimensionError("prepend_token: expected [N, P, D], got " + to_string(tokens.shape()));
  const auto n = tokens.dim(0), p = tokens.dim(1), d = tokens.dim(2);
  require_vector("prepend_token", token, d);
  Buffer<T> out(static_cast<std::size_t>(n * (p + 1) * d));
  const auto in = tokens.data();
  for (std::int64_t b = 0; b < n; ++b) {
    std::copy_n(token.data().data(), d, out.data() + b * (p + 1) * d);
    std::copy_n(in.data() + b * p * d, p * d, out.data() + (b * (p + 1) + 1) * d);
  }
  return Tensor<T>::from_op("prepend_token", {n, p + 1, d}, std::move(out), {tokens, token},
                            [tokens, token, n, p, d](const TensorNode<T>& self) {
                              auto gt = tokens.grad_sink();
                              auto gc = token.grad_sink();
                              for (std::int64_t b = 0; b < n; ++b) {
                                const T* src = self.grad.data() + b * (p + 1) * d;
                                if (!gc.empty()) {
                                  for (std::int64_t i = 0; i < d; ++i) gc[i] += src[i];
                                }
                                if (!gt.empty()) {
                                  T* dst = gt.data() + b * p * d;
                                  for (std::int64_t i = 0; i < p * d; ++i) dst[i] += src[d + i];
                                }
                              }
                            });
}

#define MCVT_INSTANTIATE_NN_FUNCTIONAL(T)                                                                      \
  template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, \
                                  bool, T, T);                                                                  \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                       \
  template Tensor<T> attention(const Tensor<T>&, int);                                                          \
  template Tensor<T> attention_weights(const Tensor<T>&, int);                                                  \
  template Tensor<T> patchify(const Tensor<T>&, std::int64_t);                                                  \
  template Tensor<T> prepend_token(const Tensor<T>&, const Tensor<T>&);

MCVT_INSTANTIATE_NN_FUNCTIONAL(float)
MCVT_INSTANTIATE_NN_FUNCTIONAL(double)

}  // namespace mcvt::nn
