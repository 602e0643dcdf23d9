// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "mcvt/tensor.hpp"

namespace mcvt {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

int normalize_axis(const char* op, int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(r));
  }
  return axis;
}

// Splits a shape into [outer, extent(axis), inner].
struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.extent = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T, typename F>
Tensor<T> unary(const char* op, const Tensor<T>& x, F&& forward,
                std::function<void(std::span<const T> x, std::span<const T> y,
                                   std::span<const T> g, std::span<T> gx)>
                    derivative) {
  Buffer<T> out(x.data().size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return Tensor<T>::from_op(op, x.shape(), std::move(out), {x},
                            [x, derivative](const TensorNode<T>& self) {
                              auto gx = x.grad_sink();
                              if (!gx.empty()) derivative(x.data(), self.data, self.grad, gx);
                            });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Buffer<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return Tensor<T>::from_op("add", a.shape(), std::move(out), {a, b}, [a, b](const TensorNode<T>& self) {
    for (const auto* t : {&a, &b}) {
      auto g = t->grad_sink();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  Buffer<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return Tensor<T>::from_op("sub", a.shape(), std::move(out), {a, b}, [a, b](const TensorNode<T>& self) {
    if (auto g = a.grad_sink(); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (auto g = b.grad_sink(); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Buffer<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return Tensor<T>::from_op("mul", a.shape(), std::move(out), {a, b}, [a, b](const TensorNode<T>& self) {
    if (auto g = a.grad_sink(); !g.empty()) {
      const auto other = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
    }
    if (auto g = b.grad_sink(); !g.empty()) {
      const auto other = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return Tensor<T>::from_op("scale", a.shape(), std::move(out), {a}, [a, factor](const TensorNode<T>& self) {
    auto g = a.grad_sink();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  return Tensor<T>::from_op("add_scalar", a.shape(), std::move(out), {a}, [a](const TensorNode<T>& self) {
    auto g = a.grad_sink();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const auto& xs = x.shape();
  const auto& bs = bias.shape();
  if (bs.size() > xs.size() || !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
    throw DimensionError("add_bias: bias shape " + to_string(bs) + " is not a suffix of " + to_string(xs));
  }
  const auto n = static_cast<std::size_t>(bias.numel());
  Buffer<T> out(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % n];
  return Tensor<T>::from_op("add_bias", xs, std::move(out), {x, bias}, [x, bias, n](const TensorNode<T>& self) {
    if (auto g = x.grad_sink(); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (auto g = bias.grad_sink(); !g.empty()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  // Subgradient at 0 is 0.
  if (ActivationPatternMonitor::active()) ActivationPatternMonitor::observe(x.data());
  return unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](std::span<const T>, std::span<const T> y, std::span<const T> g, std::span<T> gx) {
        for (std::size_t i = 0; i < gx.size(); ++i) {
          if (y[i] > T(0)) gx[i] += g[i];
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](std::span<const T> xs, std::span<const T>, std::span<const T> g, std::span<T> gx) {
        for (std::size_t i = 0; i < gx.size(); ++i) {
          const T v = xs[i];
          const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
          gx[i] += g[i] * (cdf + v * pdf);
        }
      });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>(
      "log", x, [](T v) { return std::log(v); },
      [](std::span<const T> xs, std::span<const T>, std::span<const T> g, std::span<T> gx) {
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] / xs[i];
      });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary<T>(
      "square", x, [](T v) { return v * v; },
      [](std::span<const T> xs, std::span<const T>, std::span<const T> g, std::span<T> gx) {
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += T(2) * xs[i] * g[i];
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return Tensor<T>::from_op("sum", Shape{}, Buffer<T>{total}, {x}, [x](const TensorNode<T>& self) {
    auto g = x.grad_sink();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis) {
  axis = normalize_axis("sum_axis", axis, x.rank());
  const auto s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  Buffer<T> out(static_cast<std::size_t>(s.outer * s.inner), T(0));
  const auto in = x.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t k = 0; k < s.extent; ++k) {
      const T* src = in.data() + (o * s.extent + k) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  return Tensor<T>::from_op("sum_axis", std::move(out_shape), std::move(out), {x}, [x, s](const TensorNode<T>& self) {
    auto g = x.grad_sink();
    if (g.empty()) return;
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t k = 0; k < s.extent; ++k) {
        T* dst = g.data() + (o * s.extent + k) * s.inner;
        const T* src = self.grad.data() + o * s.inner;
        for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
  const auto extent = x.dim(axis);
  return scale(sum_axis(x, axis), T(1) / static_cast<T>(extent));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  axis = normalize_axis("softmax", axis, x.rank());
  const auto s = split_at(x.shape(), axis);
  Buffer<T> out(x.data().begin(), x.data().end());
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      T* base = out.data() + o * s.extent * s.inner + i;
      T peak = base[0];
      for (std::int64_t k = 1; k < s.extent; ++k) peak = std::max(peak, base[k * s.inner]);
      T total = T(0);
      for (std::int64_t k = 0; k < s.extent; ++k) {
        T& v = base[k * s.inner];
        v = std::exp(v - peak);
        total += v;
      }
      for (std::int64_t k = 0; k < s.extent; ++k) base[k * s.inner] /= total;
    }
  }
  return Tensor<T>::from_op("softmax", x.shape(), std::move(out), {x}, [x, s](const TensorNode<T>& self) {
    auto g = x.grad_sink();
    if (g.empty()) return;
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t i = 0; i < s.inner; ++i) {
        const std::int64_t base = o * s.extent * s.inner + i;
        T dot = T(0);
        for (std::int64_t k = 0; k < s.extent; ++k) {
          const auto idx = static_cast<std::size_t>(base + k * s.inner);
          dot += self.grad[idx] * self.data[idx];
        }
        for (std::int64_t k = 0; k < s.extent; ++k) {
          const auto idx = static_cast<std::size_t>(base + k * s.inner);
          g[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(static_cast<std::size_t>(m * n));
  MatrixMap<T>(out.data(), m, n).noalias() =
      ConstMatrixMap<T>(a.data().data(), m, k) * ConstMatrixMap<T>(b.data().data(), k, n);
  return Tensor<T>::from_op("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](const TensorNode<T>& self) {
    ConstMatrixMap<T> g(self.grad.data(), m, n);
    if (auto ga = a.grad_sink(); !ga.empty()) {
      MatrixMap<T>(ga.data(), m, k).noalias() += g * ConstMatrixMap<T>(b.data().data(), k, n).transpose();
    }
    if (auto gb = b.grad_sink(); !gb.empty()) {
      MatrixMap<T>(gb.data(), k, n).noalias() += ConstMatrixMap<T>(a.data().data(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  const auto in = weight.dim(0), out_dim = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
  }
  const auto rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Buffer<T> out(static_cast<std::size_t>(rows * out_dim));
  MatrixMap<T> y(out.data(), rows, out_dim);
  y.noalias() = ConstMatrixMap<T>(x.data().data(), rows, in) * ConstMatrixMap<T>(weight.data().data(), in, out_dim);
  if (bias.defined()) {
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), out_dim);
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::from_op(
      "linear", std::move(out_shape), std::move(out), std::move(inputs),
      [x, weight, bias, rows, in, out_dim](const TensorNode<T>& self) {
        ConstMatrixMap<T> g(self.grad.data(), rows, out_dim);
        if (auto gx = x.grad_sink(); !gx.empty()) {
          MatrixMap<T>(gx.data(), rows, in).noalias() +=
              g * ConstMatrixMap<T>(weight.data().data(), in, out_dim).transpose();
        }
        if (auto gw = weight.grad_sink(); !gw.empty()) {
          MatrixMap<T>(gw.data(), in, out_dim).noalias() +=
              ConstMatrixMap<T>(x.data().data(), rows, in).transpose() * g;
        }
        if (bias.defined()) {
          if (auto gb = bias.grad_sink(); !gb.empty()) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), out_dim) += g.colwise().sum();
          }
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " cannot become " + to_string(shape));
  }
  Buffer<T> out(x.data().begin(), x.data().end());
  return Tensor<T>::from_op("reshape", std::move(shape), std::move(out), {x}, [x](const TensorNode<T>& self) {
    auto g = x.grad_sink();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() != 3) throw DimensionError("transpose_last2: expected rank 3, got " + to_string(x.shape()));
  const auto a = x.dim(0), b = x.dim(1), c = x.dim(2);
  Buffer<T> out(x.data().size());
  const auto in = x.data();
  for (std::int64_t i = 0; i < a; ++i) {
    MatrixMap<T>(out.data() + i * b * c, c, b) = ConstMatrixMap<T>(in.data() + i * b * c, b, c).transpose();
  }
  return Tensor<T>::from_op("transpose_last2", {a, c, b}, std::move(out), {x}, [x, a, b, c](const TensorNode<T>& self) {
    auto g = x.grad_sink();
    if (g.empty()) return;
    for (std::int64_t i = 0; i < a; ++i) {
      MatrixMap<T>(g.data() + i * b * c, b, c) += ConstMatrixMap<T>(self.grad.data() + i * b * c, c, b).transpose();
    }
  });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  axis = normalize_axis("narrow", axis, x.rank());
  const auto s = split_at(x.shape(), axis);
  if (start < 0 || length <= 0 || start + length > s.extent) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of extent " + std::to_string(s.extent));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  const auto block = length * s.inner;
  Buffer<T> out(static_cast<std::size_t>(s.outer * block));
  const auto in = x.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(in.data() + (o * s.extent + start) * s.inner, block, out.data() + o * block);
  }
  return Tensor<T>::from_op("narrow", std::move(out_shape), std::move(out), {x}, [x, s, start, block](const TensorNode<T>& self) {
    auto g = x.grad_sink();
    if (g.empty()) return;
    for (std::int64_t o = 0; o < s.outer; ++o) {
      T* dst = g.data() + (o * s.extent + start) * s.inner;
      const T* src = self.grad.data() + o * block;
      for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  axis = normalize_axis("concat", axis, parts.front().rank());
  Shape out_shape = parts.front().shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) throw DimensionError("concat: rank mismatch " + to_string(probe));
    probe[static_cast<std::size_t>(axis)] = out_shape[static_cast<std::size_t>(axis)];
    if (probe != out_shape) {
      throw DimensionError("concat: shape " + to_string(p.shape()) + " incompatible with " +
                           to_string(parts.front().shape()));
    }
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  const auto s = split_at(out_shape, axis);
  Buffer<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::int64_t offset = 0;
  std::vector<std::int64_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto block = p.dim(axis) * s.inner;
    const auto in = p.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      std::copy_n(in.data() + o * block, block, out.data() + (o * s.extent + offset) * s.inner);
    }
    offset += p.dim(axis);
  }
  return Tensor<T>::from_op("concat", std::move(out_shape), std::move(out), parts,
                            [parts, offsets, s, axis](const TensorNode<T>& self) {
                              for (std::size_t k = 0; k < parts.size(); ++k) {
                                auto g = parts[k].grad_sink();
                                if (g.empty()) continue;
                                const auto block = parts[k].dim(axis) * s.inner;
                                for (std::int64_t o = 0; o < s.outer; ++o) {
                                  const T* src = self.grad.data() + (o * s.extent + offsets[k]) * s.inner;
                                  T* dst = g.data() + o * block;
                                  for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
                                }
                              }
                            });
}

#define MCVT_INSTANTIATE_OPS(T)                                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                       \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                  \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> relu(const Tensor<T>&);                                           \
  template Tensor<T> gelu(const Tensor<T>&);                                           \
  template Tensor<T> log(const Tensor<T>&);                                            \
  template Tensor<T> square(const Tensor<T>&);                                         \
  template Tensor<T> sum(const Tensor<T>&);                                            \
  template Tensor<T> mean(const Tensor<T>&);                                           \
  template Tensor<T> sum_axis(const Tensor<T>&, int);                                  \
  template Tensor<T> mean_axis(const Tensor<T>&, int);                                 \
  template Tensor<T> softmax(const Tensor<T>&, int);                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                 \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                \
  template Tensor<T> narrow(const Tensor<T>&, int, std::int64_t, std::int64_t);        \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);

MCVT_INSTANTIATE_OPS(float)
MCVT_INSTANTIATE_OPS(double)

}  // namespace mcvt
