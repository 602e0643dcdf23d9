// SPDX-License-Identifier: Apache-2.0
//
// 3x3 / stride 1 / pad 1 convolution lowered to GEMM over im2col columns.
// Columns are laid out [Cin*9, images*H*W] so a chunk of images shares one
// matrix product. The column buffer is rebuilt in backward rather than kept.

#include <Eigen/Core>
#include <algorithm>

#include "mcvt/tensor.hpp"

namespace mcvt {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::int64_t kColumnBudget = 32768;

struct ConvGeometry {
  std::int64_t batch, in_channels, out_channels, height, width;
  std::int64_t pixels() const { return height * width; }
  std::int64_t images_per_chunk() const { return std::max<std::int64_t>(1, kColumnBudget / pixels()); }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::int64_t first, std::int64_t count, RowMatrix<T>& col) {
  const auto hw = g.pixels();
  col.resize(g.in_channels * 9, count * hw);
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col.data() + (c * 9 + ky * 3 + kx) * count * hw;
        const int dx = kx - 1;
        const std::int64_t x_lo = std::max<std::int64_t>(0, -dx);
        const std::int64_t x_hi = std::min<std::int64_t>(g.width, g.width - dx);
        for (std::int64_t n = 0; n < count; ++n) {
          const T* plane = x + ((first + n) * g.in_channels + c) * hw;
          T* dst = row + n * hw;
          for (std::int64_t y = 0; y < g.height; ++y) {
            const std::int64_t sy = y + ky - 1;
            T* out = dst + y * g.width;
            if (sy < 0 || sy >= g.height) {
              std::fill_n(out, g.width, T(0));
              continue;
            }
            const T* src = plane + sy * g.width;
            for (std::int64_t xx = 0; xx < x_lo; ++xx) out[xx] = T(0);
            for (std::int64_t xx = x_lo; xx < x_hi; ++xx) out[xx] = src[xx + dx];
            for (std::int64_t xx = x_hi; xx < g.width; ++xx) out[xx] = T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const RowMatrix<T>& col, const ConvGeometry& g, std::int64_t first, std::int64_t count, T* gx) {
  const auto hw = g.pixels();
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = col.data() + (c * 9 + ky * 3 + kx) * count * hw;
        const int dx = kx - 1;
        const std::int64_t x_lo = std::max<std::int64_t>(0, -dx);
        const std::int64_t x_hi = std::min<std::int64_t>(g.width, g.width - dx);
        for (std::int64_t n = 0; n < count; ++n) {
          T* plane = gx + ((first + n) * g.in_channels + c) * hw;
          const T* src_img = row + n * hw;
          for (std::int64_t y = 0; y < g.height; ++y) {
            const std::int64_t sy = y + ky - 1;
            if (sy < 0 || sy >= g.height) continue;
            const T* src = src_img + y * g.width;
            T* dst = plane + sy * g.width;
            for (std::int64_t xx = x_lo; xx < x_hi; ++xx) dst[xx + dx] += src[xx];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 4) throw DimensionError("conv2d: input must be [B, C, H, W], got " + to_string(x.shape()));
  if (weight.rank() != 4 || weight.dim(2) != 3 || weight.dim(3) != 3) {
    throw DimensionError("conv2d: weight must be [Cout, Cin, 3, 3], got " + to_string(weight.shape()));
  }
  if (weight.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: input channels of " + to_string(x.shape()) + " do not match weight " +
                         to_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
    throw DimensionError("conv2d: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
  }
  const ConvGeometry g{x.dim(0), x.dim(1), weight.dim(0), x.dim(2), x.dim(3)};
  const auto hw = g.pixels();
  const auto k = g.in_channels * 9;
  Eigen::Map<const RowMatrix<T>> w(weight.data().data(), g.out_channels, k);

  Buffer<T> out(static_cast<std::size_t>(g.batch * g.out_channels * hw));
  RowMatrix<T> col, prod;
  const auto chunk = g.images_per_chunk();
  for (std::int64_t first = 0; first < g.batch; first += chunk) {
    const auto count = std::min(chunk, g.batch - first);
    im2col(x.data().data(), g, first, count, col);
    prod.noalias() = w * col;
    for (std::int64_t n = 0; n < count; ++n) {
      for (std::int64_t co = 0; co < g.out_channels; ++co) {
        const T b = bias.defined() ? bias.data()[static_cast<std::size_t>(co)] : T(0);
        const T* src = prod.data() + co * count * hw + n * hw;
        T* dst = out.data() + ((first + n) * g.out_channels + co) * hw;
        for (std::int64_t p = 0; p < hw; ++p) dst[p] = src[p] + b;
      }
    }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::from_op(
      "conv2d", {g.batch, g.out_channels, g.height, g.width}, std::move(out), std::move(inputs),
      [x, weight, bias, g](const TensorNode<T>& self) {
        const auto hw = g.pixels();
        const auto k = g.in_channels * 9;
        auto gx = x.grad_sink();
        auto gw = weight.grad_sink();
        if (bias.defined()) {
          if (auto gb = bias.grad_sink(); !gb.empty()) {
            for (std::int64_t n = 0; n < g.batch; ++n) {
              for (std::int64_t co = 0; co < g.out_channels; ++co) {
                const T* src = self.grad.data() + (n * g.out_channels + co) * hw;
                T acc = T(0);
                for (std::int64_t p = 0; p < hw; ++p) acc += src[p];
                gb[static_cast<std::size_t>(co)] += acc;
              }
            }
          }
        }
        if (gx.empty() && gw.empty()) return;
        Eigen::Map<const RowMatrix<T>> w(weight.data().data(), g.out_channels, k);
        RowMatrix<T> col, dy, dcol;
        const auto chunk = g.images_per_chunk();
        for (std::int64_t first = 0; first < g.batch; first += chunk) {
          const auto count = std::min(chunk, g.batch - first);
          dy.resize(g.out_channels, count * hw);
          for (std::int64_t n = 0; n < count; ++n) {
            for (std::int64_t co = 0; co < g.out_channels; ++co) {
              std::copy_n(self.grad.data() + ((first + n) * g.out_channels + co) * hw, hw,
                          dy.data() + co * count * hw + n * hw);
            }
          }
          if (!gw.empty()) {
            im2col(x.data().data(), g, first, count, col);
            Eigen::Map<RowMatrix<T>>(gw.data(), g.out_channels, k).noalias() += dy * col.transpose();
          }
          if (!gx.empty()) {
            dcol.noalias() = w.transpose() * dy;
            col2im_add(dcol, g, first, count, gx.data());
          }
        }
      });
}

template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);

}  // namespace mcvt
