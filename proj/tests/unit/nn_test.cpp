// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "mcvt/nn.hpp"
#include "test_support.hpp"

using namespace mcvt;
using namespace mcvt::nn;
using mcvt::testing::fill;
using mcvt::testing::uniform_tensor;

namespace {

// Rows of a [N, T, D] tensor reordered by perm.
Tensor<double> permute_rows(const Tensor<double>& x, const std::vector<std::int64_t>& perm) {
  const auto n = x.dim(0), t = x.dim(1), d = x.dim(2);
  std::vector<double> out(x.data().size());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t r = 0; r < t; ++r)
      for (std::int64_t k = 0; k < d; ++k) out[(i * t + r) * d + k] = x.data()[(i * t + perm[r]) * d + k];
  return Tensor<double>(x.shape(), std::move(out));
}

}  // namespace

TEST_CASE("patch embedding token counts") {
  Rng rng(1);
  const PatchEmbed<float> embed(3, 32, 4, 192, rng);
  const auto tokens = embed(uniform_tensor<float>({1, 3, 32, 32}, rng));
  CHECK(tokens.shape() == Shape{1, 65, 192});
  CHECK(embed.patch_count() == 64);

  const PatchEmbed<float> single(3, 8, 8, 192, rng);
  CHECK(single(uniform_tensor<float>({2, 3, 8, 8}, rng)).shape() == Shape{2, 2, 192});
}

TEST_CASE("patch embedding is deterministic for identical maps") {
  Rng rng(2);
  const PatchEmbed<float> embed(4, 16, 4, 24, rng);
  const auto map = uniform_tensor<float>({1, 4, 16, 16}, rng);
  const auto stacked = concat<float>({map, map}, 0);
  const auto tokens = embed(stacked);
  const auto half = tokens.numel() / 2;
  CHECK(std::equal(tokens.data().begin(), tokens.data().begin() + half, tokens.data().begin() + half));
}

TEST_CASE("patch embedding rejects indivisible extents") {
  Rng rng(3);
  CHECK_THROWS_AS(PatchEmbed<float>(3, 30, 4, 16, rng), ConfigError);
  CHECK_THROWS_AS(patchify(Tensor<float>::zeros({1, 1, 6, 6}), 4), ConfigError);
}

TEST_CASE("patchify layout") {
  // 1 x 2 x 4 x 4 map, patch 2: patch (0,1) holds channel 0 rows 0-1, columns 2-3 first.
  std::vector<double> v(32);
  std::iota(v.begin(), v.end(), 0.0);
  const auto p = patchify(Tensor<double>({1, 2, 4, 4}, v), 2);
  REQUIRE(p.shape() == Shape{1, 4, 8});
  const std::vector<double> expected{2, 3, 6, 7, 18, 19, 22, 23};
  CHECK(std::equal(expected.begin(), expected.end(), p.data().begin() + 8));
}

TEST_CASE("attention weight rows sum to one") {
  Rng rng(4);
  const auto qkv = uniform_tensor({2, 7, 3 * 12}, rng, -3, 3);
  const auto w = attention_weights(qkv, 3);
  REQUIRE(w.shape() == Shape{2, 3, 7, 7});
  for (std::int64_t row = 0; row < 2 * 3 * 7; ++row) {
    double total = 0.0;
    for (int k = 0; k < 7; ++k) total += w.data()[row * 7 + k];
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
}

TEST_CASE("single-token attention returns the projected value") {
  Rng rng(5);
  const std::int64_t d = 12;
  MultiHeadAttention<double> msa(d, 3, rng);
  // value slice of the qkv projection set to identity, query/key arbitrary
  auto w = msa.qkv.weight.mutable_data();
  for (std::int64_t i = 0; i < d; ++i)
    for (std::int64_t j = 0; j < d; ++j) w[i * 3 * d + 2 * d + j] = i == j ? 1.0 : 0.0;
  fill(msa.qkv.bias, 0.0);
  const auto x = uniform_tensor({1, 1, d}, rng);
  const auto y = msa(x);
  const auto expected = msa.proj(x);
  CHECK(testing::max_abs_diff(y.data(), expected.data()) < 1e-14);
}

TEST_CASE("attention gradient on a 9 x 192 input") {
  Rng rng(6);
  const MultiHeadAttention<double> msa(192, 3, rng);
  const auto x = uniform_tensor({1, 9, 192}, rng);
  const auto probe = uniform_tensor({1, 9, 192}, rng);
  CHECK(grad_check([&](const Tensor<double>& in) { return sum(mul(msa(in), probe)); }, x) < 1e-4);
}

TEST_CASE("transformer block with zeroed output projections is the identity") {
  Rng rng(7);
  TransformerBlock<float> block(192, 3, 768, 1e-6f, rng);
  fill(block.attn.proj.weight, 0.0f);
  fill(block.attn.proj.bias, 0.0f);
  fill(block.mlp.fc2.weight, 0.0f);
  fill(block.mlp.fc2.bias, 0.0f);
  const auto x = uniform_tensor<float>({1, 65, 192}, rng);
  const auto y = block(x);
  CHECK(y.shape() == Shape{1, 65, 192});
  CHECK(testing::bit_equal(x.data(), y.data()));
}

TEST_CASE("stack of eight transformer blocks passes the gradient check on two tokens") {
  Rng rng(8);
  std::vector<TransformerBlock<double>> blocks;
  for (int i = 0; i < 8; ++i) blocks.emplace_back(192, 3, 768, 1e-6, rng);
  const auto x = uniform_tensor({1, 2, 192}, rng);
  const auto probe = uniform_tensor({1, 2, 192}, rng);
  const auto f = [&](const Tensor<double>& in) {
    auto h = in;
    for (const auto& b : blocks) h = b(h);
    return sum(mul(h, probe));
  };
  CHECK(grad_check(f, x) < 1e-4);
}

TEST_CASE("attention is equivariant to patch-row permutations") {
  Rng rng(9);
  const TransformerBlock<double> block(24, 3, 96, 1e-6, rng);
  const auto x = uniform_tensor({2, 6, 24}, rng);
  const std::vector<std::int64_t> perm{0, 4, 2, 5, 1, 3};  // class row 0 stays put
  const auto y_then_perm = permute_rows(block(x), perm);
  const auto perm_then_y = block(permute_rows(x, perm));
  CHECK(testing::max_abs_diff(y_then_perm.data(), perm_then_y.data()) < 1e-12);
}

TEST_CASE("batch norm of a constant channel yields the shift") {
  BatchNorm2d<double> bn(2, 0.1, 1e-5);
  fill(bn.beta, 0.75);
  const auto y = bn.forward(Tensor<double>::full({3, 2, 4, 4}, 2.5), true);
  for (double v : y.data()) CHECK(v == 0.75);
}

TEST_CASE("batch norm running statistics update") {
  BatchNorm2d<double> bn(1, 0.1, 1e-5);
  const auto x = Tensor<double>({2, 1, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  bn.forward(x, true);
  // batch mean 2.5, unbiased variance 5/3
  CHECK(bn.running_mean.data()[0] == doctest::Approx(0.25));
  CHECK(bn.running_var.data()[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
}

TEST_CASE("eval-mode batch norm is a per-sample affine map") {
  Rng rng(10);
  BatchNorm2d<double> bn(3, 0.1, 1e-5);
  bn.forward(uniform_tensor({4, 3, 5, 5}, rng), true);
  auto a = uniform_tensor({2, 3, 5, 5}, rng);
  auto b = Tensor<double>(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
  for (std::int64_t i = 75; i < 150; ++i) b.mutable_data()[i] += 3.0;  // change sample 1 only
  const auto ya = bn.forward(a, false);
  const auto yb = bn.forward(b, false);
  CHECK(std::equal(ya.data().begin(), ya.data().begin() + 75, yb.data().begin()));
}

TEST_CASE("train-mode batch norm with single-element channels is rejected") {
  BatchNorm2d<double> bn(2, 0.1, 1e-5);
  CHECK_THROWS_AS(bn.forward(Tensor<double>::zeros({1, 2, 1, 1}), true), DegenerateStatisticsError);
  CHECK_NOTHROW(bn.forward(Tensor<double>::zeros({1, 2, 1, 1}), false));
}

TEST_CASE("layer norm output is standardized before scale and shift") {
  Rng rng(11);
  const LayerNorm<double> ln(50, 1e-6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto y = ln(uniform_tensor({4, 50}, rng, -5, 9));
    for (int r = 0; r < 4; ++r) {
      double mean = 0.0, var = 0.0;
      for (int k = 0; k < 50; ++k) mean += y.data()[r * 50 + k];
      mean /= 50;
      for (int k = 0; k < 50; ++k) var += std::pow(y.data()[r * 50 + k] - mean, 2);
      var /= 50;
      CHECK(std::abs(mean) <= 1e-6);
      CHECK(std::abs(var - 1.0) <= 1e-4);
    }
  }
}

TEST_CASE("normalization and token ops pass finite-difference checks on 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    INFO("seed " << seed);
    Rng rng(200 + seed);
    auto gamma = uniform_tensor({3}, rng, 0.5, 1.5, true);
    auto beta = uniform_tensor({3}, rng, -0.5, 0.5, true);
    auto rm = Tensor<double>::zeros({3});
    auto rv = Tensor<double>::full({3}, 1.0);
    const auto maps = uniform_tensor({2, 3, 3, 3}, rng);
    const auto probe_maps = uniform_tensor({2, 3, 3, 3}, rng);
    const auto bn_train = [&](const Tensor<double>& x) {
      return sum(mul(batch_norm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5), probe_maps));
    };
    CHECK(grad_check(bn_train, maps) < 1e-4);
    CHECK(grad_check_leaves([&] { return bn_train(maps); }, {gamma, beta}) < 1e-4);
    CHECK(grad_check([&](const Tensor<double>& x) {
            return sum(mul(batch_norm2d(x, gamma, beta, rm, rv, false, 0.1, 1e-5), probe_maps));
          }, maps) < 1e-4);

    auto lg = uniform_tensor({6}, rng, 0.5, 1.5, true);
    auto lb = uniform_tensor({6}, rng, -0.5, 0.5, true);
    const auto rows = uniform_tensor({2, 3, 6}, rng);
    const auto probe_rows = uniform_tensor({2, 3, 6}, rng);
    const auto ln = [&](const Tensor<double>& x) { return sum(mul(layer_norm(x, lg, lb, 1e-6), probe_rows)); };
    CHECK(grad_check(ln, rows) < 1e-4);
    CHECK(grad_check_leaves([&] { return ln(rows); }, {lg, lb}) < 1e-4);

    const auto qkv = uniform_tensor({2, 4, 18}, rng);
    const auto probe_att = uniform_tensor({2, 4, 6}, rng);
    CHECK(grad_check([&](const Tensor<double>& x) { return sum(mul(attention(x, 3), probe_att)); }, qkv) < 1e-4);

    const auto probe_patch = uniform_tensor({2, 4, 12}, rng);
    CHECK(grad_check([&](const Tensor<double>& x) { return sum(mul(patchify(x, 2), probe_patch)); },
                     uniform_tensor({2, 3, 4, 4}, rng)) < 1e-4);

    auto token = uniform_tensor({6}, rng, -1, 1, true);
    const auto probe_tok = uniform_tensor({2, 4, 6}, rng);
    const auto toks = uniform_tensor({2, 3, 6}, rng);
    const auto pre = [&](const Tensor<double>& x) { return sum(mul(prepend_token(x, token), probe_tok)); };
    CHECK(grad_check(pre, toks) < 1e-4);
    CHECK(grad_check_leaves([&] { return pre(toks); }, {token}) < 1e-4);
  }
}

TEST_CASE("state list keeps registration order and counts parameters only") {
  Rng rng(12);
  const Linear<float> lin(3, 4, rng);
  CHECK(lin.weight.numel() + lin.bias.numel() == 3 * 4 + 4);
  StateList<float> state;
  lin.collect(state, "a");
  BatchNorm2d<float> bn(5, 0.1f, 1e-5f);
  bn.collect(state, "b");
  CHECK(state.entries().size() == 6);
  CHECK(state.entries()[0].name == "a.weight");
  CHECK(state.entries()[5].name == "b.running_var");
  CHECK(state.parameter_count() == 16 + 10);
}
