// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "mcvt/tensor.hpp"
#include "test_support.hpp"

using namespace mcvt;
using mcvt::testing::uniform_tensor;

namespace {

Tensor<double> make(Shape shape, std::vector<double> values, bool requires_grad = false) {
  return Tensor<double>(std::move(shape), std::move(values), requires_grad);
}

// Random inputs kept away from the ReLU kink and the log singularity.
Tensor<double> off_kink(Shape shape, Rng& rng) {
  auto t = uniform_tensor(std::move(shape), rng, 0.1, 1.0);
  for (auto& v : t.mutable_data()) v = rng.uniform() < 0.5 ? -v : v;
  return t;
}

}  // namespace

TEST_CASE("shape helpers") {
  CHECK(numel({2, 3, 4}) == 24);
  CHECK(to_string({2, 3}) == "[2, 3]");
  CHECK_THROWS_AS(Tensor<double>({2, 2}, {1.0, 2.0}), DimensionError);
}

TEST_CASE("tensor buffers are cache-line aligned") {
  const auto aligned = [](const auto& t) { return reinterpret_cast<std::uintptr_t>(t.data().data()) % 64 == 0; };
  std::vector<std::vector<char>> ballast;
  for (std::size_t n = 1; n < 40; n += 3) {
    ballast.emplace_back(n);
    const auto x = make({static_cast<std::int64_t>(n)}, std::vector<double>(n, 0.5), true);
    CHECK(aligned(x));
    CHECK(aligned(Tensor<float>::zeros({static_cast<std::int64_t>(n)})));
    const auto y = relu(x);
    CHECK(aligned(y));
    CHECK(aligned(y.detach()));
    backward(sum(y));
    CHECK(reinterpret_cast<std::uintptr_t>(x.grad().data()) % 64 == 0);
  }
}

TEST_CASE("matmul examples") {
  const auto a = make({2, 2}, {1, 2, 3, 4});
  const auto eye = make({2, 2}, {1, 0, 0, 1});
  CHECK(matmul(eye, a).data()[3] == 4.0);
  CHECK(testing::bit_equal(matmul(eye, a).data(), a.data()));

  const auto y = matmul(a, make({2, 1}, {0, 1}));
  CHECK(y.shape() == Shape{2, 1});
  CHECK(y.data()[0] == 2.0);
  CHECK(y.data()[1] == 4.0);
}

TEST_CASE("matmul gradient of the sum is the row-broadcast column sum") {
  Rng rng(7);
  auto a = uniform_tensor({5, 7}, rng, -1, 1, true);
  const auto b = uniform_tensor({7, 3}, rng);
  backward(sum(matmul(a, b)));
  for (int i = 0; i < 5; ++i) {
    for (int k = 0; k < 7; ++k) {
      double row_sum = 0.0;
      for (int j = 0; j < 3; ++j) row_sum += b.at({k, j});
      CHECK(a.grad()[i * 7 + k] == doctest::Approx(row_sum).epsilon(1e-12));
    }
  }
  CHECK(grad_check([&](const Tensor<double>& x) { return sum(matmul(x, b)); }, a) < 1e-4);
}

TEST_CASE("matmul rejects mismatched inner extents naming both shapes") {
  try {
    matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({4, 5}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2, 3]") != std::string::npos);
    CHECK(what.find("[4, 5]") != std::string::npos);
  }
}

TEST_CASE("conv2d with zero weights yields the bias per channel") {
  Rng rng(1);
  const auto x = uniform_tensor({2, 3, 5, 6}, rng);
  const auto w = Tensor<double>::zeros({2, 3, 3, 3});
  const auto b = make({2}, {0.25, -1.5});
  const auto y = conv2d(x, w, b);
  REQUIRE(y.shape() == Shape{2, 2, 5, 6});
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    const auto channel = (i / 30) % 2;
    CHECK(y.data()[i] == b.data()[channel]);
  }
}

TEST_CASE("conv2d padded sum counts") {
  const auto y = conv2d(Tensor<double>::full({1, 1, 3, 3}, 1.0), Tensor<double>::full({1, 1, 3, 3}, 1.0),
                        Tensor<double>::zeros({1}));
  const std::vector<double> expected{4, 6, 4, 6, 9, 6, 4, 6, 4};
  CHECK(testing::bit_equal<double>(y.data(), expected));
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(11);
  const auto x = uniform_tensor({2, 4, 8, 8}, rng);
  auto w = uniform_tensor({3, 4, 3, 3}, rng, -0.5, 0.5, true);
  auto b = uniform_tensor({3}, rng, -0.5, 0.5, true);
  const auto probe = uniform_tensor({2, 3, 8, 8}, rng);
  CHECK(grad_check([&](const Tensor<double>& in) { return sum(mul(conv2d(in, w, b), probe)); }, x) < 1e-4);
  CHECK(grad_check_leaves([&] { return sum(mul(conv2d(x, w, b), probe)); }, {w, b}) < 1e-4);
}

TEST_CASE("conv2d channel mismatch is a dimension error") {
  CHECK_THROWS_AS(conv2d(Tensor<double>::zeros({1, 2, 4, 4}), Tensor<double>::zeros({1, 3, 3, 3})), DimensionError);
}

TEST_CASE("conv2d preserves spatial extent for random shapes") {
  Rng rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const auto h = 4 + static_cast<std::int64_t>(rng.below(29));
    const auto w = 4 + static_cast<std::int64_t>(rng.below(29));
    const auto y = conv2d(uniform_tensor<float>({1, 2, h, w}, rng), uniform_tensor<float>({3, 2, 3, 3}, rng));
    CHECK(y.shape() == Shape{1, 3, h, w});
  }
}

TEST_CASE("softmax examples") {
  const auto half = softmax(make({2}, {0, 0}), 0);
  CHECK(half.data()[0] == 0.5);
  CHECK(half.data()[1] == 0.5);
  const auto big = softmax(make({2}, {1000, 1000}), 0);
  CHECK(big.data()[0] == 0.5);
  CHECK(std::isfinite(big.data()[1]));

  Rng rng(2);
  const auto x = uniform_tensor({3, 5}, rng, -4, 4);
  const auto shifted = softmax(add_scalar(x, 17.25), 1);
  CHECK(testing::max_abs_diff(softmax(x, 1).data(), shifted.data()) < 1e-12);
}

TEST_CASE("softmax slices sum to one on every axis") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = uniform_tensor<float>({3, 4, 5}, rng, -30, 30);
    for (int axis = 0; axis < 3; ++axis) {
      const auto y = softmax(x, axis);
      const auto totals = sum_axis(y, axis);
      for (float t : totals.data()) CHECK(std::abs(t - 1.0f) <= 1e-6f);
      for (float v : y.data()) CHECK(v >= 0.0f);
    }
  }
}

TEST_CASE("backward examples") {
  Rng rng(4);
  auto x = uniform_tensor({3, 4}, rng, -1, 1, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);
  x.zero_grad();
  backward(sum(mul(x, x)));
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 2.0 * x.data()[i]);
}

TEST_CASE("repeated backward calls accumulate") {
  auto x = make({2}, {1.0, -2.0}, true);
  const auto loss = sum(square(x));
  backward(loss);
  backward(loss);
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[1] == -8.0);
}

TEST_CASE("backward contract errors") {
  auto x = make({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
  CHECK_THROWS_AS(backward(Tensor<double>::scalar(1.0)), ContractError);
}

TEST_CASE("tape visits shared nodes once in topological order") {
  auto x = make({2}, {0.5, 1.5}, true);
  const auto a = mul(x, x);
  const auto b = add(a, a);          // diamond: a feeds b twice
  const auto loss = sum(add(b, a));  // and the sum once more
  Tape<double> tape(loss);
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& input : nodes[i]->inputs) {
      const auto at = std::find(nodes.begin(), nodes.end(), input.get());
      if (at != nodes.end()) CHECK(at < nodes.begin() + static_cast<std::ptrdiff_t>(i));
    }
    CHECK(std::count(nodes.begin(), nodes.end(), nodes[i]) == 1);
  }
  backward(loss);
  // d/dx of 3x^2
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(9.0));
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  auto x = make({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  const auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->is_leaf());
}

TEST_CASE("grad_check of a linear function is at rounding level") {
  Rng rng(8);
  const auto w = uniform_tensor({6}, rng);
  const auto x = uniform_tensor({6}, rng);
  CHECK(grad_check([&](const Tensor<double>& in) { return sum(mul(in, w)); }, x) < 1e-8);
}

TEST_CASE("grad_check of relu off the kink") {
  Rng rng(9);
  const auto x = off_kink({20}, rng);
  CHECK(grad_check([](const Tensor<double>& in) { return sum(relu(in)); }, x) < 1e-6);
}

TEST_CASE("relu subgradient at zero is zero") {
  auto x = make({3}, {-1.0, 0.0, 1.0}, true);
  backward(sum(relu(x)));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[2] == 1.0);
}

TEST_CASE("elementwise and layout ops pass finite-difference checks on 20 seeds") {
  using Fn = std::function<Tensor<double>(const Tensor<double>&)>;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const auto x = off_kink({3, 4}, rng);
    const auto other = uniform_tensor({3, 4}, rng);
    const auto probe = uniform_tensor({3, 4}, rng);
    const auto bias = uniform_tensor({4}, rng);
    const auto weight = uniform_tensor({4, 5}, rng);
    const auto wsum = [&](const Tensor<double>& y) { return sum(mul(y, probe)); };
    const std::vector<std::pair<const char*, Fn>> cases = {
        {"add", [&](const Tensor<double>& v) { return wsum(add(v, other)); }},
        {"sub", [&](const Tensor<double>& v) { return wsum(sub(other, v)); }},
        {"mul", [&](const Tensor<double>& v) { return wsum(mul(v, v)); }},
        {"scale", [&](const Tensor<double>& v) { return wsum(scale(v, -2.5)); }},
        {"add_scalar", [&](const Tensor<double>& v) { return wsum(add_scalar(v, 0.75)); }},
        {"add_bias", [&](const Tensor<double>& v) { return wsum(add_bias(v, bias)); }},
        {"relu", [&](const Tensor<double>& v) { return wsum(relu(v)); }},
        {"gelu", [&](const Tensor<double>& v) { return wsum(gelu(v)); }},
        {"log", [&](const Tensor<double>& v) { return wsum(log(square(v))); }},
        {"square", [&](const Tensor<double>& v) { return wsum(square(v)); }},
        {"sum", [&](const Tensor<double>& v) { return sum(square(v)); }},
        {"mean", [&](const Tensor<double>& v) { return mean(square(v)); }},
        {"sum_axis", [&](const Tensor<double>& v) { return sum(square(sum_axis(v, 0))); }},
        {"mean_axis", [&](const Tensor<double>& v) { return sum(square(mean_axis(v, 1))); }},
        {"softmax", [&](const Tensor<double>& v) { return wsum(softmax(v, 1)); }},
        {"softmax0", [&](const Tensor<double>& v) { return wsum(softmax(v, 0)); }},
        {"matmul", [&](const Tensor<double>& v) { return sum(square(matmul(v, weight))); }},
        {"linear", [&](const Tensor<double>& v) { return sum(square(linear(v, weight, Tensor<double>(Shape{5}, {0.1, 0.2, -0.3, 0.4, 0.5})))); }},
        {"reshape", [&](const Tensor<double>& v) { return sum(square(matmul(reshape(v, {4, 3}), reshape(v, {3, 4})))); }},
        {"transpose", [&](const Tensor<double>& v) {
           return sum(square(matmul(reshape(transpose_last2(reshape(v, {1, 3, 4})), {4, 3}), other)));
         }},
        {"narrow", [&](const Tensor<double>& v) { return sum(square(narrow(v, 1, 1, 2))); }},
        {"concat0", [&](const Tensor<double>& v) { return sum(square(concat<double>({v, other, v}, 0))); }},
        {"concat1", [&](const Tensor<double>& v) { return sum(square(mul(concat<double>({other, v}, 1), concat<double>({probe, probe}, 1)))); }},
    };
    for (const auto& [name, f] : cases) {
      INFO("op " << std::string(name) << " seed " << seed);
      CHECK(grad_check(f, x) < 1e-4);
    }
  }
}

TEST_CASE("linear weight and bias gradients") {
  Rng rng(12);
  const auto x = uniform_tensor({2, 3, 4}, rng);
  auto w = uniform_tensor({4, 5}, rng, -1, 1, true);
  auto b = uniform_tensor({5}, rng, -1, 1, true);
  CHECK(grad_check_leaves([&] { return sum(square(linear(x, w, b))); }, {w, b}) < 1e-4);
}

TEST_CASE("identical seeds give bit-identical forward results") {
  const auto run = [] {
    Rng rng(77);
    const auto x = uniform_tensor<float>({2, 3, 6, 6}, rng);
    const auto w = uniform_tensor<float>({4, 3, 3, 3}, rng);
    const auto y = gelu(conv2d(x, w));
    return softmax(reshape(y, {2, 4 * 36}), 1);
  };
  CHECK(testing::bit_equal(run().data(), run().data()));
}

TEST_CASE("cast round trip and detach") {
  const auto x = make({2}, {0.5, -0.25}, true);
  const auto f = x.cast<float>();
  CHECK(f.data()[0] == 0.5f);
  CHECK_FALSE(x.detach().requires_grad());
}
