// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>

#include "mcvt/rng.hpp"
#include "mcvt/tensor.hpp"

namespace mcvt {

namespace {

thread_local ActivationPatternMonitor* current_monitor = nullptr;

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h * 0xbf58476d1ce4e5b9ULL;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

struct Evaluation {
  double value;
  std::uint64_t pattern;
};

Evaluation evaluate(const std::function<Tensor<double>()>& f) {
  NoGradGuard guard;
  ActivationPatternMonitor monitor;
  const auto y = f();
  if (y.numel() != 1) throw ContractError("grad_check: function must be scalar-valued, got " + to_string(y.shape()));
  return {y.item(), monitor.fingerprint()};
}

}  // namespace

ActivationPatternMonitor::ActivationPatternMonitor() : previous_(current_monitor) { current_monitor = this; }
ActivationPatternMonitor::~ActivationPatternMonitor() { current_monitor = previous_; }

bool ActivationPatternMonitor::active() { return current_monitor != nullptr; }

template <typename T>
void ActivationPatternMonitor::observe(std::span<const T> inputs) {
  auto* m = current_monitor;
  if (!m) return;
  std::uint64_t h = mix(m->hash_, inputs.size());
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    word = (word << 1) | (inputs[i] > T(0) ? 1u : 0u);
    if (i % 64 == 63) {
      h = mix(h, word);
      word = 0;
    }
  }
  m->hash_ = mix(h, word);
}

template void ActivationPatternMonitor::observe<float>(std::span<const float>);
template void ActivationPatternMonitor::observe<double>(std::span<const double>);

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                  double step) {
  Tensor<double> leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  GradCheckOptions options;
  options.step = step;
  return grad_check_leaves([&] { return f(leaf); }, {leaf}, options);
}

double grad_check_leaves(const std::function<Tensor<double>()>& f, const std::vector<Tensor<double>>& leaves,
                         const GradCheckOptions& options) {
  return grad_check_report(f, leaves, options).max_error;
}

GradCheckReport grad_check_report(const std::function<Tensor<double>()>& f, const std::vector<Tensor<double>>& leaves,
                                  const GradCheckOptions& options) {
  for (auto leaf : leaves) {
    if (!leaf.requires_grad()) throw ContractError("grad_check: every probed tensor must require grad");
    leaf.zero_grad();
  }
  {
    const auto y = f();
    if (y.numel() != 1) {
      throw ContractError("grad_check: function must be scalar-valued, got " + to_string(y.shape()));
    }
    backward(y);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  const auto baseline = evaluate(f).pattern;

  GradCheckReport report;
  Rng rng(options.seed);
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    Tensor<double> leaf = leaves[t];
    std::vector<std::size_t> coords(static_cast<std::size_t>(leaf.numel()));
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coordinates > 0 && coords.size() > options.max_coordinates) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(options.max_coordinates);
    }
    for (auto index : coords) {
      auto values = leaf.mutable_data();
      const double original = values[index];
      double h = options.step;
      double numeric = 0.0;
      for (bool first = true;; first = false) {
        values[index] = original + h;
        const auto plus = evaluate(f);
        values[index] = original - h;
        const auto minus = evaluate(f);
        values[index] = original;
        numeric = (plus.value - minus.value) / (2.0 * h);
        const bool smooth = plus.pattern == baseline && minus.pattern == baseline;
        if (smooth || !options.refine_at_kinks) break;
        if (first) ++report.refined;
        if (h / 10.0 < options.min_step) {
          ++report.unresolved;
          break;
        }
        h /= 10.0;
      }
      report.max_error = std::max(report.max_error, relative_error(analytic[t][index], numeric));
      ++report.coordinates;
    }
    leaf.zero_grad();
  }
  return report;
}

}  // namespace mcvt
