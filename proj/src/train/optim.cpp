// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numbers>

#include "mcvt/json_fields.hpp"
#include "mcvt/trainer.hpp"

namespace mcvt::train {

DivergenceError::DivergenceError(int epoch, const std::string& what)
    : std::runtime_error("training diverged in epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("train: lr0 must be positive");
  if (!(lr_min >= 0.0) || lr_min > lr0) throw ConfigError("train: lr_min must lie in [0, lr0]");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train: beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train: eps must be positive");
  if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
  if (folds < 2) throw ConfigError("train: folds must be at least 2");
  if (timing_repetitions < 1) throw ConfigError("train: timing_repetitions must be at least 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},       {"lr_min", c.lr_min},         {"beta1", c.beta1},
          {"beta2", c.beta2},   {"eps", c.eps},               {"epochs", c.epochs},
          {"batch_size", c.batch_size}, {"seed", c.seed},     {"folds", c.folds},
          {"timing_repetitions", c.timing_repetitions}};
}

TrainConfig train_config_from_json(const nlohmann::json& json) {
  TrainConfig c;
  StrictFields f(json, "train");
  f.read("lr0", c.lr0);
  f.read("lr_min", c.lr_min);
  f.read("beta1", c.beta1);
  f.read("beta2", c.beta2);
  f.read("eps", c.eps);
  f.read("epochs", c.epochs);
  f.read("batch_size", c.batch_size);
  f.read("seed", c.seed);
  f.read("folds", c.folds);
  f.read("timing_repetitions", c.timing_repetitions);
  f.finish();
  c.validate();
  return c;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [B, C], got " + to_string(logits.shape()));
  const auto b = logits.dim(0), c = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != b) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(b) +
                         " rows");
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= c) {
      throw ContractError("cross_entropy: target " + std::to_string(targets[i]) + " at row " + std::to_string(i) +
                          " outside [0, " + std::to_string(c) + ")");
    }
  }
  const auto x = logits.data();
  std::vector<T> probs(x.begin(), x.end());
  double total = 0.0;
  for (std::int64_t r = 0; r < b; ++r) {
    T* row = probs.data() + r * c;
    const T peak = *std::max_element(row, row + c);
    T z = T(0);
    for (std::int64_t k = 0; k < c; ++k) {
      row[k] = std::exp(row[k] - peak);
      z += row[k];
    }
    for (std::int64_t k = 0; k < c; ++k) row[k] /= z;
    total += static_cast<double>(peak + std::log(z) - x[r * c + targets[r]]);
  }
  std::vector<int> labels(targets.begin(), targets.end());
  return Tensor<T>::from_op(
      "cross_entropy", {}, {static_cast<T>(total / static_cast<double>(b))}, {logits},
      [logits, probs = std::move(probs), labels = std::move(labels), b, c](const TensorNode<T>& self) {
        auto g = logits.grad_sink();
        if (g.empty()) return;
        const T scale = self.grad[0] / static_cast<T>(b);
        for (std::int64_t r = 0; r < b; ++r) {
          for (std::int64_t k = 0; k < c; ++k) {
            const auto idx = static_cast<std::size_t>(r * c + k);
            g[idx] += scale * (probs[idx] - (k == labels[r] ? T(1) : T(0)));
          }
        }
      });
}

double cosine_lr(double t, double total, double lr0, double lr_min) {
  if (!(total > 0.0) || t < 0.0 || t > total) {
    throw ContractError("cosine_lr: need 0 <= t <= T with T > 0, got t = " + std::to_string(t) +
                        ", T = " + std::to_string(total));
  }
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t / total));
}

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v, std::int64_t t,
               double lr, const AdamHyper& hyper) {
  if (t < 1) throw ContractError("adam_step: step index must be >= 1");
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
    throw DimensionError("adam_step: buffer sizes differ");
  }
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double mi = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
    const double vi = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    params[i] = static_cast<T>(params[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + hyper.eps));
  }
}

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, const AdamHyper& hyper) : params_(std::move(params)), hyper_(hyper) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    v_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    adam_step<T>(p.mutable_data(), p.grad(), m_[i], v_[i], t_, lr, hyper_);
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

#define MCVT_INSTANTIATE(T)                                                                                    \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                                    \
  template void adam_step(std::span<T>, std::span<const T>, std::span<T>, std::span<T>, std::int64_t, double, \
                          const AdamHyper&);                                                                   \
  template class Adam<T>;

MCVT_INSTANTIATE(float)
MCVT_INSTANTIATE(double)
#undef MCVT_INSTANTIATE

}  // namespace mcvt::train
