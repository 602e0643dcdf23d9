// SPDX-License-Identifier: Apache-2.0
//
// Cross-entropy training with Adam and cosine annealing, k-fold evaluation,
// timing and the ablation sweeps.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iterator>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcvt/dataset.hpp"
#include "mcvt/model.hpp"

namespace mcvt::train {

/// Non-finite training loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, const std::string& what);
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

struct TrainConfig {
  double lr0 = 2e-4;
  double lr_min = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  int epochs = 200;
  int batch_size = 8;  // objects per step
  std::uint64_t seed = 42;
  int folds = 5;
  /// Full passes timed by evaluate(); the median is reported.
  int timing_repetitions = 3;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& config);
/// Strict: unknown keys raise ConfigError. Missing keys keep the defaults.
TrainConfig train_config_from_json(const nlohmann::json& json);

/// Mean over the batch of -log softmax(logits)[target]; logits [B, C].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

/// lr0 at t = 0, lr_min at t = total, cosine in between.
double cosine_lr(double t, double total, double lr0, double lr_min);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

/// One bias-corrected Adam update at step t >= 1 on flat buffers.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v, std::int64_t t,
               double lr, const AdamHyper& hyper);

template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, const AdamHyper& hyper);
  /// Applies one update to every parameter that holds a gradient.
  void step(double lr);
  void zero_grad();
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamHyper hyper_;
  std::int64_t t_ = 0;
};

/// Images of the chosen samples as a model batch: RGB scaled to [0, 1],
/// depth as stored. `views` selects view indices (empty = all).
template <typename T>
Batch<T> make_batch(const data::Dataset& dataset, std::span<const std::size_t> indices, Modality modality,
                    std::span<const int> views = {});

/// Keeps only the given view indices of every sample (rig count updated).
data::Dataset select_views(const data::Dataset& dataset, std::span<const int> views);
/// floor(j * L / l) for j < l: the l-view subset used by the view sweep.
std::vector<int> spread_views(int available, int wanted);

struct Evaluation {
  double accuracy = 0.0;          // percent
  double ms_per_instance = 0.0;   // median full pass / sample count
  std::vector<int> predictions;
};

/// Eval-mode accuracy and timing over the whole dataset, in batches of
/// batch_size objects. Leaves the model's training flag as it found it.
Evaluation evaluate(McvtModel<float>& model, const data::Dataset& dataset, int batch_size = 8, int repetitions = 3);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double held_out_accuracy = 0.0;
  double seconds = 0.0;
};

struct FoldResult {
  int fold = 0;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double held_out_accuracy = 0.0;  // best-epoch accuracy on the held-out fold
  double test_accuracy = -1.0;     // on the separate test set, when given
  double ms_per_instance = 0.0;
  std::string checkpoint;
  std::vector<std::string> held_out_ids;
};

struct TrainOptions {
  /// Checkpoints go to <out_dir>/fold<i>/best.ckpt; empty disables them.
  std::filesystem::path out_dir;
  int fold = 0;
  /// Called after every epoch; returning false stops training early.
  std::function<bool(const EpochRecord&)> on_epoch;
  /// Progress lines; null for silence.
  std::ostream* log = nullptr;
  /// Extra fields stored in checkpoint metadata.
  nlohmann::json meta = nlohmann::json::object();
};

/// Trains on `train_set`, scoring `held_out` after each epoch. The
/// best-scoring parameters (first on ties) are checkpointed and restored into
/// the model before returning. `test_set` (optional) is scored once at the end.
FoldResult train(McvtModel<float>& model, const data::Dataset& train_set, const data::Dataset& held_out,
                 const TrainConfig& config, const TrainOptions& options = {}, const data::Dataset* test_set = nullptr);

struct TrainReport {
  std::string label;
  ModelConfig model;
  TrainConfig train;
  int views = 0;
  std::vector<FoldResult> folds;
  double mean_accuracy = 0.0;  // over folds: test accuracy if a test set was given, else held-out
  double std_accuracy = 0.0;
  double mean_held_out_accuracy = 0.0;
  double mean_ms_per_instance = 0.0;
  bool has_test_set = false;

  nlohmann::json to_json() const;
  std::string to_table() const;
};

struct CrossValidateOptions {
  std::filesystem::path out_dir;
  std::ostream* log = nullptr;
  std::string label;
  nlohmann::json meta = nlohmann::json::object();
  std::function<bool(int fold, const EpochRecord&)> on_epoch;
  /// Folds to run (empty = all); the aggregate covers the folds run.
  std::vector<int> only_folds;
};

/// k-fold run over `pool` (stratified split seeded by config.seed). Fold i
/// initialises its model with mix_seed(seed, i). Folds run on up to
/// worker_count() threads; results do not depend on the schedule.
TrainReport cross_validate(const ModelConfig& model, const TrainConfig& config, const data::Dataset& pool,
                           const data::Dataset* test_set = nullptr, const CrossValidateOptions& options = {});

/// Mean and population standard deviation.
std::pair<double, double> mean_std(std::span<const double> values);

enum class AblationAxis { fusion, views, blocks };

std::string_view name(AblationAxis axis);
AblationAxis parse_ablation_axis(std::string_view text);

struct AblationGrid {
  std::vector<Modality> modalities{Modality::rgb, Modality::rgbd};
  std::vector<fusion::Strategy> strategies{std::begin(fusion::kAllStrategies), std::end(fusion::kAllStrategies)};
  std::vector<int> view_counts{1, 2, 3, 4};
  std::vector<int> pre_blocks{0, 1, 2};
  std::vector<int> mid_blocks{0, 3, 7};
};

struct AblationCell {
  std::string row;
  std::string column;
  TrainReport report;
};

/// Rows and columns mirror the published tables:
///   fusion: rows = input modality, columns = ACF ECF AEF GEEF (accuracy %)
///   views:  rows = view count, columns = "<MOD> ACC (%)", "<MOD> Time (ms)"
///   blocks: rows = pre-residual blocks M, columns = middle-residual blocks S
struct AblationTable {
  AblationAxis axis = AblationAxis::fusion;
  std::vector<std::string> rows;
  std::vector<std::string> columns;
  /// values[r][c]
  std::vector<std::vector<double>> values;
  std::vector<AblationCell> cells;

  nlohmann::json to_json() const;
  std::string to_table() const;
};

struct AblationOptions {
  std::ostream* log = nullptr;
  std::filesystem::path out_dir;  // per-cell checkpoints when set
  std::vector<int> only_folds;
};

/// One cross_validate per grid cell with the same seed schedule. The views
/// axis keeps spread_views(L, l) of the dataset's L views.
AblationTable ablation_sweep(AblationAxis axis, const AblationGrid& grid, const ModelConfig& base,
                             const TrainConfig& config, const data::Dataset& pool,
                             const data::Dataset* test_set = nullptr, const AblationOptions& options = {});

}  // namespace mcvt::train
