// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <ostream>

#include "mcvt/parallel.hpp"
#include "mcvt/trainer.hpp"

namespace mcvt::train {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::mutex log_mutex;

void log_line(std::ostream* log, const std::string& line) {
  if (!log) return;
  std::lock_guard lock(log_mutex);
  *log << line << '\n' << std::flush;
}

std::string format(const char* fmt, auto... args) {
  char buffer[512];
  std::snprintf(buffer, sizeof buffer, fmt, args...);
  return buffer;
}

std::vector<int> argmax_rows(const Tensor<float>& logits) {
  const auto b = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(b));
  for (std::int64_t r = 0; r < b; ++r) {
    const auto row = logits.data().subspan(static_cast<std::size_t>(r * c), static_cast<std::size_t>(c));
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

void check_compatible(const ModelConfig& config, const data::Dataset& dataset, const char* what) {
  if (dataset.image_size != config.image_size) {
    throw ConfigError(std::string(what) + ": dataset images are " + std::to_string(dataset.image_size) +
                      " px but the model expects " + std::to_string(config.image_size));
  }
  if (static_cast<int>(dataset.classes.size()) != config.num_classes) {
    throw ConfigError(std::string(what) + ": dataset has " + std::to_string(dataset.classes.size()) +
                      " classes but the model has " + std::to_string(config.num_classes));
  }
  for (const auto& s : dataset.samples) {
    if (s.views.size() != dataset.samples.front().views.size() || s.views.empty()) {
      throw ConfigError(std::string(what) + ": sample '" + s.id + "' has a different view count");
    }
    if (s.label < 0 || s.label >= config.num_classes) {
      throw ConfigError(std::string(what) + ": sample '" + s.id + "' has label " + std::to_string(s.label));
    }
  }
}

std::vector<std::vector<float>> snapshot(const McvtModel<float>& model) {
  std::vector<std::vector<float>> out;
  const auto state = model.state();
  for (const auto& e : state.entries()) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

void restore(McvtModel<float>& model, const std::vector<std::vector<float>>& values) {
  const auto state = model.state();
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto tensor = state.entries()[i].tensor;
    std::copy(values[i].begin(), values[i].end(), tensor.mutable_data().begin());
  }
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> out(n);
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

}  // namespace

template <typename T>
Batch<T> make_batch(const data::Dataset& dataset, std::span<const std::size_t> indices, Modality modality,
                    std::span<const int> views) {
  if (indices.empty()) throw ContractError("make_batch: no samples selected");
  const auto& first = dataset.samples.at(indices[0]);
  std::vector<int> chosen(views.begin(), views.end());
  if (chosen.empty()) {
    chosen.resize(first.views.size());
    std::iota(chosen.begin(), chosen.end(), 0);
  }
  const std::int64_t s = dataset.image_size, pixels = s * s;
  const auto n = static_cast<std::int64_t>(indices.size() * chosen.size());
  std::vector<T> rgb, depth;
  if (uses_rgb(modality)) rgb.reserve(static_cast<std::size_t>(n * 3 * pixels));
  if (uses_depth(modality)) depth.reserve(static_cast<std::size_t>(n * pixels));
  for (auto i : indices) {
    if (i >= dataset.size()) throw ContractError("make_batch: sample index " + std::to_string(i) + " out of range");
    const auto& sample = dataset.samples[i];
    for (int j : chosen) {
      if (j < 0 || j >= static_cast<int>(sample.views.size())) {
        throw ContractError("make_batch: view " + std::to_string(j) + " missing in '" + sample.id + "'");
      }
      const auto& view = sample.views[j];
      if (view.size != s) throw DimensionError("make_batch: view size differs from the dataset image size");
      if (uses_rgb(modality)) {
        for (int c = 0; c < 3; ++c)
          for (std::int64_t p = 0; p < pixels; ++p) rgb.push_back(static_cast<T>(view.rgb[p * 3 + c]) / T(255));
      }
      if (uses_depth(modality)) {
        for (std::int64_t p = 0; p < pixels; ++p) depth.push_back(static_cast<T>(view.depth[p]));
      }
    }
  }
  Batch<T> batch;
  batch.objects = static_cast<std::int64_t>(indices.size());
  batch.views = static_cast<std::int64_t>(chosen.size());
  if (uses_rgb(modality)) batch.rgb = Tensor<T>({n, 3, s, s}, std::move(rgb));
  if (uses_depth(modality)) batch.depth = Tensor<T>({n, 1, s, s}, std::move(depth));
  return batch;
}

template Batch<float> make_batch(const data::Dataset&, std::span<const std::size_t>, Modality, std::span<const int>);
template Batch<double> make_batch(const data::Dataset&, std::span<const std::size_t>, Modality, std::span<const int>);

std::vector<int> spread_views(int available, int wanted) {
  if (wanted < 1 || wanted > available) {
    throw ConfigError("view subset: cannot take " + std::to_string(wanted) + " of " + std::to_string(available) +
                      " views");
  }
  std::vector<int> out;
  for (int j = 0; j < wanted; ++j) out.push_back(j * available / wanted);
  return out;
}

data::Dataset select_views(const data::Dataset& dataset, std::span<const int> views) {
  data::Dataset out = dataset;
  out.rig.count = static_cast<int>(views.size());
  for (auto& sample : out.samples) {
    std::vector<data::View> kept;
    for (int j : views) {
      if (j < 0 || j >= static_cast<int>(sample.views.size())) {
        throw ConfigError("select_views: view " + std::to_string(j) + " missing in '" + sample.id + "'");
      }
      kept.push_back(sample.views[j]);
    }
    sample.views = std::move(kept);
  }
  return out;
}

Evaluation evaluate(McvtModel<float>& model, const data::Dataset& dataset, int batch_size, int repetitions) {
  if (dataset.samples.empty()) throw ContractError("evaluate: empty sample set");
  if (batch_size < 1 || repetitions < 1) throw ContractError("evaluate: batch size and repetitions must be >= 1");
  check_compatible(model.config(), dataset, "evaluate");
  std::vector<Batch<float>> batches;
  for (std::size_t start = 0; start < dataset.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto idx = all_indices(dataset.size());
    const auto end = std::min(dataset.size(), start + static_cast<std::size_t>(batch_size));
    batches.push_back(make_batch<float>(dataset, std::span(idx).subspan(start, end - start), model.config().modality));
  }
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  Evaluation result;
  std::vector<double> times;
  for (int rep = 0; rep < repetitions; ++rep) {
    std::vector<int> predictions;
    const auto start = Clock::now();
    for (const auto& batch : batches) {
      const auto p = argmax_rows(model.forward(batch));
      predictions.insert(predictions.end(), p.begin(), p.end());
    }
    times.push_back(seconds_since(start));
    result.predictions = std::move(predictions);
  }
  model.set_training(was_training);
  int correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) correct += result.predictions[i] == dataset.samples[i].label;
  result.accuracy = 100.0 * correct / static_cast<double>(dataset.size());
  std::sort(times.begin(), times.end());
  result.ms_per_instance = 1000.0 * times[times.size() / 2] / static_cast<double>(dataset.size());
  return result;
}

FoldResult train(McvtModel<float>& model, const data::Dataset& train_set, const data::Dataset& held_out,
                 const TrainConfig& config, const TrainOptions& options, const data::Dataset* test_set) {
  config.validate();
  if (train_set.samples.empty()) throw ContractError("train: empty training set");
  if (held_out.samples.empty()) throw ContractError("train: empty held-out set");
  check_compatible(model.config(), train_set, "train");
  check_compatible(model.config(), held_out, "train (held-out)");
  if (test_set) check_compatible(model.config(), *test_set, "train (test)");

  FoldResult result;
  result.fold = options.fold;
  for (const auto& s : held_out.samples) result.held_out_ids.push_back(s.id);

  Adam<float> adam(model.parameters(), {config.beta1, config.beta2, config.eps});
  Rng order_rng(mix_seed(config.seed, 1000 + static_cast<std::uint64_t>(options.fold)));
  auto best = snapshot(model);
  double best_accuracy = -1.0;
  const auto modality = model.config().modality;
  const auto batch = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = Clock::now();
    EpochRecord record;
    record.epoch = epoch;
    record.lr = cosine_lr(epoch - 1, config.epochs, config.lr0, config.lr_min);
    model.set_training(true);
    auto order = all_indices(train_set.size());
    order_rng.shuffle(std::span<std::size_t>(order));
    double loss_total = 0.0;
    int correct = 0;
    for (std::size_t b = 0; b < order.size(); b += batch) {
      const auto chunk = std::span(order).subspan(b, std::min(batch, order.size() - b));
      std::vector<int> targets;
      for (auto i : chunk) targets.push_back(train_set.samples[i].label);
      const auto logits = model.forward(make_batch<float>(train_set, chunk, modality));
      const auto loss = cross_entropy(logits, std::span<const int>(targets));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw DivergenceError(epoch, format("non-finite loss at step %zu (fold %d)", b / batch + 1, options.fold));
      }
      adam.zero_grad();
      backward(loss);
      adam.step(record.lr);
      loss_total += value * static_cast<double>(chunk.size());
      const auto predicted = argmax_rows(logits);
      for (std::size_t k = 0; k < chunk.size(); ++k) correct += predicted[k] == targets[k];
    }
    record.loss = loss_total / static_cast<double>(order.size());
    record.train_accuracy = 100.0 * correct / static_cast<double>(order.size());
    record.held_out_accuracy = evaluate(model, held_out, config.batch_size, 1).accuracy;
    record.seconds = seconds_since(start);
    if (record.held_out_accuracy > best_accuracy) {
      best_accuracy = record.held_out_accuracy;
      result.best_epoch = epoch;
      best = snapshot(model);
    }
    result.epochs.push_back(record);
    log_line(options.log, format("fold %d epoch %3d/%d  lr %.3e  loss %.5f  train %6.2f%%  held-out %6.2f%%  %.1fs",
                                 options.fold, epoch, config.epochs, record.lr, record.loss, record.train_accuracy,
                                 record.held_out_accuracy, record.seconds));
    if (options.on_epoch && !options.on_epoch(record)) break;
  }

  restore(model, best);
  const auto final_eval = evaluate(model, held_out, config.batch_size, config.timing_repetitions);
  result.held_out_accuracy = final_eval.accuracy;
  result.ms_per_instance = final_eval.ms_per_instance;
  if (test_set) {
    result.test_accuracy = evaluate(model, *test_set, config.batch_size, 1).accuracy;
    log_line(options.log, format("fold %d best epoch %d  held-out %.2f%%  test %.2f%%  %.2f ms/instance", options.fold,
                                 result.best_epoch, result.held_out_accuracy, result.test_accuracy,
                                 result.ms_per_instance));
  } else {
    log_line(options.log, format("fold %d best epoch %d  held-out %.2f%%  %.2f ms/instance", options.fold,
                                 result.best_epoch, result.held_out_accuracy, result.ms_per_instance));
  }

  if (!options.out_dir.empty()) {
    const auto path = options.out_dir / ("fold" + std::to_string(options.fold)) / "best.ckpt";
    auto meta = options.meta;
    meta["fold"] = options.fold;
    meta["best_epoch"] = result.best_epoch;
    meta["held_out_accuracy"] = result.held_out_accuracy;
    meta["held_out_ids"] = result.held_out_ids;
    if (test_set) meta["test_accuracy"] = result.test_accuracy;
    meta["train"] = to_json(config);
    save_checkpoint(path, model, meta);
    result.checkpoint = path.string();
  }
  return result;
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / static_cast<double>(values.size()))};
}

TrainReport cross_validate(const ModelConfig& model_config, const TrainConfig& config, const data::Dataset& pool,
                           const data::Dataset* test_set, const CrossValidateOptions& options) {
  model_config.validate();
  config.validate();
  check_compatible(model_config, pool, "cross_validate");
  const auto folds = data::kfold_split(pool, config.folds, config.seed);
  std::vector<int> run = options.only_folds;
  if (run.empty()) {
    run.resize(folds.size());
    std::iota(run.begin(), run.end(), 0);
  }
  for (int f : run) {
    if (f < 0 || f >= config.folds) throw ConfigError("cross_validate: fold " + std::to_string(f) + " out of range");
  }

  TrainReport report;
  report.label = options.label;
  report.model = model_config;
  report.train = config;
  report.views = pool.samples.empty() ? 0 : static_cast<int>(pool.samples.front().views.size());
  report.has_test_set = test_set != nullptr;
  report.folds.resize(run.size());

  parallel_for(run.size(), [&](std::size_t r) {
    const int f = run[r];
    McvtModel<float> model(model_config, mix_seed(config.seed, static_cast<std::uint64_t>(f)));
    const auto train_set = data::subset(pool, folds[f].train);
    const auto held_out = data::subset(pool, folds[f].test);
    TrainOptions fold_options;
    fold_options.out_dir = options.out_dir;
    fold_options.fold = f;
    fold_options.log = options.log;
    fold_options.meta = options.meta;
    fold_options.meta["folds"] = config.folds;
    fold_options.meta["split_seed"] = config.seed;
    if (!options.label.empty()) fold_options.meta["label"] = options.label;
    if (options.on_epoch) fold_options.on_epoch = [&, f](const EpochRecord& e) { return options.on_epoch(f, e); };
    report.folds[r] = train(model, train_set, held_out, config, fold_options, test_set);
  });

  std::vector<double> primary, held, ms;
  for (const auto& f : report.folds) {
    primary.push_back(test_set ? f.test_accuracy : f.held_out_accuracy);
    held.push_back(f.held_out_accuracy);
    ms.push_back(f.ms_per_instance);
  }
  std::tie(report.mean_accuracy, report.std_accuracy) = mean_std(primary);
  report.mean_held_out_accuracy = mean_std(held).first;
  report.mean_ms_per_instance = mean_std(ms).first;
  return report;
}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json folds_json = nlohmann::json::array();
  for (const auto& f : folds) {
    nlohmann::json epochs_json = nlohmann::json::array();
    for (const auto& e : f.epochs) {
      epochs_json.push_back({{"epoch", e.epoch},
                             {"lr", e.lr},
                             {"loss", e.loss},
                             {"train_accuracy", e.train_accuracy},
                             {"held_out_accuracy", e.held_out_accuracy},
                             {"seconds", e.seconds}});
    }
    nlohmann::json fj{{"fold", f.fold},
                      {"best_epoch", f.best_epoch},
                      {"held_out_accuracy", f.held_out_accuracy},
                      {"ms_per_instance", f.ms_per_instance},
                      {"checkpoint", f.checkpoint},
                      {"epochs", epochs_json}};
    if (has_test_set) fj["test_accuracy"] = f.test_accuracy;
    folds_json.push_back(fj);
  }
  return {{"label", label},
          {"seed", train.seed},
          {"model", mcvt::to_json(model)},
          {"train", train::to_json(train)},
          {"views", views},
          {"metric", has_test_set ? "test" : "held_out"},
          {"mean_accuracy", mean_accuracy},
          {"std_accuracy", std_accuracy},
          {"mean_held_out_accuracy", mean_held_out_accuracy},
          {"mean_ms_per_instance", mean_ms_per_instance},
          {"folds", folds_json}};
}

std::string TrainReport::to_table() const {
  std::string out;
  if (!label.empty()) out += label + "\n";
  out += format("seed %llu  modality %s  fusion %s  views %d  epochs %d\n",
                static_cast<unsigned long long>(train.seed), std::string(name(model.modality)).c_str(),
                std::string(fusion::name(model.fusion)).c_str(), views, train.epochs);
  out += has_test_set ? "fold  best epoch  held-out (%)  test (%)  time (ms)\n"
                      : "fold  best epoch  held-out (%)  time (ms)\n";
  for (const auto& f : folds) {
    out += has_test_set ? format("%4d  %10d  %12.2f  %8.2f  %9.2f\n", f.fold, f.best_epoch, f.held_out_accuracy,
                                 f.test_accuracy, f.ms_per_instance)
                        : format("%4d  %10d  %12.2f  %9.2f\n", f.fold, f.best_epoch, f.held_out_accuracy,
                                 f.ms_per_instance);
  }
  out += format("mean %s accuracy %.2f +- %.2f %%, %.2f ms/instance\n", has_test_set ? "test" : "held-out",
                mean_accuracy, std_accuracy, mean_ms_per_instance);
  return out;
}

}  // namespace mcvt::train
