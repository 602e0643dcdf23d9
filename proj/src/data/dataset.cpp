// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <numeric>

#include "mcvt/dataset.hpp"
#include "mcvt/parallel.hpp"
#include "mcvt/tensor.hpp"

namespace mcvt::data {

FormatError::FormatError(const std::filesystem::path& path, const std::string& what)
    : std::runtime_error(path.string() + ": " + what), path_(path) {}

Dataset generate_dataset(const GenerateOptions& options) {
  if (options.classes < 1 || options.classes > static_cast<int>(kShapeClasses.size())) {
    throw ConfigError("generate_dataset: classes must be in [1, " + std::to_string(kShapeClasses.size()) + "], got " +
                      std::to_string(options.classes));
  }
  if (options.per_class < 0) throw ConfigError("generate_dataset: per_class must be non-negative");
  if (options.first_index < 0) throw ConfigError("generate_dataset: first_index must be non-negative");
  if (options.image_size < 1) throw ConfigError("generate_dataset: image_size must be positive");
  options.rig.validate();

  Dataset dataset;
  dataset.image_size = options.image_size;
  dataset.rig = options.rig;
  for (int c = 0; c < options.classes; ++c) dataset.classes.emplace_back(name(kShapeClasses[c]));
  dataset.samples.resize(static_cast<std::size_t>(options.classes) * options.per_class);

  parallel_for(dataset.samples.size(), [&](std::size_t s) {
    const int c = static_cast<int>(s) / std::max(1, options.per_class);
    const int index = options.first_index + static_cast<int>(s) % std::max(1, options.per_class);
    const auto shape = kShapeClasses[c];
    const auto cloud = generate_shape(shape, mix_seed(mix_seed(options.seed, c), index), options.points);
    char id[64];
    std::snprintf(id, sizeof id, "%s_%04d", std::string(name(shape)).c_str(), index);
    auto& sample = dataset.samples[s];
    sample.id = id;
    sample.label = c;
    sample.views = render_views(cloud, options.rig, options.image_size);
  });
  return dataset;
}

Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices) {
  Dataset out;
  out.classes = dataset.classes;
  out.image_size = dataset.image_size;
  out.rig = dataset.rig;
  out.samples.reserve(indices.size());
  for (auto i : indices) {
    if (i >= dataset.size()) throw ContractError("subset: index " + std::to_string(i) + " out of range");
    out.samples.push_back(dataset.samples[i]);
  }
  return out;
}

namespace {

std::vector<Fold> deal(const std::vector<std::size_t>& order, int k) {
  std::vector<Fold> folds(static_cast<std::size_t>(k));
  std::vector<int> owner(order.size());
  for (std::size_t j = 0; j < order.size(); ++j) owner[order[j]] = static_cast<int>(j % k);
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (int f = 0; f < k; ++f) (owner[i] == f ? folds[f].test : folds[f].train).push_back(i);
  }
  return folds;
}

void check_fold_args(std::size_t count, int k) {
  if (k < 2) throw ContractError("kfold_split: k must be at least 2, got " + std::to_string(k));
  if (static_cast<std::size_t>(k) > count) {
    throw ContractError("kfold_split: k = " + std::to_string(k) + " exceeds the sample count " + std::to_string(count));
  }
}

}  // namespace

std::vector<Fold> kfold_split(std::size_t count, int k, std::uint64_t seed) {
  check_fold_args(count, k);
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  return deal(order, k);
}

std::vector<Fold> kfold_split(const Dataset& dataset, int k, std::uint64_t seed) {
  check_fold_args(dataset.size(), k);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dataset.samples[a].label < dataset.samples[b].label; });
  return deal(order, k);
}

}  // namespace mcvt::data
