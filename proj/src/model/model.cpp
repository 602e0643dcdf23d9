// SPDX-License-Identifier: Apache-2.0
#include "mcvt/model.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

namespace mcvt {

template <typename T>
Stem<T>::Stem(std::int64_t in_channels, const ModelConfig& config, Rng& rng)
    : conv(in_channels, config.stem_channels, rng, false),
      bn(config.stem_channels, static_cast<T>(config.bn_momentum), static_cast<T>(config.bn_eps)) {}

template <typename T>
Tensor<T> Stem<T>::forward(const Tensor<T>& x, bool train) {
  if (x.rank() != 4 || x.dim(1) != conv.weight.dim(1)) {
    throw ConfigError("stem expects " + std::to_string(conv.weight.dim(1)) + " input channels, got " +
                      to_string(x.shape()));
  }
  return relu(bn.forward(conv(x), train));
}

template <typename T>
void Stem<T>::collect(nn::StateList<T>& state, const std::string& prefix) const {
  conv.collect(state, prefix + ".conv");
  bn.collect(state, prefix + ".bn");
}

template <typename T>
ResidualBlock<T>::ResidualBlock(std::int64_t channels, const ModelConfig& config, Rng& rng)
    : conv1(channels, channels, rng, false),
      conv2(channels, channels, rng, false),
      bn1(channels, static_cast<T>(config.bn_momentum), static_cast<T>(config.bn_eps)),
      bn2(channels, static_cast<T>(config.bn_momentum), static_cast<T>(config.bn_eps)) {}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, bool train) {
  auto h = relu(bn1.forward(conv1(x), train));
  h = bn2.forward(conv2(h), train);
  return relu(add(h, x));
}

template <typename T>
void ResidualBlock<T>::collect(nn::StateList<T>& state, const std::string& prefix) const {
  conv1.collect(state, prefix + ".conv1");
  bn1.collect(state, prefix + ".bn1");
  conv2.collect(state, prefix + ".conv2");
  bn2.collect(state, prefix + ".bn2");
}

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens) {
  if (tokens.rank() != 3) throw DimensionError("tokens_to_map: expected [N, P, D], got " + to_string(tokens.shape()));
  const auto n = tokens.dim(0), p = tokens.dim(1), d = tokens.dim(2);
  const auto g = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(p))));
  if (g * g != p) throw ConfigError("patch count " + std::to_string(p) + " is not a perfect square");
  return reshape(transpose_last2(tokens), {n, d, g, g});
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  if (map.rank() != 4) throw DimensionError("map_to_tokens: expected [N, D, g, g], got " + to_string(map.shape()));
  const auto n = map.dim(0), d = map.dim(1), hw = map.dim(2) * map.dim(3);
  return transpose_last2(reshape(map, {n, d, hw}));
}

template <typename T>
Tensor<T> mid_residual(ResidualBlock<T>& block, const Tensor<T>& patch_tokens, bool train) {
  return map_to_tokens(block.forward(tokens_to_map(patch_tokens), train));
}

template <typename T>
Backbone<T>::Backbone(const ModelConfig& config, Rng& rng) {
  for (int i = 0; i < config.pre_blocks; ++i) pre.emplace_back(config.stem_channels, config, rng);
  embed = nn::PatchEmbed<T>(config.stem_channels, config.image_size, config.patch_size, config.embed_dim, rng);
  const auto hidden = static_cast<std::int64_t>(config.embed_dim) * config.mlp_ratio;
  const auto eps = static_cast<T>(config.layer_norm_eps);
  for (int i = 0; i < config.local_blocks; ++i) local.emplace_back(config.embed_dim, config.heads, hidden, eps, rng);
  for (int i = 0; i < config.mid_blocks; ++i) mid.emplace_back(config.embed_dim, config, rng);
  for (int i = 0; i < config.global_blocks; ++i) global.emplace_back(config.embed_dim, config.heads, hidden, eps, rng);
}

template <typename T>
ViewFeatures<T> Backbone<T>::forward(const Tensor<T>& maps, std::int64_t views_per_object, bool train,
                                     bool cross_view) {
  auto x = maps;
  for (auto& block : pre) x = block.forward(x, train);
  auto tokens = embed(x);
  for (const auto& block : local) tokens = block(tokens);
  const auto n = tokens.dim(0), t = tokens.dim(1), d = tokens.dim(2);
  if (!mid.empty()) {
    const auto cls = narrow(tokens, 1, 0, 1);
    auto patches = narrow(tokens, 1, 1, t - 1);
    auto map = tokens_to_map(patches);
    for (auto& block : mid) map = block.forward(map, train);
    tokens = concat<T>({cls, map_to_tokens(map)}, 1);
  }
  if (!global.empty()) {
    if (cross_view) {
      if (views_per_object < 1 || n % views_per_object != 0) {
        throw ContractError("backbone: " + std::to_string(n) + " images do not split into groups of " +
                            std::to_string(views_per_object) + " views");
      }
      tokens = reshape(tokens, {n / views_per_object, views_per_object * t, d});
    }
    for (const auto& block : global) tokens = block(tokens);
    if (cross_view) tokens = reshape(tokens, {n, t, d});
  }
  return {narrow(tokens, 1, 1, t - 1), reshape(narrow(tokens, 1, 0, 1), {n, d})};
}

template <typename T>
void Backbone<T>::collect(nn::StateList<T>& state, const std::string& prefix) const {
  for (std::size_t i = 0; i < pre.size(); ++i) pre[i].collect(state, prefix + ".pre." + std::to_string(i));
  embed.collect(state, prefix + ".embed");
  for (std::size_t i = 0; i < local.size(); ++i) local[i].collect(state, prefix + ".local." + std::to_string(i));
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i].collect(state, prefix + ".mid." + std::to_string(i));
  for (std::size_t i = 0; i < global.size(); ++i) global[i].collect(state, prefix + ".global." + std::to_string(i));
}

template <typename T>
McvtModel<T>::McvtModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  if (uses_rgb(config_.modality)) rgb_stem_ = Stem<T>(3, config_, rng);
  if (uses_depth(config_.modality)) depth_stem_ = Stem<T>(1, config_, rng);
  backbone_ = Backbone<T>(config_, rng);
  if (config_.modality == Modality::rgbd && !config_.shared_backbone) depth_backbone_ = Backbone<T>(config_, rng);
  head_ = fusion::ClassifierHead<T>(config_.fused_width(), config_.num_classes, rng);
}

template <typename T>
Stem<T>& McvtModel<T>::stem(Modality modality) {
  if (modality == Modality::rgb && uses_rgb(config_.modality)) return rgb_stem_;
  if (modality == Modality::depth && uses_depth(config_.modality)) return depth_stem_;
  throw ConfigError("model has no " + std::string(name(modality)) + " stem");
}

template <typename T>
Backbone<T>& McvtModel<T>::backbone(Modality modality) {
  stem(modality);  // validates the modality
  if (modality == Modality::depth && config_.modality == Modality::rgbd && !config_.shared_backbone) {
    return depth_backbone_;
  }
  return backbone_;
}

template <typename T>
Tensor<T> McvtModel<T>::stem_forward(Modality modality, const Tensor<T>& images) {
  if (!images.defined()) throw ContractError("batch is missing " + std::string(name(modality)) + " images");
  if (images.rank() != 4 || images.dim(2) != config_.image_size || images.dim(3) != config_.image_size) {
    throw ConfigError(std::string(name(modality)) + " images " + to_string(images.shape()) + " do not match size " +
                      std::to_string(config_.image_size));
  }
  return stem(modality).forward(images, training_);
}

template <typename T>
fusion::FusionBundle<T> McvtModel<T>::extract(const Batch<T>& batch) {
  const auto b = batch.objects, l = batch.views;
  if (b < 1 || l < 1) throw ContractError("batch needs at least one object and one view");
  const auto p = config_.patch_count(), d = static_cast<std::int64_t>(config_.embed_dim);
  const bool cross = config_.cross_view_global;
  const auto arrange = [&](const Tensor<T>& patches, const Tensor<T>& cls) {
    return fusion::ModalityViews<T>{reshape(patches, {b, l, p, d}), reshape(cls, {b, l, d})};
  };

  fusion::FusionBundle<T> bundle;
  if (config_.modality == Modality::rgbd && config_.shared_backbone) {
    // Both modalities pass through the backbone as one stacked batch so batch
    // norm sees the same statistics regardless of call order.
    const auto maps = concat<T>({stem_forward(Modality::rgb, batch.rgb), stem_forward(Modality::depth, batch.depth)}, 0);
    const auto out = backbone_.forward(maps, l, training_, cross);
    const auto n = b * l;
    bundle.modalities.push_back(arrange(narrow(out.patch_tokens, 0, 0, n), narrow(out.cls_tokens, 0, 0, n)));
    bundle.modalities.push_back(arrange(narrow(out.patch_tokens, 0, n, n), narrow(out.cls_tokens, 0, n, n)));
    return bundle;
  }
  for (auto m : {Modality::rgb, Modality::depth}) {
    if (m == Modality::rgb ? !uses_rgb(config_.modality) : !uses_depth(config_.modality)) continue;
    const auto& images = m == Modality::rgb ? batch.rgb : batch.depth;
    const auto out = backbone(m).forward(stem_forward(m, images), l, training_, cross);
    bundle.modalities.push_back(arrange(out.patch_tokens, out.cls_tokens));
  }
  return bundle;
}

template <typename T>
Tensor<T> McvtModel<T>::forward(const Batch<T>& batch) {
  return head_(fusion::fuse(extract(batch), config_.fusion).feature);
}

template <typename T>
ViewFeatures<T> McvtModel<T>::forward_view(Modality modality, const Tensor<T>& images) {
  if (modality == Modality::rgbd) throw ConfigError("forward_view takes a single modality");
  auto stacked = images;
  if (images.defined() && images.rank() == 3) stacked = reshape(images, {1, images.dim(0), images.dim(1), images.dim(2)});
  return backbone(modality).forward(stem_forward(modality, stacked), 1, training_, config_.cross_view_global);
}

template <typename T>
nn::StateList<T> McvtModel<T>::state() const {
  nn::StateList<T> state;
  if (uses_rgb(config_.modality)) rgb_stem_.collect(state, "rgb_stem");
  if (uses_depth(config_.modality)) depth_stem_.collect(state, "depth_stem");
  backbone_.collect(state, "backbone");
  if (config_.modality == Modality::rgbd && !config_.shared_backbone) depth_backbone_.collect(state, "depth_backbone");
  head_.collect(state, "head");
  return state;
}

std::int64_t param_count(const ModelConfig& config) { return McvtModel<float>(config, 0).parameter_count(); }

std::string layer_summary(const ModelConfig& config) {
  const McvtModel<float> model(config, 0);
  // Group by the first two name components, e.g. "backbone.local".
  std::vector<std::string> order;
  std::map<std::string, std::int64_t> counts;
  const auto state = model.state();
  for (const auto& entry : state.entries()) {
    if (entry.kind != nn::StateKind::parameter) continue;
    auto cut = entry.name.find('.');
    if (cut != std::string::npos && entry.name.compare(0, cut, "head") != 0) cut = entry.name.find('.', cut + 1);
    const auto group = entry.name.substr(0, cut);
    if (!counts.count(group)) order.push_back(group);
    counts[group] += entry.tensor.numel();
  }
  std::ostringstream out;
  std::int64_t total = 0;
  for (const auto& group : order) {
    out << std::left << std::setw(24) << group << std::right << std::setw(12) << counts[group] << "\n";
    total += counts[group];
  }
  out << std::left << std::setw(24) << "total" << std::right << std::setw(12) << total << "\n";
  return out.str();
}

#define MCVT_INSTANTIATE_MODEL(T)                                                        \
  template struct Stem<T>;                                                               \
  template struct ResidualBlock<T>;                                                      \
  template Tensor<T> tokens_to_map(const Tensor<T>&);                                    \
  template Tensor<T> map_to_tokens(const Tensor<T>&);                                    \
  template Tensor<T> mid_residual(ResidualBlock<T>&, const Tensor<T>&, bool);            \
  template struct Backbone<T>;                                                           \
  template class McvtModel<T>;

MCVT_INSTANTIATE_MODEL(float)
MCVT_INSTANTIATE_MODEL(double)

}  // namespace mcvt
