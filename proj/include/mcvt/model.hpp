// SPDX-License-Identifier: Apache-2.0
//
// Four-stage multi-view backbone and the full recognition model.
//
// Per view image: stem (conv + BN + ReLU) -> M pre-residual conv blocks ->
// patch embedding with class token -> K local transformer blocks -> S
// middle-residual conv blocks over the patch tokens reshaped to a g x g map
// (the class token bypasses them) -> N global transformer blocks. The
// resulting class and patch tokens of every view feed the fusion stage.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mcvt/fusion.hpp"
#include "mcvt/nn.hpp"
#include "mcvt/tensor.hpp"

namespace mcvt {

enum class Modality { rgb, depth, rgbd };

std::string_view name(Modality modality);
Modality parse_modality(std::string_view text);
bool uses_rgb(Modality modality);
bool uses_depth(Modality modality);
int modality_count(Modality modality);

struct ModelConfig {
  int pre_blocks = 2;     // M
  int local_blocks = 8;   // K
  int mid_blocks = 7;     // S
  int global_blocks = 4;  // N
  int embed_dim = 192;
  int patch_size = 4;
  int image_size = 32;
  int stem_channels = 32;
  int heads = 3;
  int mlp_ratio = 4;
  int num_classes = 4;
  fusion::Strategy fusion = fusion::Strategy::geef;
  Modality modality = Modality::rgbd;
  /// One backbone for both modalities (modality-specific stems) or two.
  bool shared_backbone = true;
  /// Global blocks attend across all views of an object in one sequence.
  bool cross_view_global = false;
  double layer_norm_eps = 1e-6;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  /// 32 x 32 images, 4 x 4 patches; the block counts above.
  static ModelConfig desk();
  /// 224 x 224 images, 16 x 16 patches.
  static ModelConfig full_resolution();

  void validate() const;
  std::int64_t patch_grid() const { return image_size / patch_size; }
  std::int64_t patch_count() const { return patch_grid() * patch_grid(); }
  std::int64_t fused_width() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Strict JSON mapping; unknown keys are rejected with ConfigError.
nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& json);

/// Per-view backbone output.
template <typename T>
struct ViewFeatures {
  Tensor<T> patch_tokens;  // [N, p_w, D]
  Tensor<T> cls_tokens;    // [N, D]
};

/// A batch of B objects with L views each. Images are stacked object-major
/// (index b * L + j) with values in [0, 1].
template <typename T>
struct Batch {
  Tensor<T> rgb;    // [B*L, 3, H, W]; undefined when RGB is unused
  Tensor<T> depth;  // [B*L, 1, H, W]; undefined when depth is unused
  std::int64_t objects = 0;
  std::int64_t views = 0;
};

template <typename T>
struct Stem {
  Stem() = default;
  Stem(std::int64_t in_channels, const ModelConfig& config, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool train);
  void collect(nn::StateList<T>& state, const std::string& prefix) const;

  nn::Conv3x3<T> conv;
  nn::BatchNorm2d<T> bn;
};

/// y = ReLU(BN2(Conv2(ReLU(BN1(Conv1(x))))) + x); shared by the pre- and
/// middle-residual stages.
template <typename T>
struct ResidualBlock {
  ResidualBlock() = default;
  ResidualBlock(std::int64_t channels, const ModelConfig& config, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool train);
  void collect(nn::StateList<T>& state, const std::string& prefix) const;

  nn::Conv3x3<T> conv1, conv2;
  nn::BatchNorm2d<T> bn1, bn2;
};

/// [N, g*g, D] -> [N, D, g, g]; throws ConfigError when the count is not square.
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens);
/// [N, D, g, g] -> [N, g*g, D]
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map);

/// One middle-residual block applied to patch tokens (class token excluded).
template <typename T>
Tensor<T> mid_residual(ResidualBlock<T>& block, const Tensor<T>& patch_tokens, bool train);

template <typename T>
struct Backbone {
  Backbone() = default;
  Backbone(const ModelConfig& config, Rng& rng);
  /// maps: stem output [N, C, H, W] with N = objects * views_per_object.
  ViewFeatures<T> forward(const Tensor<T>& maps, std::int64_t views_per_object, bool train, bool cross_view);
  void collect(nn::StateList<T>& state, const std::string& prefix) const;

  std::vector<ResidualBlock<T>> pre;
  nn::PatchEmbed<T> embed;
  std::vector<nn::TransformerBlock<T>> local;
  std::vector<ResidualBlock<T>> mid;
  std::vector<nn::TransformerBlock<T>> global;
};

template <typename T>
class McvtModel {
 public:
  McvtModel(const ModelConfig& config, std::uint64_t seed);
  // Tensors are shared handles; a copy would alias the parameters.
  McvtModel(const McvtModel&) = delete;
  McvtModel& operator=(const McvtModel&) = delete;
  McvtModel(McvtModel&&) noexcept = default;
  McvtModel& operator=(McvtModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  /// Class logits [B, num_classes].
  Tensor<T> forward(const Batch<T>& batch);
  /// Backbone outputs arranged for fusion.
  fusion::FusionBundle<T> extract(const Batch<T>& batch);
  /// Backbone output for stand-alone view images [N, C, H, W] (or one [C, H, W])
  /// of a single modality (rgb or depth).
  ViewFeatures<T> forward_view(Modality modality, const Tensor<T>& images);

  nn::StateList<T> state() const;
  std::vector<Tensor<T>> parameters() const { return state().parameters(); }
  std::int64_t parameter_count() const { return state().parameter_count(); }

  Stem<T>& stem(Modality modality);
  Backbone<T>& backbone(Modality modality);
  fusion::ClassifierHead<T>& head() { return head_; }

 private:
  Tensor<T> stem_forward(Modality modality, const Tensor<T>& images);

  ModelConfig config_;
  bool training_ = true;
  Stem<T> rgb_stem_, depth_stem_;
  Backbone<T> backbone_;        // shared, or the RGB one
  Backbone<T> depth_backbone_;  // only when backbones are separate
  fusion::ClassifierHead<T> head_;
};

/// Learned-parameter count of the model a config describes.
std::int64_t param_count(const ModelConfig& config);

/// Human-readable per-stage parameter summary.
std::string layer_summary(const ModelConfig& config);

/// Malformed or incompatible checkpoint file.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary checkpoint: "MCVTCKPT", u32 version, u32 length + JSON header
/// ({"config": ..., "meta": ...}), u32 entry count, then per state entry:
/// u32 name length + name, u8 kind (0 parameter, 1 buffer), u32 rank,
/// u32 extents, float32 values. All integers and floats little-endian.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const McvtModel<T>& model,
                     const nlohmann::json& meta = nlohmann::json::object());

struct CheckpointHeader {
  ModelConfig config;
  nlohmann::json meta;
};

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

/// Rebuilds the model described by the header and loads its state.
template <typename T>
McvtModel<T> load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace mcvt
