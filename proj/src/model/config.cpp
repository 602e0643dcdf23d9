// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cctype>

#include "mcvt/json_fields.hpp"
#include "mcvt/model.hpp"

namespace mcvt {

std::string_view name(Modality modality) {
  switch (modality) {
    case Modality::rgb: return "rgb";
    case Modality::depth: return "depth";
    case Modality::rgbd: return "rgbd";
  }
  return "?";
}

Modality parse_modality(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (auto m : {Modality::rgb, Modality::depth, Modality::rgbd}) {
    if (name(m) == lower) return m;
  }
  throw ConfigError("unknown modality '" + std::string(text) + "' (expected rgb, depth or rgbd)");
}

bool uses_rgb(Modality modality) { return modality != Modality::depth; }
bool uses_depth(Modality modality) { return modality != Modality::rgb; }
int modality_count(Modality modality) { return modality == Modality::rgbd ? 2 : 1; }

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full_resolution() {
  ModelConfig config;
  config.image_size = 224;
  config.patch_size = 16;
  return config;
}

void ModelConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (pre_blocks < 0 || local_blocks < 0 || mid_blocks < 0 || global_blocks < 0) fail("block counts must be >= 0");
  if (embed_dim <= 0 || stem_channels <= 0 || mlp_ratio <= 0) fail("widths must be positive");
  if (heads <= 0 || embed_dim % heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
         std::to_string(patch_size));
  }
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) fail("bn_momentum must be in (0, 1]");
  if (!(bn_eps > 0.0) || !(layer_norm_eps > 0.0)) fail("normalization eps must be positive");
}

std::int64_t ModelConfig::fused_width() const {
  return static_cast<std::int64_t>(embed_dim) * fusion::parts_per_modality(fusion) * modality_count(modality);
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"pre_blocks", c.pre_blocks},
      {"local_blocks", c.local_blocks},
      {"mid_blocks", c.mid_blocks},
      {"global_blocks", c.global_blocks},
      {"embed_dim", c.embed_dim},
      {"patch_size", c.patch_size},
      {"image_size", c.image_size},
      {"stem_channels", c.stem_channels},
      {"heads", c.heads},
      {"mlp_ratio", c.mlp_ratio},
      {"num_classes", c.num_classes},
      {"fusion", std::string(fusion::name(c.fusion))},
      {"modality", std::string(name(c.modality))},
      {"shared_backbone", c.shared_backbone},
      {"cross_view_global", c.cross_view_global},
      {"layer_norm_eps", c.layer_norm_eps},
      {"bn_momentum", c.bn_momentum},
      {"bn_eps", c.bn_eps},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& json) {
  ModelConfig c;
  StrictFields f(json, "model");
  f.read("pre_blocks", c.pre_blocks);
  f.read("local_blocks", c.local_blocks);
  f.read("mid_blocks", c.mid_blocks);
  f.read("global_blocks", c.global_blocks);
  f.read("embed_dim", c.embed_dim);
  f.read("patch_size", c.patch_size);
  f.read("image_size", c.image_size);
  f.read("stem_channels", c.stem_channels);
  f.read("heads", c.heads);
  f.read("mlp_ratio", c.mlp_ratio);
  f.read("num_classes", c.num_classes);
  std::string fusion_name(fusion::name(c.fusion));
  f.read("fusion", fusion_name);
  c.fusion = fusion::parse_strategy(fusion_name);
  std::string modality_name(name(c.modality));
  f.read("modality", modality_name);
  c.modality = parse_modality(modality_name);
  f.read("shared_backbone", c.shared_backbone);
  f.read("cross_view_global", c.cross_view_global);
  f.read("layer_norm_eps", c.layer_norm_eps);
  f.read("bn_momentum", c.bn_momentum);
  f.read("bn_eps", c.bn_eps);
  f.finish();
  c.validate();
  return c;
}

}  // namespace mcvt
