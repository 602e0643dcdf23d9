// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-view RGB-D dataset: procedural shapes, an orthographic
// z-buffered point renderer, the on-disk format and k-fold splits.
//
// On-disk layout:
//   <root>/manifest.json
//   <root>/<sample_id>/view<j>_rgb.png    8-bit RGB, row 0 at the top
//   <root>/<sample_id>/view<j>_depth.png  16-bit grayscale, depth = q / 65535
//
// manifest.json:
//   {"version": 1, "classes": [...], "image_size": S,
//    "rig": {"kind": "circular"|"hemi_dodecahedron", "count": l,
//            "azimuth_offset": deg, "elevation": deg, "seed": n},
//    "entries": [{"id": ..., "label": c,
//                 "views": [{"azimuth": deg, "elevation": deg}, ...]}, ...]}

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mcvt/rng.hpp"

namespace mcvt::data {

/// Missing or malformed dataset file. The message names the path.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::filesystem::path& path, const std::string& what);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

enum class ShapeClass { cube, sphere, cone, cylinder };
inline constexpr std::array<ShapeClass, 4> kShapeClasses{ShapeClass::cube, ShapeClass::sphere, ShapeClass::cone,
                                                         ShapeClass::cylinder};

std::string_view name(ShapeClass shape);
ShapeClass parse_shape_class(std::string_view text);

struct PointCloud {
  std::vector<std::array<double, 3>> points;
  std::array<std::uint8_t, 3> color{};
};

inline constexpr std::size_t kDefaultPointCount = 8192;

/// Area-uniform surface samples of the unit shape, centred on its bounding
/// box: cube of side 1, sphere of radius 0.5, cylinder and cone of radius 0.5
/// and height 1 along z. Colour is left zero.
PointCloud canonical_shape(ShapeClass shape, Rng& rng, std::size_t count = kDefaultPointCount);

/// Canonical shape scaled by U[0.8, 1.2], rotated by a uniformly random
/// rotation and coloured with the jittered class colour. Deterministic per
/// (shape, seed).
PointCloud generate_shape(ShapeClass shape, std::uint64_t seed, std::size_t count = kDefaultPointCount);

enum class RigKind { circular, hemi_dodecahedron };

std::string_view name(RigKind kind);
/// Accepts "circular", "hemi" and "hemi_dodecahedron".
RigKind parse_rig_kind(std::string_view text);

struct Camera {
  double azimuth = 0.0;    // degrees, counter-clockwise from +x
  double elevation = 0.0;  // degrees above the xy plane
  bool operator==(const Camera&) const = default;
};

/// Upper-hemisphere vertices of a face-up regular dodecahedron inscribed in
/// the unit sphere: five at elevation asin(0.79465) ~ 52.62 deg and five at
/// asin(0.18759) ~ 10.81 deg, both rings at azimuths 0, 72, ..., 288.
const std::array<Camera, 10>& hemi_dodecahedron_table();

struct ViewpointRig {
  RigKind kind = RigKind::circular;
  int count = 4;
  double azimuth_offset = 0.0;
  double elevation = 30.0;  // circular only
  /// Hemi-dodecahedron with count < 10: picks which vertices are used.
  std::uint64_t seed = 0;

  /// Circular: azimuths offset + 360 j / count. Hemi: table vertices, rotated
  /// by the azimuth offset, in table order.
  std::vector<Camera> cameras() const;
  void validate() const;
  bool operator==(const ViewpointRig&) const = default;
};

nlohmann::json to_json(const ViewpointRig& rig);
ViewpointRig rig_from_json(const nlohmann::json& json);

std::uint16_t quantize_depth(double depth);
float dequantize_depth(std::uint16_t q);

struct View {
  int size = 0;
  std::vector<std::uint8_t> rgb;  // size * size * 3
  std::vector<float> depth;       // size * size, multiples of 1/65535
  Camera camera;
  bool operator==(const View&) const = default;
};

inline constexpr double kCameraDistance = 3.0;
inline constexpr double kViewHalfWidth = 1.1;

/// Orthographic projection from each rig camera (distance 3, looking at the
/// origin, z up, a 2.2 x 2.2 window). Each point covers a square of
/// 2 * (size / 64) + 1 pixels. Depth is d_near / d with d_near the nearest
/// visible distance in that view, so the closest surface reads 1 and the
/// background 0. RGB is the point colour times 0.4 + 0.6 * depth.
std::vector<View> render_views(const PointCloud& cloud, const ViewpointRig& rig, int image_size);

struct Sample {
  std::string id;
  int label = 0;
  std::vector<View> views;
  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::vector<std::string> classes;
  int image_size = 32;
  ViewpointRig rig;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  int view_count() const { return rig.count; }
  bool operator==(const Dataset&) const = default;
};

struct GenerateOptions {
  int classes = 4;
  int per_class = 50;
  /// Sample indices within each class start here; lets a disjoint test set
  /// come from the same seed.
  int first_index = 0;
  ViewpointRig rig;
  int image_size = 32;
  std::uint64_t seed = 42;
  std::size_t points = kDefaultPointCount;
};

/// Samples are ordered class-major; sample (c, i) is "<class>_<iiii>" and its
/// shape seed depends only on (seed, c, i). Rendering runs on worker_count()
/// threads and is schedule independent.
Dataset generate_dataset(const GenerateOptions& options);

void save_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded shuffle, then sample j of the shuffled order goes to test fold j % k.
std::vector<Fold> kfold_split(std::size_t count, int k, std::uint64_t seed);
/// Same, with the shuffled order grouped by label first so every class is
/// spread evenly over the folds.
std::vector<Fold> kfold_split(const Dataset& dataset, int k, std::uint64_t seed);

}  // namespace mcvt::data
