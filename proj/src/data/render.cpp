// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "mcvt/dataset.hpp"
#include "mcvt/json_fields.hpp"
#include "mcvt/tensor.hpp"

namespace mcvt::data {

namespace {

constexpr double kDegree = std::numbers::pi / 180.0;

std::array<Camera, 10> build_hemi_table() {
  // unit circumradius: edge (sqrt5 - 1) / sqrt3, top face circumradius edge / (2 sin 36)
  const double edge = (std::sqrt(5.0) - 1.0) / std::sqrt(3.0);
  const double face_radius = edge / (2.0 * std::sin(36.0 * kDegree));
  const double upper = std::asin(std::sqrt(1.0 - face_radius * face_radius)) / kDegree;
  // the vertex below each top vertex lies on the same meridian, one edge away
  const double step = std::acos(1.0 - edge * edge / 2.0) / kDegree;
  std::array<Camera, 10> table;
  for (int k = 0; k < 5; ++k) {
    table[k] = {72.0 * k, upper};
    table[5 + k] = {72.0 * k, upper - step};
  }
  return table;
}

using Vec3 = std::array<double, 3>;

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 normalized(Vec3 v) {
  const double n = std::sqrt(dot(v, v));
  for (auto& x : v) x /= n;
  return v;
}

View render_one(const PointCloud& cloud, const Camera& camera, int size) {
  const double az = camera.azimuth * kDegree, el = camera.elevation * kDegree;
  const Vec3 toward_camera{std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
  const Vec3 forward{-toward_camera[0], -toward_camera[1], -toward_camera[2]};
  Vec3 right = cross(forward, {0.0, 0.0, 1.0});
  right = dot(right, right) < 1e-12 ? Vec3{0.0, 1.0, 0.0} : normalized(right);
  const Vec3 up = cross(right, forward);

  const auto pixels = static_cast<std::size_t>(size) * size;
  const int splat = size / 64;
  std::vector<double> distance(pixels, std::numeric_limits<double>::infinity());
  for (const auto& p : cloud.points) {
    const double x = dot(p, right), y = dot(p, up);
    const double d = kCameraDistance + dot(p, forward);
    const auto col = static_cast<long>(std::floor((x / kViewHalfWidth + 1.0) * 0.5 * size));
    const auto row = static_cast<long>(std::floor((1.0 - y / kViewHalfWidth) * 0.5 * size));
    for (long r = row - splat; r <= row + splat; ++r) {
      if (r < 0 || r >= size) continue;
      for (long c = col - splat; c <= col + splat; ++c) {
        if (c < 0 || c >= size) continue;
        auto& slot = distance[static_cast<std::size_t>(r) * size + c];
        slot = std::min(slot, d);
      }
    }
  }

  View view;
  view.size = size;
  view.camera = camera;
  view.rgb.assign(pixels * 3, 0);
  view.depth.assign(pixels, 0.0f);
  const double nearest = *std::min_element(distance.begin(), distance.end());
  if (!std::isfinite(nearest)) return view;
  for (std::size_t i = 0; i < pixels; ++i) {
    if (!std::isfinite(distance[i])) continue;
    const auto q = quantize_depth(nearest / distance[i]);
    view.depth[i] = dequantize_depth(q);
    const double shade = 0.4 + 0.6 * view.depth[i];
    for (int c = 0; c < 3; ++c) view.rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(cloud.color[c] * shade));
  }
  return view;
}

}  // namespace

const std::array<Camera, 10>& hemi_dodecahedron_table() {
  static const auto table = build_hemi_table();
  return table;
}

std::string_view name(RigKind kind) { return kind == RigKind::circular ? "circular" : "hemi_dodecahedron"; }

RigKind parse_rig_kind(std::string_view text) {
  if (text == "circular") return RigKind::circular;
  if (text == "hemi" || text == "hemi_dodecahedron") return RigKind::hemi_dodecahedron;
  throw ConfigError("unknown rig kind '" + std::string(text) + "' (expected circular or hemi)");
}

void ViewpointRig::validate() const {
  if (count < 1) throw ConfigError("rig: view count must be at least 1, got " + std::to_string(count));
  if (kind == RigKind::hemi_dodecahedron && count > 10) {
    throw ConfigError("rig: hemi-dodecahedron rig has 10 vertices, got count " + std::to_string(count));
  }
  if (!std::isfinite(azimuth_offset)) throw ConfigError("rig: azimuth_offset must be finite");
  if (!(elevation > -90.0 && elevation < 90.0)) throw ConfigError("rig: elevation must lie in (-90, 90)");
}

std::vector<Camera> ViewpointRig::cameras() const {
  validate();
  std::vector<Camera> out;
  if (kind == RigKind::circular) {
    for (int j = 0; j < count; ++j) out.push_back({azimuth_offset + 360.0 * j / count, elevation});
    return out;
  }
  std::vector<std::size_t> chosen(10);
  std::iota(chosen.begin(), chosen.end(), std::size_t{0});
  if (count < 10) {
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(chosen));
    chosen.resize(static_cast<std::size_t>(count));
    std::sort(chosen.begin(), chosen.end());
  }
  for (auto i : chosen) {
    auto camera = hemi_dodecahedron_table()[i];
    camera.azimuth += azimuth_offset;
    out.push_back(camera);
  }
  return out;
}

nlohmann::json to_json(const ViewpointRig& rig) {
  return {{"kind", std::string(name(rig.kind))},
          {"count", rig.count},
          {"azimuth_offset", rig.azimuth_offset},
          {"elevation", rig.elevation},
          {"seed", rig.seed}};
}

ViewpointRig rig_from_json(const nlohmann::json& json) {
  ViewpointRig rig;
  StrictFields fields(json, "rig");
  std::string kind(name(rig.kind));
  fields.read("kind", kind);
  rig.kind = parse_rig_kind(kind);
  fields.read("count", rig.count);
  fields.read("azimuth_offset", rig.azimuth_offset);
  fields.read("elevation", rig.elevation);
  fields.read("seed", rig.seed);
  fields.finish();
  rig.validate();
  return rig;
}

std::uint16_t quantize_depth(double depth) {
  return static_cast<std::uint16_t>(std::lround(std::clamp(depth, 0.0, 1.0) * 65535.0));
}

float dequantize_depth(std::uint16_t q) { return static_cast<float>(q) / 65535.0f; }

std::vector<View> render_views(const PointCloud& cloud, const ViewpointRig& rig, int image_size) {
  if (cloud.points.empty()) throw ContractError("render_views: point set is empty");
  if (image_size < 1) throw ConfigError("render_views: image size must be positive");
  std::vector<View> views;
  for (const auto& camera : rig.cameras()) views.push_back(render_one(cloud, camera, image_size));
  return views;
}

}  // namespace mcvt::data
