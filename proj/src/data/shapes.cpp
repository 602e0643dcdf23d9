// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include "mcvt/dataset.hpp"
#include "mcvt/tensor.hpp"

namespace mcvt::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

using Point = std::array<double, 3>;

Point disk_point(Rng& rng, double radius, double z) {
  const double r = radius * std::sqrt(rng.uniform());
  const double a = kTwoPi * rng.uniform();
  return {r * std::cos(a), r * std::sin(a), z};
}

Point cube_point(Rng& rng) {
  const auto face = rng.below(6);
  const auto axis = face / 2;
  Point p{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
  p[axis] = face % 2 == 0 ? -0.5 : 0.5;
  return p;
}

Point sphere_point(Rng& rng) {
  Point p;
  double norm = 0.0;
  do {
    p = {rng.normal(), rng.normal(), rng.normal()};
    norm = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  } while (norm < 1e-12);
  for (auto& v : p) v *= 0.5 / norm;
  return p;
}

Point cylinder_point(Rng& rng) {
  // side pi, each cap pi / 4
  const double u = rng.uniform() * 1.5;
  if (u < 1.0) {
    const double a = kTwoPi * rng.uniform();
    return {0.5 * std::cos(a), 0.5 * std::sin(a), rng.uniform(-0.5, 0.5)};
  }
  return disk_point(rng, 0.5, u < 1.25 ? -0.5 : 0.5);
}

Point cone_point(Rng& rng) {
  // apex at z = 0.5, base disk at z = -0.5
  const double side = std::numbers::pi * 0.5 * std::sqrt(1.25);
  const double base = std::numbers::pi * 0.25;
  if (rng.uniform() * (side + base) < side) {
    const double s = std::sqrt(rng.uniform());
    const double a = kTwoPi * rng.uniform();
    return {0.5 * s * std::cos(a), 0.5 * s * std::sin(a), 0.5 - s};
  }
  return disk_point(rng, 0.5, -0.5);
}

std::array<std::array<double, 3>, 3> random_rotation(Rng& rng) {
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double x = a * std::sin(kTwoPi * u2), y = a * std::cos(kTwoPi * u2);
  const double z = b * std::sin(kTwoPi * u3), w = b * std::cos(kTwoPi * u3);
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

std::array<int, 3> base_color(ShapeClass shape) {
  switch (shape) {
    case ShapeClass::cube: return {200, 90, 70};
    case ShapeClass::sphere: return {80, 160, 220};
    case ShapeClass::cone: return {100, 200, 100};
    case ShapeClass::cylinder: return {220, 190, 80};
  }
  return {128, 128, 128};
}

}  // namespace

std::string_view name(ShapeClass shape) {
  switch (shape) {
    case ShapeClass::cube: return "cube";
    case ShapeClass::sphere: return "sphere";
    case ShapeClass::cone: return "cone";
    case ShapeClass::cylinder: return "cylinder";
  }
  return "?";
}

ShapeClass parse_shape_class(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (auto s : kShapeClasses)
    if (name(s) == lower) return s;
  throw ConfigError("unknown shape class '" + std::string(text) + "'");
}

PointCloud canonical_shape(ShapeClass shape, Rng& rng, std::size_t count) {
  if (count == 0) throw ContractError("canonical_shape: point count must be positive");
  PointCloud cloud;
  cloud.points.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    switch (shape) {
      case ShapeClass::cube: cloud.points.push_back(cube_point(rng)); break;
      case ShapeClass::sphere: cloud.points.push_back(sphere_point(rng)); break;
      case ShapeClass::cone: cloud.points.push_back(cone_point(rng)); break;
      case ShapeClass::cylinder: cloud.points.push_back(cylinder_point(rng)); break;
    }
  }
  return cloud;
}

PointCloud generate_shape(ShapeClass shape, std::uint64_t seed, std::size_t count) {
  Rng rng(seed);
  const double scale = rng.uniform(0.8, 1.2);
  const auto rotation = random_rotation(rng);
  const auto base = base_color(shape);
  std::array<std::uint8_t, 3> color{};
  for (int c = 0; c < 3; ++c) {
    const double jittered = base[c] + rng.uniform(-25.0, 25.0);
    color[c] = static_cast<std::uint8_t>(std::lround(std::clamp(jittered, 60.0, 255.0)));
  }
  auto cloud = canonical_shape(shape, rng, count);
  for (auto& p : cloud.points) {
    Point q{};
    for (int r = 0; r < 3; ++r) q[r] = scale * (rotation[r][0] * p[0] + rotation[r][1] * p[1] + rotation[r][2] * p[2]);
    p = q;
  }
  cloud.color = color;
  return cloud;
}

}  // namespace mcvt::data
