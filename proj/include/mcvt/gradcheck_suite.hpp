// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference sweep over every differentiable op, layer and the full
// backbone + GEEF + head composite, in double precision.

#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace mcvt {

struct GradCheckSuiteOptions {
  int seeds = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Adds the desk-size composite (32 x 32 images, M=2 K=8 S=7 N=4) on a
  /// sample of coordinates.
  bool full = false;
  std::ostream* log = nullptr;
};

struct GradCheckCaseResult {
  std::string name;
  int instances = 0;
  double max_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t refined = 0;
  std::size_t unresolved = 0;
  double seconds = 0.0;
  bool passed = false;
};

struct GradCheckSuiteReport {
  std::vector<GradCheckCaseResult> cases;
  double tolerance = 0.0;
  double seconds = 0.0;

  bool passed() const;
  double max_error() const;
  int min_instances() const;
  std::string to_table() const;
  nlohmann::json to_json() const;
};

GradCheckSuiteReport run_gradcheck_suite(const GradCheckSuiteOptions& options = {});

}  // namespace mcvt
