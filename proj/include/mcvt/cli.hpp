// SPDX-License-Identifier: Apache-2.0
//
// Command-line workflows: gen-data, train, eval, gradcheck, ablate, info.
//
// Config files are JSON objects with two optional sections, both strict:
//   {"model": {...ModelConfig fields...}, "train": {...TrainConfig fields...}}
// When the model section leaves image_size or num_classes unset, they are
// taken from the dataset. Flags given on the command line override the file.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mcvt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// args excludes the program name. Progress and reports go to `out`,
/// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mcvt::cli
