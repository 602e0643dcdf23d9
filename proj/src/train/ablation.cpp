// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cctype>
#include <cstdio>
#include <ostream>

#include "mcvt/trainer.hpp"

namespace mcvt::train {

namespace {

std::string upper(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::toupper(c); });
  return out;
}

std::string modality_label(Modality m) { return m == Modality::depth ? "Depth" : upper(name(m)); }

std::string cell_text(double v, bool timing) {
  char buffer[32];
  std::snprintf(buffer, sizeof buffer, timing ? "%.2f" : "%.1f", v);
  return buffer;
}

std::string row_header(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::fusion: return "Inputs";
    case AblationAxis::views: return "Views";
    case AblationAxis::blocks: return "M \\ S";
  }
  return "";
}

}  // namespace

std::string_view name(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::fusion: return "fusion";
    case AblationAxis::views: return "views";
    case AblationAxis::blocks: return "blocks";
  }
  return "?";
}

AblationAxis parse_ablation_axis(std::string_view text) {
  for (auto a : {AblationAxis::fusion, AblationAxis::views, AblationAxis::blocks})
    if (name(a) == text) return a;
  throw ConfigError("unknown ablation axis '" + std::string(text) + "' (expected fusion, views or blocks)");
}

AblationTable ablation_sweep(AblationAxis axis, const AblationGrid& grid, const ModelConfig& base,
                             const TrainConfig& config, const data::Dataset& pool, const data::Dataset* test_set,
                             const AblationOptions& options) {
  AblationTable table;
  table.axis = axis;

  auto run_cell = [&](const std::string& row, const std::string& column, const ModelConfig& model,
                      const data::Dataset& cell_pool, const data::Dataset* cell_test, const std::string& tag) {
    CrossValidateOptions cv;
    cv.log = options.log;
    cv.label = std::string(name(axis)) + " " + row + " / " + column;
    cv.only_folds = options.only_folds;
    if (!options.out_dir.empty()) cv.out_dir = options.out_dir / tag;
    if (options.log) *options.log << "== " << cv.label << '\n' << std::flush;
    table.cells.push_back({row, column, cross_validate(model, config, cell_pool, cell_test, cv)});
    return table.cells.back().report;
  };

  switch (axis) {
    case AblationAxis::fusion: {
      if (grid.modalities.empty() || grid.strategies.empty()) throw ConfigError("ablation: empty fusion grid");
      for (auto s : grid.strategies) table.columns.push_back(upper(fusion::name(s)));
      for (auto m : grid.modalities) {
        table.rows.push_back(modality_label(m));
        auto& values = table.values.emplace_back();
        for (auto s : grid.strategies) {
          auto model = base;
          model.modality = m;
          model.fusion = s;
          const auto tag = std::string(name(m)) + "_" + std::string(fusion::name(s));
          values.push_back(run_cell(table.rows.back(), upper(fusion::name(s)), model, pool, test_set, tag).mean_accuracy);
        }
      }
      break;
    }
    case AblationAxis::views: {
      if (grid.view_counts.empty() || grid.modalities.empty()) throw ConfigError("ablation: empty views grid");
      const int available = pool.samples.empty() ? pool.rig.count : static_cast<int>(pool.samples[0].views.size());
      for (auto m : grid.modalities) {
        table.columns.push_back(modality_label(m) + " ACC (%)");
        table.columns.push_back(modality_label(m) + " Time (ms)");
      }
      for (int l : grid.view_counts) {
        const auto views = spread_views(available, l);
        const auto cell_pool = select_views(pool, views);
        data::Dataset cell_test;
        if (test_set) cell_test = select_views(*test_set, views);
        table.rows.push_back(std::to_string(l));
        auto& values = table.values.emplace_back();
        for (auto m : grid.modalities) {
          auto model = base;
          model.modality = m;
          const auto tag = "views" + std::to_string(l) + "_" + std::string(name(m));
          const auto& report =
              run_cell(table.rows.back(), modality_label(m), model, cell_pool, test_set ? &cell_test : nullptr, tag);
          values.push_back(report.mean_accuracy);
          values.push_back(report.mean_ms_per_instance);
        }
      }
      break;
    }
    case AblationAxis::blocks: {
      if (grid.pre_blocks.empty() || grid.mid_blocks.empty()) throw ConfigError("ablation: empty blocks grid");
      for (int s : grid.mid_blocks) table.columns.push_back("S=" + std::to_string(s));
      for (int mb : grid.pre_blocks) {
        table.rows.push_back("M=" + std::to_string(mb));
        auto& values = table.values.emplace_back();
        for (int s : grid.mid_blocks) {
          auto model = base;
          model.pre_blocks = mb;
          model.mid_blocks = s;
          const auto tag = "M" + std::to_string(mb) + "_S" + std::to_string(s);
          values.push_back(run_cell(table.rows.back(), table.columns[values.size()], model, pool, test_set, tag)
                               .mean_accuracy);
        }
      }
      break;
    }
  }
  return table;
}

nlohmann::json AblationTable::to_json() const {
  nlohmann::json cells_json = nlohmann::json::array();
  for (const auto& c : cells) cells_json.push_back({{"row", c.row}, {"column", c.column}, {"report", c.report.to_json()}});
  return {{"axis", std::string(name(axis))},
          {"row_header", row_header(axis)},
          {"rows", rows},
          {"columns", columns},
          {"values", values},
          {"cells", cells_json}};
}

std::string AblationTable::to_table() const {
  std::vector<std::vector<std::string>> grid;
  grid.push_back({row_header(axis)});
  grid[0].insert(grid[0].end(), columns.begin(), columns.end());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::vector<std::string> line{rows[r]};
    for (std::size_t c = 0; c < values[r].size(); ++c) {
      const bool timing = columns[c].find("Time") != std::string::npos;
      line.push_back(cell_text(values[r][c], timing));
    }
    grid.push_back(std::move(line));
  }
  std::vector<std::size_t> width(grid[0].size(), 0);
  for (const auto& line : grid)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::string out;
  for (std::size_t r = 0; r < grid.size(); ++r) {
    for (std::size_t c = 0; c < grid[r].size(); ++c) {
      if (c) out += "  ";
      const auto pad = width[c] - grid[r][c].size();
      out += c == 0 ? grid[r][c] + std::string(pad, ' ') : std::string(pad, ' ') + grid[r][c];
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out += std::string(total + 2 * (width.size() - 1), '-') + '\n';
    }
  }
  return out;
}

}  // namespace mcvt::train
