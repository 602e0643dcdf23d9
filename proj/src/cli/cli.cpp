// SPDX-License-Identifier: Apache-2.0
#include "mcvt/cli.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "mcvt/dataset.hpp"
#include "mcvt/gradcheck_suite.hpp"
#include "mcvt/model.hpp"
#include "mcvt/trainer.hpp"

namespace mcvt::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

/// Flag combinations that cannot be honoured.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Configs {
  ModelConfig model;
  train::TrainConfig train;
  bool image_size_set = false;
  bool classes_set = false;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

Configs load_configs(const std::string& path) {
  Configs c;
  c.model = ModelConfig::desk();
  if (path.empty()) return c;
  const auto doc = read_json(path);
  if (!doc.is_object()) throw ConfigError(path + ": config must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (key != "model" && key != "train") throw ConfigError(path + ": unknown key '" + key + "'");
  }
  try {
    if (doc.contains("model")) {
      const auto& m = doc["model"];
      // start from the desk config so partial sections are allowed
      auto merged = to_json(ModelConfig::desk());
      if (!m.is_object()) throw ConfigError("'model' must be an object");
      for (const auto& [key, value] : m.items()) {
        if (!merged.contains(key)) throw ConfigError("model: unknown key '" + key + "'");
        merged[key] = value;
      }
      c.model = model_config_from_json(merged);
      c.image_size_set = m.contains("image_size");
      c.classes_set = m.contains("num_classes");
    }
    if (doc.contains("train")) c.train = train::train_config_from_json(doc["train"]);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

void adapt_to_data(Configs& c, const data::Dataset& ds) {
  if (!c.image_size_set) c.model.image_size = ds.image_size;
  if (!c.classes_set) c.model.num_classes = static_cast<int>(ds.classes.size());
  c.model.validate();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.flush();
  if (!out) throw std::runtime_error(path.string() + ": cannot write");
}

void write_report(const fs::path& dir, const std::string& stem, const json& report, const std::string& table) {
  write_text(dir / (stem + ".json"), report.dump(2) + "\n");
  write_text(dir / (stem + ".txt"), table);
}

std::string fmt(const char* pattern, double a, double b = 0.0) {
  char buffer[128];
  std::snprintf(buffer, sizeof buffer, pattern, a, b);
  return buffer;
}

template <typename T>
std::vector<T> parse_list(const std::vector<std::string>& items, T (*parse)(std::string_view)) {
  std::vector<T> out;
  for (const auto& s : items) out.push_back(parse(s));
  return out;
}

// Flags shared by train and ablate.
struct RunFlags {
  std::string data, config, out, test;
  std::optional<int> folds, epochs;
  std::optional<std::uint64_t> seed;
  std::vector<int> only_folds;
  bool quiet = false;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--data", f.data, "Dataset directory (the cross-validation pool)")->required();
  cmd->add_option("--out", f.out, "Output directory for checkpoints and reports")->required();
  cmd->add_option("--config", f.config, "JSON config with optional 'model' and 'train' sections");
  cmd->add_option("--test", f.test, "Separate test dataset scored by every fold's best model");
  cmd->add_option("--folds", f.folds, "Number of folds")->check(CLI::Range(2, 1000));
  cmd->add_option("--epochs", f.epochs, "Training epochs per fold")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", f.seed, "Seed for splits, initialisation and batch order (default 42)");
  cmd->add_option("--fold", f.only_folds, "Run only these folds (repeatable)");
  cmd->add_flag("--quiet", f.quiet, "No per-epoch progress");
}

struct Prepared {
  Configs configs;
  data::Dataset pool;
  std::optional<data::Dataset> test;
};

Prepared prepare(const RunFlags& f) {
  Prepared p;
  p.configs = load_configs(f.config);
  auto& t = p.configs.train;
  if (f.folds) t.folds = *f.folds;
  if (f.epochs) t.epochs = *f.epochs;
  if (f.seed) t.seed = *f.seed;
  t.validate();
  for (int k : f.only_folds) {
    if (k < 0 || k >= t.folds) throw UsageError("--fold " + std::to_string(k) + " outside 0.." + std::to_string(t.folds - 1));
  }
  p.pool = data::load_dataset(f.data);
  if (p.pool.size() < static_cast<std::size_t>(t.folds)) {
    throw UsageError("--folds " + std::to_string(t.folds) + " exceeds the " + std::to_string(p.pool.size()) +
                     " samples in " + f.data);
  }
  adapt_to_data(p.configs, p.pool);
  if (!f.test.empty()) p.test = data::load_dataset(f.test);
  return p;
}

int cmd_gen_data(std::ostream& out, const std::string& dir, data::GenerateOptions options, const std::string& rig) {
  options.rig.kind = data::parse_rig_kind(rig);
  options.rig.seed = options.seed;
  const auto ds = data::generate_dataset(options);
  data::save_dataset(ds, dir);
  out << "wrote " << ds.size() << " samples x " << ds.view_count() << " views (" << data::name(ds.rig.kind) << ", "
      << ds.image_size << " px) to " << dir << "\nseed " << options.seed << "\n";
  return kExitOk;
}

int cmd_train(std::ostream& out, const RunFlags& f, const std::string& modality, const std::string& fusion_name) {
  auto p = prepare(f);
  if (!modality.empty()) p.configs.model.modality = parse_modality(modality);
  if (!fusion_name.empty()) p.configs.model.fusion = fusion::parse_strategy(fusion_name);
  p.configs.model.validate();

  train::CrossValidateOptions options;
  options.out_dir = f.out;
  options.log = f.quiet ? nullptr : &out;
  options.label = std::string(name(p.configs.model.modality)) + " " + std::string(fusion::name(p.configs.model.fusion));
  options.only_folds = f.only_folds;
  options.meta = {{"data", f.data}, {"split_seed", p.configs.train.seed}, {"folds", p.configs.train.folds}};
  if (!f.test.empty()) options.meta["test_data"] = f.test;
  out << "seed " << p.configs.train.seed << "\n" << std::flush;
  const auto report =
      train::cross_validate(p.configs.model, p.configs.train, p.pool, p.test ? &*p.test : nullptr, options);
  write_report(f.out, "report", report.to_json(), report.to_table());
  out << report.to_table();
  return kExitOk;
}

int cmd_eval(std::ostream& out, const std::string& data_dir, const std::string& ckpt, const std::string& subset,
             int batch_size, int repetitions, const std::string& report_path) {
  json meta;
  auto model = load_checkpoint<float>(ckpt, &meta);
  auto ds = data::load_dataset(data_dir);
  if (subset == "held-out") {
    if (!meta.contains("held_out_ids")) throw UsageError(ckpt + ": checkpoint records no held-out ids");
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ds.size(); ++i) index[ds.samples[i].id] = i;
    std::vector<std::size_t> keep;
    for (const auto& id : meta["held_out_ids"]) {
      const auto it = index.find(id.get<std::string>());
      if (it == index.end()) throw UsageError(data_dir + ": held-out sample '" + id.get<std::string>() + "' not found");
      keep.push_back(it->second);
    }
    ds = data::subset(ds, keep);
  }
  const auto result = train::evaluate(model, ds, batch_size, repetitions);

  json predictions = json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    predictions.push_back({{"id", ds.samples[i].id}, {"label", ds.samples[i].label}, {"predicted", result.predictions[i]}});
  }
  json report{{"checkpoint", ckpt},
              {"data", data_dir},
              {"subset", subset},
              {"samples", ds.size()},
              {"accuracy", result.accuracy},
              {"ms_per_instance", result.ms_per_instance},
              {"predictions", predictions}};
  if (meta.contains("train")) report["seed"] = meta["train"].value("seed", 42);
  const auto text = "samples " + std::to_string(ds.size()) + "\n" + fmt("accuracy %.2f%%\n", result.accuracy) +
                    fmt("time %.3f ms/instance\n", result.ms_per_instance);
  out << text;
  if (!report_path.empty()) {
    write_text(report_path, report.dump(2) + "\n");
    write_text(fs::path(report_path).replace_extension(".txt"), text);
  }
  return kExitOk;
}

int cmd_gradcheck(std::ostream& out, bool full, int seeds, const std::string& report_path) {
  GradCheckSuiteOptions options;
  options.full = full;
  options.seeds = seeds;
  const auto report = run_gradcheck_suite(options);
  out << report.to_table();
  if (!report_path.empty()) {
    write_text(report_path, report.to_json().dump(2) + "\n");
    write_text(fs::path(report_path).replace_extension(".txt"), report.to_table());
  }
  return report.passed() ? kExitOk : kExitFailure;
}

struct AblateFlags {
  std::string axis;
  std::vector<std::string> modalities, strategies;
  std::vector<int> view_counts, pre_blocks, mid_blocks;
};

int cmd_ablate(std::ostream& out, const RunFlags& f, const AblateFlags& a, CLI::App* cmd) {
  const auto axis = train::parse_ablation_axis(a.axis);
  auto reject = [&](const char* flag, train::AblationAxis owner) {
    if (cmd->count(flag) > 0 && axis != owner) {
      throw UsageError(std::string(flag) + " applies only to --axis " + std::string(train::name(owner)));
    }
  };
  reject("--strategies", train::AblationAxis::fusion);
  reject("--view-counts", train::AblationAxis::views);
  reject("--pre-blocks", train::AblationAxis::blocks);
  reject("--mid-blocks", train::AblationAxis::blocks);
  if (cmd->count("--modalities") > 0 && axis == train::AblationAxis::blocks) {
    throw UsageError("--modalities does not apply to --axis blocks (set model.modality in --config)");
  }

  auto p = prepare(f);
  train::AblationGrid grid;
  if (!a.modalities.empty()) grid.modalities = parse_list<Modality>(a.modalities, parse_modality);
  if (!a.strategies.empty()) grid.strategies = parse_list<fusion::Strategy>(a.strategies, fusion::parse_strategy);
  if (!a.view_counts.empty()) grid.view_counts = a.view_counts;
  if (!a.pre_blocks.empty()) grid.pre_blocks = a.pre_blocks;
  if (!a.mid_blocks.empty()) grid.mid_blocks = a.mid_blocks;
  for (int l : grid.view_counts) {
    if (l < 1 || l > p.pool.view_count()) {
      throw UsageError("--view-counts " + std::to_string(l) + " outside 1.." + std::to_string(p.pool.view_count()));
    }
  }

  train::AblationOptions options;
  options.log = f.quiet ? nullptr : &out;
  options.out_dir = fs::path(f.out) / "cells";
  options.only_folds = f.only_folds;
  out << "seed " << p.configs.train.seed << "\n" << std::flush;
  const auto table = train::ablation_sweep(axis, grid, p.configs.model, p.configs.train, p.pool,
                                           p.test ? &*p.test : nullptr, options);
  auto report = table.to_json();
  report["seed"] = p.configs.train.seed;
  write_report(f.out, "ablation_" + std::string(train::name(axis)), report, table.to_table());
  out << table.to_table();
  return kExitOk;
}

int cmd_info(std::ostream& out, const std::string& config, const std::string& preset) {
  Configs c;
  if (!config.empty()) {
    c = load_configs(config);
  } else if (preset == "full") {
    c.model = ModelConfig::full_resolution();
  } else {
    c.model = ModelConfig::desk();
  }
  c.model.validate();
  out << layer_summary(c.model);
  out << "param_count " << param_count(c.model) << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-view RGB-D object classification experiments", "mcvt"};
  app.require_subcommand(1);

  std::string gen_out, gen_rig = "circular";
  data::GenerateOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic multi-view dataset");
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();
  gen_cmd->add_option("--classes", gen.classes, "Number of shape classes (1-4)")->check(CLI::Range(1, 4));
  gen_cmd->add_option("--per-class", gen.per_class, "Samples per class")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--first-index", gen.first_index, "Index of the first sample in each class")
      ->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--views", gen.rig.count, "Views per sample")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--rig", gen_rig, "circular or hemi");
  gen_cmd->add_option("--azimuth-offset", gen.rig.azimuth_offset, "Circular rig: azimuth of the first view (degrees)");
  gen_cmd->add_option("--elevation", gen.rig.elevation, "Circular rig: camera elevation (degrees)");
  gen_cmd->add_option("--image-size", gen.image_size, "Square image side in pixels")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--points", gen.points, "Surface points per shape")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed, "Seed (default 42)");

  RunFlags train_flags;
  std::string modality, fusion_name;
  auto* train_cmd = app.add_subcommand("train", "k-fold training with per-fold best checkpoints");
  add_run_flags(train_cmd, train_flags);
  train_cmd->add_option("--modality", modality, "rgb, depth or rgbd");
  train_cmd->add_option("--fusion", fusion_name, "acf, ecf, aef or geef");

  std::string eval_data, eval_ckpt, eval_subset = "all", eval_report;
  int eval_batch = 8, eval_reps = 3;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy and per-instance time of a checkpoint");
  eval_cmd->add_option("--data", eval_data, "Dataset directory")->required();
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--subset", eval_subset, "all, or held-out to score the fold recorded in the checkpoint")
      ->check(CLI::IsMember({"all", "held-out"}));
  eval_cmd->add_option("--batch-size", eval_batch, "Objects per forward pass")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--repetitions", eval_reps, "Timed passes (median reported)")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--report", eval_report, "Write a JSON report here (and a .txt table beside it)");

  bool gc_full = false;
  int gc_seeds = 20;
  std::string gc_report;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gc_cmd->add_flag("--full", gc_full, "Also check a sampled desk-size composite");
  gc_cmd->add_option("--seeds", gc_seeds, "Random instances per case")->check(CLI::PositiveNumber);
  gc_cmd->add_option("--report", gc_report, "Write a JSON report here (and a .txt table beside it)");

  RunFlags ablate_flags;
  AblateFlags ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "Fusion, view-count or block-count sweep");
  ablate_cmd->add_option("--axis", ablate.axis, "fusion, views or blocks")->required();
  add_run_flags(ablate_cmd, ablate_flags);
  ablate_cmd->add_option("--modalities", ablate.modalities, "Rows (fusion) or column groups (views)")->delimiter(',');
  ablate_cmd->add_option("--strategies", ablate.strategies, "Fusion columns")->delimiter(',');
  ablate_cmd->add_option("--view-counts", ablate.view_counts, "View-count rows")->delimiter(',');
  ablate_cmd->add_option("--pre-blocks", ablate.pre_blocks, "Pre-residual block counts (rows)")->delimiter(',');
  ablate_cmd->add_option("--mid-blocks", ablate.mid_blocks, "Middle-residual block counts (columns)")->delimiter(',');

  std::string info_config, info_preset = "desk";
  auto* info_cmd = app.add_subcommand("info", "Parameter count and layer summary");
  auto* info_config_opt = info_cmd->add_option("--config", info_config, "JSON config");
  info_cmd->add_option("--preset", info_preset, "desk or full (224 px) when no config is given")
      ->check(CLI::IsMember({"desk", "full"}))
      ->excludes(info_config_opt);

  std::vector<std::string> argv_store{"mcvt"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(out, gen_out, gen, gen_rig);
    if (*train_cmd) return cmd_train(out, train_flags, modality, fusion_name);
    if (*eval_cmd) return cmd_eval(out, eval_data, eval_ckpt, eval_subset, eval_batch, eval_reps, eval_report);
    if (*gc_cmd) return cmd_gradcheck(out, gc_full, gc_seeds, gc_report);
    if (*ablate_cmd) return cmd_ablate(out, ablate_flags, ablate, ablate_cmd);
    if (*info_cmd) return cmd_info(out, info_config, info_preset);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace mcvt::cli
