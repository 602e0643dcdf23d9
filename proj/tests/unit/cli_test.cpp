// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mcvt/cli.hpp"
#include "mcvt/model.hpp"
#include "test_support.hpp"

using mcvt::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = mcvt::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kSmallConfig = R"({
  "model": {"pre_blocks": 1, "local_blocks": 1, "mid_blocks": 1, "global_blocks": 1,
            "embed_dim": 12, "heads": 3, "stem_channels": 4, "mlp_ratio": 2},
  "train": {"epochs": 2, "batch_size": 4, "lr0": 0.001, "timing_repetitions": 1}
})";

void gen(const fs::path& dir, const std::string& first_index = "0") {
  const auto r = run({"gen-data", "--out", dir.string(), "--per-class", "3", "--image-size", "16", "--points", "1500",
                      "--first-index", first_index});
  REQUIRE(r.code == 0);
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"bogus"}).code == 2);
  CHECK(run({"info", "--bogus"}).code == 2);
  const auto missing = run({"train", "--out", "x"});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("--data") != std::string::npos);
  CHECK(run({"eval", "--data", "x", "--ckpt", "y", "--subset", "some"}).code == 2);
  CHECK(run({"info", "--config", "a.json", "--preset", "full"}).code == 2);
  CHECK(run({"gen-data", "--out", "x", "--classes", "5"}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("info prints the parameter count") {
  const auto r = run({"info"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("param_count " + std::to_string(mcvt::param_count(mcvt::ModelConfig::desk()))) != std::string::npos);
  CHECK(r.out.find("param_count 10731844") != std::string::npos);
  CHECK(r.out.find("backbone.local") != std::string::npos);
  const auto full = run({"info", "--preset", "full"});
  CHECK(full.out.find("param_count " + std::to_string(mcvt::param_count(mcvt::ModelConfig::full_resolution()))) !=
        std::string::npos);
}

TEST_CASE("config files are strict") {
  TempDir dir("cli_cfg");
  write(dir.path() / "bad.json", R"({"model": {"depth": 3}})");
  auto r = run({"info", "--config", (dir.path() / "bad.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("bad.json") != std::string::npos);
  CHECK(r.err.find("depth") != std::string::npos);
  write(dir.path() / "top.json", R"({"optimizer": {}})");
  CHECK(run({"info", "--config", (dir.path() / "top.json").string()}).code == 2);
  write(dir.path() / "broken.json", "{");
  CHECK(run({"info", "--config", (dir.path() / "broken.json").string()}).code == 2);
  r = run({"info", "--config", (dir.path() / "absent.json").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("absent.json") != std::string::npos);
  write(dir.path() / "ok.json", kSmallConfig);
  CHECK(run({"info", "--config", (dir.path() / "ok.json").string()}).code == 0);
}

TEST_CASE("gen-data is byte-identical for the same seed") {
  TempDir dir("cli_gen");
  gen(dir.path() / "a");
  gen(dir.path() / "b");
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir.path() / "a")) {
    if (!entry.is_regular_file()) continue;
    ++files;
    const auto twin = dir.path() / "b" / fs::relative(entry.path(), dir.path() / "a");
    REQUIRE(fs::exists(twin));
    CHECK(slurp(entry.path()) == slurp(twin));
  }
  CHECK(files == 1 + 12 * 8);
  const auto r = run({"gen-data", "--out", (dir.path() / "h").string(), "--rig", "hemi", "--views", "11"});
  CHECK(r.code == 2);
  CHECK(run({"gen-data", "--out", (dir.path() / "s").string(), "--per-class", "1", "--seed", "9"}).out.find("seed 9") !=
        std::string::npos);
}

TEST_CASE("train then eval reproduces the reported accuracies") {
  TempDir dir("cli_train");
  const auto pool = dir.path() / "pool", test = dir.path() / "test", out = dir.path() / "run";
  gen(pool);
  gen(test, "50");
  write(dir.path() / "cfg.json", kSmallConfig);
  const auto r = run({"train", "--data", pool.string(), "--test", test.string(), "--config",
                      (dir.path() / "cfg.json").string(), "--out", out.string(), "--folds", "3", "--quiet"});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("seed 42\n", 0) == 0);
  const auto report = read_json(out / "report.json");
  CHECK(report["seed"] == 42);
  CHECK(report["folds"].size() == 3);
  CHECK(fs::exists(out / "report.txt"));

  const auto ckpt = (out / "fold1" / "best.ckpt").string();
  REQUIRE(run({"eval", "--data", pool.string(), "--ckpt", ckpt, "--subset", "held-out", "--report",
               (dir.path() / "held.json").string()})
              .code == 0);
  CHECK(read_json(dir.path() / "held.json")["accuracy"] == report["folds"][1]["held_out_accuracy"]);
  REQUIRE(run({"eval", "--data", test.string(), "--ckpt", ckpt, "--report", (dir.path() / "test.json").string()}).code ==
          0);
  const auto scored = read_json(dir.path() / "test.json");
  CHECK(scored["accuracy"] == report["folds"][1]["test_accuracy"]);
  CHECK(scored["samples"] == 12);
  CHECK(scored["predictions"].size() == 12);
  CHECK(fs::exists(dir.path() / "test.txt"));

  // held-out ids of the pool are absent from the test set
  CHECK(run({"eval", "--data", test.string(), "--ckpt", ckpt, "--subset", "held-out"}).code == 2);
}

TEST_CASE("train rejects contradictory or broken inputs") {
  TempDir dir("cli_bad");
  gen(dir.path() / "pool");
  const auto pool = (dir.path() / "pool").string(), out = (dir.path() / "o").string();
  CHECK(run({"train", "--data", pool, "--out", out, "--folds", "3", "--fold", "3"}).code == 2);
  CHECK(run({"train", "--data", pool, "--out", out, "--folds", "13"}).code == 2);
  CHECK(run({"train", "--data", pool, "--out", out, "--fusion", "max"}).code == 2);
  const auto missing = run({"train", "--data", (dir.path() / "nowhere").string(), "--out", out});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("nowhere") != std::string::npos);
  const auto no_ckpt = run({"eval", "--data", pool, "--ckpt", (dir.path() / "none.ckpt").string()});
  CHECK(no_ckpt.code == 1);
  CHECK(no_ckpt.err.find("none.ckpt") != std::string::npos);
}

TEST_CASE("ablate writes table artifacts and rejects flags of other axes") {
  TempDir dir("cli_ablate");
  gen(dir.path() / "pool");
  write(dir.path() / "cfg.json", kSmallConfig);
  const auto pool = (dir.path() / "pool").string(), out = (dir.path() / "abl").string();
  const auto cfg = (dir.path() / "cfg.json").string();
  CHECK(run({"ablate", "--axis", "views", "--data", pool, "--out", out, "--strategies", "acf"}).code == 2);
  CHECK(run({"ablate", "--axis", "fusion", "--data", pool, "--out", out, "--view-counts", "1,2"}).code == 2);
  CHECK(run({"ablate", "--axis", "heads", "--data", pool, "--out", out}).code == 2);
  CHECK(run({"ablate", "--axis", "views", "--data", pool, "--out", out, "--view-counts", "5"}).code == 2);

  const auto r = run({"ablate", "--axis", "views", "--data", pool, "--out", out, "--config", cfg, "--folds", "3",
                      "--epochs", "1", "--fold", "0", "--view-counts", "1,2,4", "--modalities", "rgbd", "--quiet"});
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto table = read_json(fs::path(out) / "ablation_views.json");
  CHECK(table["rows"] == nlohmann::json::array({"1", "2", "4"}));
  CHECK(table["columns"] == nlohmann::json::array({"RGBD ACC (%)", "RGBD Time (ms)"}));
  CHECK(table["seed"] == 42);
  CHECK(slurp(fs::path(out) / "ablation_views.txt").rfind("Views", 0) == 0);
}

TEST_CASE("gradcheck exits 0 when every case passes") {
  TempDir dir("cli_gc");
  const auto r = run({"gradcheck", "--seeds", "1", "--report", (dir.path() / "gc.json").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("PASS") != std::string::npos);
  CHECK(read_json(dir.path() / "gc.json")["cases"].size() > 40);
}
