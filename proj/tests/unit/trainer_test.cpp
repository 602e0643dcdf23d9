// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "mcvt/gradcheck_suite.hpp"
#include "mcvt/trainer.hpp"
#include "test_support.hpp"

using namespace mcvt;
using namespace mcvt::train;
using mcvt::testing::TempDir;
using mcvt::testing::uniform_tensor;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.pre_blocks = c.local_blocks = c.mid_blocks = c.global_blocks = 1;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 12;
  c.heads = 3;
  c.stem_channels = 4;
  c.mlp_ratio = 2;
  c.num_classes = 4;
  return c;
}

const data::Dataset& small_pool() {
  static const data::Dataset pool = [] {
    data::GenerateOptions o;
    o.per_class = 3;
    o.image_size = 16;
    o.points = 2000;
    o.seed = 11;
    return data::generate_dataset(o);
  }();
  return pool;
}

TrainConfig quick(int epochs = 1) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.folds = 3;
  t.timing_repetitions = 1;
  t.lr0 = 1e-3;
  return t;
}

struct ThreadsEnv {
  explicit ThreadsEnv(const char* value) {
    if (const char* old = std::getenv("MCVT_THREADS")) saved = old, had = true;
    ::setenv("MCVT_THREADS", value, 1);
  }
  ~ThreadsEnv() {
    if (had) ::setenv("MCVT_THREADS", saved.c_str(), 1);
    else ::unsetenv("MCVT_THREADS");
  }
  std::string saved;
  bool had = false;
};

std::vector<double> losses(const FoldResult& f) {
  std::vector<double> out;
  for (const auto& e : f.epochs) out.push_back(e.loss);
  return out;
}

}  // namespace

TEST_CASE("cross entropy examples") {
  const auto uniform = Tensor<double>::zeros({3, 4});
  const std::vector<int> t{0, 3, 1};
  CHECK(cross_entropy(uniform, t).item() == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(std::log(4.0) == doctest::Approx(1.3863).epsilon(1e-4));

  Tensor<double> sure({2, 4}, {40, 0, 0, 0, 0, 0, 45, 0});
  const std::vector<int> right{0, 2};
  CHECK(cross_entropy(sure, right).item() < 1e-15);
  CHECK(cross_entropy(sure, right).item() >= 0.0);

  const std::vector<int> bad{0, 4};
  CHECK_THROWS_AS(cross_entropy(sure, bad), ContractError);
  const std::vector<int> negative{-1, 0};
  CHECK_THROWS_AS(cross_entropy(sure, negative), ContractError);
  const std::vector<int> short_targets{0};
  CHECK_THROWS_AS(cross_entropy(sure, short_targets), DimensionError);
}

TEST_CASE("cross entropy matches an explicit log-softmax and its gradient") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(500 + seed);
    const auto x = uniform_tensor({5, 6}, rng, -4, 4);
    std::vector<int> t;
    for (int i = 0; i < 5; ++i) t.push_back(static_cast<int>(rng.below(6)));
    double expected = 0.0;
    for (int r = 0; r < 5; ++r) {
      double z = 0.0;
      for (int k = 0; k < 6; ++k) z += std::exp(x.data()[r * 6 + k]);
      expected += std::log(z) - x.data()[r * 6 + t[r]];
    }
    CHECK(cross_entropy(x, t).item() == doctest::Approx(expected / 5).epsilon(1e-12));
    CHECK(grad_check([&](const Tensor<double>& v) { return cross_entropy(v, t); }, x) < 1e-4);
  }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 200, 2e-4, 0.0) == 2e-4);
  CHECK(cosine_lr(200, 200, 2e-4, 0.0) == 0.0);
  CHECK(cosine_lr(100, 200, 2e-4, 0.0) == 1e-4);
  CHECK(cosine_lr(0, 10, 1.0, 0.1) == 1.0);
  CHECK(cosine_lr(10, 10, 1.0, 0.1) == 0.1);
  CHECK(cosine_lr(5, 10, 1.0, 0.1) == doctest::Approx(0.55).epsilon(1e-15));
  for (int t = 1; t <= 10; ++t) CHECK(cosine_lr(t, 10, 1.0, 0.0) < cosine_lr(t - 1, 10, 1.0, 0.0));
  CHECK_THROWS_AS(cosine_lr(11, 10, 1.0, 0.0), ContractError);
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  std::vector<double> p{0.5, -1.25, 3.0}, g(3, 0.0), m(3, 0.0), v(3, 0.0);
  const auto before = p;
  for (int t = 1; t <= 5; ++t) adam_step<double>(p, g, m, v, t, 1e-2, {});
  CHECK(p == before);
}

TEST_CASE("first adam step is bounded by the learning rate") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const double g0 = rng.uniform(-5, 5), lr = rng.uniform(1e-4, 1e-1);
    std::vector<double> p{1.0}, g{g0}, m{0.0}, v{0.0};
    adam_step<double>(p, g, m, v, 1, lr, {});
    const double delta = p[0] - 1.0;
    CHECK(std::abs(delta) <= lr * (1 + 1e-6));
    CHECK(delta * g0 < 0.0);
  }
}

TEST_CASE("adam matches a hand-rolled reference and descends x^2") {
  std::vector<double> p{1.0}, m{0.0}, v{0.0};
  double ref = 1.0, rm = 0.0, rv = 0.0, previous = 1.0;
  for (int t = 1; t <= 3; ++t) {
    std::vector<double> g{2.0 * p[0]};
    adam_step<double>(p, g, m, v, t, 0.1, {});
    const double rg = 2.0 * ref;
    rm = 0.9 * rm + 0.1 * rg;
    rv = 0.98 * rv + 0.02 * rg * rg;
    ref -= 0.1 * (rm / (1 - std::pow(0.9, t))) / (std::sqrt(rv / (1 - std::pow(0.98, t))) + 1e-8);
    CHECK(p[0] == doctest::Approx(ref).epsilon(1e-14));
    CHECK(p[0] * p[0] < previous * previous);
    previous = p[0];
  }
}

TEST_CASE("adam optimizer skips parameters without gradients") {
  auto a = Tensor<float>({2}, {1.0f, 2.0f}, true);
  auto b = Tensor<float>({2}, {3.0f, 4.0f}, true);
  Adam<float> opt({a, b}, {});
  backward(sum(square(a)));
  opt.step(0.1);
  CHECK(a.data()[0] != 1.0f);
  CHECK(b.data()[0] == 3.0f);
  CHECK(opt.steps() == 1);
  CHECK_THROWS_AS(adam_step<double>(std::span<double>{}, {}, {}, {}, 0, 0.1, {}), ContractError);
}

TEST_CASE("train config JSON and validation") {
  TrainConfig c;
  c.epochs = 12;
  c.seed = 7;
  CHECK(train_config_from_json(to_json(c)) == c);
  CHECK(train_config_from_json(nlohmann::json::object()) == TrainConfig{});
  CHECK_THROWS_AS(train_config_from_json({{"learning_rate", 1}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"lr0", -1}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"beta2", 1.0}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"epochs", "ten"}}), ConfigError);
  CHECK(TrainConfig{}.lr0 == 2e-4);
  CHECK(TrainConfig{}.beta2 == 0.98);
  CHECK(TrainConfig{}.seed == 42);
}

TEST_CASE("make_batch layout") {
  const auto& pool = small_pool();
  const std::vector<std::size_t> idx{4, 1};
  const auto b = make_batch<float>(pool, idx, Modality::rgbd);
  CHECK(b.objects == 2);
  CHECK(b.views == 4);
  REQUIRE(b.rgb.shape() == Shape{8, 3, 16, 16});
  REQUIRE(b.depth.shape() == Shape{8, 1, 16, 16});
  const auto& view = pool.samples[1].views[2];
  const int pixel = 7 * 16 + 9;
  CHECK(b.rgb.at({6, 1, 7, 9}) == view.rgb[pixel * 3 + 1] / 255.0f);
  CHECK(b.depth.at({6, 0, 7, 9}) == view.depth[pixel]);
  const auto rgb_only = make_batch<float>(pool, idx, Modality::rgb);
  CHECK(!rgb_only.depth.defined());
  const std::vector<int> views{3};
  CHECK(make_batch<float>(pool, idx, Modality::depth, views).depth.shape() == Shape{2, 1, 16, 16});
}

TEST_CASE("view subsets") {
  CHECK(spread_views(4, 1) == std::vector<int>{0});
  CHECK(spread_views(4, 2) == std::vector<int>{0, 2});
  CHECK(spread_views(4, 3) == std::vector<int>{0, 1, 2});
  CHECK(spread_views(4, 4) == std::vector<int>{0, 1, 2, 3});
  CHECK(spread_views(12, 4) == std::vector<int>{0, 3, 6, 9});
  CHECK_THROWS_AS(spread_views(4, 5), ConfigError);
  const std::vector<int> keep{1, 3};
  const auto two = select_views(small_pool(), keep);
  CHECK(two.rig.count == 2);
  CHECK(two.samples[0].views[1] == small_pool().samples[0].views[3]);
}

TEST_CASE("evaluate contracts") {
  McvtModel<float> model(small_model(), 1);
  data::Dataset empty = small_pool();
  empty.samples.clear();
  CHECK_THROWS_AS(evaluate(model, empty), ContractError);

  model.set_training(true);
  const auto a = evaluate(model, small_pool(), 4, 1);
  CHECK(model.training());
  const auto b = evaluate(model, small_pool(), 4, 2);
  CHECK(a.predictions == b.predictions);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.accuracy >= 0.0);
  CHECK(a.accuracy <= 100.0);
  CHECK(a.ms_per_instance > 0.0);
  // batching does not change eval-mode predictions
  CHECK(evaluate(model, small_pool(), 1, 1).predictions == a.predictions);

  auto oracle = small_pool();
  for (std::size_t i = 0; i < oracle.size(); ++i) oracle.samples[i].label = a.predictions[i];
  CHECK(evaluate(model, oracle, 4, 1).accuracy == 100.0);

  auto wrong = small_model();
  wrong.num_classes = 3;
  McvtModel<float> mismatched(wrong, 1);
  CHECK_THROWS_AS(evaluate(mismatched, small_pool()), ConfigError);
}

TEST_CASE("one epoch on four samples gives a finite loss") {
  const auto& pool = small_pool();
  const std::vector<std::size_t> four{0, 3, 6, 9};
  const auto train_set = data::subset(pool, four);
  McvtModel<float> model(small_model(), 2);
  const auto result = mcvt::train::train(model, train_set, train_set, quick());
  REQUIRE(result.epochs.size() == 1);
  CHECK(std::isfinite(result.epochs[0].loss));
  CHECK(result.epochs[0].lr == 1e-3);
  CHECK(result.best_epoch == 1);
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
  const auto run = [] {
    const auto& pool = small_pool();
    McvtModel<float> model(small_model(), 5);
    const auto folds = data::kfold_split(pool, 3, 42);
    return mcvt::train::train(model, data::subset(pool, folds[0].train), data::subset(pool, folds[0].test), quick(3));
  };
  const auto a = run();
  // Shift the heap so the second run's buffers land at other addresses.
  std::vector<std::vector<char>> ballast;
  for (std::size_t n = 1; n < 200; n += 7) ballast.emplace_back(n * 13);
  const auto b = run();
  CHECK(losses(a) == losses(b));
  CHECK(a.held_out_accuracy == b.held_out_accuracy);
}

TEST_CASE("the epoch callback can stop training early") {
  const auto& pool = small_pool();
  McvtModel<float> model(small_model(), 5);
  TrainOptions options;
  int seen = 0;
  options.on_epoch = [&](const EpochRecord& e) { return ++seen < 2 && e.epoch < 2; };
  const auto result = mcvt::train::train(model, pool, pool, quick(5), options);
  CHECK(result.epochs.size() == 2);
  CHECK(seen == 2);
  // the schedule still spans all configured epochs
  CHECK(result.epochs[1].lr == doctest::Approx(cosine_lr(1, 5, 1e-3, 0.0)));
}

TEST_CASE("divergence names the epoch") {
  const auto& pool = small_pool();
  McvtModel<float> model(small_model(), 5);
  model.head().fc2.bias.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    mcvt::train::train(model, pool, pool, quick(2));
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.epoch() == 1);
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("best checkpoint reproduces the held-out accuracy") {
  TempDir dir("ckpt");
  const auto& pool = small_pool();
  const auto folds = data::kfold_split(pool, 3, 42);
  const auto held_out = data::subset(pool, folds[1].test);
  McvtModel<float> model(small_model(), 8);
  TrainOptions options;
  options.out_dir = dir.path();
  options.fold = 1;
  const auto result = mcvt::train::train(model, data::subset(pool, folds[1].train), held_out, quick(3), options);
  const auto path = dir.path() / "fold1" / "best.ckpt";
  REQUIRE(std::filesystem::exists(path));
  CHECK(result.checkpoint == path.string());
  nlohmann::json meta;
  auto loaded = load_checkpoint<float>(path, &meta);
  CHECK(evaluate(loaded, held_out, 4, 1).accuracy == result.held_out_accuracy);
  CHECK(evaluate(loaded, held_out, 4, 1).predictions == evaluate(model, held_out, 4, 1).predictions);
  CHECK(meta["fold"] == 1);
  CHECK(meta["held_out_ids"].size() == held_out.size());
  CHECK(meta["best_epoch"] == result.best_epoch);
  // the held-out score of the best epoch is what is reported
  CHECK(result.epochs[result.best_epoch - 1].held_out_accuracy == result.held_out_accuracy);
}

TEST_CASE("training loss falls on a small overfit suite") {
  const auto& pool = small_pool();
  McvtModel<float> model(small_model(), 21);
  auto config = quick(60);
  config.lr0 = 3e-3;
  const auto result = mcvt::train::train(model, pool, pool, config);
  CHECK(result.epochs.back().loss < result.epochs.front().loss);
  CHECK(result.epochs.back().train_accuracy >= 95.0);
}

TEST_CASE("cross-validation aggregates fold accuracies") {
  std::ostringstream log;
  CrossValidateOptions options;
  options.log = &log;
  options.label = "unit";
  const auto report = cross_validate(small_model(), quick(2), small_pool(), &small_pool(), options);
  REQUIRE(report.folds.size() == 3);
  double total = 0.0;
  for (const auto& f : report.folds) total += f.test_accuracy;
  CHECK(std::abs(report.mean_accuracy - total / 3) <= 1e-9);
  CHECK(report.has_test_set);
  CHECK(report.to_json()["folds"].size() == 3);
  CHECK(report.to_json()["seed"] == 42);
  CHECK(report.to_table().find("mean test accuracy") != std::string::npos);
  CHECK(log.str().find("fold 2 epoch") != std::string::npos);
  const std::vector<double> v{1, 2, 3, 4};
  CHECK(mean_std(v).first == 2.5);
  CHECK(mean_std(v).second == doctest::Approx(std::sqrt(1.25)));
}

TEST_CASE("fold results do not depend on the worker count") {
  TrainReport serial, threaded;
  {
    ThreadsEnv env("1");
    serial = cross_validate(small_model(), quick(1), small_pool());
  }
  {
    ThreadsEnv env("3");
    threaded = cross_validate(small_model(), quick(1), small_pool());
  }
  for (int f = 0; f < 3; ++f) {
    CHECK(losses(serial.folds[f]) == losses(threaded.folds[f]));
    CHECK(serial.folds[f].held_out_accuracy == threaded.folds[f].held_out_accuracy);
  }
}

TEST_CASE("fusion ablation has the fused-embedding table layout") {
  const auto table = ablation_sweep(AblationAxis::fusion, AblationGrid{}, small_model(), quick(1), small_pool());
  CHECK(table.rows == std::vector<std::string>{"RGB", "RGBD"});
  CHECK(table.columns == std::vector<std::string>{"ACF", "ECF", "AEF", "GEEF"});
  REQUIRE(table.values.size() == 2);
  for (const auto& row : table.values) CHECK(row.size() == 4);
  CHECK(table.cells.size() == 8);
  const auto text = table.to_table();
  CHECK(text.rfind("Inputs", 0) == 0);
  CHECK(table.to_json()["values"].size() == 2);
}

TEST_CASE("views ablation has ACC and time columns per view count") {
  AblationGrid grid;
  grid.modalities = {Modality::rgbd};
  const auto table = ablation_sweep(AblationAxis::views, grid, small_model(), quick(1), small_pool());
  CHECK(table.rows == std::vector<std::string>{"1", "2", "3", "4"});
  CHECK(table.columns == std::vector<std::string>{"RGBD ACC (%)", "RGBD Time (ms)"});
  for (const auto& row : table.values) {
    REQUIRE(row.size() == 2);
    CHECK(row[1] > 0.0);
  }
  CHECK(table.cells[0].report.views == 1);
  CHECK(table.cells[3].report.views == 4);
}

TEST_CASE("blocks ablation is an M by S grid") {
  AblationGrid grid;
  grid.pre_blocks = {0, 1};
  grid.mid_blocks = {0, 2};
  AblationOptions options;
  options.only_folds = {0};
  const auto table = ablation_sweep(AblationAxis::blocks, grid, small_model(), quick(1), small_pool(), nullptr, options);
  CHECK(table.rows == std::vector<std::string>{"M=0", "M=1"});
  CHECK(table.columns == std::vector<std::string>{"S=0", "S=2"});
  CHECK(table.cells[3].report.model.pre_blocks == 1);
  CHECK(table.cells[3].report.model.mid_blocks == 2);
  CHECK(table.cells[0].report.folds.size() == 1);
}

TEST_CASE("a one-cell sweep equals a plain cross-validation run") {
  AblationGrid grid;
  grid.modalities = {Modality::rgbd};
  grid.strategies = {fusion::Strategy::geef};
  const auto table = ablation_sweep(AblationAxis::fusion, grid, small_model(), quick(2), small_pool());
  const auto plain = cross_validate(small_model(), quick(2), small_pool());
  REQUIRE(table.cells.size() == 1);
  CHECK(table.values[0][0] == plain.mean_accuracy);
  for (int f = 0; f < 3; ++f) CHECK(losses(table.cells[0].report.folds[f]) == losses(plain.folds[f]));
  CHECK_THROWS_AS(parse_ablation_axis("heads"), ConfigError);
}

TEST_CASE("gradient-check suite passes on a few seeds") {
  GradCheckSuiteOptions options;
  options.seeds = 2;
  const auto report = run_gradcheck_suite(options);
  INFO(report.to_table());
  CHECK(report.passed());
  CHECK(report.min_instances() == 2);
  bool has_composite = false;
  for (const auto& c : report.cases) has_composite = has_composite || c.name == "backbone + GEEF + head";
  CHECK(has_composite);
}
