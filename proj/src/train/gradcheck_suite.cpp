// SPDX-License-Identifier: Apache-2.0
#include "mcvt/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <memory>
#include <ostream>

#include "mcvt/fusion.hpp"
#include "mcvt/model.hpp"
#include "mcvt/nn.hpp"
#include "mcvt/trainer.hpp"

namespace mcvt {

namespace {

using D = Tensor<double>;

struct Probe {
  Probe(std::function<D()> fn, std::vector<D> probed, std::size_t max = 0, std::shared_ptr<void> keep = {})
      : f(std::move(fn)), leaves(std::move(probed)), max_coordinates(max), keep_alive(std::move(keep)) {}

  std::function<D()> f;
  std::vector<D> leaves;
  std::size_t max_coordinates = 0;
  std::shared_ptr<void> keep_alive;
};

using Factory = std::function<Probe(Rng&)>;

// A central difference of an O(1) objective carries about ulp / 2h ~ 1e-11
// of rounding noise. Exactly-zero gradients (key biases, shifts under
// layer_norm) would read as 1e-3 against the 1e-8 error floor, so every
// objective is scaled down. Relative errors of gradients above the floor are
// unchanged; below it the comparison is absolute at ~1e-12.
constexpr double kObjectiveScale = 1e-2;

D leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return D(std::move(shape), std::move(v), true);
}

D constant(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  auto t = leaf(std::move(shape), rng, lo, hi);
  t.set_requires_grad(false);
  return t;
}

// Values kept at least 0.1 away from zero.
D off_kink(Shape shape, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return D(std::move(shape), std::move(v), true);
}

D weighted(const D& y, Rng& rng) { return constant(y.shape(), rng); }

// A probe reducing one op output to a scalar with random weights.
Probe unary(Rng& rng, D x, std::function<D(const D&)> op) {
  D y;
  {
    NoGradGuard guard;
    y = op(x);
  }
  const auto w = weighted(y, rng);
  return Probe([x, w, op] { return sum(mul(op(x), w)); }, {x});
}

ModelConfig small_config() {
  ModelConfig c;
  c.pre_blocks = c.local_blocks = c.mid_blocks = c.global_blocks = 1;
  c.image_size = 8;
  c.patch_size = 2;
  c.embed_dim = 12;
  c.heads = 3;
  c.stem_channels = 4;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  return c;
}

Batch<double> random_batch(const ModelConfig& c, std::int64_t objects, std::int64_t views, Rng& rng) {
  Batch<double> b;
  b.objects = objects;
  b.views = views;
  const auto n = objects * views, s = static_cast<std::int64_t>(c.image_size);
  if (uses_rgb(c.modality)) b.rgb = leaf({n, 3, s, s}, rng, 0.0, 1.0);
  if (uses_depth(c.modality)) b.depth = leaf({n, 1, s, s}, rng, 0.0, 1.0);
  return b;
}

std::vector<int> random_targets(std::int64_t count, int classes, Rng& rng) {
  std::vector<int> t;
  for (std::int64_t i = 0; i < count; ++i) t.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
  return t;
}

Probe composite(Rng& rng, const ModelConfig& config, std::int64_t objects, std::int64_t views,
                std::size_t leaf_sample, std::size_t per_leaf) {
  auto model = std::make_shared<McvtModel<double>>(config, rng.next());
  auto batch = random_batch(config, objects, views, rng);
  const auto targets = random_targets(objects, config.num_classes, rng);
  auto params = model->parameters();
  if (leaf_sample > 0 && params.size() > leaf_sample) {
    rng.shuffle(std::span<D>(params));
    params.resize(leaf_sample);
  }
  if (batch.rgb.defined()) params.push_back(batch.rgb);
  if (batch.depth.defined()) params.push_back(batch.depth);
  Probe p{[model, batch, targets] { return train::cross_entropy(model->forward(batch), targets); }, params, per_leaf,
          model};
  return p;
}

std::vector<std::pair<std::string, Factory>> suite_cases(bool full) {
  std::vector<std::pair<std::string, Factory>> cases;
  auto reg = [&](std::string name, Factory f) { cases.emplace_back(std::move(name), std::move(f)); };

  // elementwise and reductions
  reg("add", [](Rng& r) { auto b = leaf({3, 4}, r); return unary(r, leaf({3, 4}, r), [b](const D& x) { return add(x, b); }); });
  reg("sub", [](Rng& r) { auto b = leaf({3, 4}, r); return unary(r, leaf({3, 4}, r), [b](const D& x) { return sub(b, x); }); });
  reg("mul", [](Rng& r) { auto b = leaf({3, 4}, r); return unary(r, leaf({3, 4}, r), [b](const D& x) { return mul(x, b); }); });
  reg("scale", [](Rng& r) { return unary(r, leaf({3, 4}, r), [](const D& x) { return scale(x, -2.5); }); });
  reg("add_scalar", [](Rng& r) { return unary(r, leaf({3, 4}, r), [](const D& x) { return add_scalar(x, 0.75); }); });
  reg("add_bias", [](Rng& r) {
    auto x = leaf({2, 3, 4}, r), b = leaf({4}, r);
    const auto w = constant({2, 3, 4}, r);
    return Probe{[x, b, w] { return sum(mul(add_bias(x, b), w)); }, {x, b}};
  });
  reg("relu", [](Rng& r) { return unary(r, off_kink({3, 4}, r), [](const D& x) { return relu(x); }); });
  reg("gelu", [](Rng& r) { return unary(r, leaf({3, 4}, r, -3, 3), [](const D& x) { return gelu(x); }); });
  reg("log", [](Rng& r) { return unary(r, leaf({3, 4}, r, 0.2, 3.0), [](const D& x) { return log(x); }); });
  reg("square", [](Rng& r) { return unary(r, leaf({3, 4}, r), [](const D& x) { return square(x); }); });
  reg("sum", [](Rng& r) { auto x = leaf({3, 4}, r); return Probe{[x] { return sum(square(x)); }, {x}}; });
  reg("mean", [](Rng& r) { auto x = leaf({3, 4}, r); return Probe{[x] { return mean(square(x)); }, {x}}; });
  reg("sum_axis", [](Rng& r) { return unary(r, leaf({2, 3, 4}, r), [](const D& x) { return sum_axis(x, 1); }); });
  reg("mean_axis", [](Rng& r) { return unary(r, leaf({2, 3, 4}, r), [](const D& x) { return mean_axis(x, 0); }); });
  reg("softmax", [](Rng& r) {
    const int axis = static_cast<int>(r.below(3));
    return unary(r, leaf({2, 3, 4}, r, -2, 2), [axis](const D& x) { return softmax(x, axis); });
  });

  // linear algebra
  reg("matmul", [](Rng& r) {
    auto a = leaf({3, 4}, r), b = leaf({4, 5}, r);
    const auto w = constant({3, 5}, r);
    return Probe{[a, b, w] { return sum(mul(matmul(a, b), w)); }, {a, b}};
  });
  reg("linear", [](Rng& r) {
    auto x = leaf({2, 3, 4}, r), wt = leaf({4, 5}, r), b = leaf({5}, r);
    const auto w = constant({2, 3, 5}, r);
    return Probe{[x, wt, b, w] { return sum(mul(linear(x, wt, b), w)); }, {x, wt, b}};
  });
  reg("conv2d", [](Rng& r) {
    auto x = leaf({2, 3, 5, 4}, r), wt = leaf({4, 3, 3, 3}, r), b = leaf({4}, r);
    const auto w = constant({2, 4, 5, 4}, r);
    return Probe{[x, wt, b, w] { return sum(mul(conv2d(x, wt, b), w)); }, {x, wt, b}};
  });

  // layout
  reg("reshape", [](Rng& r) { return unary(r, leaf({2, 6}, r), [](const D& x) { return square(reshape(x, {3, 4})); }); });
  reg("transpose_last2", [](Rng& r) { return unary(r, leaf({2, 3, 4}, r), [](const D& x) { return transpose_last2(x); }); });
  reg("narrow", [](Rng& r) {
    const int axis = static_cast<int>(r.below(3));
    return unary(r, leaf({3, 4, 5}, r), [axis](const D& x) { return narrow(x, axis, 1, 2); });
  });
  reg("concat", [](Rng& r) {
    const int axis = static_cast<int>(r.below(3));
    auto a = leaf({2, 3, 4}, r), b = leaf({2, 3, 4}, r);
    return unary(r, a, [b, axis](const D& x) { return concat<double>({x, b, x}, axis); });
  });

  // network primitives
  reg("batch_norm2d (train)", [](Rng& r) {
    auto x = leaf({3, 2, 3, 3}, r), g = leaf({2}, r, 0.5, 1.5), b = leaf({2}, r);
    const auto w = constant({3, 2, 3, 3}, r);
    return Probe{[x, g, b, w] {
                   auto rm = D::zeros({2});
                   auto rv = D::full({2}, 1.0);
                   return sum(mul(nn::batch_norm2d(x, g, b, rm, rv, true, 0.1, 1e-5), w));
                 },
                 {x, g, b}};
  });
  reg("batch_norm2d (eval)", [](Rng& r) {
    auto x = leaf({3, 2, 3, 3}, r), g = leaf({2}, r, 0.5, 1.5), b = leaf({2}, r);
    const auto w = constant({3, 2, 3, 3}, r);
    const auto mean = constant({2}, r), var = constant({2}, r, 0.5, 2.0);
    return Probe{[x, g, b, w, mean, var] {
                   auto rm = mean, rv = var;
                   return sum(mul(nn::batch_norm2d(x, g, b, rm, rv, false, 0.1, 1e-5), w));
                 },
                 {x, g, b}};
  });
  reg("layer_norm", [](Rng& r) {
    auto x = leaf({2, 3, 6}, r), g = leaf({6}, r, 0.5, 1.5), b = leaf({6}, r);
    const auto w = constant({2, 3, 6}, r);
    return Probe{[x, g, b, w] { return sum(mul(nn::layer_norm(x, g, b, 1e-6), w)); }, {x, g, b}};
  });
  reg("attention", [](Rng& r) { return unary(r, leaf({2, 4, 18}, r), [](const D& x) { return nn::attention(x, 3); }); });
  reg("patchify", [](Rng& r) { return unary(r, leaf({2, 3, 4, 4}, r), [](const D& x) { return nn::patchify(x, 2); }); });
  reg("prepend_token", [](Rng& r) {
    auto x = leaf({2, 3, 6}, r), t = leaf({6}, r);
    const auto w = constant({2, 4, 6}, r);
    return Probe{[x, t, w] { return sum(mul(nn::prepend_token(x, t), w)); }, {x, t}};
  });

  // layers
  reg("transformer block", [](Rng& r) {
    auto block = std::make_shared<nn::TransformerBlock<double>>(6, 2, 12, 1e-6, r);
    auto x = leaf({2, 3, 6}, r);
    const auto w = constant({2, 3, 6}, r);
    nn::StateList<double> state;
    block->collect(state, "b");
    auto leaves = state.parameters();
    leaves.push_back(x);
    return Probe{[block, x, w] { return sum(mul((*block)(x), w)); }, leaves, 0, block};
  });
  reg("patch embedding", [](Rng& r) {
    auto embed = std::make_shared<nn::PatchEmbed<double>>(3, 4, 2, 6, r);
    auto x = leaf({2, 3, 4, 4}, r);
    const auto w = constant({2, 5, 6}, r);
    nn::StateList<double> state;
    embed->collect(state, "e");
    auto leaves = state.parameters();
    leaves.push_back(x);
    return Probe{[embed, x, w] { return sum(mul((*embed)(x), w)); }, leaves, 0, embed};
  });
  reg("stem", [](Rng& r) {
    const auto c = small_config();
    auto stem = std::make_shared<Stem<double>>(3, c, r);
    auto x = leaf({2, 3, 4, 4}, r);
    const auto w = constant({2, 4, 4, 4}, r);
    nn::StateList<double> state;
    stem->collect(state, "s");
    auto leaves = state.parameters();
    leaves.push_back(x);
    return Probe{[stem, x, w] { return sum(mul(stem->forward(x, true), w)); }, leaves, 0, stem};
  });
  reg("residual block", [](Rng& r) {
    const auto c = small_config();
    auto block = std::make_shared<ResidualBlock<double>>(3, c, r);
    auto x = leaf({2, 3, 4, 4}, r);
    const auto w = constant({2, 3, 4, 4}, r);
    nn::StateList<double> state;
    block->collect(state, "r");
    auto leaves = state.parameters();
    leaves.push_back(x);
    return Probe{[block, x, w] { return sum(mul(block->forward(x, true), w)); }, leaves, 0, block};
  });
  reg("middle residual on tokens", [](Rng& r) {
    const auto c = small_config();
    auto block = std::make_shared<ResidualBlock<double>>(6, c, r);
    auto x = leaf({2, 9, 6}, r);
    const auto w = constant({2, 9, 6}, r);
    nn::StateList<double> state;
    block->collect(state, "m");
    auto leaves = state.parameters();
    leaves.push_back(x);
    return Probe{[block, x, w] { return sum(mul(mid_residual(*block, x, true), w)); }, leaves, 0, block};
  });

  // fusion and loss
  reg("row_entropies", [](Rng& r) { return unary(r, leaf({4, 5}, r, -2, 2), [](const D& x) { return fusion::row_entropies(x); }); });
  reg("normalize_entropies",
      [](Rng& r) { return unary(r, leaf({2, 3}, r, 0.2, 2.0), [](const D& x) { return fusion::normalize_entropies(x); }); });
  reg("weighted_view_sum", [](Rng& r) {
    auto t = leaf({2, 3, 4}, r), wv = leaf({2, 3}, r, 0.0, 1.0);
    const auto w = constant({2, 4}, r);
    return Probe{[t, wv, w] { return sum(mul(fusion::weighted_view_sum(t, wv), w)); }, {t, wv}};
  });
  for (auto s : fusion::kAllStrategies) {
    reg("fuse + head (" + std::string(fusion::name(s)) + ")", [s](Rng& r) {
      fusion::FusionBundle<double> bundle;
      std::vector<D> leaves;
      for (int m = 0; m < 2; ++m) {
        bundle.modalities.push_back({leaf({2, 3, 2, 4}, r, -2, 2), leaf({2, 3, 4}, r, -3, 3)});
        leaves.push_back(bundle.modalities.back().patch_tokens);
        leaves.push_back(bundle.modalities.back().cls_tokens);
      }
      auto head = std::make_shared<fusion::ClassifierHead<double>>(fusion::parts_per_modality(s) * 2 * 4, 3, r);
      nn::StateList<double> state;
      head->collect(state, "h");
      for (const auto& p : state.parameters()) leaves.push_back(p);
      const auto targets = random_targets(2, 3, r);
      return Probe{[bundle, head, s, targets] { return train::cross_entropy((*head)(fusion::fuse(bundle, s).feature), targets); },
                   leaves, 0, head};
    });
  }
  reg("cross_entropy", [](Rng& r) {
    auto x = leaf({4, 5}, r, -3, 3);
    const auto targets = random_targets(4, 5, r);
    return Probe{[x, targets] { return train::cross_entropy(x, targets); }, {x}};
  });

  // full composite: stems, backbone, GEEF, head, loss
  reg("backbone + GEEF + head", [](Rng& r) { return composite(r, small_config(), 2, 2, 0, 3); });
  reg("backbone + GEEF + head (cross-view, 16 px)", [](Rng& r) {
    auto c = small_config();
    c.image_size = 16;
    c.patch_size = 4;
    c.cross_view_global = true;
    return composite(r, c, 2, 3, 0, 2);
  });
  if (full) reg("desk composite (sampled)", [](Rng& r) { return composite(r, ModelConfig::desk(), 2, 2, 16, 2); });
  return cases;
}

}  // namespace

bool GradCheckSuiteReport::passed() const {
  return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed; });
}

double GradCheckSuiteReport::max_error() const {
  double worst = 0.0;
  for (const auto& c : cases) worst = std::max(worst, c.max_error);
  return worst;
}

int GradCheckSuiteReport::min_instances() const {
  int least = cases.empty() ? 0 : cases.front().instances;
  for (const auto& c : cases) least = std::min(least, c.instances);
  return least;
}

std::string GradCheckSuiteReport::to_table() const {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-44s %5s %11s %7s %7s %7s %8s\n", "case", "runs", "max error", "coords", "refined",
                "unres.", "seconds");
  out += line;
  for (const auto& c : cases) {
    std::snprintf(line, sizeof line, "%-44s %5d %11.3e %7zu %7zu %7zu %8.2f %s\n", c.name.c_str(), c.instances,
                  c.max_error, c.coordinates, c.refined, c.unresolved, c.seconds, c.passed ? "ok" : "FAIL");
    out += line;
  }
  std::snprintf(line, sizeof line, "%zu cases, max relative error %.3e (tolerance %.0e), %.1f s: %s\n", cases.size(),
                max_error(), tolerance, seconds, passed() ? "PASS" : "FAIL");
  out += line;
  return out;
}

nlohmann::json GradCheckSuiteReport::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& c : cases) {
    list.push_back({{"name", c.name},
                    {"instances", c.instances},
                    {"max_error", c.max_error},
                    {"coordinates", c.coordinates},
                    {"refined", c.refined},
                    {"unresolved", c.unresolved},
                    {"seconds", c.seconds},
                    {"passed", c.passed}});
  }
  return {{"passed", passed()}, {"max_error", max_error()}, {"tolerance", tolerance}, {"seconds", seconds}, {"cases", list}};
}

GradCheckSuiteReport run_gradcheck_suite(const GradCheckSuiteOptions& options) {
  if (options.seeds < 1) throw ConfigError("gradcheck: seeds must be at least 1");
  using Clock = std::chrono::steady_clock;
  const auto suite_start = Clock::now();
  GradCheckSuiteReport report;
  report.tolerance = options.tolerance;
  std::uint64_t case_index = 0;
  for (const auto& [name, factory] : suite_cases(options.full)) {
    const auto start = Clock::now();
    GradCheckCaseResult result;
    result.name = name;
    const bool desk = name.rfind("desk", 0) == 0;
    const int seeds = desk ? std::min(options.seeds, 2) : options.seeds;
    for (int s = 0; s < seeds; ++s) {
      Rng rng(mix_seed(0x6ac0 + case_index, static_cast<std::uint64_t>(s)));
      auto probe = factory(rng);
      GradCheckOptions gc;
      gc.step = options.step;
      gc.max_coordinates = probe.max_coordinates;
      gc.seed = static_cast<std::uint64_t>(s);
      const auto r = grad_check_report([&] { return scale(probe.f(), kObjectiveScale); }, probe.leaves, gc);
      result.max_error = std::max(result.max_error, r.max_error);
      result.coordinates += r.coordinates;
      result.refined += r.refined;
      result.unresolved += r.unresolved;
      ++result.instances;
    }
    result.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    result.passed = result.max_error < options.tolerance;
    if (options.log) {
      char line[256];
      std::snprintf(line, sizeof line, "%-44s max error %.3e over %d runs (%.2f s)%s\n", name.c_str(), result.max_error,
                    result.instances, result.seconds, result.passed ? "" : "  FAIL");
      *options.log << line << std::flush;
    }
    report.cases.push_back(std::move(result));
    ++case_index;
  }
  report.seconds = std::chrono::duration<double>(Clock::now() - suite_start).count();
  return report;
}

}  // namespace mcvt
