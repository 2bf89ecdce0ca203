#include <doctest.h>

#include <set>

#include "multilane/errors.hpp"
#include "multilane/pathway.hpp"
#include "support/oracles.hpp"

using namespace multilane;

namespace {

struct Fixture {
  ViTConfig config;
  BackboneWeights weights;
  std::vector<Tensor> images;
  std::vector<FrozenTaps> taps;

  Fixture() {
    config.image_size = 16;
    config.patch_size = 4;
    config.depth = 3;
    config.dim = 16;
    config.heads = 2;
    config.prompted_layers = {1, 2};
    weights = random_init(config, 3);
    Rng rng(4);
    for (const auto& [name, t] : weights.named_tensors()) {
      Tensor h = t;
      for (auto& v : h.mutable_values()) v += static_cast<Real>(0.15 * rng.normal());
    }
    for (int i = 0; i < 3; ++i) {
      images.push_back(oracle::random_tensor({3, 16, 16}, rng));
      taps.push_back(frozen_forward(images.back(), weights));
    }
  }

  TaskPathway pathway(std::size_t task, std::vector<std::size_t> classes, PathwayInit init = {}) {
    init.seed = 50 + task;
    TaskPathway p = make_pathway(task, std::move(classes), weights, init);
    Rng rng(60 + task);
    for (auto [name, t] : p.parameters()) {
      for (auto& v : t.mutable_values()) v += static_cast<Real>(0.2 * rng.normal());
    }
    return p;
  }
};

std::vector<Real> logits_of(const TaskPathway& p, const FrozenTaps& taps,
                            const BackboneWeights& w, const ForwardOptions& o = {}) {
  NoGradGuard guard;
  return classify(p, task_forward(p, taps, w, o), o.pre_head_norm).to_vector();
}

}  // namespace

TEST_CASE("Drop & Replace forward matches the plain-loop reference") {
  Fixture f;
  const TaskPathway p = f.pathway(0, {0, 1, 2});
  for (std::size_t i = 0; i < f.images.size(); ++i) {
    const auto want =
        oracle::pathway_logits(p, oracle::frozen_forward(f.images[i], f.weights), f.weights);
    const auto got = logits_of(p, f.taps[i], f.weights);
    std::vector<double> g(got.begin(), got.end());
    CHECK(oracle::max_abs_diff(g, want) < 1e-4);
  }
}

TEST_CASE("task forward keeps attention within (1+L_s) x (1+L_s+L_p/2)") {
  Fixture f;
  const std::size_t checks = diagnostics::attention_bound_checks();
  const std::size_t violations = diagnostics::attention_bound_violations();
  for (std::size_t ls : {1u, 4u, 9u}) {
    const TaskPathway p = f.pathway(0, {0, 1}, {.selectors = ls, .prompt_length = 6});
    logits_of(p, f.taps[0], f.weights);
    ForwardOptions no_dr;
    no_dr.drop_replace = false;
    logits_of(p, f.taps[0], f.weights, no_dr);
  }
  const TaskPathway bare = f.pathway(0, {0}, {.selectors = 0, .prompt_length = 0});
  ForwardOptions tome;
  tome.use_tome = true;
  tome.tome_max_len = 5;
  logits_of(bare, f.taps[0], f.weights, tome);
  CHECK(diagnostics::attention_bound_checks() == checks + 7 * f.config.depth);
  CHECK(diagnostics::attention_bound_violations() == violations);
}

TEST_CASE("a single pathway infers exactly its own forward") {
  Fixture f;
  const std::vector<TaskPathway> ps{f.pathway(0, {3, 1})};
  const Logits out = infer(f.taps[1], ps, f.weights);
  CHECK(out.values == logits_of(ps[0], f.taps[1], f.weights));
  CHECK(out.class_ids == std::vector<std::size_t>{3, 1});
  CHECK(infer(f.images[1], ps, f.weights).values == out.values);
}

TEST_CASE("infer concatenates pathways in order and rejects overlaps") {
  Fixture f;
  std::vector<TaskPathway> ps{f.pathway(0, {0, 1}), f.pathway(1, {4, 2, 3})};
  const Logits out = infer(f.taps[0], ps, f.weights);
  CHECK(out.class_ids == std::vector<std::size_t>{0, 1, 4, 2, 3});
  const auto second = logits_of(ps[1], f.taps[0], f.weights);
  CHECK(std::vector<Real>(out.values.begin() + 2, out.values.end()) == second);
  ps.push_back(f.pathway(2, {5, 2}));
  CHECK_THROWS_AS(infer(f.taps[0], ps, f.weights), IntegrityError);
  CHECK_THROWS_AS(check_disjoint(ps), IntegrityError);
}

TEST_CASE("pathways share no parameter storage") {
  Fixture f;
  const std::vector<TaskPathway> ps{f.pathway(0, {0}), f.pathway(1, {1}), f.pathway(2, {2})};
  std::set<const void*> ids;
  std::size_t total = 0;
  for (const auto& p : ps) {
    for (const auto& [name, t] : p.parameters()) {
      ids.insert(t.id());
      ++total;
    }
  }
  CHECK(ids.size() == total);
  for (const auto& [name, t] : f.weights.named_tensors()) CHECK(ids.count(t.id()) == 0);
}

TEST_CASE("updating one pathway leaves every other pathway's logits bit-identical") {
  Fixture f;
  std::vector<TaskPathway> ps{f.pathway(0, {0, 1}), f.pathway(1, {2, 3}), f.pathway(2, {4})};
  std::vector<std::vector<Real>> before;
  for (std::size_t i = 0; i < f.taps.size(); ++i) before.push_back(infer(f.taps[i], ps, f.weights).values);
  for (auto [name, t] : ps[1].parameters()) {
    for (auto& v : t.mutable_values()) v = v * Real(-3) + Real(0.5);
  }
  for (std::size_t i = 0; i < f.taps.size(); ++i) {
    const auto after = infer(f.taps[i], ps, f.weights).values;
    for (std::size_t k : {0u, 1u, 4u}) CHECK(after[k] == before[i][k]);
    CHECK(after[2] != before[i][2]);
  }
}

TEST_CASE("a pathway's backward touches only its own tensors") {
  Fixture f;
  TaskPathway a = f.pathway(0, {0, 1}), b = f.pathway(1, {2});
  a.set_trainable(true);
  b.set_trainable(true);
  Tensor loss = sum(classify(a, task_forward(a, f.taps[0], f.weights)));
  backward(loss);
  for (const auto& [name, t] : a.parameters()) {
    INFO(name);
    CHECK(t.has_grad());
  }
  for (const auto& [name, t] : b.parameters()) CHECK_FALSE(t.has_grad());
  for (const auto& [name, t] : f.weights.named_tensors()) CHECK_FALSE(t.has_grad());
  for (const auto& tap : f.taps[0].taps) CHECK_FALSE(tap.has_grad());
}

TEST_CASE("prediction threshold is strict") {
  const std::vector<Real> zeros(3, 0);
  CHECK(predict(zeros) == std::vector<std::uint8_t>{0, 0, 0});
  const std::vector<Real> z{10, 1.5f, 1.3f};
  CHECK(predict(z, 0.5f) == std::vector<std::uint8_t>{1, 1, 1});
  CHECK(predict(z, 0.8f) == std::vector<std::uint8_t>{1, 1, 0});
  CHECK(1 / (1 + std::exp(-1.5)) == doctest::Approx(0.8176).epsilon(1e-4));
  CHECK(1 / (1 + std::exp(-1.3)) == doctest::Approx(0.7858).epsilon(1e-4));
  const std::vector<Real> masked{kMaskedLogit};
  CHECK(predict(masked, 0.5f)[0] == 0);
  CHECK_THROWS_AS(predict(z, 1.0f), ConfigError);
}

TEST_CASE("query-key selection") {
  Fixture f;
  const PathwayInit with_key{.with_key = true};
  std::vector<TaskPathway> ps{f.pathway(0, {0, 1}, with_key), f.pathway(1, {2, 3}, with_key),
                              f.pathway(2, {4}, with_key)};
  const auto query = f.taps[0].final_cls.to_vector();

  SUBCASE("argmax cosine, invariant to query scale") {
    // Make pathway 2's key the query direction itself.
    auto k2 = ps[2].key.mutable_values();
    for (std::size_t i = 0; i < k2.size(); ++i) k2[i] = query[i] * 7;
    CHECK(select_by_key(query, ps) == 2);
    std::vector<Real> scaled(query);
    for (auto& v : scaled) v *= Real(0.01);
    CHECK(select_by_key(scaled, ps) == 2);
  }
  SUBCASE("duplicated keys tie to the lower index") {
    auto k0 = ps[0].key.mutable_values(), k1 = ps[1].key.mutable_values();
    for (std::size_t i = 0; i < k0.size(); ++i) k0[i] = k1[i] = query[i];
    CHECK(select_by_key(query, ps) == 0);
  }
  SUBCASE("only the selected pathway scores; others are masked") {
    auto k1 = ps[1].key.mutable_values();
    for (std::size_t i = 0; i < k1.size(); ++i) k1[i] = query[i];
    const QueryKeySelection sel = querykey_infer(f.taps[0], ps, f.weights);
    CHECK(sel.selected == 1);
    CHECK(sel.logits.class_ids == std::vector<std::size_t>{0, 1, 2, 3, 4});
    const auto own = logits_of(ps[1], f.taps[0], f.weights);
    CHECK(sel.logits.values ==
          std::vector<Real>{kMaskedLogit, kMaskedLogit, own[0], own[1], kMaskedLogit});
  }
  SUBCASE("one pathway behaves like infer") {
    const std::vector<TaskPathway> one{ps[0]};
    CHECK(querykey_infer(f.taps[2], one, f.weights).logits.values ==
          infer(f.taps[2], one, f.weights).values);
  }
  const std::vector<TaskPathway> keyless{f.pathway(3, {5})};
  CHECK_THROWS_AS(select_by_key(query, keyless), ContractError);
}

TEST_CASE("pathway archive round trip") {
  Fixture f;
  const TaskPathway p = f.pathway(4, {7, 2, 9}, {.selectors = 3, .prompt_length = 4, .with_key = true});
  Archive a;
  p.write(a);
  CHECK(a.contains("task.4.selectors"));
  CHECK(a.contains("task.4.cls"));
  CHECK(a.contains("task.4.prompt.1.k"));
  CHECK(a.contains("task.4.prompt.2.v"));
  const TaskPathway back = TaskPathway::read(Archive::deserialize(a.serialize()), 4);
  CHECK(back.classes == p.classes);
  CHECK(back.parameter_count() == p.parameter_count());
  CHECK(logits_of(back, f.taps[0], f.weights) == logits_of(p, f.taps[0], f.weights));
  CHECK_THROWS_AS(TaskPathway::read(a, 5), LoadError);
}

TEST_CASE("pathway construction") {
  Fixture f;
  const TaskPathway p = f.pathway(0, {0, 1, 2}, {.selectors = 5, .prompt_length = 4});
  CHECK(p.selectors.shape() == Shape{5, 16});
  CHECK(p.head_weight.shape() == Shape{16, 3});
  CHECK(p.prompts.prompt_length() == 4);
  CHECK(p.prompts.find(3) == nullptr);
  // cls + selectors + 2 layers x (k, v) + norm + head
  CHECK(p.parameter_count() == 16 + 5 * 16 + 2 * 2 * 2 * 16 + 2 * 16 + 16 * 3 + 3);
  CHECK(make_pathway(0, {0}, f.weights, {}).cls_token.to_vector() ==
        f.weights.cls_token.to_vector());
  CHECK_THROWS_AS(make_pathway(0, {}, f.weights, {}), ConfigError);
  CHECK_THROWS_AS(make_pathway(0, {0}, f.weights, {.selectors = 17}), ConfigError);
  const auto maps = pathway_attention_maps(p, f.taps[0]);
  REQUIRE(maps.size() == 3);
  CHECK(maps[2].shape() == Shape{5, 17});
}
