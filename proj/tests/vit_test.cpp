#include <doctest.h>

#include <filesystem>
#include <stdexcept>

#include "multilane/errors.hpp"
#include "multilane/vit.hpp"
#include "support/bound_budget.hpp"
#include "support/oracles.hpp"

using namespace multilane;

namespace {

ViTConfig small() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.depth = 3;
  c.dim = 24;
  c.heads = 3;
  c.prompted_layers = {1, 2};
  return c;
}

// Frozen weights large enough that every block changes the stream visibly.
BackboneWeights lively(const ViTConfig& c, std::uint64_t seed) {
  BackboneWeights w = random_init(c, seed);
  Rng rng(seed + 100);
  for (const auto& [name, t] : w.named_tensors()) {
    Tensor h = t;
    for (auto& v : h.mutable_values()) v += static_cast<Real>(0.2 * rng.normal());
  }
  return w;
}

Tensor image_for(const ViTConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return oracle::random_tensor({c.channels, c.image_size, c.image_size}, rng);
}

}  // namespace

TEST_CASE("ViT-B/16 layout has 85.8M parameters") {
  const ViTConfig c = ViTConfig::vit_b16();
  std::size_t total = 0;
  for (const auto& [name, shape] : weight_layout(c)) total += shape_numel(shape);
  // 16·16·3·768 + 768, 197·768, 768, 12·(7,087,872), 2·768
  CHECK(total == 85'798'656);
  CHECK(c.seq_len() == 197);
}

TEST_CASE("weight layout names and order") {
  const auto layout = weight_layout(small());
  CHECK(layout.front().first == "patch_embed.weight");
  CHECK(layout.front().second == Shape{48, 24});
  CHECK(layout[4].first == "block.0.norm1.weight");
  CHECK(layout[6].first == "block.0.qkv.weight");
  CHECK(layout[6].second == Shape{24, 72});
  CHECK(layout[4 + 12].first == "block.1.norm1.weight");
  CHECK(layout.back().first == "norm.bias");
  CHECK(layout.size() == 4 + 3 * 12 + 2);
  const BackboneWeights w = random_init(small(), 1);
  CHECK(w.parameter_count() == [&] {
    std::size_t n = 0;
    for (const auto& e : layout) n += shape_numel(e.second);
    return n;
  }());
}

TEST_CASE("config validation names the offending field") {
  ViTConfig c = small();
  c.heads = 5;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("vit.heads"), ConfigError);
  c = small();
  c.patch_size = 5;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("vit.patch_size"), ConfigError);
  c = small();
  c.prompted_layers = {0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.prompted_layers = {4};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("random_init is deterministic and follows the init scheme") {
  const BackboneWeights a = random_init(small(), 3), b = random_init(small(), 3);
  const BackboneWeights other = random_init(small(), 4);
  CHECK(a.patch_weight.to_vector() == b.patch_weight.to_vector());
  CHECK(a.patch_weight.to_vector() != other.patch_weight.to_vector());
  for (Real v : a.blocks[0].qkv_weight.values()) CHECK(std::abs(v) <= 0.04f + 1e-6f);
  for (Real v : a.blocks[1].norm1_weight.values()) CHECK(v == 1);
  for (Real v : a.blocks[1].fc1_bias.values()) CHECK(v == 0);
  CHECK_FALSE(a.patch_weight.requires_grad());
}

TEST_CASE("patch embedding matches the reference flattening") {
  const ViTConfig c = small();
  const BackboneWeights w = lively(c, 5);
  const Tensor image = image_for(c, 6);
  const auto want = oracle::embed(image, w);
  const Tensor got = patch_embed(image, w);
  CHECK(got.shape() == Shape{17, 24});
  CHECK(oracle::max_abs_diff(oracle::vec(got), want.v) < 1e-4);
  CHECK_THROWS_AS(patch_embed(Tensor::zeros({3, 8, 8}), w), DimensionError);
}

TEST_CASE("msa matches per-head reference attention") {
  Rng rng(7);
  Tensor q = oracle::random_tensor({4, 12}, rng), k = oracle::random_tensor({6, 12}, rng),
         v = oracle::random_tensor({6, 12}, rng);
  for (std::size_t heads : {1u, 2u, 3u, 4u}) {
    const auto want = oracle::attention(oracle::of(q), oracle::of(k), oracle::of(v), heads);
    CHECK(oracle::max_abs_diff(oracle::vec(msa(q, k, v, heads)), want.v) < 1e-5);
  }
  CHECK_THROWS_AS(msa(q, k, v, 5), ConfigError);
  CHECK_THROWS_AS(msa(q, k, oracle::random_tensor({5, 12}, rng), 2), DimensionError);
}

TEST_CASE("attention bound counts checks and throws on violation") {
  Rng rng(8);
  Tensor q = oracle::random_tensor({3, 4}, rng), k = oracle::random_tensor({5, 4}, rng);
  const std::size_t checks = diagnostics::attention_bound_checks();
  const std::size_t violations = diagnostics::attention_bound_violations();
  const AttentionBound ok{3, 5}, tight{3, 4};
  CHECK_NOTHROW(msa(q, k, k, 1, &ok));
  ++g_expected_bound_violations;
  CHECK_THROWS_AS(msa(q, k, k, 1, &tight), std::logic_error);
  Tape::clear();
  CHECK(diagnostics::attention_bound_checks() == checks + 2);
  CHECK(diagnostics::attention_bound_violations() == violations + 1);
}

TEST_CASE("frozen forward taps match the plain-loop transformer") {
  const ViTConfig c = small();
  const BackboneWeights w = lively(c, 9);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Tensor image = image_for(c, 20 + s);
    const auto want = oracle::frozen_forward(image, w);
    const FrozenTaps got = frozen_forward(image, w);
    REQUIRE(got.taps.size() == c.depth);
    for (std::size_t l = 0; l < c.depth; ++l) {
      CHECK(got.taps[l].shape() == Shape{17, 24});
      CHECK(oracle::max_abs_diff(oracle::vec(got.taps[l]), want.taps[l].v) < 2e-4);
    }
    CHECK(oracle::max_abs_diff(oracle::vec(got.final_cls), want.final_cls.v) < 2e-4);
  }
}

TEST_CASE("frozen forward is detached and records nothing") {
  const ViTConfig c = small();
  const BackboneWeights w = random_init(c, 10);
  Tape::clear();
  const FrozenTaps taps = frozen_forward(image_for(c, 1), w);
  CHECK(Tape::size() == 0);
  for (const auto& t : taps.taps) {
    CHECK(t.is_detached());
    CHECK_FALSE(t.requires_grad());
  }
  const FrozenTaps again = frozen_forward(image_for(c, 1), w);
  for (std::size_t l = 0; l < c.depth; ++l) {
    CHECK(taps.taps[l].to_vector() == again.taps[l].to_vector());
  }
}

TEST_CASE("weights round-trip through an archive file") {
  const ViTConfig c = small();
  const BackboneWeights w = lively(c, 11);
  const auto path = std::filesystem::temp_directory_path() / "multilane_vit_test.mlta";
  save_weights(w, path);
  const BackboneWeights back = load_weights(path, c);
  const auto a = w.named_tensors(), b = back.named_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.to_vector() == b[i].second.to_vector());
  }
  ViTConfig wider = c;
  wider.dim = 30;
  CHECK_THROWS_AS(load_weights(path, wider), LoadError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_weights(path, c), IoError);
}

TEST_CASE("archive rejects malformed bytes") {
  Archive a;
  a.put("x", Tensor::from({2}, {1, 2}));
  auto bytes = a.serialize();
  CHECK(Archive::deserialize(bytes).get("x").to_vector() == std::vector<Real>{1, 2});
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(Archive::deserialize(bad), LoadError);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(Archive::deserialize(truncated), LoadError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(Archive::deserialize(trailing), LoadError);
  CHECK_THROWS_AS(a.get("y"), LoadError);
  CHECK_THROWS_AS(a.get("x", {3}), LoadError);
}

TEST_CASE("archive byte layout") {
  Archive a;
  a.put("x", Tensor::from({2}, {1, 2}));
  const std::vector<std::uint8_t> want = {
      'M', 'L', 'T', 'A', 1, 0, 0, 0, 1, 0, 0, 0,  // magic, version, entry count
      1,   0,   'x',                               // name
      0,   1,                                      // dtype f32, rank
      2,   0,   0,   0,   0, 0, 0, 0,              // extent
      0,   0,   0x80, 0x3f, 0, 0, 0, 0x40};        // 1.0f, 2.0f
  CHECK(a.serialize() == want);
}
