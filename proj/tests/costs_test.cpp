#include <doctest.h>

#include <chrono>

#include <nlohmann/json.hpp>

#include "multilane/costs.hpp"

using namespace multilane;

namespace {

double gmacs(std::size_t tasks, std::size_t selectors, bool naive = false) {
  CostQuery q;
  q.tasks = tasks;
  q.selectors = selectors;
  q.naive = naive;
  return count_macs(ViTConfig::vit_b16(), q).total_gmacs();
}

bool within(double got, double want, double rel) { return std::abs(got - want) <= rel * want; }

}  // namespace

TEST_CASE("ViT-B/16 cost table within 2%") {
  const auto start = std::chrono::steady_clock::now();
  CHECK(within(gmacs(0, 20), 16.9, 0.02));
  CHECK(within(gmacs(10, 20, true), 168.7, 0.02));
  CHECK(within(gmacs(10, 1), 18.6, 0.02));
  CHECK(within(gmacs(10, 20), 34.7, 0.02));
  CHECK(within(static_cast<double>(backbone_parameter_count(ViTConfig::vit_b16())), 85.8e6, 0.01));
  CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(1));
}

TEST_CASE("selector parameters for 8 tasks x 20 selectors x 768") {
  CostQuery q;
  q.tasks = 8;
  q.selectors = 20;
  const CostReport r = count_params(ViTConfig::vit_b16(), q);
  CHECK(r.param_breakdown.front() == std::pair<std::string, std::uint64_t>{"selectors", 122880});
  q.tasks = 0;
  CHECK(count_params(ViTConfig::vit_b16(), q).trainable_params == 0);
}

TEST_CASE("small config MACs from first principles") {
  // image 8, patch 4 -> 4 patches, 5 rows; D 6, hidden 24, depth 2, 3 channels.
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.depth = 2;
  c.dim = 6;
  c.heads = 2;
  c.prompted_layers = {1};
  // One row through a block: qkv 6*18, proj 6*6, fc1 6*24, fc2 24*6 = 432.
  const std::uint64_t per_row = 432;
  const std::uint64_t embed = 4 * (3 * 4 * 4) * 6;
  CostQuery q;
  q.tasks = 3;
  q.selectors = 2;
  q.prompt_length = 2;
  q.classes_per_task = 5;
  const CostReport r = cost_report(c, q);
  CHECK(r.frozen_macs == embed + 5 * per_row * 2);
  CHECK(r.per_task_macs == 3 * per_row * 2);
  CHECK(r.head_macs == 3 * 6 * 5);
  CHECK(r.total_macs == r.frozen_macs + 3 * r.per_task_macs + r.head_macs);
  // selectors 3*2*6, cls 3*6, prompts 3*1*2*6, norms 3*12, heads 3*(30+5)
  CHECK(r.trainable_params == 36 + 18 + 36 + 36 + 105);
  q.with_keys = true;
  CHECK(count_params(c, q).trainable_params == 231 + 18);

  q.naive = true;
  const CostReport n = count_macs(c, q);
  CHECK(n.frozen_macs == 0);
  CHECK(n.per_task_macs == embed + 5 * per_row * 2);
}

TEST_CASE("total MACs are linear in T with the per-task slope") {
  const ViTConfig c = ViTConfig::vit_b16();
  CostQuery q;
  q.tasks = 1;
  const CostReport one = count_macs(c, q);
  const std::uint64_t slope = one.per_task_macs + c.dim * q.classes_per_task;
  for (std::size_t t : {1u, 2u, 5u, 10u}) {
    q.tasks = t;
    CHECK(count_macs(c, q).total_macs == one.total_macs + (t - 1) * slope);
  }
  std::uint64_t prev = 0;
  for (std::size_t ls = 0; ls <= 40; ls += 5) {
    q.selectors = ls;
    const std::uint64_t now = count_macs(c, q).per_task_macs;
    CHECK(now > prev);
    prev = now;
  }
}

TEST_CASE("report serialization") {
  CostQuery q;
  q.tasks = 10;
  const CostReport r = cost_report(ViTConfig::vit_b16(), q);
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["total_macs"] == r.total_macs);
  CHECK(j["trainable_breakdown"]["selectors"] == 10 * 20 * 768);
  CHECK(CostReport::csv_header().find("total_gmacs") != std::string::npos);
  CHECK(r.csv_row().find("34.68") != std::string::npos);
}
