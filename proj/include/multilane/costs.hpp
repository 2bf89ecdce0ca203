#pragma once

#include "multilane/precision.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "multilane/vit.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

/// Pathway geometry for the accountant.
struct CostQuery {
  std::size_t tasks = 0;              // T
  std::size_t selectors = 20;         // L_s
  std::size_t prompt_length = 20;     // L_p rows per prompted layer
  std::size_t classes_per_task = 10;  // c
  bool with_keys = false;             // query-key ablation adds T·D
  // T independent full-length forwards (each with its own stem) instead of
  // one frozen forward plus T summarized task forwards.
  bool naive = false;
};

/// MAC counts cover parameterized linear maps only: patch embedding, fused
/// qkv, attention output projection, both MLP linears and classifier heads.
/// Attention score/value products, normalizations and summarization sums are
/// excluded; prompt rows add no MACs since they bypass qkv.
struct CostReport {
  std::uint64_t frozen_macs = 0;
  std::uint64_t per_task_macs = 0;  // excludes the head
  std::uint64_t head_macs = 0;      // all T heads
  std::uint64_t total_macs = 0;
  std::uint64_t backbone_params = 0;
  std::uint64_t trainable_params = 0;
  std::vector<std::pair<std::string, std::uint64_t>> param_breakdown;

  double total_gmacs() const { return static_cast<double>(total_macs) * 1e-9; }
  std::string to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

/// MACs of `rows` tokens through every block's parameterized linears.
std::uint64_t block_stack_macs(const ViTConfig& config, std::uint64_t rows);
std::uint64_t patch_embed_macs(const ViTConfig& config);
std::uint64_t backbone_parameter_count(const ViTConfig& config);

CostReport count_macs(const ViTConfig& config, const CostQuery& query);
CostReport count_params(const ViTConfig& config, const CostQuery& query);
// Both counts in one report.
CostReport cost_report(const ViTConfig& config, const CostQuery& query);

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
