#include "multilane/costs.hpp"

#include <cstdio>

#include <nlohmann/json.hpp>

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

std::uint64_t block_stack_macs(const ViTConfig& c, std::uint64_t rows) {
  const std::uint64_t d = c.dim, h = c.hidden_dim();
  const std::uint64_t per_row = d * 3 * d + d * d + d * h + h * d;
  return rows * per_row * c.depth;
}

std::uint64_t patch_embed_macs(const ViTConfig& c) {
  return static_cast<std::uint64_t>(c.num_patches()) * c.patch_dim() * c.dim;
}

std::uint64_t backbone_parameter_count(const ViTConfig& config) {
  std::uint64_t n = 0;
  for (const auto& [name, shape] : weight_layout(config)) n += shape_numel(shape);
  return n;
}

CostReport count_macs(const ViTConfig& c, const CostQuery& q) {
  c.validate();
  CostReport r;
  const std::uint64_t t = q.tasks;
  r.head_macs = t * c.dim * q.classes_per_task;
  const std::uint64_t full = patch_embed_macs(c) + block_stack_macs(c, c.seq_len());
  if (q.naive) {
    r.frozen_macs = 0;
    r.per_task_macs = full;
  } else {
    r.frozen_macs = full;
    r.per_task_macs = block_stack_macs(c, 1 + q.selectors);
  }
  r.total_macs = r.frozen_macs + t * r.per_task_macs + r.head_macs;
  r.backbone_params = backbone_parameter_count(c);
  return r;
}

CostReport count_params(const ViTConfig& c, const CostQuery& q) {
  c.validate();
  CostReport r;
  const std::uint64_t t = q.tasks, d = c.dim;
  r.backbone_params = backbone_parameter_count(c);
  r.param_breakdown = {
      {"selectors", t * q.selectors * d},
      {"cls_tokens", t * d},
      {"prompts", t * c.prompted_layers.size() * q.prompt_length * d},
      {"pre_head_norms", t * 2 * d},
      {"heads", t * (d * q.classes_per_task + q.classes_per_task)},
  };
  if (q.with_keys) r.param_breakdown.emplace_back("keys", t * d);
  for (const auto& [name, n] : r.param_breakdown) r.trainable_params += n;
  return r;
}

CostReport cost_report(const ViTConfig& config, const CostQuery& query) {
  CostReport r = count_macs(config, query);
  const CostReport p = count_params(config, query);
  r.trainable_params = p.trainable_params;
  r.param_breakdown = p.param_breakdown;
  return r;
}

std::string CostReport::to_json() const {
  nlohmann::ordered_json j;
  j["frozen_macs"] = frozen_macs;
  j["per_task_macs"] = per_task_macs;
  j["head_macs"] = head_macs;
  j["total_macs"] = total_macs;
  j["total_gmacs"] = total_gmacs();
  j["backbone_params"] = backbone_params;
  j["trainable_params"] = trainable_params;
  auto& parts = j["trainable_breakdown"] = nlohmann::ordered_json::object();
  for (const auto& [name, n] : param_breakdown) parts[name] = n;
  return j.dump(2);
}

std::string CostReport::csv_header() {
  return "frozen_macs,per_task_macs,head_macs,total_macs,total_gmacs,backbone_params,"
         "trainable_params";
}

std::string CostReport::csv_row() const {
  char gmacs[32];
  std::snprintf(gmacs, sizeof gmacs, "%.4f", total_gmacs());
  return std::to_string(frozen_macs) + "," + std::to_string(per_task_macs) + "," +
         std::to_string(head_macs) + "," + std::to_string(total_macs) + "," + gmacs + "," +
         std::to_string(backbone_params) + "," + std::to_string(trainable_params);
}

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
