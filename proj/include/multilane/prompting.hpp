#pragma once

#include "multilane/precision.hpp"

#include <cstdint>
#include <utility>
#include <vector>

#include "multilane/tensor.hpp"
#include "multilane/vit.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

// Prefix rows for one prompted block: p_K and p_V, each [L_p/2 × D].
struct LayerPrompt {
  Tensor key;
  Tensor value;
};

/// One task's prompts, keyed by 1-based block index.
class PromptPool {
 public:
  PromptPool() = default;

  // Throws ConfigError when `prompt_length` is odd.
  static PromptPool create(const std::vector<std::size_t>& layers, std::size_t prompt_length,
                           std::size_t dim, std::uint64_t seed);

  const LayerPrompt* find(std::size_t layer) const;
  void set(std::size_t layer, LayerPrompt prompt);
  const std::vector<std::pair<std::size_t, LayerPrompt>>& layers() const { return layers_; }
  // L_p: total prefix rows of one layer (keys plus values).
  std::size_t prompt_length() const;
  bool empty() const { return layers_.empty(); }

 private:
  std::vector<std::pair<std::size_t, LayerPrompt>> layers_;
};

/// MSA(q, [p_K; k], [p_V; v]); queries are never extended, so the output has
/// as many rows as `q`. A null prompt reduces to plain msa.
Tensor prefix_msa(const LayerPrompt* prompt, const Tensor& q, const Tensor& k, const Tensor& v,
                  std::size_t heads, const AttentionBound* bound = nullptr);

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
