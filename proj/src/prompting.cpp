#include "multilane/prompting.hpp"

#include "multilane/errors.hpp"
#include "multilane/random.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

PromptPool PromptPool::create(const std::vector<std::size_t>& layers, std::size_t prompt_length,
                              std::size_t dim, std::uint64_t seed) {
  if (prompt_length % 2 != 0) {
    throw ConfigError("prompt length L_p must be even, got " + std::to_string(prompt_length));
  }
  PromptPool pool;
  if (prompt_length == 0) return pool;
  Rng rng(seed);
  const std::size_t half = prompt_length / 2;
  for (std::size_t layer : layers) {
    LayerPrompt p{Tensor::zeros({half, dim}), Tensor::zeros({half, dim})};
    for (auto* t : {&p.key, &p.value}) {
      for (auto& v : t->mutable_values()) v = static_cast<Real>(rng.truncated_normal(0.02));
      t->set_requires_grad(true);
    }
    pool.layers_.emplace_back(layer, std::move(p));
  }
  return pool;
}

const LayerPrompt* PromptPool::find(std::size_t layer) const {
  for (const auto& [l, p] : layers_) {
    if (l == layer) return &p;
  }
  return nullptr;
}

void PromptPool::set(std::size_t layer, LayerPrompt prompt) {
  if (prompt.key.shape() != prompt.value.shape()) {
    throw DimensionError("prompt key/value shapes differ: " + shape_string(prompt.key.shape()) +
                         " vs " + shape_string(prompt.value.shape()));
  }
  for (auto& [l, p] : layers_) {
    if (l == layer) {
      p = std::move(prompt);
      return;
    }
  }
  layers_.emplace_back(layer, std::move(prompt));
}

std::size_t PromptPool::prompt_length() const {
  return layers_.empty() ? 0 : 2 * layers_.front().second.key.dim(0);
}

Tensor prefix_msa(const LayerPrompt* prompt, const Tensor& q, const Tensor& k, const Tensor& v,
                  std::size_t heads, const AttentionBound* bound) {
  if (prompt == nullptr) return msa(q, k, v, heads, bound);
  if (prompt->key.dim(1) != k.dim(1) || prompt->value.dim(1) != v.dim(1)) {
    throw DimensionError("prefix_msa: prompt width " + shape_string(prompt->key.shape()) +
                         " vs keys " + shape_string(k.shape()));
  }
  return msa(q, concat({prompt->key, k}, 0), concat({prompt->value, v}, 0), heads, bound);
}

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
