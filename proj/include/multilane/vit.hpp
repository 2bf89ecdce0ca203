#pragma once

#include "multilane/precision.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "multilane/archive.hpp"
#include "multilane/tensor.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

inline constexpr Real kLayerNormEps = Real(1e-6);

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t depth = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  // 1-based block indices that receive prefix prompts.
  std::vector<std::size_t> prompted_layers = {1, 2, 3, 4};

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t seq_len() const { return num_patches() + 1; }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t hidden_dim() const { return dim * mlp_ratio; }
  bool is_prompted(std::size_t layer) const;

  // Throws ConfigError describing the first violated constraint.
  void validate() const;

  static ViTConfig vit_b16();
  static ViTConfig desk();
};

struct BlockWeights {
  Tensor norm1_weight, norm1_bias;
  Tensor qkv_weight, qkv_bias;    // [D×3D], [3D]; columns ordered q | k | v
  Tensor proj_weight, proj_bias;  // W^O
  Tensor norm2_weight, norm2_bias;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

// All tensors are frozen (requires_grad = false) and never mutated after
// construction, so one instance may be shared across threads.
struct BackboneWeights {
  ViTConfig config;
  Tensor patch_weight;  // [C·p·p × D], rows ordered (channel, y, x)
  Tensor patch_bias;
  Tensor pos_embed;  // [(L+1)×D]
  Tensor cls_token;  // [1×D]
  std::vector<BlockWeights> blocks;
  Tensor norm_weight, norm_bias;

  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::size_t parameter_count() const;
  Archive to_archive() const;
};

/// Canonical entry names and extents, in archive order:
/// patch_embed.{weight,bias}, pos_embed, cls_token,
/// block.{i}.{norm1,qkv,proj,norm2,fc1,fc2}.{weight,bias} (i 0-based),
/// norm.{weight,bias}.
std::vector<std::pair<std::string, Shape>> weight_layout(const ViTConfig& config);

// Weights and positional embedding truncated normal, std 0.02; norms
// gamma 1 / beta 0; biases 0.
BackboneWeights random_init(const ViTConfig& config, std::uint64_t seed);
BackboneWeights weights_from_archive(const Archive& archive, const ViTConfig& config);
BackboneWeights load_weights(const std::filesystem::path& path, const ViTConfig& config);
void save_weights(const BackboneWeights& weights, const std::filesystem::path& path);

/// Largest permitted attention-score extents; msa throws when exceeded.
struct AttentionBound {
  std::size_t max_queries;
  std::size_t max_keys;
};

namespace diagnostics {
// Count of bounded attention computations performed in this process.
std::size_t attention_bound_checks();
// Count of bound violations observed (each also threw).
std::size_t attention_bound_violations();
}  // namespace diagnostics

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor block_mlp(const Tensor& x, const BlockWeights& block);

/// image [C×H×W] -> [(L+1)×D]: patches flattened and projected, class token
/// prepended, positional embedding added.
Tensor patch_embed(const Tensor& image, const BackboneWeights& weights);

/// Per-head scaled dot-product attention, scale 1/sqrt(D/heads), heads
/// concatenated back to width D. The output projection is left to callers.
Tensor msa(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
           const AttentionBound* bound = nullptr);

struct FrozenTaps {
  std::vector<Tensor> taps;  // per block: norm1 output [(L+1)×D], detached
  Tensor final_cls;          // [1×D], final norm applied
};

/// Gradient-free pre-norm pass recording each block's norm1 output.
FrozenTaps frozen_forward(const Tensor& image, const BackboneWeights& weights);

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
