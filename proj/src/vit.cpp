#include "multilane/vit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "multilane/errors.hpp"
#include "multilane/random.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

bool ViTConfig::is_prompted(std::size_t layer) const {
  return std::find(prompted_layers.begin(), prompted_layers.end(), layer) !=
         prompted_layers.end();
}

void ViTConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || channels == 0 || depth == 0 || dim == 0 ||
      heads == 0 || mlp_ratio == 0) {
    throw ConfigError("vit: all extents must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("vit.image_size (" + std::to_string(image_size) +
                      ") must be divisible by vit.patch_size (" + std::to_string(patch_size) +
                      ")");
  }
  if (dim % heads != 0) {
    throw ConfigError("vit.dim (" + std::to_string(dim) + ") must be divisible by vit.heads (" +
                      std::to_string(heads) + ")");
  }
  for (auto layer : prompted_layers) {
    if (layer < 1 || layer > depth) {
      throw ConfigError("vit.prompted_layers: layer " + std::to_string(layer) +
                        " outside 1.." + std::to_string(depth));
    }
  }
}

ViTConfig ViTConfig::vit_b16() {
  ViTConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.channels = 3;
  c.depth = 12;
  c.dim = 768;
  c.heads = 12;
  c.mlp_ratio = 4;
  c.prompted_layers = {1, 2, 3, 4, 5};
  return c;
}

ViTConfig ViTConfig::desk() { return ViTConfig{}; }

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, Shape>> weight_layout(const ViTConfig& c) {
  c.validate();
  const std::size_t d = c.dim, h = c.hidden_dim();
  std::vector<std::pair<std::string, Shape>> layout = {
      {"patch_embed.weight", {c.patch_dim(), d}},
      {"patch_embed.bias", {d}},
      {"pos_embed", {c.seq_len(), d}},
      {"cls_token", {1, d}},
  };
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::string p = "block." + std::to_string(i) + ".";
    layout.push_back({p + "norm1.weight", {d}});
    layout.push_back({p + "norm1.bias", {d}});
    layout.push_back({p + "qkv.weight", {d, 3 * d}});
    layout.push_back({p + "qkv.bias", {3 * d}});
    layout.push_back({p + "proj.weight", {d, d}});
    layout.push_back({p + "proj.bias", {d}});
    layout.push_back({p + "norm2.weight", {d}});
    layout.push_back({p + "norm2.bias", {d}});
    layout.push_back({p + "fc1.weight", {d, h}});
    layout.push_back({p + "fc1.bias", {h}});
    layout.push_back({p + "fc2.weight", {h, d}});
    layout.push_back({p + "fc2.bias", {d}});
  }
  layout.push_back({"norm.weight", {d}});
  layout.push_back({"norm.bias", {d}});
  return layout;
}

std::vector<std::pair<std::string, Tensor>> BackboneWeights::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out = {
      {"patch_embed.weight", patch_weight},
      {"patch_embed.bias", patch_bias},
      {"pos_embed", pos_embed},
      {"cls_token", cls_token},
  };
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block." + std::to_string(i) + ".";
    const auto& b = blocks[i];
    out.push_back({p + "norm1.weight", b.norm1_weight});
    out.push_back({p + "norm1.bias", b.norm1_bias});
    out.push_back({p + "qkv.weight", b.qkv_weight});
    out.push_back({p + "qkv.bias", b.qkv_bias});
    out.push_back({p + "proj.weight", b.proj_weight});
    out.push_back({p + "proj.bias", b.proj_bias});
    out.push_back({p + "norm2.weight", b.norm2_weight});
    out.push_back({p + "norm2.bias", b.norm2_bias});
    out.push_back({p + "fc1.weight", b.fc1_weight});
    out.push_back({p + "fc1.bias", b.fc1_bias});
    out.push_back({p + "fc2.weight", b.fc2_weight});
    out.push_back({p + "fc2.bias", b.fc2_bias});
  }
  out.push_back({"norm.weight", norm_weight});
  out.push_back({"norm.bias", norm_bias});
  return out;
}

std::size_t BackboneWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += t.numel();
  return n;
}

Archive BackboneWeights::to_archive() const {
  Archive archive;
  for (auto& [name, t] : named_tensors()) archive.put(name, t);
  return archive;
}

namespace {

// Binds the tensors of `lookup` (name -> Tensor) into a BackboneWeights.
template <typename Lookup>
BackboneWeights assemble(const ViTConfig& config, Lookup&& lookup) {
  BackboneWeights w;
  w.config = config;
  w.patch_weight = lookup("patch_embed.weight");
  w.patch_bias = lookup("patch_embed.bias");
  w.pos_embed = lookup("pos_embed");
  w.cls_token = lookup("cls_token");
  w.blocks.resize(config.depth);
  for (std::size_t i = 0; i < config.depth; ++i) {
    const std::string p = "block." + std::to_string(i) + ".";
    auto& b = w.blocks[i];
    b.norm1_weight = lookup(p + "norm1.weight");
    b.norm1_bias = lookup(p + "norm1.bias");
    b.qkv_weight = lookup(p + "qkv.weight");
    b.qkv_bias = lookup(p + "qkv.bias");
    b.proj_weight = lookup(p + "proj.weight");
    b.proj_bias = lookup(p + "proj.bias");
    b.norm2_weight = lookup(p + "norm2.weight");
    b.norm2_bias = lookup(p + "norm2.bias");
    b.fc1_weight = lookup(p + "fc1.weight");
    b.fc1_bias = lookup(p + "fc1.bias");
    b.fc2_weight = lookup(p + "fc2.weight");
    b.fc2_bias = lookup(p + "fc2.bias");
  }
  w.norm_weight = lookup("norm.weight");
  w.norm_bias = lookup("norm.bias");
  return w;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

BackboneWeights random_init(const ViTConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::pair<std::string, Tensor>> made;
  for (const auto& [name, shape] : weight_layout(config)) {
    Tensor t = Tensor::zeros(shape);
    auto v = t.mutable_values();
    const bool is_norm = name.find("norm") != std::string::npos;
    if (is_norm && ends_with(name, ".weight")) {
      std::fill(v.begin(), v.end(), Real(1));
    } else if (!is_norm && !ends_with(name, ".bias")) {
      for (auto& x : v) x = static_cast<Real>(rng.truncated_normal(0.02));
    }
    made.emplace_back(name, t);
  }
  return assemble(config, [&](const std::string& name) {
    for (auto& [key, t] : made) {
      if (key == name) return t;
    }
    throw LoadError("random_init: internal layout error at '" + name + "'");
  });
}

BackboneWeights weights_from_archive(const Archive& archive, const ViTConfig& config) {
  std::vector<std::pair<std::string, Shape>> layout = weight_layout(config);
  return assemble(config, [&](const std::string& name) {
    auto it = std::find_if(layout.begin(), layout.end(),
                           [&](const auto& e) { return e.first == name; });
    Tensor t = archive.get(name, it->second);
    return t.clone();
  });
}

BackboneWeights load_weights(const std::filesystem::path& path, const ViTConfig& config) {
  return weights_from_archive(Archive::load(path), config);
}

void save_weights(const BackboneWeights& weights, const std::filesystem::path& path) {
  weights.to_archive().save(path);
}

// ---------------------------------------------------------------------------

namespace {
std::atomic<std::size_t> g_bound_checks{0};
std::atomic<std::size_t> g_bound_violations{0};
}  // namespace

namespace diagnostics {
std::size_t attention_bound_checks() { return g_bound_checks.load(); }
std::size_t attention_bound_violations() { return g_bound_violations.load(); }
}  // namespace diagnostics

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_row(matmul(x, weight), bias);
}

Tensor block_mlp(const Tensor& x, const BlockWeights& block) {
  return linear(gelu(linear(x, block.fc1_weight, block.fc1_bias)), block.fc2_weight,
                block.fc2_bias);
}

Tensor patch_embed(const Tensor& image, const BackboneWeights& weights) {
  const ViTConfig& c = weights.config;
  if (image.rank() != 3 || image.dim(0) != c.channels || image.dim(1) != c.image_size ||
      image.dim(2) != c.image_size) {
    throw DimensionError("patch_embed: image " + shape_string(image.shape()) + ", expected " +
                         shape_string({c.channels, c.image_size, c.image_size}));
  }
  const std::size_t p = c.patch_size, grid = c.grid(), side = c.image_size;
  const auto px = image.values();
  std::vector<Real> patches(c.num_patches() * c.patch_dim());
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      Real* row = patches.data() + (gy * grid + gx) * c.patch_dim();
      for (std::size_t ch = 0; ch < c.channels; ++ch) {
        for (std::size_t dy = 0; dy < p; ++dy) {
          for (std::size_t dx = 0; dx < p; ++dx) {
            row[(ch * p + dy) * p + dx] =
                px[(ch * side + gy * p + dy) * side + gx * p + dx];
          }
        }
      }
    }
  }
  Tensor flat = Tensor::from({c.num_patches(), c.patch_dim()}, std::move(patches));
  Tensor tokens = linear(flat, weights.patch_weight, weights.patch_bias);
  return add(concat({weights.cls_token, tokens}, 0), weights.pos_embed);
}

Tensor msa(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
           const AttentionBound* bound) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError("msa: q/k/v must be rank 2");
  }
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d) {
    throw DimensionError("msa: widths differ " + shape_string(q.shape()) + " " +
                         shape_string(k.shape()) + " " + shape_string(v.shape()));
  }
  if (k.dim(0) != v.dim(0)) {
    throw DimensionError("msa: key/value lengths differ " + shape_string(k.shape()) + " vs " +
                         shape_string(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("msa: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (bound != nullptr) {
    ++g_bound_checks;
    if (q.dim(0) > bound->max_queries || k.dim(0) > bound->max_keys) {
      ++g_bound_violations;
      throw std::logic_error("attention score matrix " + std::to_string(q.dim(0)) + "x" +
                             std::to_string(k.dim(0)) + " exceeds bound " +
                             std::to_string(bound->max_queries) + "x" +
                             std::to_string(bound->max_keys));
    }
  }
  const std::size_t hd = d / heads;
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(hd));
  auto attend = [&](const Tensor& qh, const Tensor& kh, const Tensor& vh) {
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    return matmul(softmax(scores, -1), vh);
  };
  if (heads == 1) return attend(q, k, v);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    outs.push_back(attend(slice(q, 1, h * hd, (h + 1) * hd), slice(k, 1, h * hd, (h + 1) * hd),
                          slice(v, 1, h * hd, (h + 1) * hd)));
  }
  return concat(outs, 1);
}

FrozenTaps frozen_forward(const Tensor& image, const BackboneWeights& weights) {
  NoGradGuard no_grad;
  const ViTConfig& c = weights.config;
  const std::size_t d = c.dim;
  FrozenTaps out;
  out.taps.reserve(c.depth);
  Tensor x = patch_embed(image, weights);
  for (const auto& block : weights.blocks) {
    Tensor g = layer_norm(x, block.norm1_weight, block.norm1_bias, kLayerNormEps);
    out.taps.push_back(detach(g));
    Tensor qkv = linear(g, block.qkv_weight, block.qkv_bias);
    Tensor attn = msa(slice(qkv, 1, 0, d), slice(qkv, 1, d, 2 * d), slice(qkv, 1, 2 * d, 3 * d),
                      c.heads);
    x = add(x, linear(attn, block.proj_weight, block.proj_bias));
    x = add(x, block_mlp(layer_norm(x, block.norm2_weight, block.norm2_bias, kLayerNormEps),
                         block));
  }
  out.final_cls =
      detach(layer_norm(slice(x, 0, 0, 1), weights.norm_weight, weights.norm_bias, kLayerNormEps));
  return out;
}

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
