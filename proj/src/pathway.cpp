#include "multilane/pathway.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "multilane/errors.hpp"
#include "multilane/random.hpp"
#include "multilane/summarize.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

namespace {

Tensor trainable_normal(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.mutable_values()) v = static_cast<Real>(rng.truncated_normal(0.02));
  t.set_requires_grad(true);
  return t;
}

Tensor trainable_fill(Shape shape, Real value) {
  Tensor t = Tensor::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> TaskPathway::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("cls", cls_token);
  if (selectors.defined()) out.emplace_back("selectors", selectors);
  for (const auto& [layer, p] : prompts.layers()) {
    out.emplace_back("prompt." + std::to_string(layer) + ".k", p.key);
    out.emplace_back("prompt." + std::to_string(layer) + ".v", p.value);
  }
  out.emplace_back("norm.weight", norm_weight);
  out.emplace_back("norm.bias", norm_bias);
  out.emplace_back("head.weight", head_weight);
  out.emplace_back("head.bias", head_bias);
  if (key.defined()) out.emplace_back("key", key);
  return out;
}

std::size_t TaskPathway::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

void TaskPathway::set_trainable(bool trainable) {
  for (auto& [name, t] : parameters()) {
    Tensor handle = t;
    handle.set_requires_grad(trainable);
    if (!trainable) handle.zero_grad();
  }
}

void TaskPathway::write(Archive& archive) const {
  const std::string prefix = "task." + std::to_string(task) + ".";
  for (const auto& [name, t] : parameters()) archive.put(prefix + name, t);
  std::vector<Real> ids(classes.begin(), classes.end());
  const std::size_t count = ids.size();
  archive.put(prefix + "classes", Tensor::from({count}, std::move(ids)));
}

TaskPathway TaskPathway::read(const Archive& archive, std::size_t task) {
  const std::string prefix = "task." + std::to_string(task) + ".";
  TaskPathway p;
  p.task = task;
  for (Real id : archive.get(prefix + "classes").values()) {
    p.classes.push_back(static_cast<std::size_t>(id));
  }
  p.cls_token = archive.get(prefix + "cls").clone();
  if (auto s = archive.find(prefix + "selectors")) p.selectors = s->clone();
  for (const auto& [name, t] : archive.entries()) {
    const std::string tag = prefix + "prompt.";
    if (name.rfind(tag, 0) != 0 || name.size() < 2 || name.substr(name.size() - 2) != ".k") {
      continue;
    }
    const std::string layer_text = name.substr(tag.size(), name.size() - tag.size() - 2);
    const std::size_t layer = std::stoul(layer_text);
    p.prompts.set(layer, {t.clone(), archive.get(prefix + "prompt." + layer_text + ".v").clone()});
  }
  p.norm_weight = archive.get(prefix + "norm.weight").clone();
  p.norm_bias = archive.get(prefix + "norm.bias").clone();
  p.head_weight = archive.get(prefix + "head.weight").clone();
  p.head_bias = archive.get(prefix + "head.bias").clone();
  if (auto k = archive.find(prefix + "key")) p.key = k->clone();
  if (p.head_weight.dim(1) != p.classes.size()) {
    throw LoadError("pathway " + std::to_string(task) + ": head has " +
                    std::to_string(p.head_weight.dim(1)) + " columns for " +
                    std::to_string(p.classes.size()) + " classes");
  }
  return p;
}

TaskPathway make_pathway(std::size_t task, std::vector<std::size_t> classes,
                         const BackboneWeights& weights, const PathwayInit& init) {
  const ViTConfig& c = weights.config;
  if (classes.empty()) throw ConfigError("pathway needs at least one class");
  if (init.selectors >= c.seq_len()) {
    throw ConfigError("selector count L_s=" + std::to_string(init.selectors) +
                      " must be smaller than the token count " + std::to_string(c.seq_len()));
  }
  Rng rng(mix_seed(init.seed, task));
  TaskPathway p;
  p.task = task;
  p.cls_token = weights.cls_token.clone();
  p.cls_token.set_requires_grad(true);
  if (init.selectors > 0) p.selectors = init_selectors(init.selectors, c.dim, rng.next());
  p.prompts = PromptPool::create(c.prompted_layers, init.prompt_length, c.dim, rng.next());
  p.norm_weight = trainable_fill({c.dim}, Real(1));
  p.norm_bias = trainable_fill({c.dim}, Real(0));
  p.head_weight = trainable_normal({c.dim, classes.size()}, rng);
  p.head_bias = trainable_fill({classes.size()}, Real(0));
  if (init.with_key) p.key = trainable_normal({c.dim}, rng);
  p.classes = std::move(classes);
  return p;
}

// ---------------------------------------------------------------------------

namespace {

struct Summarized {
  Tensor tokens;  // undefined when there is nothing to summarize into
  std::size_t bound_rows = 0;
};

Summarized summarize_tap(const TaskPathway& pathway, const Tensor& tap,
                         const ForwardOptions& options) {
  if (options.use_tome) {
    return {tome_summarize(tap, options.tome_max_len).tokens, options.tome_max_len};
  }
  if (pathway.selectors.defined()) {
    return {summarize(pathway.selectors, tap), pathway.selectors.dim(0)};
  }
  return {};
}

}  // namespace

Tensor task_forward(const TaskPathway& pathway, const FrozenTaps& taps,
                    const BackboneWeights& weights, const ForwardOptions& options) {
  const ViTConfig& c = weights.config;
  const std::size_t d = c.dim;
  if (taps.taps.size() != c.depth || weights.blocks.size() != c.depth) {
    throw ConfigError("task_forward: " + std::to_string(taps.taps.size()) + " taps for depth " +
                      std::to_string(c.depth));
  }
  for (const auto& [layer, p] : pathway.prompts.layers()) {
    if (layer < 1 || layer > c.depth) {
      throw ConfigError("task_forward: prompt for block " + std::to_string(layer) +
                        " outside depth " + std::to_string(c.depth));
    }
  }
  const std::size_t half_prompt = pathway.prompts.prompt_length() / 2;

  Tensor cls = add(pathway.cls_token, slice(weights.pos_embed, 0, 0, 1));
  Tensor stream;  // all rows, only without Drop & Replace
  for (std::size_t l = 0; l < c.depth; ++l) {
    const BlockWeights& block = weights.blocks[l];
    const LayerPrompt* prompt = pathway.prompts.find(l + 1);

    Tensor normed, residual;
    std::size_t summary_rows = 0;
    if (options.drop_replace || l == 0) {
      Summarized s = summarize_tap(pathway, taps.taps[l], options);
      summary_rows = s.bound_rows;
      Tensor cls_norm = layer_norm(cls, block.norm1_weight, block.norm1_bias, kLayerNormEps);
      normed = s.tokens.defined() ? concat({cls_norm, s.tokens}, 0) : cls_norm;
      residual = s.tokens.defined() ? concat({cls, s.tokens}, 0) : cls;
    } else {
      summary_rows = stream.dim(0) - 1;
      normed = layer_norm(stream, block.norm1_weight, block.norm1_bias, kLayerNormEps);
      residual = stream;
    }

    const AttentionBound bound{1 + summary_rows,
                               1 + summary_rows + (prompt != nullptr ? half_prompt : 0)};
    Tensor qkv = linear(normed, block.qkv_weight, block.qkv_bias);
    Tensor attn = prefix_msa(prompt, slice(qkv, 1, 0, d), slice(qkv, 1, d, 2 * d),
                             slice(qkv, 1, 2 * d, 3 * d), c.heads, &bound);

    if (options.drop_replace) {
      // Drop & Replace: summarized rows are discarded after attention.
      cls = add(cls, linear(slice(attn, 0, 0, 1), block.proj_weight, block.proj_bias));
      cls = add(cls, block_mlp(layer_norm(cls, block.norm2_weight, block.norm2_bias,
                                          kLayerNormEps),
                               block));
    } else {
      stream = add(residual, linear(attn, block.proj_weight, block.proj_bias));
      stream = add(stream, block_mlp(layer_norm(stream, block.norm2_weight, block.norm2_bias,
                                                kLayerNormEps),
                                     block));
      cls = slice(stream, 0, 0, 1);
    }
  }
  return layer_norm(cls, weights.norm_weight, weights.norm_bias, kLayerNormEps);
}

std::vector<Tensor> pathway_attention_maps(const TaskPathway& pathway, const FrozenTaps& taps) {
  if (!pathway.selectors.defined()) {
    throw ConfigError("pathway " + std::to_string(pathway.task) + " has no patch selectors");
  }
  std::vector<Tensor> maps;
  for (const auto& tap : taps.taps) maps.push_back(attention_map(pathway.selectors, tap));
  return maps;
}

Tensor classify(const TaskPathway& pathway, const Tensor& cls_out, bool pre_head_norm) {
  Tensor h = pre_head_norm
                 ? layer_norm(cls_out, pathway.norm_weight, pathway.norm_bias, kLayerNormEps)
                 : cls_out;
  Tensor logits = linear(h, pathway.head_weight, pathway.head_bias);
  return reshape(logits, {pathway.num_classes()});
}

void check_disjoint(std::span<const TaskPathway> pathways) {
  std::set<std::size_t> seen;
  for (const auto& p : pathways) {
    for (auto id : p.classes) {
      if (!seen.insert(id).second) {
        throw IntegrityError("class id " + std::to_string(id) +
                             " appears in more than one pathway");
      }
    }
  }
}

Logits infer(const FrozenTaps& taps, std::span<const TaskPathway> pathways,
             const BackboneWeights& weights, const ForwardOptions& options) {
  if (pathways.empty()) throw ContractError("infer: no pathways");
  check_disjoint(pathways);
  NoGradGuard no_grad;
  Logits out;
  for (const auto& p : pathways) {
    Tensor logits = classify(p, task_forward(p, taps, weights, options), options.pre_head_norm);
    const auto v = logits.values();
    out.values.insert(out.values.end(), v.begin(), v.end());
    out.class_ids.insert(out.class_ids.end(), p.classes.begin(), p.classes.end());
  }
  return out;
}

Logits infer(const Tensor& image, std::span<const TaskPathway> pathways,
             const BackboneWeights& weights, const ForwardOptions& options) {
  return infer(frozen_forward(image, weights), pathways, weights, options);
}

std::vector<std::uint8_t> predict(std::span<const Real> logits, Real threshold) {
  if (!(threshold > 0 && threshold < 1)) {
    throw ConfigError("prediction threshold must lie in (0, 1)");
  }
  std::vector<std::uint8_t> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Real p = Real(1) / (Real(1) + std::exp(-logits[i]));
    out[i] = p > threshold ? 1 : 0;
  }
  return out;
}

std::size_t select_by_key(std::span<const Real> query, std::span<const TaskPathway> pathways) {
  if (pathways.empty()) throw ContractError("select_by_key: no pathways");
  double qn = 0;
  for (Real v : query) qn += double(v) * double(v);
  qn = std::sqrt(qn);
  std::size_t best = 0;
  double best_score = -2.0;
  for (std::size_t t = 0; t < pathways.size(); ++t) {
    const Tensor& key = pathways[t].key;
    if (!key.defined()) {
      throw ContractError("querykey: pathway " + std::to_string(pathways[t].task) +
                          " has no key");
    }
    if (key.numel() != query.size()) {
      throw DimensionError("querykey: key width " + shape_string(key.shape()) + " vs query " +
                           std::to_string(query.size()));
    }
    double dot = 0, kn = 0;
    const auto kv = key.values();
    for (std::size_t i = 0; i < kv.size(); ++i) {
      dot += double(kv[i]) * double(query[i]);
      kn += double(kv[i]) * double(kv[i]);
    }
    const double denom = std::sqrt(kn) * qn;
    const double score = denom > 0 ? dot / denom : 0.0;
    if (score > best_score) {
      best_score = score;
      best = t;
    }
  }
  return best;
}

QueryKeySelection querykey_infer(const FrozenTaps& taps, std::span<const TaskPathway> pathways,
                                 const BackboneWeights& weights, const ForwardOptions& options) {
  check_disjoint(pathways);
  NoGradGuard no_grad;
  QueryKeySelection out;
  out.selected = select_by_key(taps.final_cls.values(), pathways);
  for (std::size_t t = 0; t < pathways.size(); ++t) {
    const auto& p = pathways[t];
    if (t == out.selected) {
      Tensor logits =
          classify(p, task_forward(p, taps, weights, options), options.pre_head_norm);
      const auto v = logits.values();
      out.logits.values.insert(out.logits.values.end(), v.begin(), v.end());
    } else {
      out.logits.values.insert(out.logits.values.end(), p.num_classes(), kMaskedLogit);
    }
    out.logits.class_ids.insert(out.logits.class_ids.end(), p.classes.begin(), p.classes.end());
  }
  return out;
}

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
