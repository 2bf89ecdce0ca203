#pragma once

#include "multilane/precision.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "multilane/archive.hpp"
#include "multilane/prompting.hpp"
#include "multilane/tensor.hpp"
#include "multilane/vit.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

/// Logits whose sigmoid is exactly 0 in either precision; used for classes a
/// forward pass did not score.
inline constexpr Real kMaskedLogit = Real(-1e9);

struct PathwayInit {
  std::size_t selectors = 4;      // L_s; 0 leaves the selector matrix undefined
  std::size_t prompt_length = 4;  // L_p rows per prompted layer
  std::uint64_t seed = 0;
  bool with_key = false;          // query-key ablation
};

/// One task's trainable bundle. Tensors are handles: copying a pathway
/// shares parameters.
struct TaskPathway {
  std::size_t task = 0;
  std::vector<std::size_t> classes;
  Tensor cls_token;  // [1×D] initialized from the pre-trained class token
  Tensor selectors;  // [L_s×D]
  PromptPool prompts;
  Tensor norm_weight, norm_bias;  // pre-head normalization
  Tensor head_weight, head_bias;  // [D×|Y^t|], [|Y^t|]
  Tensor key;                     // [D], query-key ablation only

  std::size_t num_classes() const { return classes.size(); }
  std::size_t num_selectors() const { return selectors.defined() ? selectors.dim(0) : 0; }

  // Parameter groups, named relative to the pathway ("cls", "selectors",
  // "prompt.{l}.k", "prompt.{l}.v", "norm.weight", ..., "key").
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::size_t parameter_count() const;
  void set_trainable(bool trainable);

  // Stores every tensor under "task.{t}." plus "task.{t}.classes".
  void write(Archive& archive) const;
  static TaskPathway read(const Archive& archive, std::size_t task);
};

TaskPathway make_pathway(std::size_t task, std::vector<std::size_t> classes,
                         const BackboneWeights& weights, const PathwayInit& init);

struct ForwardOptions {
  bool drop_replace = true;
  bool use_tome = false;
  std::size_t tome_max_len = 30;
  bool pre_head_norm = true;
};

/// Task forward over shared frozen taps: per block the class state attends to
/// [norm1(c); summarize(g^(l))] (plus prefix prompts on prompted blocks), only
/// the class row survives, and the frozen block tail updates it.
Tensor task_forward(const TaskPathway& pathway, const FrozenTaps& taps,
                    const BackboneWeights& weights, const ForwardOptions& options = {});

/// Per-block α of the pathway's selectors against the frozen taps.
std::vector<Tensor> pathway_attention_maps(const TaskPathway& pathway, const FrozenTaps& taps);

/// logits [|Y^t|] = head(layer_norm(cls_out)); the norm is skipped when
/// `pre_head_norm` is false.
Tensor classify(const TaskPathway& pathway, const Tensor& cls_out, bool pre_head_norm = true);

struct Logits {
  std::vector<Real> values;
  std::vector<std::size_t> class_ids;
};

/// Task-agnostic inference: every pathway scores the same taps; logits are
/// concatenated in pathway order. Throws IntegrityError on overlapping
/// class lists.
Logits infer(const FrozenTaps& taps, std::span<const TaskPathway> pathways,
             const BackboneWeights& weights, const ForwardOptions& options = {});
Logits infer(const Tensor& image, std::span<const TaskPathway> pathways,
             const BackboneWeights& weights, const ForwardOptions& options = {});

/// Positive iff sigmoid(logit) > threshold (strict).
std::vector<std::uint8_t> predict(std::span<const Real> logits, Real threshold = Real(0.5));

struct QueryKeySelection {
  Logits logits;
  std::size_t selected = 0;  // index into the pathway list
};

/// Index of the key with the highest cosine similarity to `query`; ties go to
/// the lower index.
std::size_t select_by_key(std::span<const Real> query, std::span<const TaskPathway> pathways);

/// Single-pathway ablation: only the pathway whose key best matches the frozen
/// class embedding runs; all other classes receive kMaskedLogit.
QueryKeySelection querykey_infer(const FrozenTaps& taps, std::span<const TaskPathway> pathways,
                                 const BackboneWeights& weights,
                                 const ForwardOptions& options = {});

void check_disjoint(std::span<const TaskPathway> pathways);

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
