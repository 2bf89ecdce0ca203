#pragma once

#include "multilane/precision.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "multilane/metrics.hpp"
#include "multilane/pathway.hpp"
#include "multilane/protocol.hpp"
#include "multilane/tensor.hpp"
#include "multilane/vit.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

/// Mean binary cross-entropy over the task's classes with probabilities
/// clamped to [eps, 1 - eps].
Tensor bce_loss(const Tensor& logits, std::span<const std::uint8_t> targets,
                Real eps = Real(1e-7));

struct AdamMoments {
  std::vector<std::vector<Real>> m, v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of every tensor in `params` from its
/// accumulated gradient (a tensor without a gradient counts as zero).
void adam_step(std::span<Tensor> params, AdamMoments& moments, Real lr, Real beta1 = Real(0.9),
               Real beta2 = Real(0.999), Real eps = Real(1e-8));

/// lr_init · ½(1 + cos(π · step / total_steps)); lr_init when total_steps is 0.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_init);

struct TrainConfig {
  double lr_init = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::size_t selectors = 4;      // L_s
  std::size_t prompt_length = 4;  // L_p rows per prompted layer
  double threshold = 0.8;         // decision boundary for CF1/OF1
  std::uint64_t seed = 0;
  std::size_t tome_max_len = 30;

  bool no_norm = false;
  bool single_pathway_querykey = false;
  bool no_drop_replace = false;
  bool use_tome = false;
  // Baseline: one shared pathway fine-tuned on every task; its head grows by
  // the new classes and unlabeled old classes are trained as negatives.
  bool shared_pathway_finetune = false;

  // 0 runs everything on the calling thread.
  std::size_t threads = 0;

  void validate() const;
  ForwardOptions forward_options() const;
  PathwayInit pathway_init() const;
};

struct LogRecord {
  std::size_t step;
  std::size_t task;
  double loss;
  double lr;
};

/// Taps of every image of a dataset, computed once: the backbone is frozen and
/// deterministic, so they are identical on every epoch.
struct TapCache {
  std::vector<FrozenTaps> taps;
  static TapCache build(const Dataset& data, const BackboneWeights& weights,
                        std::size_t threads = 0);
};

struct LearnerState {
  std::shared_ptr<const BackboneWeights> weights;
  std::vector<TaskPathway> completed;
  std::optional<TaskPathway> current;
  std::optional<AdamMoments> optimizer;
  std::size_t step = 0;

  /// Tasks trained so far (the shared-pathway baseline counts tasks rather
  /// than pathways).
  std::size_t tasks_done = 0;

  Archive to_archive() const;
  static LearnerState from_archive(const Archive& archive,
                                   std::shared_ptr<const BackboneWeights> weights);
};

using LogSink = std::function<void(const LogRecord&)>;

/// Trains task `t` of the benchmark and freezes its pathway. `taps` must cache
/// the benchmark's training set. Throws ProtocolError when t is not the next
/// untrained task.
void train_task(LearnerState& state, const MLCILBenchmark& benchmark, std::size_t t,
                const TrainConfig& config, const TapCache& taps, const LogSink& log = {});

/// Scores every test image with the completed pathways, restricted to the
/// classes seen up to task t.
EvalReport evaluate(const LearnerState& state, const MLCILBenchmark& benchmark, std::size_t t,
                    const TrainConfig& config, const TapCache& test_taps);

/// Logits over `classes` for one image; classes no pathway scores receive
/// kMaskedLogit.
std::vector<Real> score_image(const LearnerState& state, const FrozenTaps& taps,
                              const std::vector<std::size_t>& classes, const TrainConfig& config);

struct History {
  std::vector<EvalReport> reports;
  LearnerState state;
};

/// Trains every task in order, evaluating after each one.
History run_incremental(const MLCILBenchmark& benchmark,
                        std::shared_ptr<const BackboneWeights> weights, const TrainConfig& config,
                        const LogSink& log = {});

/// Calls fn(i) for i in [0, n), split over up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
