#pragma once

#include "multilane/precision.hpp"

#include <cstdint>
#include <memory>
#include <vector>

#include "multilane/archive.hpp"
#include "multilane/tensor.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

struct TaskSpec {
  std::size_t index = 0;  // 0-based position in the incremental sequence
  std::vector<std::size_t> classes;
};

struct LabeledImage {
  Tensor image;                      // [C×H×W]
  std::vector<std::uint8_t> labels;  // full label vector, one entry per class
};

struct Dataset {
  std::size_t num_classes = 0;
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::vector<LabeledImage> items;

  std::size_t size() const { return items.size(); }
  std::vector<std::size_t> class_counts() const;

  // "images" [N×C×H×W] and "labels" [N×K].
  Archive to_archive() const;
  static Dataset from_archive(const Archive& archive);
};

/// Read-only cursor over a dataset that exposes only the labels of one task.
/// Images without a positive class of the task are kept as all-negative
/// samples.
class TaskView {
 public:
  TaskView(std::shared_ptr<const Dataset> data, TaskSpec spec);

  std::size_t size() const { return data_->size(); }
  const TaskSpec& spec() const { return spec_; }
  const Tensor& image(std::size_t i) const { return data_->items[i].image; }
  std::vector<std::uint8_t> labels(std::size_t i) const;
  const Dataset& dataset() const { return *data_; }

 private:
  std::shared_ptr<const Dataset> data_;
  TaskSpec spec_;
};

TaskView task_view(std::shared_ptr<const Dataset> data, const TaskSpec& spec);

// Projection of a full label vector onto `classes` (in list order).
std::vector<std::uint8_t> project_labels(const std::vector<std::uint8_t>& labels,
                                         const std::vector<std::size_t>& classes);

struct MLCILBenchmark {
  std::size_t total_classes = 0;
  std::vector<std::size_t> class_order;
  std::vector<TaskSpec> tasks;
  std::shared_ptr<const Dataset> train;
  std::shared_ptr<const Dataset> test;

  std::size_t num_tasks() const { return tasks.size(); }
  // ∪_{u<=t} Y^u in task order.
  std::vector<std::size_t> seen_classes(std::size_t t) const;
  TaskView train_view(std::size_t t) const;
  TaskView test_view(std::size_t t) const;
};

/// Splits `total` classes, permuted by `class_order_seed`, into a first task
/// of `base` classes (or `increment` when base is 0) followed by tasks of
/// `increment` classes. Throws ConfigError when the split is not exact.
MLCILBenchmark make_benchmark(std::size_t total, std::size_t base, std::size_t increment,
                              std::uint64_t class_order_seed);

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t classes = 20;
  std::size_t images = 1000;
  std::size_t max_objects = 3;
  double tail_exponent = 0.0;
  std::size_t image_size = 32;
  std::size_t stamp_size = 8;
  std::size_t channels = 3;
  double background = 0.2;  // background pixels uniform in [0, background)
  double noise = 0.05;      // stamp pixels perturbed uniformly within ±noise
};

/// Per-class presence probability before the count constraints are applied:
/// p_k ∝ (k+1)^(−tail_exponent), scaled so the expected count is
/// (1 + max_objects) / 2 and capped at 0.9.
std::vector<double> presence_probabilities(const SynthConfig& config);

/// Deterministic visual token of class k: [C × stamp × stamp].
Tensor class_template(std::size_t k, std::size_t stamp_size, std::size_t channels);

/// Multi-label scenes: every positive class is stamped once into its own cell
/// of the stamp-sized grid. Each image has between 1 and max_objects
/// positives. Deterministic per seed.
Dataset synth_generate(const SynthConfig& config);

/// Class ids whose template is found in `image` by exhaustive sliding-window
/// matching (mean squared error below `tolerance`).
std::vector<std::size_t> detect_templates(const Tensor& image, std::size_t classes,
                                          std::size_t stamp_size, double tolerance);

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
