#pragma once

#include "multilane/precision.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

/// Σ precision@rank over the positives / number of positives, ranking by
/// descending score with ties kept in original index order. Empty when there
/// is no positive label.
std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> labels);

struct F1Scores {
  double cf1 = 0;  // mean of per-class F1
  double of1 = 0;  // F1 of the pooled confusion counts
  std::vector<double> per_class;
};

/// `predictions` and `labels` are row-major [N×K]. A class with no positives
/// and no predictions scores 0.
F1Scores f1_suite(std::span<const std::uint8_t> predictions,
                  std::span<const std::uint8_t> labels, std::size_t num_classes);

struct EvalReport {
  std::size_t step = 0;
  std::vector<std::size_t> classes;                // evaluated class ids
  std::vector<std::optional<double>> class_ap;     // empty for classes without positives
  std::vector<double> class_f1;
  double map = 0;
  double cf1 = 0;
  double of1 = 0;
  std::optional<double> accuracy;  // CIL mode

  std::vector<std::size_t> skipped_classes() const;
  std::string to_json() const;
};

double mean_ap(const std::vector<std::optional<double>>& class_ap);
double avg_map(std::span<const EvalReport> history);

/// 1 when the argmax of `logits` (first index on ties) equals `label`.
int cil_hit(std::span<const double> logits, std::size_t label);
double cil_accuracy(std::span<const double> logits, std::span<const std::size_t> labels,
                    std::size_t num_classes);

/// One CSV row per report: step,map,cf1,of1,accuracy.
std::string reports_csv(std::span<const EvalReport> history);
std::string reports_json(std::span<const EvalReport> history);

/// Builds an EvalReport from scores [N×K] and labels [N×K] over `classes`.
EvalReport make_report(std::size_t step, const std::vector<std::size_t>& classes,
                       std::span<const double> scores, std::span<const std::uint8_t> labels,
                       double threshold);

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
