#include "multilane/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "multilane/errors.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("average_precision: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

F1Scores f1_suite(std::span<const std::uint8_t> predictions,
                  std::span<const std::uint8_t> labels, std::size_t num_classes) {
  if (predictions.size() != labels.size() || num_classes == 0 ||
      labels.size() % num_classes != 0) {
    throw DimensionError("f1_suite: predictions/labels shapes disagree");
  }
  const std::size_t n = labels.size() / num_classes;
  auto f1 = [](std::size_t tp, std::size_t fp, std::size_t fn) {
    const std::size_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  };
  F1Scores out;
  std::size_t tp_all = 0, fp_all = 0, fn_all = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool p = predictions[i * num_classes + k] != 0;
      const bool y = labels[i * num_classes + k] != 0;
      tp += p && y;
      fp += p && !y;
      fn += !p && y;
    }
    out.per_class.push_back(f1(tp, fp, fn));
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
  }
  out.cf1 = std::accumulate(out.per_class.begin(), out.per_class.end(), 0.0) /
            static_cast<double>(num_classes);
  out.of1 = f1(tp_all, fp_all, fn_all);
  return out;
}

double mean_ap(const std::vector<std::optional<double>>& class_ap) {
  double sum = 0;
  std::size_t count = 0;
  for (const auto& ap : class_ap) {
    if (ap) {
      sum += *ap;
      ++count;
    }
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

double avg_map(std::span<const EvalReport> history) {
  if (history.empty()) throw ContractError("avg_map: empty history");
  double sum = 0;
  for (const auto& r : history) sum += r.map;
  return sum / static_cast<double>(history.size());
}

int cil_hit(std::span<const double> logits, std::size_t label) {
  if (logits.empty()) throw ContractError("cil_hit: no logits");
  const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
  return static_cast<std::size_t>(best) == label ? 1 : 0;
}

double cil_accuracy(std::span<const double> logits, std::span<const std::size_t> labels,
                    std::size_t num_classes) {
  if (labels.empty() || logits.size() != labels.size() * num_classes) {
    throw DimensionError("cil_accuracy: logits/labels shapes disagree");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    hits += cil_hit(logits.subspan(i * num_classes, num_classes), labels[i]);
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<std::size_t> EvalReport::skipped_classes() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (!class_ap[i]) out.push_back(classes[i]);
  }
  return out;
}

namespace {

nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["map"] = r.map;
  j["cf1"] = r.cf1;
  j["of1"] = r.of1;
  j["accuracy"] = r.accuracy ? nlohmann::ordered_json(*r.accuracy) : nlohmann::ordered_json();
  auto& per_class = j["classes"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    nlohmann::ordered_json entry;
    entry["class"] = r.classes[i];
    entry["ap"] = r.class_ap[i] ? nlohmann::ordered_json(*r.class_ap[i]) : nlohmann::ordered_json();
    entry["f1"] = r.class_f1.empty() ? 0.0 : r.class_f1[i];
    per_class.push_back(std::move(entry));
  }
  j["skipped_classes"] = r.skipped_classes();
  return j;
}

std::string fixed(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string EvalReport::to_json() const { return report_json(*this).dump(2); }

std::string reports_json(std::span<const EvalReport> history) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : history) j.push_back(report_json(r));
  return j.dump(2) + "\n";
}

std::string reports_csv(std::span<const EvalReport> history) {
  std::string out = "step,map,cf1,of1,accuracy\n";
  for (const auto& r : history) {
    out += std::to_string(r.step) + "," + fixed(r.map) + "," + fixed(r.cf1) + "," +
           fixed(r.of1) + "," + (r.accuracy ? fixed(*r.accuracy) : std::string()) + "\n";
  }
  return out;
}

EvalReport make_report(std::size_t step, const std::vector<std::size_t>& classes,
                       std::span<const double> scores, std::span<const std::uint8_t> labels,
                       double threshold) {
  const std::size_t k = classes.size();
  if (k == 0 || scores.size() != labels.size() || scores.size() % k != 0) {
    throw DimensionError("make_report: scores/labels shapes disagree");
  }
  const std::size_t n = scores.size() / k;
  EvalReport r;
  r.step = step;
  r.classes = classes;
  std::vector<double> column(n);
  std::vector<std::uint8_t> truth(n);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = 1.0 / (1.0 + std::exp(-scores[i * k + c]));
      truth[i] = labels[i * k + c];
    }
    r.class_ap.push_back(average_precision(column, truth));
  }
  r.map = mean_ap(r.class_ap);
  std::vector<std::uint8_t> predicted(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-scores[i]));
    predicted[i] = p > threshold ? 1 : 0;
  }
  F1Scores f1 = f1_suite(predicted, labels, k);
  r.cf1 = f1.cf1;
  r.of1 = f1.of1;
  r.class_f1 = std::move(f1.per_class);
  return r;
}

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
