#include "multilane/protocol.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "multilane/errors.hpp"
#include "multilane/random.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& item : items) {
    for (std::size_t k = 0; k < num_classes; ++k) counts[k] += item.labels[k];
  }
  return counts;
}

Archive Dataset::to_archive() const {
  if (items.empty()) throw ContractError("Dataset::to_archive: empty dataset");
  const std::size_t pixels = channels * image_size * image_size;
  std::vector<Real> images;
  std::vector<Real> labels;
  images.reserve(items.size() * pixels);
  labels.reserve(items.size() * num_classes);
  for (const auto& item : items) {
    const auto v = item.image.values();
    images.insert(images.end(), v.begin(), v.end());
    for (auto l : item.labels) labels.push_back(static_cast<Real>(l));
  }
  Archive archive;
  archive.put("images",
              Tensor::from({items.size(), channels, image_size, image_size}, std::move(images)));
  archive.put("labels", Tensor::from({items.size(), num_classes}, std::move(labels)));
  return archive;
}

Dataset Dataset::from_archive(const Archive& archive) {
  const Tensor& images = archive.get("images");
  const Tensor& labels = archive.get("labels");
  if (images.rank() != 4 || labels.rank() != 2 || images.dim(0) != labels.dim(0) ||
      images.dim(2) != images.dim(3)) {
    throw LoadError("dataset archive: inconsistent images " + shape_string(images.shape()) +
                    " / labels " + shape_string(labels.shape()));
  }
  Dataset d;
  d.num_classes = labels.dim(1);
  d.channels = images.dim(1);
  d.image_size = images.dim(2);
  const std::size_t n = images.dim(0), pixels = d.channels * d.image_size * d.image_size;
  const auto iv = images.values();
  const auto lv = labels.values();
  d.items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    LabeledImage item;
    item.image = Tensor::from({d.channels, d.image_size, d.image_size},
                              std::vector<Real>(iv.begin() + i * pixels,
                                                iv.begin() + (i + 1) * pixels));
    item.labels.resize(d.num_classes);
    for (std::size_t k = 0; k < d.num_classes; ++k) {
      item.labels[k] = lv[i * d.num_classes + k] != 0 ? 1 : 0;
    }
    d.items.push_back(std::move(item));
  }
  return d;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> project_labels(const std::vector<std::uint8_t>& labels,
                                         const std::vector<std::size_t>& classes) {
  std::vector<std::uint8_t> out(classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] >= labels.size()) {
      throw DimensionError("class id " + std::to_string(classes[i]) + " outside " +
                           std::to_string(labels.size()) + " labels");
    }
    out[i] = labels[classes[i]];
  }
  return out;
}

TaskView::TaskView(std::shared_ptr<const Dataset> data, TaskSpec spec)
    : data_(std::move(data)), spec_(std::move(spec)) {
  if (!data_) throw ContractError("TaskView: null dataset");
  for (auto k : spec_.classes) {
    if (k >= data_->num_classes) {
      throw ConfigError("task " + std::to_string(spec_.index) + ": class " + std::to_string(k) +
                        " outside the dataset's " + std::to_string(data_->num_classes) +
                        " classes");
    }
  }
}

std::vector<std::uint8_t> TaskView::labels(std::size_t i) const {
  return project_labels(data_->items[i].labels, spec_.classes);
}

TaskView task_view(std::shared_ptr<const Dataset> data, const TaskSpec& spec) {
  return TaskView(std::move(data), spec);
}

std::vector<std::size_t> MLCILBenchmark::seen_classes(std::size_t t) const {
  std::vector<std::size_t> out;
  for (std::size_t u = 0; u <= t && u < tasks.size(); ++u) {
    out.insert(out.end(), tasks[u].classes.begin(), tasks[u].classes.end());
  }
  return out;
}

TaskView MLCILBenchmark::train_view(std::size_t t) const { return TaskView(train, tasks.at(t)); }
TaskView MLCILBenchmark::test_view(std::size_t t) const { return TaskView(test, tasks.at(t)); }

MLCILBenchmark make_benchmark(std::size_t total, std::size_t base, std::size_t increment,
                              std::uint64_t class_order_seed) {
  if (total == 0) throw ConfigError("benchmark.classes must be positive");
  if (increment == 0) throw ConfigError("benchmark.increment must be positive");
  if (base >= total) {
    throw ConfigError("benchmark.base (" + std::to_string(base) + ") must be 0 or below " +
                      std::to_string(total));
  }
  if ((total - base) % increment != 0) {
    throw ConfigError("benchmark: " + std::to_string(total) + " classes minus base " +
                      std::to_string(base) + " not divisible by increment " +
                      std::to_string(increment));
  }
  MLCILBenchmark b;
  b.total_classes = total;
  b.class_order.resize(total);
  std::iota(b.class_order.begin(), b.class_order.end(), std::size_t{0});
  Rng rng(class_order_seed);
  for (std::size_t i = total; i > 1; --i) {
    std::swap(b.class_order[i - 1], b.class_order[rng.below(i)]);
  }
  std::size_t pos = 0;
  auto take = [&](std::size_t n) {
    TaskSpec spec;
    spec.index = b.tasks.size();
    spec.classes.assign(b.class_order.begin() + pos, b.class_order.begin() + pos + n);
    pos += n;
    b.tasks.push_back(std::move(spec));
  };
  if (base > 0) take(base);
  while (pos < total) take(increment);
  return b;
}

// ---------------------------------------------------------------------------

std::vector<double> presence_probabilities(const SynthConfig& config) {
  std::vector<double> w(config.classes);
  double total = 0;
  for (std::size_t k = 0; k < config.classes; ++k) {
    w[k] = std::pow(static_cast<double>(k + 1), -config.tail_exponent);
    total += w[k];
  }
  const double target = 0.5 * (1.0 + static_cast<double>(config.max_objects));
  const double base = std::min(target / total, 0.9 / w[0]);
  for (auto& v : w) v *= base;
  return w;
}

Tensor class_template(std::size_t k, std::size_t stamp_size, std::size_t channels) {
  static constexpr std::array<std::array<double, 3>, 5> kPalette = {{
      {1.0, 0.2, 0.2},
      {0.2, 1.0, 0.2},
      {0.2, 0.3, 1.0},
      {1.0, 1.0, 0.2},
      {0.9, 0.3, 1.0},
  }};
  const std::size_t pattern = k % 4;
  const auto& color = kPalette[(k / 4) % kPalette.size()];
  const std::size_t period = 2 + 2 * ((k / 20) % 3);  // stripe/check width
  const std::size_t s = stamp_size;
  Tensor t = Tensor::zeros({channels, s, s});
  auto v = t.mutable_values();
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      bool on = false;
      switch (pattern) {
        case 0: on = (y / (period / 2)) % 2 == 0; break;
        case 1: on = (x / (period / 2)) % 2 == 0; break;
        case 2: on = ((x / (period / 2)) + (y / (period / 2))) % 2 == 0; break;
        default: {
          const std::size_t edge = std::min({x, y, s - 1 - x, s - 1 - y});
          on = edge % period < period / 2;
          break;
        }
      }
      for (std::size_t c = 0; c < channels; ++c) {
        const double base = channels == 3 ? color[c] : (color[0] + color[1] + color[2]) / 3.0;
        v[(c * s + y) * s + x] = static_cast<Real>(on ? base : 0.35 * base);
      }
    }
  }
  return t;
}

namespace {

struct Placement {
  std::size_t y, x;
};

}  // namespace

Dataset synth_generate(const SynthConfig& config) {
  if (config.classes < 2) throw ConfigError("synth: at least 2 classes required");
  if (config.max_objects < 1) throw ConfigError("synth: max_objects must be at least 1");
  if (config.stamp_size == 0 || config.stamp_size > config.image_size) {
    throw ConfigError("synth: stamp size must be in 1..image_size");
  }
  const std::size_t cells = (config.image_size / config.stamp_size) *
                            (config.image_size / config.stamp_size);
  if (config.max_objects > cells || config.max_objects > config.classes) {
    throw ConfigError("synth: max_objects " + std::to_string(config.max_objects) +
                      " does not fit the image");
  }
  const auto probs = presence_probabilities(config);
  std::vector<Tensor> templates;
  for (std::size_t k = 0; k < config.classes; ++k) {
    templates.push_back(class_template(k, config.stamp_size, config.channels));
  }

  Rng rng(config.seed);
  Dataset d;
  d.num_classes = config.classes;
  d.channels = config.channels;
  d.image_size = config.image_size;
  d.items.reserve(config.images);
  const std::size_t side = config.image_size, s = config.stamp_size;

  for (std::size_t n = 0; n < config.images; ++n) {
    std::vector<std::size_t> present;
    do {
      present.clear();
      for (std::size_t k = 0; k < config.classes; ++k) {
        if (rng.uniform() < probs[k]) present.push_back(k);
      }
    } while (present.empty() || present.size() > config.max_objects);

    // Distinct grid cells, one per positive class.
    const std::size_t grid = side / s;
    std::vector<std::size_t> cell_order(cells);
    std::iota(cell_order.begin(), cell_order.end(), std::size_t{0});
    for (std::size_t i = 0; i < present.size(); ++i) {
      std::swap(cell_order[i], cell_order[i + rng.below(cells - i)]);
    }
    std::vector<Placement> spots;
    for (std::size_t i = 0; i < present.size(); ++i) {
      spots.push_back({(cell_order[i] / grid) * s, (cell_order[i] % grid) * s});
    }

    Tensor image = Tensor::zeros({config.channels, side, side});
    auto px = image.mutable_values();
    for (auto& v : px) v = static_cast<Real>(rng.uniform() * config.background);
    for (std::size_t i = 0; i < present.size(); ++i) {
      const auto tv = templates[present[i]].values();
      for (std::size_t c = 0; c < config.channels; ++c) {
        for (std::size_t y = 0; y < s; ++y) {
          for (std::size_t x = 0; x < s; ++x) {
            const double jitter = (2.0 * rng.uniform() - 1.0) * config.noise;
            px[(c * side + spots[i].y + y) * side + spots[i].x + x] =
                static_cast<Real>(tv[(c * s + y) * s + x] + jitter);
          }
        }
      }
    }
    LabeledImage item{image, std::vector<std::uint8_t>(config.classes, 0)};
    for (auto k : present) item.labels[k] = 1;
    d.items.push_back(std::move(item));
  }
  return d;
}

std::vector<std::size_t> detect_templates(const Tensor& image, std::size_t classes,
                                          std::size_t stamp_size, double tolerance) {
  const std::size_t channels = image.dim(0), side = image.dim(1), s = stamp_size;
  const auto px = image.values();
  std::vector<std::size_t> found;
  for (std::size_t k = 0; k < classes; ++k) {
    const Tensor t = class_template(k, s, channels);
    const auto tv = t.values();
    bool hit = false;
    for (std::size_t y0 = 0; !hit && y0 + s <= side; ++y0) {
      for (std::size_t x0 = 0; !hit && x0 + s <= side; ++x0) {
        double err = 0;
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
              const double diff =
                  px[(c * side + y0 + y) * side + x0 + x] - tv[(c * s + y) * s + x];
              err += diff * diff;
            }
          }
        }
        hit = err / static_cast<double>(channels * s * s) < tolerance;
      }
    }
    if (hit) found.push_back(k);
  }
  return found;
}

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
