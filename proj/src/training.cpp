#include "multilane/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <numeric>
#include <thread>

#include "multilane/errors.hpp"
#include "multilane/random.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

Tensor bce_loss(const Tensor& logits, std::span<const std::uint8_t> targets, Real eps) {
  if (logits.numel() != targets.size()) {
    throw DimensionError("bce_loss: " + shape_string(logits.shape()) + " logits vs " +
                         std::to_string(targets.size()) + " targets");
  }
  std::vector<Real> y(targets.begin(), targets.end());
  const Tensor flat = reshape(logits, {logits.numel()});
  const Tensor target = Tensor::from({y.size()}, y);
  const Tensor p = clamp(sigmoid(flat), eps, Real(1) - eps);
  const Tensor one_minus_p = add_scalar(scale(p, Real(-1)), Real(1));
  const Tensor one_minus_y = add_scalar(scale(target, Real(-1)), Real(1));
  const Tensor ll = add(mul(target, log(p)), mul(one_minus_y, log(one_minus_p)));
  return scale(mean(ll), Real(-1));
}

void adam_step(std::span<Tensor> params, AdamMoments& moments, Real lr, Real beta1, Real beta2,
               Real eps) {
  if (moments.m.empty()) {
    for (const auto& p : params) {
      moments.m.emplace_back(p.numel(), Real(0));
      moments.v.emplace_back(p.numel(), Real(0));
    }
  }
  if (moments.m.size() != params.size()) {
    throw ContractError("adam_step: moment state tracks a different parameter list");
  }
  ++moments.step;
  const Real c1 = Real(1) - std::pow(beta1, static_cast<Real>(moments.step));
  const Real c2 = Real(1) - std::pow(beta2, static_cast<Real>(moments.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto& m = moments.m[i];
    auto& v = moments.v[i];
    if (m.size() != p.numel()) throw ContractError("adam_step: parameter size changed");
    auto w = p.mutable_values();
    const auto g = p.grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const Real gj = g.empty() ? Real(0) : g[j];
      m[j] = beta1 * m[j] + (Real(1) - beta1) * gj;
      v[j] = beta2 * v[j] + (Real(1) - beta2) * gj * gj;
      const Real m_hat = m[j] / c1;
      const Real v_hat = v[j] / c2;
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_init) {
  if (total_steps == 0) return lr_init;
  if (step > total_steps) throw ContractError("cosine_lr: step beyond total_steps");
  return lr_init * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr_init > 0)) throw ConfigError("train.lr_init must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("train.betas must lie in [0, 1)");
  }
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(threshold > 0 && threshold < 1)) throw ConfigError("train.threshold must lie in (0, 1)");
  if (prompt_length % 2 != 0) {
    throw ConfigError("train.prompt_length must be even (split into key and value rows)");
  }
  if (!use_tome && selectors == 0) {
    throw ConfigError("train.selectors must be at least 1 unless token merging is used");
  }
  if (use_tome && tome_max_len < 2) throw ConfigError("train.tome_max_len must be at least 2");
  if (single_pathway_querykey && shared_pathway_finetune) {
    throw ConfigError("querykey and shared-pathway fine-tuning cannot be combined");
  }
}

ForwardOptions TrainConfig::forward_options() const {
  ForwardOptions o;
  o.drop_replace = !no_drop_replace;
  o.use_tome = use_tome;
  o.tome_max_len = tome_max_len;
  o.pre_head_norm = !no_norm;
  return o;
}

PathwayInit TrainConfig::pathway_init() const {
  PathwayInit init;
  init.selectors = use_tome ? 0 : selectors;
  init.prompt_length = prompt_length;
  init.seed = seed;
  init.with_key = single_pathway_querykey;
  return init;
}

// ---------------------------------------------------------------------------

void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(threads, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

TapCache TapCache::build(const Dataset& data, const BackboneWeights& weights,
                         std::size_t threads) {
  TapCache cache;
  cache.taps.resize(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    cache.taps[i] = frozen_forward(data.items[i].image, weights);
  });
  return cache;
}

// ---------------------------------------------------------------------------

Archive LearnerState::to_archive() const {
  Archive archive;
  for (const auto& p : completed) p.write(archive);
  archive.put("learner.tasks_done", Tensor::scalar(static_cast<Real>(tasks_done)));
  archive.put("learner.step", Tensor::scalar(static_cast<Real>(step)));
  return archive;
}

LearnerState LearnerState::from_archive(const Archive& archive,
                                        std::shared_ptr<const BackboneWeights> weights) {
  LearnerState s;
  s.weights = std::move(weights);
  for (std::size_t t = 0; archive.contains("task." + std::to_string(t) + ".classes"); ++t) {
    s.completed.push_back(TaskPathway::read(archive, t));
  }
  s.tasks_done = static_cast<std::size_t>(archive.get("learner.tasks_done").item());
  s.step = static_cast<std::size_t>(archive.get("learner.step").item());
  const std::size_t d = s.weights->config.dim;
  for (const auto& p : s.completed) {
    if (p.cls_token.numel() != d) {
      throw LoadError("checkpoint pathway " + std::to_string(p.task) + " has width " +
                      std::to_string(p.cls_token.numel()) + ", backbone has " +
                      std::to_string(d));
    }
  }
  check_disjoint(s.completed);
  return s;
}

namespace {

std::uint64_t task_seed(std::uint64_t seed, std::uint64_t task) {
  std::uint64_t z = seed ^ (0xD1B54A32D192ED03ull * (task + 7));
  z = (z ^ (z >> 32)) * 0x9E3779B97F4A7C15ull;
  return z ^ (z >> 29);
}

// Appends head columns for `added` classes to the shared pathway.
void grow_head(TaskPathway& p, const std::vector<std::size_t>& added, Rng& rng) {
  const std::size_t d = p.head_weight.dim(0), old = p.num_classes(), now = old + added.size();
  const auto w = p.head_weight.values();
  const auto b = p.head_bias.values();
  std::vector<Real> nw(d * now), nb(now, Real(0));
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < now; ++c) {
      nw[r * now + c] = c < old ? w[r * old + c] : static_cast<Real>(rng.truncated_normal(0.02));
    }
  }
  std::copy(b.begin(), b.end(), nb.begin());
  p.head_weight = Tensor::from({d, now}, std::move(nw));
  p.head_bias = Tensor::from({now}, std::move(nb));
  p.classes.insert(p.classes.end(), added.begin(), added.end());
}

Tensor key_matching_loss(const Tensor& key, const FrozenTaps& taps) {
  const auto qv = taps.final_cls.values();
  double qn = 0;
  for (Real v : qv) qn += double(v) * double(v);
  const Real inv_q = qn > 0 ? static_cast<Real>(1.0 / std::sqrt(qn)) : Real(0);
  const Tensor query = reshape(taps.final_cls, {key.numel()});
  const Tensor dot = sum(mul(query, key));
  const Tensor inv_k = pow_scalar(sum(mul(key, key)), Real(-0.5));
  const Tensor cosine = scale(mul(dot, inv_k), inv_q);
  return add_scalar(scale(cosine, Real(-1)), Real(1));
}

}  // namespace

void train_task(LearnerState& state, const MLCILBenchmark& benchmark, std::size_t t,
                const TrainConfig& config, const TapCache& taps, const LogSink& log) {
  config.validate();
  if (!state.weights) throw ContractError("train_task: learner has no backbone");
  if (t >= benchmark.num_tasks()) {
    throw ProtocolError("task " + std::to_string(t) + " outside the benchmark's " +
                        std::to_string(benchmark.num_tasks()) + " tasks");
  }
  if (t < state.tasks_done) {
    throw ProtocolError("task " + std::to_string(t) + " is already trained and frozen");
  }
  if (t > state.tasks_done) {
    throw ProtocolError("task " + std::to_string(t) + " requested before task " +
                        std::to_string(state.tasks_done));
  }
  const TaskView view = benchmark.train_view(t);
  if (taps.taps.size() != view.size()) {
    throw ContractError("train_task: tap cache does not match the training set");
  }
  const BackboneWeights& weights = *state.weights;
  const ForwardOptions options = config.forward_options();
  const auto& task_classes = view.spec().classes;

  Rng rng(task_seed(config.seed, t));
  TaskPathway pathway;
  std::size_t old_classes = 0;
  if (config.shared_pathway_finetune && !state.completed.empty()) {
    pathway = state.completed.back();
    state.completed.pop_back();
    old_classes = pathway.num_classes();
    grow_head(pathway, task_classes, rng);
  } else {
    pathway = make_pathway(t, task_classes, weights, config.pathway_init());
  }
  pathway.set_trainable(true);
  check_disjoint(std::vector<TaskPathway>{pathway});

  state.current = pathway;
  state.optimizer = AdamMoments{};
  std::vector<Tensor> params;
  for (auto& [name, tensor] : pathway.parameters()) params.push_back(tensor);

  const std::size_t n = view.size();
  const std::size_t batches = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * batches;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::uint8_t> targets(pathway.num_classes(), 0);

  std::size_t local = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t b = 0; b < batches; ++b, ++local) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(n, begin + config.batch_size);
      std::vector<Tensor> losses;
      losses.reserve(end - begin);
      for (std::size_t j = begin; j < end; ++j) {
        const std::size_t idx = order[j];
        const FrozenTaps& image_taps = taps.taps[idx];
        Tensor logits = classify(pathway, task_forward(pathway, image_taps, weights, options),
                                 options.pre_head_norm);
        const auto visible = view.labels(idx);
        // Old classes of the shared baseline are unlabeled here: negatives.
        std::fill(targets.begin(), targets.end(), 0);
        std::copy(visible.begin(), visible.end(), targets.begin() + old_classes);
        Tensor loss = bce_loss(logits, targets);
        // Keys match images the task annotates, not its all-negative samples.
        const bool annotated = std::find(visible.begin(), visible.end(), 1) != visible.end();
        if (config.single_pathway_querykey && annotated) {
          loss = add(loss, key_matching_loss(pathway.key, image_taps));
        }
        losses.push_back(loss);
      }
      Tensor batch_loss =
          scale(sum(concat(losses, 0)), Real(1) / static_cast<Real>(losses.size()));
      backward(batch_loss);
      const double lr = cosine_lr(local, total_steps, config.lr_init);
      adam_step(params, *state.optimizer, static_cast<Real>(lr),
                static_cast<Real>(config.beta1), static_cast<Real>(config.beta2));
      for (auto& p : params) p.zero_grad();
      if (log) log({state.step, t, static_cast<double>(batch_loss.item()), lr});
      ++state.step;
    }
  }

  pathway.set_trainable(false);
  state.current.reset();
  state.optimizer.reset();
  state.completed.push_back(std::move(pathway));
  ++state.tasks_done;
}

std::vector<Real> score_image(const LearnerState& state, const FrozenTaps& taps,
                              const std::vector<std::size_t>& classes,
                              const TrainConfig& config) {
  const ForwardOptions options = config.forward_options();
  const Logits logits =
      config.single_pathway_querykey
          ? querykey_infer(taps, state.completed, *state.weights, options).logits
          : infer(taps, state.completed, *state.weights, options);
  std::vector<Real> out(classes.size(), kMaskedLogit);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const auto it = std::find(logits.class_ids.begin(), logits.class_ids.end(), classes[i]);
    if (it != logits.class_ids.end()) out[i] = logits.values[it - logits.class_ids.begin()];
  }
  return out;
}

EvalReport evaluate(const LearnerState& state, const MLCILBenchmark& benchmark, std::size_t t,
                    const TrainConfig& config, const TapCache& test_taps) {
  const Dataset& test = *benchmark.test;
  if (test_taps.taps.size() != test.size()) {
    throw ContractError("evaluate: tap cache does not match the test set");
  }
  const std::vector<std::size_t> seen = benchmark.seen_classes(t);
  const std::size_t k = seen.size(), n = test.size();
  std::vector<double> scores(n * k);
  std::vector<std::uint8_t> labels(n * k);
  parallel_for(n, config.threads, [&](std::size_t i) {
    const auto row = score_image(state, test_taps.taps[i], seen, config);
    const auto truth = project_labels(test.items[i].labels, seen);
    for (std::size_t c = 0; c < k; ++c) {
      scores[i * k + c] = row[c];
      labels[i * k + c] = truth[c];
    }
  });
  return make_report(t, seen, scores, labels, config.threshold);
}

History run_incremental(const MLCILBenchmark& benchmark,
                        std::shared_ptr<const BackboneWeights> weights, const TrainConfig& config,
                        const LogSink& log) {
  config.validate();
  if (!benchmark.train || !benchmark.test) throw ContractError("benchmark has no data");
  const TapCache train_taps = TapCache::build(*benchmark.train, *weights, config.threads);
  const TapCache test_taps = TapCache::build(*benchmark.test, *weights, config.threads);
  History history;
  history.state.weights = std::move(weights);
  for (std::size_t t = 0; t < benchmark.num_tasks(); ++t) {
    train_task(history.state, benchmark, t, config, train_taps, log);
    history.reports.push_back(evaluate(history.state, benchmark, t, config, test_taps));
  }
  return history;
}

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
