#include <doctest.h>

#include <cmath>
#include <map>

#include "multilane/errors.hpp"
#include "multilane/random.hpp"
#include "multilane/training.hpp"

using namespace multilane;

namespace {

ViTConfig toy_vit() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.depth = 2;
  c.dim = 16;
  c.heads = 2;
  c.prompted_layers = {1, 2};
  return c;
}

struct Toy {
  MLCILBenchmark benchmark;
  std::shared_ptr<const BackboneWeights> weights;
  TrainConfig config;

  explicit Toy(std::size_t classes = 8, std::size_t increment = 4, std::size_t images = 48,
               std::size_t max_objects = 2) {
    benchmark = make_benchmark(classes, 0, increment, 1);
    SynthConfig s;
    s.seed = 21;
    s.classes = classes;
    s.images = images;
    s.image_size = 16;
    s.stamp_size = 4;
    s.max_objects = max_objects;
    benchmark.train = std::make_shared<Dataset>(synth_generate(s));
    s.seed = 22;
    s.images = 24;
    benchmark.test = std::make_shared<Dataset>(synth_generate(s));
    // Widen the linear maps from std 0.02 to 0.2 so a two-block stack passes
    // image content through to the class row.
    auto w = std::make_shared<BackboneWeights>(random_init(toy_vit(), 5));
    for (auto& [name, t] : w->named_tensors()) {
      if (name.ends_with(".weight") && name.find("norm") == std::string::npos) {
        Tensor h = t;
        for (auto& v : h.mutable_values()) v *= 10;
      }
    }
    weights = w;
    config.batch_size = 8;
    config.epochs = 3;
    config.selectors = 4;
    config.prompt_length = 4;
  }

  LearnerState fresh() const {
    LearnerState s;
    s.weights = weights;
    return s;
  }
};

// Each image is one class's template tiled over the whole frame plus noise,
// so the classes are linearly separable in pixel space.
std::shared_ptr<Dataset> tiled_dataset(std::size_t classes, std::size_t images, std::uint64_t seed) {
  auto d = std::make_shared<Dataset>();
  d->num_classes = classes;
  d->channels = 3;
  d->image_size = 16;
  Rng rng(seed);
  for (std::size_t n = 0; n < images; ++n) {
    const std::size_t k = n % classes;
    const auto stamp = class_template(4 * k, 4, 3).to_vector();
    std::vector<Real> px(3 * 16 * 16);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < 16; ++y) {
        for (std::size_t x = 0; x < 16; ++x) {
          px[(c * 16 + y) * 16 + x] =
              stamp[(c * 4 + y % 4) * 4 + x % 4] + static_cast<Real>(0.05 * (rng.uniform() - 0.5));
        }
      }
    }
    std::vector<std::uint8_t> labels(classes, 0);
    labels[k] = 1;
    d->items.push_back({Tensor::from({3, 16, 16}, std::move(px)), std::move(labels)});
  }
  return d;
}

std::vector<double> epoch_losses(const std::vector<LogRecord>& log, std::size_t per_epoch) {
  std::vector<double> out;
  for (std::size_t i = 0; i + per_epoch <= log.size(); i += per_epoch) {
    double sum = 0;
    for (std::size_t j = i; j < i + per_epoch; ++j) sum += log[j].loss;
    out.push_back(sum / static_cast<double>(per_epoch));
  }
  return out;
}

}  // namespace

TEST_CASE("BCE loss values") {
  const std::vector<std::uint8_t> y{1, 0};
  CHECK(bce_loss(Tensor::from({2}, {0, 0}), y).item() == doctest::Approx(0.693147).epsilon(1e-6));
  const std::vector<std::uint8_t> one{1};
  const Real logit = static_cast<Real>(std::log(0.9 / 0.1));
  CHECK(bce_loss(Tensor::from({1}, {logit}), one).item() ==
        doctest::Approx(0.105361).epsilon(1e-5));
  // Saturated logits hit the clamp rather than producing inf.
  const Real huge = 1e4f;
  const Real perfect = bce_loss(Tensor::from({2}, {huge, -huge}), y).item();
  CHECK(perfect >= 0);
  CHECK(perfect <= 2e-7f * 2);
  const Real wrong = bce_loss(Tensor::from({2}, {-huge, huge}), y).item();
  CHECK(std::isfinite(wrong));
  // Both terms sit on the clamp: log eps and log(1 - fl(1 - eps)).
  const Real eps = 1e-7f;
  const double floor_pos = -std::log(double(eps));
  const double floor_neg = -std::log(double(Real(1) - (Real(1) - eps)));
  CHECK(wrong == doctest::Approx((floor_pos + floor_neg) / 2).epsilon(1e-5));
  CHECK_THROWS_AS(bce_loss(Tensor::from({3}, {0, 0, 0}), y), DimensionError);
}

TEST_CASE("Adam trivial cases") {
  Tensor p = Tensor::from({2}, {1, -2});
  p.set_requires_grad(true);
  std::vector<Tensor> params{p};
  AdamMoments m;
  for (int i = 0; i < 5; ++i) adam_step(params, m, 0.1f);
  CHECK(p.to_vector() == std::vector<Real>{1, -2});
  CHECK(m.step == 5);

  Tensor q = Tensor::from({1}, {0});
  q.set_requires_grad(true);
  backward(scale(sum(q), 3.0f));
  std::vector<Tensor> one{q};
  AdamMoments fresh;
  adam_step(one, fresh, 0.01f);
  CHECK(q.at(0) == doctest::Approx(-0.01).epsilon(1e-4));

  std::vector<Tensor> more{q, p};
  CHECK_THROWS_AS(adam_step(more, fresh, 0.01f), ContractError);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 0.03) == 0.03);
  CHECK(cosine_lr(100, 100, 0.03) == doctest::Approx(0.0));
  CHECK(cosine_lr(50, 100, 0.03) == doctest::Approx(0.015));
  CHECK(cosine_lr(7, 0, 0.03) == 0.03);
  double prev = 1;
  for (std::size_t s = 0; s <= 37; ++s) {
    const double lr = cosine_lr(s, 37, 1.0);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_lr(101, 100, 0.03), ContractError);
}

TEST_CASE("train config validation names the field") {
  const auto message = [](const TrainConfig& c) {
    try {
      c.validate();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  TrainConfig c;
  CHECK(message(c).empty());
  c.lr_init = 0;
  CHECK(message(c).find("lr_init") != std::string::npos);
  c = TrainConfig{};
  c.prompt_length = 3;
  CHECK(message(c).find("prompt_length") != std::string::npos);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK(message(c).find("batch_size") != std::string::npos);
  c = TrainConfig{};
  c.threshold = 1;
  CHECK(message(c).find("threshold") != std::string::npos);
  c = TrainConfig{};
  c.selectors = 0;
  CHECK_FALSE(message(c).empty());
  c.use_tome = true;
  CHECK(message(c).empty());
  c.tome_max_len = 1;
  CHECK_FALSE(message(c).empty());
  c = TrainConfig{};
  c.single_pathway_querykey = c.shared_pathway_finetune = true;
  CHECK_FALSE(message(c).empty());
  c = TrainConfig{};
  c.use_tome = true;
  CHECK(c.pathway_init().selectors == 0);
  CHECK(c.forward_options().use_tome);
  c.no_norm = c.no_drop_replace = true;
  CHECK_FALSE(c.forward_options().pre_head_norm);
  CHECK_FALSE(c.forward_options().drop_replace);
}

TEST_CASE("tasks must be trained once and in order") {
  const Toy toy;
  const TapCache taps = TapCache::build(*toy.benchmark.train, *toy.weights);
  LearnerState s = toy.fresh();
  CHECK_THROWS_AS(train_task(s, toy.benchmark, 1, toy.config, taps), ProtocolError);
  train_task(s, toy.benchmark, 0, toy.config, taps);
  CHECK_THROWS_AS(train_task(s, toy.benchmark, 0, toy.config, taps), ProtocolError);
  CHECK_THROWS_AS(train_task(s, toy.benchmark, 2, toy.config, taps), ProtocolError);
  train_task(s, toy.benchmark, 1, toy.config, taps);
  CHECK_THROWS_AS(train_task(s, toy.benchmark, 2, toy.config, taps), ProtocolError);
  CHECK(s.completed.size() == 2);
  LearnerState empty;
  CHECK_THROWS_AS(train_task(empty, toy.benchmark, 0, toy.config, taps), ContractError);
}

TEST_CASE("zero epochs only registers a fresh pathway") {
  Toy toy;
  toy.config.epochs = 0;
  const TapCache taps = TapCache::build(*toy.benchmark.train, *toy.weights);
  LearnerState s = toy.fresh();
  train_task(s, toy.benchmark, 0, toy.config, taps);
  REQUIRE(s.completed.size() == 1);
  CHECK(s.step == 0);
  CHECK(s.tasks_done == 1);
  const TaskPathway want =
      make_pathway(0, toy.benchmark.tasks[0].classes, *toy.weights, toy.config.pathway_init());
  const auto got = s.completed[0].parameters();
  const auto ref = want.parameters();
  REQUIRE(got.size() == ref.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].second.to_vector() == ref[i].second.to_vector());
  }
}

TEST_CASE("finished tasks hold no gradients or optimizer state") {
  const Toy toy;
  const TapCache taps = TapCache::build(*toy.benchmark.train, *toy.weights);
  LearnerState s = toy.fresh();
  for (std::size_t t = 0; t < 2; ++t) {
    train_task(s, toy.benchmark, t, toy.config, taps);
    CHECK_FALSE(s.current.has_value());
    CHECK_FALSE(s.optimizer.has_value());
    for (const auto& p : s.completed) {
      for (const auto& [name, tensor] : p.parameters()) {
        CHECK_FALSE(tensor.has_grad());
        CHECK_FALSE(tensor.requires_grad());
      }
    }
    for (const auto& [name, tensor] : toy.weights->named_tensors()) CHECK_FALSE(tensor.has_grad());
  }
}

TEST_CASE("training loss falls over the first five epochs") {
  Toy toy(4, 2);
  toy.benchmark.train = tiled_dataset(4, 128, 1);
  toy.config.epochs = 5;
  const TapCache taps = TapCache::build(*toy.benchmark.train, *toy.weights);
  for (std::size_t t = 0; t < 2; ++t) {
    LearnerState s = toy.fresh();
    std::vector<LogRecord> log;
    if (t == 1) train_task(s, toy.benchmark, 0, toy.config, taps);
    train_task(s, toy.benchmark, t, toy.config, taps,
               [&](const LogRecord& r) { log.push_back(r); });
    REQUIRE(log.size() == 5 * 16);
    const auto losses = epoch_losses(log, 16);
    INFO("task " << t);
    for (std::size_t e = 1; e < losses.size(); ++e) CHECK(losses[e] < losses[e - 1]);
    CHECK(log.front().lr == toy.config.lr_init);
    CHECK(log.back().lr < log.front().lr);
    CHECK(log.back().task == t);
  }
}

TEST_CASE("loss drops below 0.05 on a separable toy task") {
  Toy toy(4, 2);
  toy.benchmark.train = tiled_dataset(4, 64, 2);
  toy.config.epochs = 50;
  toy.config.batch_size = 4;
  const TapCache taps = TapCache::build(*toy.benchmark.train, *toy.weights);
  LearnerState s = toy.fresh();
  std::vector<LogRecord> log;
  train_task(s, toy.benchmark, 0, toy.config, taps, [&](const LogRecord& r) { log.push_back(r); });
  CHECK(epoch_losses(log, 16).back() < 0.05);
}

TEST_CASE("completed pathways keep bit-identical logits across later tasks") {
  Toy toy(12, 4, 48, 2);
  const TapCache taps = TapCache::build(*toy.benchmark.train, *toy.weights);
  const TapCache probe = TapCache::build(*toy.benchmark.test, *toy.weights);
  LearnerState s = toy.fresh();
  std::vector<std::vector<std::vector<Real>>> recorded;
  for (std::size_t t = 0; t < toy.benchmark.num_tasks(); ++t) {
    train_task(s, toy.benchmark, t, toy.config, taps);
    std::vector<std::vector<Real>> rows;
    for (const auto& tap : probe.taps) {
      rows.push_back(score_image(s, tap, toy.benchmark.tasks[t].classes, toy.config));
    }
    recorded.push_back(std::move(rows));
  }
  for (std::size_t t = 0; t < recorded.size(); ++t) {
    for (std::size_t i = 0; i < probe.taps.size(); ++i) {
      CHECK(score_image(s, probe.taps[i], toy.benchmark.tasks[t].classes, toy.config) ==
            recorded[t][i]);
    }
  }
}

TEST_CASE("run_incremental is deterministic and independent of thread count") {
  Toy toy;
  const History a = run_incremental(toy.benchmark, toy.weights, toy.config);
  const History b = run_incremental(toy.benchmark, toy.weights, toy.config);
  toy.config.threads = 3;
  const History c = run_incremental(toy.benchmark, toy.weights, toy.config);
  REQUIRE(a.reports.size() == 2);
  for (std::size_t t = 0; t < 2; ++t) {
    CHECK(a.reports[t].to_json() == b.reports[t].to_json());
    CHECK(a.reports[t].to_json() == c.reports[t].to_json());
    CHECK(a.reports[t].classes == toy.benchmark.seen_classes(t));
  }
  CHECK(a.state.to_archive().serialize() == c.state.to_archive().serialize());

  Toy single(4, 4);
  const History one = run_incremental(single.benchmark, single.weights, single.config);
  REQUIRE(one.reports.size() == 1);
  CHECK(avg_map(one.reports) == one.reports.back().map);
}

TEST_CASE("learner state archive round trip") {
  const Toy toy;
  const History h = run_incremental(toy.benchmark, toy.weights, toy.config);
  const LearnerState back =
      LearnerState::from_archive(Archive::deserialize(h.state.to_archive().serialize()), toy.weights);
  CHECK(back.tasks_done == 2);
  CHECK(back.step == h.state.step);
  REQUIRE(back.completed.size() == 2);
  const TapCache probe = TapCache::build(*toy.benchmark.test, *toy.weights);
  EvalReport r = evaluate(back, toy.benchmark, 1, toy.config, probe);
  CHECK(r.to_json() == h.reports[1].to_json());

  ViTConfig wide = toy_vit();
  wide.dim = 32;
  wide.heads = 4;
  const auto other = std::make_shared<BackboneWeights>(random_init(wide, 1));
  CHECK_THROWS_AS(LearnerState::from_archive(h.state.to_archive(), other), LoadError);
}

TEST_CASE("scores mask classes no pathway owns") {
  const Toy toy;
  const TapCache taps = TapCache::build(*toy.benchmark.train, *toy.weights);
  LearnerState s = toy.fresh();
  train_task(s, toy.benchmark, 0, toy.config, taps);
  const auto& owned = toy.benchmark.tasks[0].classes;
  const auto& unseen = toy.benchmark.tasks[1].classes;
  std::vector<std::size_t> mixed{unseen[0], owned[1]};
  const auto row = score_image(s, taps.taps[0], mixed, toy.config);
  CHECK(row[0] == kMaskedLogit);
  CHECK(row[1] != kMaskedLogit);
  CHECK(row[1] == score_image(s, taps.taps[0], owned, toy.config)[1]);
}

TEST_CASE("shared-pathway fine-tuning grows one head") {
  Toy toy;
  toy.config.shared_pathway_finetune = true;
  const History h = run_incremental(toy.benchmark, toy.weights, toy.config);
  REQUIRE(h.state.completed.size() == 1);
  CHECK(h.state.tasks_done == 2);
  CHECK(h.state.completed[0].classes == toy.benchmark.seen_classes(1));
  CHECK(h.state.completed[0].head_weight.shape() == Shape{16, 8});
  CHECK(h.reports[1].classes.size() == 8);
}

TEST_CASE("query-key ablation trains a key per pathway") {
  Toy toy;
  toy.config.single_pathway_querykey = true;
  const History h = run_incremental(toy.benchmark, toy.weights, toy.config);
  REQUIRE(h.state.completed.size() == 2);
  const TaskPathway init =
      make_pathway(0, toy.benchmark.tasks[0].classes, *toy.weights, toy.config.pathway_init());
  REQUIRE(init.key.defined());
  CHECK(h.state.completed[0].key.to_vector() != init.key.to_vector());
  // Each test image scores only the classes of its selected pathway.
  const TapCache probe = TapCache::build(*toy.benchmark.test, *toy.weights);
  const auto seen = toy.benchmark.seen_classes(1);
  for (const auto& tap : probe.taps) {
    const auto row = score_image(h.state, tap, seen, toy.config);
    std::size_t masked = 0;
    for (Real v : row) masked += v == kMaskedLogit;
    CHECK(masked == 4);
  }
}

TEST_CASE("ablation runs complete") {
  std::map<std::string, TrainConfig> modes;
  Toy toy;
  modes["no_norm"] = toy.config;
  modes["no_norm"].no_norm = true;
  modes["no_dr"] = toy.config;
  modes["no_dr"].no_drop_replace = true;
  modes["tome"] = toy.config;
  modes["tome"].use_tome = true;
  modes["tome"].tome_max_len = 5;
  for (const auto& [name, config] : modes) {
    INFO(name);
    const History h = run_incremental(toy.benchmark, toy.weights, config);
    CHECK(h.reports.size() == 2);
    CHECK(h.reports[1].map > 0);
  }
}

TEST_CASE("parallel_for visits every index once and rethrows") {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { ++hits[i]; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 5) throw IoError("boom");
                               }),
                  IoError);
}
