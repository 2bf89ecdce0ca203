#include "multilane/app/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "multilane/costs.hpp"
#include "multilane/errors.hpp"
#include "multilane/summarize.hpp"

namespace multilane::app {

namespace fs = std::filesystem;

namespace {

std::vector<std::vector<std::size_t>> task_lists(const MLCILBenchmark& b) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& t : b.tasks) out.push_back(t.classes);
  return out;
}

std::shared_ptr<const BackboneWeights> make_backbone(const RunConfig& c) {
  if (!c.backbone.weights.empty()) {
    return std::make_shared<BackboneWeights>(load_weights(c.backbone.weights, c.vit));
  }
  return std::make_shared<BackboneWeights>(random_init(c.vit, c.backbone.seed));
}

MLCILBenchmark make_run_benchmark(const RunConfig& c, Dataset train, Dataset test) {
  MLCILBenchmark b = make_benchmark(c.data.classes, c.benchmark.base, c.benchmark.increment,
                                    c.benchmark.class_order_seed);
  b.train = std::make_shared<Dataset>(std::move(train));
  b.test = std::make_shared<Dataset>(std::move(test));
  return b;
}

void check_geometry(const Dataset& d, const RunConfig& c, const std::string& what) {
  if (d.num_classes != c.data.classes) {
    throw IntegrityError(what + " has " + std::to_string(d.num_classes) +
                         " classes, the run was configured for " +
                         std::to_string(c.data.classes));
  }
  if (d.channels != c.vit.channels || d.image_size != c.vit.image_size) {
    throw IntegrityError(what + " geometry " + std::to_string(d.channels) + "x" +
                         std::to_string(d.image_size) + " does not match the backbone");
  }
}

std::string jsonl(const LogRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["task"] = r.task;
  j["loss"] = r.loss;
  j["lr"] = r.lr;
  return j.dump();
}

}  // namespace

Dataset load_dataset(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "data.mlta" : path;
  if (!fs::exists(file)) throw IoError("dataset not found: " + file.string());
  return Dataset::from_archive(Archive::load(file));
}

Dataset run_dataset(const RunConfig& c, bool test) {
  const std::string& path = test ? c.data.test_path : c.data.train_path;
  Dataset d = path.empty() ? synth_generate(c.synth(test)) : load_dataset(path);
  check_geometry(d, c, test ? "test set" : "training set");
  return d;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const GenDataOptions& o, std::ostream& out) {
  SynthConfig s;
  s.seed = o.seed;
  s.classes = o.classes;
  s.images = o.images;
  s.tail_exponent = o.tail;
  s.max_objects = o.max_objects;
  s.image_size = o.image_size;
  s.stamp_size = o.stamp;
  s.channels = o.channels;
  if (o.images == 0) throw ConfigError("--images must be positive");
  if (o.tail < 0) throw ConfigError("--tail must be non-negative");
  if (o.stamp == 0 || o.image_size % o.stamp != 0) {
    throw ConfigError("--stamp must divide --image-size");
  }
  const MLCILBenchmark split = make_benchmark(o.classes, o.base, o.increment, o.order_seed);
  const Dataset data = synth_generate(s);

  const fs::path dir(o.out);
  ensure_directory(dir);
  data.to_archive().save(dir / "data.mlta");

  const auto counts = data.class_counts();
  nlohmann::ordered_json m;
  m["seed"] = o.seed;
  m["classes"] = o.classes;
  m["images"] = o.images;
  m["tail_exponent"] = o.tail;
  m["max_objects"] = o.max_objects;
  m["geometry"] = {{"channels", o.channels}, {"image_size", o.image_size}, {"stamp_size", o.stamp}};
  m["class_counts"] = counts;
  m["class_order"] = split.class_order;
  m["class_order_seed"] = o.order_seed;
  m["tasks"] = task_lists(split);
  write_text(dir / "data.json", m.dump(2) + "\n");

  out << "wrote " << data.size() << " images, " << o.classes << " classes, "
      << split.num_tasks() << " tasks -> " << (dir / "data.mlta").string() << "\n";
  return kExitOk;
}

int cmd_train(const TrainOptions& o, std::ostream& out) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text(o.config));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(o.config + ": " + e.what());
  }
  for (const auto& s : o.sets) apply_override(doc, s);
  if (!o.ablate.empty()) doc["ablation"] = o.ablate;
  if (!o.out.empty()) doc["out"] = o.out;
  RunConfig c = RunConfig::from_json(doc);
  c.validate();

  TrainConfig train = c.effective_train();
  train.threads = threads_from_env();

  const fs::path dir(c.out);
  ensure_directory(dir);
  write_text(dir / "config.json", c.to_json().dump(2) + "\n");

  auto weights = make_backbone(c);
  MLCILBenchmark bench = make_run_benchmark(c, run_dataset(c, false), run_dataset(c, true));

  std::string log_text;
  History history = run_incremental(bench, weights, train, [&](const LogRecord& r) {
    log_text += jsonl(r);
    log_text += '\n';
  });

  write_text(dir / "train_log.jsonl", log_text);
  history.state.to_archive().save(dir / "checkpoint.mlta");
  write_text(dir / "reports.csv", reports_csv(history.reports));
  write_text(dir / "reports.json", reports_json(history.reports));

  out << "ablation " << ablation_name(c.ablation) << ", " << history.reports.size()
      << " tasks\n";
  for (const auto& r : history.reports) {
    out << "  step " << r.step << "  mAP " << std::fixed << std::setprecision(4) << r.map
        << "  CF1 " << r.cf1 << "  OF1 " << r.of1 << "\n";
  }
  out << "final mAP " << history.reports.back().map << ", avg mAP " << avg_map(history.reports)
      << "\n";
  out.unsetf(std::ios::floatfield);
  return kExitOk;
}

int cmd_macs(const MacsOptions& o, std::ostream& out) {
  ViTConfig v;
  v.depth = o.depth;
  v.dim = o.dim;
  v.heads = o.heads;
  v.mlp_ratio = o.ratio;
  v.image_size = o.image;
  v.patch_size = o.patch;
  v.channels = o.channels;
  if (o.prompted > o.depth) throw ConfigError("--prompted exceeds --depth");
  v.prompted_layers.clear();
  for (std::size_t l = 1; l <= o.prompted; ++l) v.prompted_layers.push_back(l);
  v.validate();
  if (o.selectors >= v.seq_len()) {
    throw ConfigError("--selectors must be below the token count " + std::to_string(v.seq_len()));
  }
  if (o.prompts % 2 != 0) throw ConfigError("--prompts must be even");

  CostQuery q;
  q.tasks = o.tasks;
  q.selectors = o.selectors;
  q.prompt_length = o.prompts;
  q.classes_per_task = o.classes;
  q.naive = o.naive;
  const CostReport r = cost_report(v, q);

  auto line = [&](const std::string& name, const std::string& value) {
    out << std::left << std::setw(22) << name << std::right << std::setw(18) << value << "\n";
  };
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", r.total_gmacs());
  line("total GMACs", buf);
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(r.frozen_macs) * 1e-9);
  line("frozen GMACs", buf);
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(r.per_task_macs) * 1e-9);
  line("per-task GMACs", buf);
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(r.backbone_params) * 1e-6);
  line("backbone params", buf);
  line("trainable params", std::to_string(r.trainable_params));
  for (const auto& [name, n] : r.param_breakdown) line("  " + name, std::to_string(n));
  out << "\n" << CostReport::csv_header() << "\n" << r.csv_row() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

LoadedRun load_run(const fs::path& dir) {
  const fs::path config = dir / "config.json";
  const fs::path checkpoint = dir / "checkpoint.mlta";
  if (!fs::exists(config) || !fs::exists(checkpoint)) {
    throw IoError("checkpoint directory " + dir.string() +
                  " needs config.json and checkpoint.mlta");
  }
  LoadedRun run;
  run.config = RunConfig::load(config);
  run.config.validate();
  run.weights = make_backbone(run.config);
  run.state = LearnerState::from_archive(Archive::load(checkpoint), run.weights);
  return run;
}

HeatmapImage render_heatmap(const Tensor& alpha, std::size_t grid, std::size_t upscale) {
  if (alpha.rank() != 2 || alpha.dim(1) != grid * grid + 1) {
    throw DimensionError("heatmap: attention " + shape_string(alpha.shape()) +
                         " does not cover a " + std::to_string(grid) + "x" +
                         std::to_string(grid) + " grid");
  }
  const std::size_t rows = alpha.dim(0), cols = alpha.dim(1);
  const auto a = alpha.values();
  std::vector<double> cell(grid * grid, 0.0);
  for (std::size_t j = 0; j < rows; ++j) {
    for (std::size_t k = 1; k < cols; ++k) cell[k - 1] += a[j * cols + k];
  }
  for (auto& v : cell) v /= static_cast<double>(rows);
  const auto [lo, hi] = std::minmax_element(cell.begin(), cell.end());
  const double span = *hi - *lo;
  HeatmapImage img;
  img.width = img.height = grid * upscale;
  img.pixels.resize(img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double v = cell[(y / upscale) * grid + x / upscale];
      const double unit = span > 0 ? (v - *lo) / span : 0.0;
      img.pixels[y * img.width + x] = static_cast<std::uint8_t>(std::lround(unit * 255.0));
    }
  }
  return img;
}

std::string encode_pgm(const HeatmapImage& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                    "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return out;
}

int cmd_heatmap(const HeatmapOptions& o, std::ostream& out) {
  LoadedRun run = load_run(o.checkpoint);
  const Dataset data = o.data.empty() ? run_dataset(run.config, true) : load_dataset(o.data);
  check_geometry(data, run.config, "dataset");
  if (o.image_index >= data.size()) {
    throw ConfigError("--image-index " + std::to_string(o.image_index) + " outside 0.." +
                      std::to_string(data.size() - 1));
  }
  if (o.task >= run.state.completed.size()) {
    throw ConfigError("--task " + std::to_string(o.task) + " outside the " +
                      std::to_string(run.state.completed.size()) + " trained pathways");
  }
  const std::size_t depth = run.config.vit.depth;
  if (o.layer < 1 || o.layer > depth) {
    throw ConfigError("--layer " + std::to_string(o.layer) + " outside 1.." +
                      std::to_string(depth));
  }
  const TaskPathway& p = run.state.completed[o.task];
  if (!p.selectors.defined()) {
    throw ConfigError("--task " + std::to_string(o.task) + " has no patch selectors");
  }
  const FrozenTaps taps = frozen_forward(data.items[o.image_index].image, *run.weights);
  const Tensor alpha = attention_map(p.selectors, taps.taps[o.layer - 1]);

  std::string csv;
  const std::size_t rows = alpha.dim(0), cols = alpha.dim(1);
  char buf[32];
  for (std::size_t j = 0; j < rows; ++j) {
    for (std::size_t k = 0; k < cols; ++k) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(alpha.at(j, k)));
      csv += (k ? "," : "") + std::string(buf);
    }
    csv += "\n";
  }
  const fs::path base(o.out);
  if (base.has_parent_path()) ensure_directory(base.parent_path());
  const fs::path csv_path = base.string() + ".csv";
  const fs::path pgm_path = base.string() + ".pgm";
  write_text(csv_path, csv);
  write_text(pgm_path, encode_pgm(render_heatmap(alpha, run.config.vit.grid())));
  out << "wrote " << csv_path.string() << " and " << pgm_path.string() << "\n";
  return kExitOk;
}

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  LoadedRun run = load_run(o.checkpoint);
  Dataset data = o.data.empty() ? run_dataset(run.config, true) : load_dataset(o.data);
  check_geometry(data, run.config, "dataset");
  if (run.state.tasks_done == 0) throw IntegrityError("checkpoint has no trained task");
  const std::size_t t = run.state.tasks_done - 1;

  TrainConfig train = run.config.effective_train();
  train.threads = threads_from_env();
  MLCILBenchmark bench = make_run_benchmark(run.config, Dataset{}, std::move(data));
  const TapCache taps = TapCache::build(*bench.test, *run.weights, train.threads);
  EvalReport report = evaluate(run.state, bench, t, train, taps);

  if (o.cil) {
    const auto seen = bench.seen_classes(t);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < bench.test->size(); ++i) {
      const auto& labels = bench.test->items[i].labels;
      if (std::count(labels.begin(), labels.end(), 1) != 1) {
        throw IntegrityError("--cil needs single-label data; image " + std::to_string(i) +
                             " has " +
                             std::to_string(std::count(labels.begin(), labels.end(), 1)) +
                             " positives");
      }
      const std::size_t label = std::find(labels.begin(), labels.end(), 1) - labels.begin();
      const auto row = score_image(run.state, taps.taps[i], seen, train);
      const std::vector<double> logits(row.begin(), row.end());
      const auto pos = std::find(seen.begin(), seen.end(), label);
      if (pos != seen.end()) hits += cil_hit(logits, pos - seen.begin());
    }
    report.accuracy = static_cast<double>(hits) / static_cast<double>(bench.test->size());
  }

  const std::string text = report.to_json() + "\n";
  if (!o.out.empty()) {
    const fs::path path(o.out);
    if (path.has_parent_path()) ensure_directory(path.parent_path());
    write_text(path, text);
  }
  out << text;
  return kExitOk;
}

// ---------------------------------------------------------------------------

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"multilane: per-task pathways over a frozen vision transformer"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  GenDataOptions gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic multi-label dataset");
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--classes", gen.classes, "Number of classes K");
  g->add_option("--images", gen.images, "Number of images N");
  g->add_option("--tail", gen.tail, "Long-tail exponent a (presence ∝ (k+1)^-a)");
  g->add_option("--max-objects", gen.max_objects, "Maximum positives per image");
  g->add_option("--image-size", gen.image_size, "Image side in pixels");
  g->add_option("--stamp", gen.stamp, "Class stamp side in pixels (grid cell)");
  g->add_option("--channels", gen.channels, "Image channels");
  g->add_option("--base", gen.base, "Classes in the first task (0: same as --inc)");
  g->add_option("--inc", gen.increment, "Classes per incremental task");
  g->add_option("--order-seed", gen.order_seed, "Class-order permutation seed");
  g->add_option("--out", gen.out, "Output directory");

  TrainOptions train;
  auto* t = app.add_subcommand("train", "Run incremental training from a JSON config");
  t->add_option("--config", train.config, "JSON run configuration")->required();
  t->add_option("--ablate", train.ablate,
                "Ablation: none|no_norm|querykey|no_dr|tome|finetune (empty: from config)");
  t->add_option("--out", train.out, "Output directory (empty: from config)");
  t->add_option("--set", train.sets, "Config override path=value (repeatable)");

  MacsOptions macs;
  auto* m = app.add_subcommand("macs", "Analytical MAC and parameter counts");
  m->add_option("--depth", macs.depth, "Transformer blocks");
  m->add_option("--dim", macs.dim, "Embedding width D");
  m->add_option("--heads", macs.heads, "Attention heads");
  m->add_option("--ratio", macs.ratio, "MLP expansion ratio");
  m->add_option("--image", macs.image, "Image side in pixels");
  m->add_option("--patch", macs.patch, "Patch side in pixels");
  m->add_option("--channels", macs.channels, "Image channels");
  m->add_option("--tasks", macs.tasks, "Number of task pathways T");
  m->add_option("--selectors", macs.selectors, "Patch selectors per task L_s");
  m->add_option("--prompts", macs.prompts, "Prompt rows per prompted layer L_p");
  m->add_option("--prompted", macs.prompted, "Number of leading prompted blocks");
  m->add_option("--classes", macs.classes, "Classes per task");
  m->add_flag("--naive", macs.naive, "Count T full-length forwards instead");

  HeatmapOptions heat;
  auto* h = app.add_subcommand("heatmap", "Export patch-selector attention maps");
  h->add_option("--checkpoint", heat.checkpoint, "Run directory written by train")->required();
  h->add_option("--image-index", heat.image_index, "Image index in the dataset");
  h->add_option("--task", heat.task, "Pathway index (0-based)");
  h->add_option("--layer", heat.layer, "Block index (1-based)");
  h->add_option("--data", heat.data, "Dataset (empty: the run's test set)");
  h->add_option("--out", heat.out, "Output path prefix for .csv and .pgm");

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "Run directory written by train")->required();
  e->add_option("--data", ev.data, "Dataset (empty: the run's test set)");
  e->add_flag("--cil", ev.cil, "Single-label argmax accuracy");
  e->add_option("--out", ev.out, "Also write the report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    // Subcommand help surfaces as CallForHelp from the subcommand.
    err << ex.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*g) return cmd_gen_data(gen, out);
    if (*t) return cmd_train(train, out);
    if (*m) return cmd_macs(macs, out);
    if (*h) return cmd_heatmap(heat, out);
    if (*e) return cmd_eval(ev, out);
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const LoadError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const IntegrityError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const ProtocolError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const IoError& ex) {
    err << "I/O error: " << ex.what() << "\n";
    return kExitIo;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
  return kExitConfig;
}

}  // namespace multilane::app
