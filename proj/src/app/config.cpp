#include "multilane/app/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "multilane/errors.hpp"

namespace multilane::app {

Ablation parse_ablation(const std::string& name) {
  if (name == "none" || name.empty()) return Ablation::none;
  if (name == "no_norm") return Ablation::no_norm;
  if (name == "querykey") return Ablation::querykey;
  if (name == "no_dr") return Ablation::no_dr;
  if (name == "tome") return Ablation::tome;
  if (name == "finetune") return Ablation::finetune;
  throw ConfigError("ablation: unknown value '" + name +
                    "' (expected none, no_norm, querykey, no_dr, tome or finetune)");
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_norm: return "no_norm";
    case Ablation::querykey: return "querykey";
    case Ablation::no_dr: return "no_dr";
    case Ablation::tome: return "tome";
    case Ablation::finetune: return "finetune";
  }
  return "none";
}

namespace {

// Typed field access over one JSON object; every key must be consumed.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  // Rejects keys that no read()/child() call asked for.
  void done() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown field");
    }
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!it->is_number_unsigned()) throw ConfigError("expected a non-negative integer");
      } else if constexpr (std::is_same_v<T, double>) {
        if (!it->is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("expected true or false");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("expected a string");
      }
      out = it->get<T>();
    } catch (const ConfigError& e) {
      throw ConfigError(field(key) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

void RunConfig::validate() const {
  vit.validate();
  effective_train().validate();
  if (train.selectors >= vit.seq_len() && ablation != Ablation::tome) {
    throw ConfigError("train.selectors (" + std::to_string(train.selectors) +
                      ") must be below the token count " + std::to_string(vit.seq_len()));
  }
  if (data.classes < 2) throw ConfigError("data.classes must be at least 2");
  if (data.train_path.empty() && data.train_images == 0) {
    throw ConfigError("data.train_images must be positive");
  }
  if (data.test_path.empty() && data.test_images == 0) {
    throw ConfigError("data.test_images must be positive");
  }
  const std::size_t cells = vit.grid() * vit.grid();
  if (data.max_objects == 0 || data.max_objects > std::min(cells, data.classes)) {
    throw ConfigError("data.max_objects must lie in 1.." +
                      std::to_string(std::min(cells, data.classes)));
  }
  if (data.tail_exponent < 0) throw ConfigError("data.tail_exponent must be non-negative");
  if (data.background < 0 || data.noise < 0) {
    throw ConfigError("data.background and data.noise must be non-negative");
  }
  if (benchmark.increment == 0) throw ConfigError("benchmark.increment must be positive");
  if (benchmark.base >= data.classes ||
      (data.classes - benchmark.base) % benchmark.increment != 0) {
    throw ConfigError("benchmark: " + std::to_string(data.classes) + " classes cannot be split as base " +
                      std::to_string(benchmark.base) + " + increments of " +
                      std::to_string(benchmark.increment));
  }
#ifdef MULTILANE_REAL_DOUBLE
  const char* built = "f64";
#else
  const char* built = "f32";
#endif
  if (precision != built) {
    throw ConfigError("precision: this binary computes in " + std::string(built) + ", config asks for " +
                      precision);
  }
  if (out.empty()) throw ConfigError("out: output directory must be set");
}

TrainConfig RunConfig::effective_train() const {
  TrainConfig t = train;
  t.no_norm = ablation == Ablation::no_norm;
  t.single_pathway_querykey = ablation == Ablation::querykey;
  t.no_drop_replace = ablation == Ablation::no_dr;
  t.use_tome = ablation == Ablation::tome;
  t.shared_pathway_finetune = ablation == Ablation::finetune;
  return t;
}

SynthConfig RunConfig::synth(bool test) const {
  SynthConfig s;
  s.seed = test ? data.test_seed : data.seed;
  s.classes = data.classes;
  s.images = test ? data.test_images : data.train_images;
  s.max_objects = data.max_objects;
  s.tail_exponent = data.tail_exponent;
  s.image_size = vit.image_size;
  s.stamp_size = vit.patch_size;
  s.channels = vit.channels;
  s.background = data.background;
  s.noise = data.noise;
  return s;
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["vit"] = {{"image_size", vit.image_size}, {"patch_size", vit.patch_size},
              {"channels", vit.channels},     {"depth", vit.depth},
              {"dim", vit.dim},               {"heads", vit.heads},
              {"mlp_ratio", vit.mlp_ratio},   {"prompted_layers", vit.prompted_layers}};
  j["backbone"] = {{"seed", backbone.seed}, {"weights", backbone.weights}};
  j["train"] = {{"lr_init", train.lr_init},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"batch_size", train.batch_size},
                {"epochs", train.epochs},
                {"selectors", train.selectors},
                {"prompt_length", train.prompt_length},
                {"threshold", train.threshold},
                {"seed", train.seed},
                {"tome_max_len", train.tome_max_len}};
  j["ablation"] = ablation_name(ablation);
  j["data"] = {{"seed", data.seed},
               {"test_seed", data.test_seed},
               {"classes", data.classes},
               {"train_images", data.train_images},
               {"test_images", data.test_images},
               {"max_objects", data.max_objects},
               {"tail_exponent", data.tail_exponent},
               {"background", data.background},
               {"noise", data.noise},
               {"train_path", data.train_path},
               {"test_path", data.test_path}};
  j["benchmark"] = {{"base", benchmark.base},
                    {"increment", benchmark.increment},
                    {"class_order_seed", benchmark.class_order_seed}};
  j["precision"] = precision;
  j["out"] = out;
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& doc) {
  RunConfig c;
  Section root(doc, "");
  if (const auto* v = root.child("vit")) {
    Section s(*v, "vit");
    s.read("image_size", c.vit.image_size);
    s.read("patch_size", c.vit.patch_size);
    s.read("channels", c.vit.channels);
    s.read("depth", c.vit.depth);
    s.read("dim", c.vit.dim);
    s.read("heads", c.vit.heads);
    s.read("mlp_ratio", c.vit.mlp_ratio);
    if (const auto* layers = s.child("prompted_layers")) {
      if (!layers->is_array()) throw ConfigError("vit.prompted_layers: expected an array");
      c.vit.prompted_layers.clear();
      for (const auto& l : *layers) {
        if (!l.is_number_unsigned()) {
          throw ConfigError("vit.prompted_layers: expected non-negative integers");
        }
        c.vit.prompted_layers.push_back(l.get<std::size_t>());
      }
    }
    s.done();
  }
  if (const auto* v = root.child("backbone")) {
    Section s(*v, "backbone");
    s.read("seed", c.backbone.seed);
    s.read("weights", c.backbone.weights);
    s.done();
  }
  if (const auto* v = root.child("train")) {
    Section s(*v, "train");
    s.read("lr_init", c.train.lr_init);
    s.read("beta1", c.train.beta1);
    s.read("beta2", c.train.beta2);
    s.read("batch_size", c.train.batch_size);
    s.read("epochs", c.train.epochs);
    s.read("selectors", c.train.selectors);
    s.read("prompt_length", c.train.prompt_length);
    s.read("threshold", c.train.threshold);
    s.read("seed", c.train.seed);
    s.read("tome_max_len", c.train.tome_max_len);
    s.done();
  }
  std::string ablation = "none";
  root.read("ablation", ablation);
  c.ablation = parse_ablation(ablation);
  if (const auto* v = root.child("data")) {
    Section s(*v, "data");
    s.read("seed", c.data.seed);
    s.read("test_seed", c.data.test_seed);
    s.read("classes", c.data.classes);
    s.read("train_images", c.data.train_images);
    s.read("test_images", c.data.test_images);
    s.read("max_objects", c.data.max_objects);
    s.read("tail_exponent", c.data.tail_exponent);
    s.read("background", c.data.background);
    s.read("noise", c.data.noise);
    s.read("train_path", c.data.train_path);
    s.read("test_path", c.data.test_path);
    s.done();
  }
  if (const auto* v = root.child("benchmark")) {
    Section s(*v, "benchmark");
    s.read("base", c.benchmark.base);
    s.read("increment", c.benchmark.increment);
    s.read("class_order_seed", c.benchmark.class_order_seed);
    s.done();
  }
  root.read("precision", c.precision);
  root.read("out", c.out);
  root.done();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(doc);
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects path=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  nlohmann::json* node = &doc;
  std::stringstream parts(path);
  std::string part;
  std::vector<std::string> keys;
  while (std::getline(parts, part, '.')) keys.push_back(part);
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->is_object()) throw ConfigError("--set " + path + ": not an object path");
    node = &(*node)[keys[i]];
    if (node->is_null()) *node = nlohmann::json::object();
  }
  if (!node->is_object()) throw ConfigError("--set " + path + ": not an object path");
  (*node)[keys.back()] = value;
}

std::size_t threads_from_env() {
  const char* v = std::getenv("MULTILANE_THREADS");
  if (v == nullptr || *v == '\0') return 0;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 0) throw ConfigError("MULTILANE_THREADS must be a non-negative integer");
  return static_cast<std::size_t>(n);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create directory " + dir.string() +
                  (ec ? ": " + ec.message() : std::string()));
  }
}

}  // namespace multilane::app
