#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "multilane/protocol.hpp"
#include "multilane/training.hpp"
#include "multilane/vit.hpp"

namespace multilane::app {

enum class Ablation { none, no_norm, querykey, no_dr, tome, finetune };

Ablation parse_ablation(const std::string& name);
std::string ablation_name(Ablation a);

struct DataConfig {
  std::uint64_t seed = 1;
  std::uint64_t test_seed = 2;
  std::size_t classes = 20;
  std::size_t train_images = 1000;
  std::size_t test_images = 500;
  std::size_t max_objects = 3;
  double tail_exponent = 0.0;
  double background = 0.2;
  double noise = 0.05;
  // Optional gen-data archives; when set they replace the synthetic sets.
  std::string train_path;
  std::string test_path;
};

struct BenchmarkConfig {
  std::size_t base = 0;
  std::size_t increment = 4;
  std::uint64_t class_order_seed = 0;
};

struct BackboneConfig {
  std::uint64_t seed = 7;
  std::string weights;  // MLTA path; random_init(seed) when empty
};

/// Everything a run needs, parsed from JSON with CLI overrides applied on top.
struct RunConfig {
  ViTConfig vit;
  BackboneConfig backbone;
  TrainConfig train;
  Ablation ablation = Ablation::none;
  DataConfig data;
  BenchmarkConfig benchmark;
  std::string precision = "f32";
  std::string out = "run";

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// TrainConfig with the ablation flags set.
  TrainConfig effective_train() const;
  SynthConfig synth(bool test) const;

  nlohmann::ordered_json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// Applies "a.b.c=value" to a JSON document; value is parsed as JSON and
/// taken as a string when that fails.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Reads MULTILANE_THREADS (unset or 0: sequential).
std::size_t threads_from_env();

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);
void ensure_directory(const std::filesystem::path& dir);

}  // namespace multilane::app
