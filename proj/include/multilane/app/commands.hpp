#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "multilane/app/config.hpp"
#include "multilane/training.hpp"

namespace multilane::app {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitIo = 4;

struct GenDataOptions {
  std::uint64_t seed = 1;
  std::size_t classes = 20;
  std::size_t images = 1000;
  double tail = 0.0;
  std::size_t max_objects = 3;
  std::size_t image_size = 32;
  std::size_t stamp = 8;
  std::size_t channels = 3;
  std::size_t base = 0;
  std::size_t increment = 4;
  std::uint64_t order_seed = 0;
  std::string out = "data";
};

struct TrainOptions {
  std::string config;
  std::string ablate;  // empty: keep the config's value
  std::string out;     // empty: keep the config's value
  std::vector<std::string> sets;
};

struct MacsOptions {
  std::size_t depth = 12;
  std::size_t dim = 768;
  std::size_t heads = 12;
  std::size_t ratio = 4;
  std::size_t image = 224;
  std::size_t patch = 16;
  std::size_t channels = 3;
  std::size_t tasks = 0;
  std::size_t selectors = 20;
  std::size_t prompts = 20;
  std::size_t prompted = 5;  // first N blocks carry prompts
  std::size_t classes = 10;  // per task
  bool naive = false;
};

struct HeatmapOptions {
  std::string checkpoint;
  std::size_t image_index = 0;
  std::size_t task = 0;
  std::size_t layer = 1;  // 1-based block index
  std::string data;       // dataset archive; the run's test set when empty
  std::string out = "heatmap";
};

struct EvalOptions {
  std::string checkpoint;
  std::string data;
  bool cil = false;
  std::string out;
};

int cmd_gen_data(const GenDataOptions& o, std::ostream& out);
int cmd_train(const TrainOptions& o, std::ostream& out);
int cmd_macs(const MacsOptions& o, std::ostream& out);
int cmd_heatmap(const HeatmapOptions& o, std::ostream& out);
int cmd_eval(const EvalOptions& o, std::ostream& out);

/// A trained run reloaded from its output directory.
struct LoadedRun {
  RunConfig config;
  std::shared_ptr<const BackboneWeights> weights;
  LearnerState state;
};
LoadedRun load_run(const std::filesystem::path& dir);

/// Dataset archive from a gen-data directory or an .mlta file.
Dataset load_dataset(const std::filesystem::path& path);

/// The run's train (test = false) or test dataset: loaded from the configured
/// path or generated from the synthetic settings.
Dataset run_dataset(const RunConfig& config, bool test);

struct HeatmapImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};
/// Selector-averaged α over the patch grid (class column dropped), min-max
/// normalized to 0..255, nearest-neighbour upscaled by `upscale`.
HeatmapImage render_heatmap(const Tensor& alpha, std::size_t grid, std::size_t upscale = 16);
std::string encode_pgm(const HeatmapImage& image);

/// Parses argv, dispatches, and maps errors onto exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace multilane::app
