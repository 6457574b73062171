#pragma once

// Run configuration and the end-to-end experiment driver shared by the
// command-line tool and the Python module.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsiseg/quality.hpp"
#include "hsiseg/synth.hpp"
#include "hsiseg/training.hpp"

namespace hsiseg {

// Every tunable with its default, grouped by module: seed, synth, tiling,
// quality, split, train, eval, pipeline.
nlohmann::json default_run_config();

// Sets cfg at a dotted path ("tiling.compactness") from command-line text.
// The text is read as JSON when possible, as a plain string otherwise.
// Throws ConfigError if the path does not exist in the defaults.
void apply_override(nlohmann::json& cfg, const std::string& dotted_key, const std::string& value);

// Defaults overlaid with `user` (recursively); unknown keys throw ConfigError.
nlohmann::json resolve_run_config(const nlohmann::json& user);

void to_json(nlohmann::json& j, const WeightConfig& w);
void from_json(const nlohmann::json& j, WeightConfig& w);

PhantomSpec synth_spec(const nlohmann::json& cfg);
PrepareParams prepare_params(const nlohmann::json& cfg);
std::array<double, 3> split_fractions(const nlohmann::json& cfg);
// The train section with model, regime and the derived seed filled in.
TrainConfig train_config(const nlohmann::json& cfg, ModelKind model, TileRegime regime,
                         std::size_t channels);

// "CNN_g" -> (kCnn, kGoodOnly); "GNN_aW" -> (kCnnGnn, kAllWeighted).
std::pair<ModelKind, TileRegime> parse_run_tag(const std::string& tag);

std::uint64_t stage_seed(const nlohmann::json& cfg, std::uint64_t stage);

using Logger = std::function<void(const nlohmann::json&)>;

// Reads manifest.json under `dir` and tiles, scores and labels every image.
std::vector<PreparedImage> load_prepared_dataset(const std::filesystem::path& dir,
                                                 const PrepareParams& params,
                                                 nlohmann::json* manifest = nullptr);

struct ModelEvaluation {
  nlohmann::json metrics;       // metrics_json layout plus counts
  std::vector<int> truth;       // per evaluated tile
  std::vector<int> predicted;
  std::vector<float> probs;     // N x 3
};

// Metrics over every labeled tile of the given images. With pixel_weighted,
// each tile counts once per pixel.
ModelEvaluation evaluate_model(TrainResult& model, std::span<const PreparedImage> images,
                               std::span<const std::size_t> indices, std::size_t k,
                               bool pixel_weighted = false);

// synth -> split -> train each requested regime -> eval -> report.json.
// Finished regimes are reused and interrupted ones resume from their last
// checkpoint. Returns the report.
nlohmann::json run_pipeline(const nlohmann::json& cfg, const std::filesystem::path& out,
                            const Logger& log = {});

}  // namespace hsiseg
