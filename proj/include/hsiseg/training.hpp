#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsiseg/cnn.hpp"
#include "hsiseg/cube.hpp"
#include "hsiseg/graph.hpp"
#include "hsiseg/quality.hpp"
#include "hsiseg/tiling.hpp"

namespace hsiseg {

enum class ModelKind { kCnn, kCnnGnn };
enum class TileRegime { kGoodOnly, kAll, kAllWeighted };

std::string to_string(ModelKind m);
std::string to_string(TileRegime r);
ModelKind parse_model(const std::string& s);
TileRegime parse_regime(const std::string& s);
// "CNN_g", "GNN_aW", ...
std::string run_tag(ModelKind m, TileRegime r);

enum class OptimizerKind { kSgd, kAdam };
std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
  ModelKind model = ModelKind::kCnn;
  TileRegime regime = TileRegime::kGoodOnly;
  std::size_t epochs = 200;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double momentum = 0.9;
  bool cosine_decay = true;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::size_t patience = 15;
  double cnn_loss_coef = 1.0;
  double gnn_loss_coef = 1.0;
  std::size_t knn_k = 2;
  bool augment = true;
  AugmentParams augment_params;
  bool graph_augment = true;
  GraphAugmentParams graph_augment_params;
  CnnConfig cnn;
  GatConfig gat;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct PrepareParams {
  SlicParams slic;
  FilterParams filter;
  WeightConfig weights;
  std::size_t patch_size = 48;
};

void to_json(nlohmann::json& j, const PrepareParams& p);
void from_json(const nlohmann::json& j, PrepareParams& p);

// One image with everything the training loops need per tile.
struct PreparedImage {
  std::string name;
  HsiCube cube;
  TileMap map;
  std::vector<TileQuality> quality;
  FilterResult filter;
  std::vector<int> labels;     // per tile
  std::vector<float> weights;  // per tile loss weight
  std::vector<Point2> coords;  // tile centroids
  double grid_step = 0.0;
  std::size_t patch_size = 48;

  std::size_t num_tiles() const { return map.tiles.size(); }
  TilePatch patch(std::size_t tile) const;
};

// Tiles the cube, scores and filters the tiles and attaches majority labels.
PreparedImage prepare_image(std::string name, HsiCube cube, std::span<const std::uint8_t> label_map,
                            const PrepareParams& params);

// Same, reusing an existing tiling.
PreparedImage prepare_image(std::string name, HsiCube cube, TileMap map,
                            std::span<const std::uint8_t> label_map, const PrepareParams& params);

enum class SplitPart : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };
std::string to_string(SplitPart p);

struct DatasetSplit {
  std::vector<SplitPart> assignment;  // per image

  std::vector<std::size_t> indices(SplitPart part) const;
};

void to_json(nlohmann::json& j, const DatasetSplit& s);
void from_json(const nlohmann::json& j, DatasetSplit& s);

// Shuffles the images by seed, then gives each in turn to the part whose
// tile count is furthest below its target. Throws ConfigError for fewer than
// 3 images or fractions that are negative or do not sum to 1.
DatasetSplit make_split(std::span<const std::size_t> tiles_per_image,
                        const std::array<double, 3>& fractions, std::uint64_t seed);

// sum_i w_i CE_i / sum_i w_i.
ad::Tensor<float> weighted_cross_entropy(ad::Tape<float>& tape, const ad::Tensor<float>& logits,
                                         std::span<const int> labels, std::span<const float> weights);

// SGD with momentum (v = mu v + g; p -= lr v) or Adam (beta1 = momentum,
// beta2 = 0.999, eps = 1e-8). Parameters without a gradient are left
// untouched, including their moment estimates.
class Optimizer {
 public:
  Optimizer(ParameterList<float> params, OptimizerKind kind, double momentum);
  void step(double lr);
  void zero_grad();
  const ParameterList<float>& params() const { return params_; }
  // Moment buffers, named "opt.m.<param>" / "opt.v.<param>", and the Adam
  // step counter "opt.t".
  ParameterList<float> state() const;
  void load_state(const ParameterList<float>& source);

 private:
  ParameterList<float> params_;
  OptimizerKind kind_;
  std::vector<std::vector<float>> m_, v_;
  std::vector<float> t_;  // per-parameter Adam step counts
  double momentum_;
};

double cosine_lr(double base, std::size_t epoch, std::size_t epochs);

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_loss_cnn = 0.0;
  double train_loss_gnn = 0.0;
  double val_loss = 0.0;
  double val_macro_accuracy = 0.0;
  std::size_t steps = 0;
};

void to_json(nlohmann::json& j, const EpochStats& e);
void from_json(const nlohmann::json& j, EpochStats& e);

struct TrainResult {
  explicit TrainResult(CnnModel<float> c) : cnn(std::move(c)) {}

  ModelKind model = ModelKind::kCnn;
  CnnModel<float> cnn;
  std::optional<GatModel<float>> gat;
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double best_val_macro_accuracy = -1.0;
  std::size_t train_tiles = 0;
  bool resumed = false;
};

struct TrainOptions {
  // Optional run directory: config.json, history.jsonl, split.json,
  // checkpoints/best and checkpoints/last. Training resumes from
  // checkpoints/last when it exists.
  std::filesystem::path run_dir;
  // Written as config.json when set; the TrainConfig otherwise.
  nlohmann::json resolved_config;
  std::function<void(const EpochStats&)> on_epoch;
};

// Tiles used for training (train part) or model selection (val part) under
// the regime; good_only keeps filtered tiles only.
std::vector<std::size_t> select_tiles(const PreparedImage& img, TileRegime regime);

TrainResult train_cnn(const TrainConfig& cfg, std::span<const PreparedImage> images,
                      const DatasetSplit& split, const TrainOptions& opts = {});
TrainResult train_cnn_gnn(const TrainConfig& cfg, std::span<const PreparedImage> images,
                          const DatasetSplit& split, const TrainOptions& opts = {});
TrainResult train(const TrainConfig& cfg, std::span<const PreparedImage> images,
                  const DatasetSplit& split, const TrainOptions& opts = {});

// Class probabilities for the given tiles (all tiles when empty), N x 3 row-major.
std::vector<float> predict_cnn(CnnModel<float>& cnn, const PreparedImage& img,
                               std::span<const std::size_t> tiles = {}, std::size_t batch = 64);

// GAT node probabilities over a kNN graph of the given tiles (all when empty).
std::vector<float> predict_gnn(CnnModel<float>& cnn, GatModel<float>& gat, const PreparedImage& img,
                               std::size_t k, std::span<const std::size_t> tiles = {},
                               std::vector<AttentionRecord>* attention = nullptr);

std::vector<float> predict(TrainResult& model, const PreparedImage& img, std::size_t k);

std::vector<int> argmax_rows(std::span<const float> probs, std::size_t num_classes = 3);

// Checkpoint with every model tensor (cnn.*, gat.*) and `meta`.
void save_model(const TrainResult& model, const std::filesystem::path& dir, const nlohmann::json& meta);
// Rebuilds the models described by `cfg` and loads their tensors.
TrainResult load_model(const TrainConfig& cfg, const std::filesystem::path& dir);

}  // namespace hsiseg
