#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsiseg/autodiff.hpp"
#include "hsiseg/checkpoint.hpp"
#include "hsiseg/tiling.hpp"

namespace hsiseg {

// Undirected edges as (i, j) with i < j, sorted and unique.
using EdgeList = std::vector<std::pair<std::uint32_t, std::uint32_t>>;

enum class NodeSplit : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

struct TileGraph {
  std::size_t num_features = 0;
  std::vector<float> features;  // N x num_features, may be empty before encoding
  EdgeList edges;
  std::vector<Point2> coords;
  std::vector<int> labels;
  std::vector<float> weights;
  std::vector<NodeSplit> mask;
  std::vector<std::uint32_t> tile_index;  // node -> tile id in its TileMap

  std::size_t num_nodes() const { return coords.size(); }
  std::vector<std::size_t> degrees() const;
};

// Directed kNN by Euclidean distance (ties to the lower id), then
// symmetrized. Throws ConfigError when N <= k.
EdgeList build_knn_graph(std::span<const Point2> coords, std::size_t k = 2);

struct GraphAugmentParams {
  bool jitter = true;
  double jitter_fraction = 0.5;  // uniform noise of +-fraction * grid_step
  double grid_step = 14.142;
  bool drop_nodes = true;
  double max_drop = 0.3;
  double fixed_drop = -1.0;  // >= 0 forces this drop fraction
  std::size_t k = 2;
};

void to_json(nlohmann::json& j, const GraphAugmentParams& a);
void from_json(const nlohmann::json& j, GraphAugmentParams& a);

// Jitters centroids and rebuilds the kNN edges, then drops a random node
// fraction (edges to dropped nodes vanish). Per-node arrays follow the
// surviving nodes. Dropping is skipped if fewer than k + 1 nodes would
// remain.
TileGraph augment_graph(const TileGraph& graph, std::uint64_t seed, const GraphAugmentParams& params);

struct GatConfig {
  std::size_t hidden = 64;
  std::size_t layers = 3;
  std::size_t heads = 3;
  double dropout_before_last = 0.3;
  double attention_slope = 0.2;

  void validate() const;
};

void to_json(nlohmann::json& j, const GatConfig& c);
void from_json(const nlohmann::json& j, GatConfig& c);

// Attention coefficients of one (layer, head): alpha[e] for the message
// source[e] -> target[e]; every node also attends to itself.
struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<std::uint32_t> source;
  std::vector<std::uint32_t> target;
  std::vector<double> alpha;
};

// Graph attention network. Hidden layers concatenate heads and apply ReLU;
// the last layer averages heads into class logits.
template <typename T>
class GatModel {
 public:
  GatModel(const GatConfig& cfg, std::size_t in_features, std::size_t num_classes,
           std::uint64_t seed);

  // x: [N, in_features]. Returns logits [N, num_classes].
  ad::Tensor<T> forward(ad::Tape<T>& tape, const ad::Tensor<T>& x, const EdgeList& edges,
                        bool train, std::uint64_t dropout_seed = 0,
                        std::vector<AttentionRecord>* attention = nullptr);

  const GatConfig& config() const { return cfg_; }
  std::size_t in_features() const { return in_features_; }
  std::size_t num_classes() const { return num_classes_; }

  ParameterList<T> parameters() const;
  void load_state(const ParameterList<float>& source);
  void zero_grad();

  struct Head {
    ad::Tensor<T> weight;   // [in, out]
    ad::Tensor<T> att_src;  // [out, 1]
    ad::Tensor<T> att_dst;  // [out, 1]
  };
  struct Layer {
    std::vector<Head> heads;
    ad::Tensor<T> bias;
  };
  std::vector<Layer>& layers() { return layers_; }

 private:
  GatConfig cfg_;
  std::size_t in_features_;
  std::size_t num_classes_;
  std::vector<Layer> layers_;
};

// Graph file: <path>.json (nodes with id/coords/label/weight/mask/tile,
// edges as id pairs) and <path>.bin (N x F little-endian f32 features).
void save_graph(const TileGraph& g, const std::filesystem::path& path);
TileGraph load_graph(const std::filesystem::path& path);

}  // namespace hsiseg
