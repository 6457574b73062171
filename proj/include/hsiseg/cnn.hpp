#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsiseg/autodiff.hpp"
#include "hsiseg/checkpoint.hpp"
#include "hsiseg/tiling.hpp"

namespace hsiseg {

struct CnnConfig {
  std::size_t in_channels = 109;
  std::size_t compressed_channels = 12;
  std::size_t base_features = 12;  // blocks produce (N/2, N, 2N, 4N) features
  std::array<std::size_t, 4> kernels{3, 4, 4, 4};
  std::array<std::size_t, 4> strides{1, 2, 2, 2};
  std::array<std::size_t, 4> paddings{1, 1, 1, 1};
  std::size_t num_classes = 3;
  std::size_t patch_size = 48;
  double head_dropout = 0.5;
  bool batch_norm = true;
  double leaky_slope = 0.01;

  std::array<std::size_t, 4> block_features() const {
    return {base_features / 2, base_features, 2 * base_features, 4 * base_features};
  }
  std::size_t embedding_dim() const { return 4 * base_features; }

  // Settings used when the network is the backbone of the graph model.
  CnnConfig as_gnn_backbone() const {
    CnnConfig c = *this;
    c.head_dropout = 0.3;
    c.batch_norm = false;
    return c;
  }

  void validate() const;
};

void to_json(nlohmann::json& j, const CnnConfig& c);
void from_json(const nlohmann::json& j, CnnConfig& c);

// Tile encoder and classifier: 1x1 channel compression, four conv blocks
// (conv -> LeakyReLU -> BatchNorm), global average pooling to the
// embedding, dropout and a linear head.
template <typename T>
class CnnModel {
 public:
  struct Output {
    ad::Tensor<T> embedding;  // [B, embedding_dim]
    ad::Tensor<T> logits;     // [B, num_classes]
    std::vector<ad::Shape> trace;  // input, compressed, each block, pooled, logits
  };

  CnnModel(const CnnConfig& cfg, std::uint64_t seed);

  // x: [B, in_channels, patch, patch].
  Output forward(ad::Tape<T>& tape, const ad::Tensor<T>& x, bool train,
                 std::uint64_t dropout_seed = 0);

  const CnnConfig& config() const { return cfg_; }

  // Learnable tensors, named cnn.*.
  ParameterList<T> parameters() const;
  // Parameters plus batch-norm running statistics, for checkpoints.
  ParameterList<T> state() const;
  void load_state(const ParameterList<float>& source);
  void zero_grad();

 private:
  struct Block {
    ad::Tensor<T> weight, bias, gamma, beta;
    ad::BatchNormState<T> stats;
  };
  CnnConfig cfg_;
  ad::Tensor<T> compress_w_, compress_b_;
  std::vector<Block> blocks_;
  ad::Tensor<T> head_w_, head_b_;
};

// Channel-last patches -> [B, C, H, W] tensor.
template <typename T>
ad::Tensor<T> patches_to_batch(std::span<const TilePatch> patches);

struct AugmentParams {
  double p_shift = 0.5;
  int max_shift = 4;
  double p_brightness = 0.5;
  double brightness_min = 0.9;
  double brightness_max = 1.1;
  double p_rotate = 0.5;
  double p_rescale = 0.5;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double p_blur = 0.5;
  double blur_sigma_max = 1.0;

  static AugmentParams none() {
    AugmentParams a;
    a.p_shift = a.p_brightness = a.p_rotate = a.p_rescale = a.p_blur = 0.0;
    return a;
  }
};

void to_json(nlohmann::json& j, const AugmentParams& a);
void from_json(const nlohmann::json& j, AugmentParams& a);

// Random shift, brightness, right-angle rotation, rescale and Gaussian blur,
// each applied with its own probability. Deterministic in `seed`.
TilePatch augment_patch(const TilePatch& patch, std::uint64_t seed, const AugmentParams& params);

// Individual transforms, exposed for tests.
TilePatch shift_patch(const TilePatch& p, int dx, int dy);
TilePatch scale_brightness(const TilePatch& p, double factor);
TilePatch rotate_patch(const TilePatch& p, int quarter_turns);
TilePatch rescale_patch(const TilePatch& p, double factor);
TilePatch blur_patch(const TilePatch& p, double sigma);

}  // namespace hsiseg
