#include "hsiseg/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "hsiseg/error.hpp"
#include "hsiseg/rng.hpp"

namespace hsiseg {

void CnnConfig::validate() const {
  if (in_channels < 1 || compressed_channels < 1 || base_features < 2 || num_classes < 2) {
    throw ConfigError("CnnConfig: channel counts must be positive and num_classes >= 2");
  }
  if (head_dropout < 0.0 || head_dropout >= 1.0) throw ConfigError("CnnConfig: head_dropout must lie in [0, 1)");
  for (auto s : strides) {
    if (s == 0) throw ConfigError("CnnConfig: strides must be positive");
  }
}

void to_json(nlohmann::json& j, const CnnConfig& c) {
  j = {{"in_channels", c.in_channels},     {"compressed_channels", c.compressed_channels},
       {"base_features", c.base_features}, {"kernels", c.kernels},
       {"strides", c.strides},             {"paddings", c.paddings},
       {"num_classes", c.num_classes},     {"patch_size", c.patch_size},
       {"head_dropout", c.head_dropout},   {"batch_norm", c.batch_norm},
       {"leaky_slope", c.leaky_slope}};
}

void from_json(const nlohmann::json& j, CnnConfig& c) {
  CnnConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.compressed_channels = j.value("compressed_channels", d.compressed_channels);
  c.base_features = j.value("base_features", d.base_features);
  c.kernels = j.value("kernels", d.kernels);
  c.strides = j.value("strides", d.strides);
  c.paddings = j.value("paddings", d.paddings);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.head_dropout = j.value("head_dropout", d.head_dropout);
  c.batch_norm = j.value("batch_norm", d.batch_norm);
  c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
}

namespace {

template <typename T>
ad::Tensor<T> kaiming(ad::Shape shape, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return ad::Tensor<T>(std::move(shape), std::move(v), true);
}

}  // namespace

template <typename T>
CnnModel<T>::CnnModel(const CnnConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(splitmix64(seed));
  const double gain = std::sqrt(2.0 / (1.0 + cfg_.leaky_slope * cfg_.leaky_slope));
  compress_w_ = kaiming<T>({cfg_.compressed_channels, cfg_.in_channels, 1, 1}, cfg_.in_channels, 1.0, rng);
  compress_b_ = ad::Tensor<T>::zeros({cfg_.compressed_channels}, true);
  std::size_t in = cfg_.compressed_channels;
  const auto feats = cfg_.block_features();
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t k = cfg_.kernels[i];
    Block b;
    b.weight = kaiming<T>({feats[i], in, k, k}, in * k * k, gain, rng);
    b.bias = ad::Tensor<T>::zeros({feats[i]}, true);
    b.gamma = ad::Tensor<T>::full({feats[i]}, T(1), true);
    b.beta = ad::Tensor<T>::zeros({feats[i]}, true);
    b.stats = ad::BatchNormState<T>(feats[i]);
    blocks_.push_back(std::move(b));
    in = feats[i];
  }
  head_w_ = kaiming<T>({cfg_.num_classes, cfg_.embedding_dim()}, cfg_.embedding_dim(), 1.0, rng);
  head_b_ = ad::Tensor<T>::zeros({cfg_.num_classes}, true);
}

template <typename T>
typename CnnModel<T>::Output CnnModel<T>::forward(ad::Tape<T>& tape, const ad::Tensor<T>& x,
                                                  bool train, std::uint64_t dropout_seed) {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.patch_size ||
      x.dim(3) != cfg_.patch_size) {
    throw ShapeError("cnn_forward: got input " + ad::shape_str(x.shape()) + ", expected [B, " +
                     std::to_string(cfg_.in_channels) + ", " + std::to_string(cfg_.patch_size) +
                     ", " + std::to_string(cfg_.patch_size) + "]");
  }
  Output out;
  out.trace.push_back(x.shape());
  auto h = ad::conv2d(tape, x, compress_w_, compress_b_, 1, 0);
  out.trace.push_back(h.shape());
  const T slope = static_cast<T>(cfg_.leaky_slope);
  for (std::size_t i = 0; i < 4; ++i) {
    Block& b = blocks_[i];
    h = ad::conv2d(tape, h, b.weight, b.bias, cfg_.strides[i], cfg_.paddings[i]);
    h = ad::leaky_relu(tape, h, slope);
    if (cfg_.batch_norm) h = ad::batch_norm(tape, h, b.gamma, b.beta, b.stats, train);
    out.trace.push_back(h.shape());
  }
  out.embedding = ad::avg_pool_full(tape, h);
  out.trace.push_back(out.embedding.shape());
  auto dropped = ad::dropout(tape, out.embedding, static_cast<T>(cfg_.head_dropout), train, dropout_seed);
  out.logits = ad::linear(tape, dropped, head_w_, head_b_);
  out.trace.push_back(out.logits.shape());
  return out;
}

template <typename T>
ParameterList<T> CnnModel<T>::parameters() const {
  ParameterList<T> p;
  p.push_back({"cnn.compress.weight", compress_w_});
  p.push_back({"cnn.compress.bias", compress_b_});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string prefix = "cnn.block" + std::to_string(i) + ".";
    p.push_back({prefix + "weight", blocks_[i].weight});
    p.push_back({prefix + "bias", blocks_[i].bias});
    if (cfg_.batch_norm) {
      p.push_back({prefix + "bn.gamma", blocks_[i].gamma});
      p.push_back({prefix + "bn.beta", blocks_[i].beta});
    }
  }
  p.push_back({"cnn.head.weight", head_w_});
  p.push_back({"cnn.head.bias", head_b_});
  return p;
}

template <typename T>
ParameterList<T> CnnModel<T>::state() const {
  auto p = parameters();
  if (!cfg_.batch_norm) return p;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string prefix = "cnn.block" + std::to_string(i) + ".bn.";
    const auto& s = blocks_[i].stats;
    p.push_back({prefix + "running_mean", ad::Tensor<T>({s.running_mean.size()}, s.running_mean)});
    p.push_back({prefix + "running_var", ad::Tensor<T>({s.running_var.size()}, s.running_var)});
  }
  return p;
}

template <typename T>
void CnnModel<T>::load_state(const ParameterList<float>& source) {
  const auto st = state();
  assign_parameters(st, source);
  if (!cfg_.batch_norm) return;
  // Running statistics were copied into temporaries; pull them back.
  std::size_t idx = parameters().size();
  for (auto& b : blocks_) {
    const auto rm = st[idx++].tensor.values();
    const auto rv = st[idx++].tensor.values();
    b.stats.running_mean.assign(rm.begin(), rm.end());
    b.stats.running_var.assign(rv.begin(), rv.end());
  }
}

template <typename T>
void CnnModel<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <typename T>
ad::Tensor<T> patches_to_batch(std::span<const TilePatch> patches) {
  if (patches.empty()) throw ShapeError("patches_to_batch: empty batch");
  const std::size_t s = patches[0].size, c = patches[0].channels;
  std::vector<T> v(patches.size() * c * s * s);
  for (std::size_t b = 0; b < patches.size(); ++b) {
    const auto& p = patches[b];
    if (p.size != s || p.channels != c) throw ShapeError("patches_to_batch: mixed patch shapes");
    T* dst = v.data() + b * c * s * s;
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x)
        for (std::size_t l = 0; l < c; ++l) dst[(l * s + y) * s + x] = static_cast<T>(p.data[(y * s + x) * c + l]);
  }
  return ad::Tensor<T>({patches.size(), c, s, s}, std::move(v));
}

// ---------------------------------------------------------------- augmentation

void to_json(nlohmann::json& j, const AugmentParams& a) {
  j = {{"p_shift", a.p_shift},         {"max_shift", a.max_shift},
       {"p_brightness", a.p_brightness}, {"brightness_min", a.brightness_min},
       {"brightness_max", a.brightness_max}, {"p_rotate", a.p_rotate},
       {"p_rescale", a.p_rescale},     {"scale_min", a.scale_min},
       {"scale_max", a.scale_max},     {"p_blur", a.p_blur},
       {"blur_sigma_max", a.blur_sigma_max}};
}

void from_json(const nlohmann::json& j, AugmentParams& a) {
  AugmentParams d;
  a.p_shift = j.value("p_shift", d.p_shift);
  a.max_shift = j.value("max_shift", d.max_shift);
  a.p_brightness = j.value("p_brightness", d.p_brightness);
  a.brightness_min = j.value("brightness_min", d.brightness_min);
  a.brightness_max = j.value("brightness_max", d.brightness_max);
  a.p_rotate = j.value("p_rotate", d.p_rotate);
  a.p_rescale = j.value("p_rescale", d.p_rescale);
  a.scale_min = j.value("scale_min", d.scale_min);
  a.scale_max = j.value("scale_max", d.scale_max);
  a.p_blur = j.value("p_blur", d.p_blur);
  a.blur_sigma_max = j.value("blur_sigma_max", d.blur_sigma_max);
}

namespace {

TilePatch empty_like(const TilePatch& p) {
  TilePatch out = p;
  std::fill(out.data.begin(), out.data.end(), 0.0F);
  return out;
}

}  // namespace

TilePatch shift_patch(const TilePatch& p, int dx, int dy) {
  TilePatch out = empty_like(p);
  const int s = static_cast<int>(p.size);
  const std::size_t c = p.channels;
  for (int y = 0; y < s; ++y) {
    const int sy = y - dy;
    if (sy < 0 || sy >= s) continue;
    for (int x = 0; x < s; ++x) {
      const int sx = x - dx;
      if (sx < 0 || sx >= s) continue;
      std::copy_n(p.data.begin() + (sy * s + sx) * static_cast<long>(c), c,
                  out.data.begin() + (y * s + x) * static_cast<long>(c));
    }
  }
  return out;
}

TilePatch scale_brightness(const TilePatch& p, double factor) {
  TilePatch out = p;
  for (auto& v : out.data) v = std::clamp(static_cast<float>(v * factor), 0.0F, 1.0F);
  return out;
}

TilePatch rotate_patch(const TilePatch& p, int quarter_turns) {
  const int turns = ((quarter_turns % 4) + 4) % 4;
  if (turns == 0) return p;
  TilePatch out = empty_like(p);
  const std::size_t s = p.size, c = p.channels;
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      std::size_t nx = x, ny = y;
      if (turns == 1) {
        nx = s - 1 - y;
        ny = x;
      } else if (turns == 2) {
        nx = s - 1 - x;
        ny = s - 1 - y;
      } else {
        nx = y;
        ny = s - 1 - x;
      }
      std::copy_n(p.data.begin() + static_cast<long>((y * s + x) * c), c,
                  out.data.begin() + static_cast<long>((ny * s + nx) * c));
    }
  }
  return out;
}

TilePatch rescale_patch(const TilePatch& p, double factor) {
  TilePatch out = empty_like(p);
  const int s = static_cast<int>(p.size);
  const std::size_t c = p.channels;
  const double mid = (s - 1) / 2.0;
  for (int y = 0; y < s; ++y) {
    const auto sy = static_cast<int>(std::lround((y - mid) / factor + mid));
    if (sy < 0 || sy >= s) continue;
    for (int x = 0; x < s; ++x) {
      const auto sx = static_cast<int>(std::lround((x - mid) / factor + mid));
      if (sx < 0 || sx >= s) continue;
      std::copy_n(p.data.begin() + (sy * s + sx) * static_cast<long>(c), c,
                  out.data.begin() + (y * s + x) * static_cast<long>(c));
    }
  }
  return out;
}

TilePatch blur_patch(const TilePatch& p, double sigma) {
  if (sigma <= 1e-6) return p;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<float> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
    norm += kernel[i + radius];
  }
  for (auto& k : kernel) k = static_cast<float>(k / norm);
  const int s = static_cast<int>(p.size);
  const auto c = static_cast<int>(p.channels);
  TilePatch tmp = empty_like(p);
  TilePatch out = empty_like(p);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int i = -radius; i <= radius; ++i) {
        const int sx = x + i;
        if (sx < 0 || sx >= s) continue;
        for (int l = 0; l < c; ++l) tmp.data[(y * s + x) * c + l] += kernel[i + radius] * p.data[(y * s + sx) * c + l];
      }
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int i = -radius; i <= radius; ++i) {
        const int sy = y + i;
        if (sy < 0 || sy >= s) continue;
        for (int l = 0; l < c; ++l) out.data[(y * s + x) * c + l] += kernel[i + radius] * tmp.data[(sy * s + x) * c + l];
      }
  return out;
}

TilePatch augment_patch(const TilePatch& patch, std::uint64_t seed, const AugmentParams& params) {
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  // Draw every random quantity up front so each transform's parameters do
  // not depend on which others fired.
  const bool do_shift = u01(rng) < params.p_shift;
  std::uniform_int_distribution<int> shift(-params.max_shift, params.max_shift);
  const int dx = shift(rng), dy = shift(rng);
  const bool do_bright = u01(rng) < params.p_brightness;
  const double bright = params.brightness_min + (params.brightness_max - params.brightness_min) * u01(rng);
  const bool do_rot = u01(rng) < params.p_rotate;
  const int turns = 1 + static_cast<int>(u01(rng) * 3.0);
  const bool do_scale = u01(rng) < params.p_rescale;
  const double factor = params.scale_min + (params.scale_max - params.scale_min) * u01(rng);
  const bool do_blur = u01(rng) < params.p_blur;
  const double sigma = params.blur_sigma_max * u01(rng);

  TilePatch out = patch;
  if (do_shift) out = shift_patch(out, dx, dy);
  if (do_bright) out = scale_brightness(out, bright);
  if (do_rot) out = rotate_patch(out, std::min(turns, 3));
  if (do_scale) out = rescale_patch(out, factor);
  if (do_blur) out = blur_patch(out, sigma);
  return out;
}

template class CnnModel<float>;
template class CnnModel<double>;
template ad::Tensor<float> patches_to_batch<float>(std::span<const TilePatch>);
template ad::Tensor<double> patches_to_batch<double>(std::span<const TilePatch>);

}  // namespace hsiseg
