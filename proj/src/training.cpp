#include "hsiseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "hsiseg/binary_io.hpp"
#include "hsiseg/checkpoint.hpp"
#include "hsiseg/classes.hpp"
#include "hsiseg/error.hpp"
#include "hsiseg/eval.hpp"
#include "hsiseg/rng.hpp"

namespace hsiseg {

std::string to_string(ModelKind m) { return m == ModelKind::kCnn ? "cnn" : "cnn+gnn"; }

std::string to_string(TileRegime r) {
  switch (r) {
    case TileRegime::kGoodOnly: return "good_only";
    case TileRegime::kAll: return "all";
    case TileRegime::kAllWeighted: return "all_weighted";
  }
  return "?";
}

ModelKind parse_model(const std::string& s) {
  if (s == "cnn") return ModelKind::kCnn;
  if (s == "cnn+gnn" || s == "gnn") return ModelKind::kCnnGnn;
  throw ConfigError("unknown model '" + s + "' (expected cnn or cnn+gnn)");
}

TileRegime parse_regime(const std::string& s) {
  if (s == "good_only" || s == "g") return TileRegime::kGoodOnly;
  if (s == "all" || s == "a") return TileRegime::kAll;
  if (s == "all_weighted" || s == "aW") return TileRegime::kAllWeighted;
  throw ConfigError("unknown tile regime '" + s + "' (expected good_only, all or all_weighted)");
}

std::string run_tag(ModelKind m, TileRegime r) {
  const char* suffix = r == TileRegime::kGoodOnly ? "_g" : r == TileRegime::kAll ? "_a" : "_aW";
  return std::string(m == ModelKind::kCnn ? "CNN" : "GNN") + suffix;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (cnn_loss_coef < 0.0 || gnn_loss_coef < 0.0) throw ConfigError("train: loss coefficients must be >= 0");
  if (model == ModelKind::kCnn && cnn_loss_coef == 0.0) {
    throw ConfigError("train: the CNN model needs a positive cnn_loss_coef");
  }
  if (model == ModelKind::kCnnGnn && cnn_loss_coef == 0.0 && gnn_loss_coef == 0.0) {
    throw ConfigError("train: both loss coefficients are zero");
  }
  if (knn_k == 0) throw ConfigError("train: knn_k must be positive");
  cnn.validate();
  gat.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", to_string(c.model)},
       {"tile_regime", to_string(c.regime)},
       {"epochs", c.epochs},
       {"lr", c.lr},
       {"optimizer", to_string(c.optimizer)},
       {"momentum", c.momentum},
       {"cosine_decay", c.cosine_decay},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"patience", c.patience},
       {"cnn_loss_coef", c.cnn_loss_coef},
       {"gnn_loss_coef", c.gnn_loss_coef},
       {"knn_k", c.knn_k},
       {"augment", c.augment},
       {"augment_params", c.augment_params},
       {"graph_augment", c.graph_augment},
       {"graph_augment_params", c.graph_augment_params},
       {"cnn", c.cnn},
       {"gat", c.gat}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.model = parse_model(j.value("model", to_string(d.model)));
  c.regime = parse_regime(j.value("tile_regime", to_string(d.regime)));
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.optimizer = parse_optimizer(j.value("optimizer", to_string(d.optimizer)));
  c.momentum = j.value("momentum", d.momentum);
  c.cosine_decay = j.value("cosine_decay", d.cosine_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.patience = j.value("patience", d.patience);
  c.cnn_loss_coef = j.value("cnn_loss_coef", d.cnn_loss_coef);
  c.gnn_loss_coef = j.value("gnn_loss_coef", d.gnn_loss_coef);
  c.knn_k = j.value("knn_k", d.knn_k);
  c.augment = j.value("augment", d.augment);
  c.augment_params = j.value("augment_params", d.augment_params);
  c.graph_augment = j.value("graph_augment", d.graph_augment);
  c.graph_augment_params = j.value("graph_augment_params", d.graph_augment_params);
  c.cnn = j.value("cnn", d.cnn);
  c.gat = j.value("gat", d.gat);
}

void to_json(nlohmann::json& j, const PrepareParams& p) {
  j = {{"target_pixels_per_tile", p.slic.target_pixels_per_tile},
       {"compactness", p.slic.compactness ? nlohmann::json(*p.slic.compactness) : nlohmann::json(nullptr)},
       {"max_iters", p.slic.max_iters},
       {"distance", to_string(p.slic.distance)},
       {"enforce_connectivity", p.slic.enforce_connectivity},
       {"uniformity_percentile", p.filter.uniformity_percentile},
       {"intensity_low_percentile", p.filter.intensity_low_percentile},
       {"intensity_high_percentile", p.filter.intensity_high_percentile},
       {"patch_size", p.patch_size}};
}

void from_json(const nlohmann::json& j, PrepareParams& p) {
  PrepareParams d;
  p.slic.target_pixels_per_tile = j.value("target_pixels_per_tile", d.slic.target_pixels_per_tile);
  if (j.contains("compactness") && !j.at("compactness").is_null()) {
    p.slic.compactness = j.at("compactness").get<double>();
  } else {
    p.slic.compactness.reset();
  }
  p.slic.max_iters = j.value("max_iters", d.slic.max_iters);
  p.slic.distance = parse_distance(j.value("distance", to_string(d.slic.distance)));
  p.slic.enforce_connectivity = j.value("enforce_connectivity", d.slic.enforce_connectivity);
  p.filter.uniformity_percentile = j.value("uniformity_percentile", d.filter.uniformity_percentile);
  p.filter.intensity_low_percentile = j.value("intensity_low_percentile", d.filter.intensity_low_percentile);
  p.filter.intensity_high_percentile =
      j.value("intensity_high_percentile", d.filter.intensity_high_percentile);
  p.patch_size = j.value("patch_size", d.patch_size);
}

// ---------------------------------------------------------------- images

TilePatch PreparedImage::patch(std::size_t tile) const {
  return extract_tile_patch(cube, map.tiles.at(tile), patch_size);
}

PreparedImage prepare_image(std::string name, HsiCube cube, TileMap map,
                            std::span<const std::uint8_t> label_map, const PrepareParams& params) {
  PreparedImage img;
  img.name = std::move(name);
  img.patch_size = params.patch_size;
  img.grid_step = std::sqrt(static_cast<double>(params.slic.target_pixels_per_tile));
  if (!label_map.empty()) {
    if (label_map.size() != cube.num_pixels()) {
      throw ShapeError("prepare_image: label map has " + std::to_string(label_map.size()) +
                       " pixels, cube has " + std::to_string(cube.num_pixels()));
    }
    assign_tile_labels(map, label_map);
  }
  std::vector<bool> uniform;
  for (const auto& t : map.tiles) {
    img.quality.push_back(compute_quality(cube, t));
    img.labels.push_back(t.label.value_or(-1));
    img.weights.push_back(static_cast<float>(loss_weight(img.quality.back(), params.weights)));
    img.coords.push_back(t.centroid);
    uniform.push_back(t.label_uniform);
  }
  img.filter = filter_high_quality(img.quality, uniform, params.filter);
  img.cube = std::move(cube);
  img.map = std::move(map);
  return img;
}

PreparedImage prepare_image(std::string name, HsiCube cube, std::span<const std::uint8_t> label_map,
                            const PrepareParams& params) {
  auto slic = slic_segment(cube, params.slic);
  auto img = prepare_image(std::move(name), std::move(cube), std::move(slic.map), label_map, params);
  img.grid_step = slic.grid_step;
  return img;
}

std::vector<std::size_t> select_tiles(const PreparedImage& img, TileRegime regime) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < img.num_tiles(); ++t) {
    if (img.labels[t] < 0) continue;
    if (regime == TileRegime::kGoodOnly && !img.filter.kept[t]) continue;
    out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------- split

std::string to_string(SplitPart p) {
  switch (p) {
    case SplitPart::kTrain: return "train";
    case SplitPart::kVal: return "val";
    case SplitPart::kTest: return "test";
  }
  return "?";
}

std::vector<std::size_t> DatasetSplit::indices(SplitPart part) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] == part) out.push_back(i);
  }
  return out;
}

void to_json(nlohmann::json& j, const DatasetSplit& s) {
  j = nlohmann::json::object();
  for (auto part : {SplitPart::kTrain, SplitPart::kVal, SplitPart::kTest}) {
    j[to_string(part)] = s.indices(part);
  }
}

void from_json(const nlohmann::json& j, DatasetSplit& s) {
  std::size_t n = 0;
  for (const char* key : {"train", "val", "test"}) {
    for (const auto& v : j.at(key)) n = std::max(n, v.get<std::size_t>() + 1);
  }
  s.assignment.assign(n, SplitPart::kTrain);
  std::vector<bool> seen(n, false);
  for (auto part : {SplitPart::kTrain, SplitPart::kVal, SplitPart::kTest}) {
    for (const auto& v : j.at(to_string(part))) {
      const auto i = v.get<std::size_t>();
      if (seen[i]) throw FormatError("split: image " + std::to_string(i) + " listed twice", 0);
      seen[i] = true;
      s.assignment[i] = part;
    }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw FormatError("split: image indices are not contiguous", 0);
  }
}

DatasetSplit make_split(std::span<const std::size_t> tiles_per_image,
                        const std::array<double, 3>& fractions, std::uint64_t seed) {
  if (tiles_per_image.size() < 3) throw ConfigError("make_split: need at least 3 images");
  double total_fraction = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0) || !std::isfinite(f)) throw ConfigError("make_split: fractions must be >= 0");
    total_fraction += f;
  }
  if (std::abs(total_fraction - 1.0) > 1e-9) throw ConfigError("make_split: fractions must sum to 1");

  const std::size_t n = tiles_per_image.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(splitmix64(seed ^ 0x5B117ULL));
  std::shuffle(order.begin(), order.end(), rng);

  const double total = std::accumulate(tiles_per_image.begin(), tiles_per_image.end(), 0.0);
  std::array<double, 3> have{0.0, 0.0, 0.0};
  DatasetSplit split;
  split.assignment.assign(n, SplitPart::kTrain);
  for (std::size_t i : order) {
    std::size_t best = 0;
    double best_deficit = -1e300;
    for (std::size_t k = 0; k < 3; ++k) {
      if (fractions[k] == 0.0) continue;
      const double deficit = fractions[k] * total - have[k];
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = k;
      }
    }
    split.assignment[i] = static_cast<SplitPart>(best);
    have[best] += static_cast<double>(tiles_per_image[i]);
  }
  return split;
}

// ---------------------------------------------------------------- loss / optimizer

ad::Tensor<float> weighted_cross_entropy(ad::Tape<float>& tape, const ad::Tensor<float>& logits,
                                         std::span<const int> labels, std::span<const float> weights) {
  return ad::cross_entropy(tape, logits, labels, weights);
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

Optimizer::Optimizer(ParameterList<float> params, OptimizerKind kind, double momentum)
    : params_(std::move(params)), kind_(kind), t_(params_.size(), 0.0F), momentum_(momentum) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0F);
    v_.emplace_back(kind_ == OptimizerKind::kAdam ? p.tensor.numel() : 0, 0.0F);
  }
}

void Optimizer::step(double lr) {
  const auto mu = static_cast<float>(momentum_);
  const auto eta = static_cast<float>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto w = t.mutable_values();
    auto& m = m_[i];
    if (kind_ == OptimizerKind::kSgd) {
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = mu * m[k] + g[k];
        w[k] -= eta * m[k];
      }
      continue;
    }
    constexpr double beta2 = 0.999, eps = 1e-8;
    auto& v = v_[i];
    t_[i] += 1.0F;
    const double c1 = 1.0 - std::pow(static_cast<double>(mu), static_cast<double>(t_[i]));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_[i]));
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = mu * m[k] + (1.0F - mu) * g[k];
      v[k] = static_cast<float>(beta2) * v[k] + static_cast<float>(1.0 - beta2) * g[k] * g[k];
      const double mh = m[k] / c1, vh = v[k] / c2;
      w[k] -= static_cast<float>(lr * mh / (std::sqrt(vh) + eps));
    }
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

ParameterList<float> Optimizer::state() const {
  ParameterList<float> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({"opt.m." + params_[i].name, ad::Tensor<float>(params_[i].tensor.shape(), m_[i])});
    if (kind_ == OptimizerKind::kAdam) {
      out.push_back({"opt.v." + params_[i].name, ad::Tensor<float>(params_[i].tensor.shape(), v_[i])});
    }
  }
  out.push_back({"opt.t", ad::Tensor<float>({t_.size()}, t_)});
  return out;
}

void Optimizer::load_state(const ParameterList<float>& source) {
  const auto st = state();
  assign_parameters(st, source);
  std::size_t j = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto m = st[j++].tensor.values();
    m_[i].assign(m.begin(), m.end());
    if (kind_ == OptimizerKind::kAdam) {
      const auto v = st[j++].tensor.values();
      v_[i].assign(v.begin(), v.end());
    }
  }
  const auto t = st[j].tensor.values();
  t_.assign(t.begin(), t.end());
}

double cosine_lr(double base, std::size_t epoch, std::size_t epochs) {
  if (epochs <= 1) return base;
  return 0.5 * base *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

void to_json(nlohmann::json& j, const EpochStats& e) {
  j = {{"epoch", e.epoch},
       {"lr", e.lr},
       {"train_loss", e.train_loss},
       {"train_loss_cnn", e.train_loss_cnn},
       {"train_loss_gnn", e.train_loss_gnn},
       {"val_loss", e.val_loss},
       {"val_macro_accuracy", e.val_macro_accuracy},
       {"steps", e.steps}};
}

void from_json(const nlohmann::json& j, EpochStats& e) {
  e.epoch = j.at("epoch").get<std::size_t>();
  e.lr = j.at("lr").get<double>();
  e.train_loss = j.at("train_loss").get<double>();
  e.train_loss_cnn = j.at("train_loss_cnn").get<double>();
  e.train_loss_gnn = j.at("train_loss_gnn").get<double>();
  e.val_loss = j.at("val_loss").get<double>();
  e.val_macro_accuracy = j.at("val_macro_accuracy").get<double>();
  e.steps = j.at("steps").get<std::size_t>();
}

// ---------------------------------------------------------------- inference

std::vector<int> argmax_rows(std::span<const float> probs, std::size_t num_classes) {
  std::vector<int> out(probs.size() / num_classes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto row = probs.subspan(i * num_classes, num_classes);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

namespace {

std::vector<std::size_t> all_tiles(const PreparedImage& img) {
  std::vector<std::size_t> t(img.num_tiles());
  std::iota(t.begin(), t.end(), std::size_t{0});
  return t;
}

ad::Tensor<float> tiles_to_batch(const PreparedImage& img, std::span<const std::size_t> tiles,
                                 bool augment, const AugmentParams& aug,
                                 const std::function<std::uint64_t(std::size_t)>& seed_of) {
  std::vector<TilePatch> patches;
  patches.reserve(tiles.size());
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    auto p = img.patch(tiles[i]);
    if (augment) p = augment_patch(p, seed_of(i), aug);
    patches.push_back(std::move(p));
  }
  return patches_to_batch<float>(patches);
}

void check_channels(std::span<const PreparedImage> images, const CnnConfig& cnn) {
  for (const auto& img : images) {
    if (img.cube.channels() != cnn.in_channels) {
      throw ConfigError("image '" + img.name + "' has " + std::to_string(img.cube.channels()) +
                        " channels, model expects " + std::to_string(cnn.in_channels));
    }
    if (img.patch_size != cnn.patch_size) {
      throw ConfigError("image '" + img.name + "' patch size differs from the model's");
    }
  }
}

}  // namespace

std::vector<float> predict_cnn(CnnModel<float>& cnn, const PreparedImage& img,
                               std::span<const std::size_t> tiles, std::size_t batch) {
  std::vector<std::size_t> owned;
  if (tiles.empty()) {
    owned = all_tiles(img);
    tiles = owned;
  }
  std::vector<float> probs;
  probs.reserve(tiles.size() * cnn.config().num_classes);
  for (std::size_t b = 0; b < tiles.size(); b += batch) {
    const auto chunk = tiles.subspan(b, std::min(batch, tiles.size() - b));
    const auto x = tiles_to_batch(img, chunk, false, {}, {});
    ad::Tape<float> tape;
    const auto out = cnn.forward(tape, x, false);
    const auto p = ad::softmax(tape, ad::detach(out.logits));
    probs.insert(probs.end(), p.values().begin(), p.values().end());
  }
  return probs;
}

std::vector<float> predict_gnn(CnnModel<float>& cnn, GatModel<float>& gat, const PreparedImage& img,
                               std::size_t k, std::span<const std::size_t> tiles,
                               std::vector<AttentionRecord>* attention) {
  std::vector<std::size_t> owned;
  if (tiles.empty()) {
    owned = all_tiles(img);
    tiles = owned;
  }
  std::vector<Point2> coords;
  for (auto t : tiles) coords.push_back(img.coords[t]);
  const auto edges = build_knn_graph(coords, k);
  // Embeddings in chunks keep the im2col buffers small; the GAT then sees the
  // whole graph at once.
  std::vector<float> emb;
  const std::size_t dim = cnn.config().embedding_dim();
  for (std::size_t b = 0; b < tiles.size(); b += 64) {
    const auto chunk = tiles.subspan(b, std::min<std::size_t>(64, tiles.size() - b));
    ad::Tape<float> tape;
    const auto out = cnn.forward(tape, tiles_to_batch(img, chunk, false, {}, {}), false);
    emb.insert(emb.end(), out.embedding.values().begin(), out.embedding.values().end());
  }
  ad::Tape<float> tape;
  const ad::Tensor<float> x({tiles.size(), dim}, std::move(emb));
  const auto logits = gat.forward(tape, x, edges, false, 0, attention);
  const auto p = ad::softmax(tape, ad::detach(logits));
  return {p.values().begin(), p.values().end()};
}

std::vector<float> predict(TrainResult& model, const PreparedImage& img, std::size_t k) {
  if (model.model == ModelKind::kCnnGnn) {
    if (!model.gat) throw ConfigError("predict: graph model has no GAT parameters");
    return predict_gnn(model.cnn, *model.gat, img, k);
  }
  return predict_cnn(model.cnn, img);
}

// ---------------------------------------------------------------- checkpoints

namespace {

ParameterList<float> model_state(const TrainResult& m) {
  auto st = m.cnn.state();
  if (m.gat) {
    for (auto& p : m.gat->parameters()) st.push_back(p);
  }
  return st;
}

ParameterList<float> deep_copy(const ParameterList<float>& params) {
  ParameterList<float> out;
  for (const auto& p : params) out.push_back({p.name, p.tensor.clone()});
  return out;
}

void load_model_state(TrainResult& m, const ParameterList<float>& src) {
  m.cnn.load_state(src);
  if (m.gat) m.gat->load_state(src);
}

CnnConfig effective_cnn(const TrainConfig& cfg) {
  if (cfg.model != ModelKind::kCnnGnn) return cfg.cnn;
  auto c = cfg.cnn.as_gnn_backbone();
  return c;
}

TrainResult fresh_model(const TrainConfig& cfg) {
  const CnnConfig cc = effective_cnn(cfg);
  TrainResult r(CnnModel<float>(cc, derive_seed({cfg.seed, 1})));
  r.model = cfg.model;
  if (cfg.model == ModelKind::kCnnGnn) {
    r.gat.emplace(cfg.gat, cc.embedding_dim(), cc.num_classes, derive_seed({cfg.seed, 5}));
  }
  return r;
}

void write_history(const std::filesystem::path& run_dir, const std::vector<EpochStats>& history) {
  std::ostringstream os;
  for (const auto& e : history) os << nlohmann::json(e).dump() << '\n';
  io::write_text(run_dir / "history.jsonl", os.str());
}

struct LoopState {
  std::size_t next_epoch = 0;
  std::size_t bad_epochs = 0;
  bool finished = false;
  ParameterList<float> best;
};

struct EvalOut {
  double loss = 0.0;
  double macro_accuracy = -1.0;
};

// Runs the epoch loop shared by both model families: lr schedule, model
// selection on validation macro-accuracy, early stopping, checkpoints and
// resumption.
template <typename StepEpoch, typename Validate>
void run_loop(const TrainConfig& cfg, TrainResult& result, Optimizer& opt, const DatasetSplit& split,
              const TrainOptions& opts, StepEpoch&& step_epoch, Validate&& validate) {
  LoopState st;
  const nlohmann::json cfg_json = cfg;
  const nlohmann::json split_json = split;
  const bool persist = !opts.run_dir.empty();
  const auto ckpt = opts.run_dir / "checkpoints";

  if (persist) {
    io::write_text(opts.run_dir / "config.json",
                   (opts.resolved_config.is_null() ? cfg_json : opts.resolved_config).dump(2));
    io::write_text(opts.run_dir / "split.json", split_json.dump(2));
    if (std::filesystem::exists(ckpt / "last" / "manifest.json")) {
      nlohmann::json meta;
      const auto last = load_parameters(ckpt / "last", &meta);
      if (meta.value("config", nlohmann::json()) == cfg_json &&
          meta.value("split", nlohmann::json()) == split_json) {
        load_model_state(result, last);
        opt.load_state(last);
        st.next_epoch = meta.at("epoch").get<std::size_t>() + 1;
        st.bad_epochs = meta.at("bad_epochs").get<std::size_t>();
        st.finished = meta.at("finished").get<bool>();
        result.best_epoch = meta.at("best_epoch").get<std::size_t>();
        result.best_val_macro_accuracy = meta.at("best_val_macro_accuracy").get<double>();
        result.history = meta.at("history").get<std::vector<EpochStats>>();
        st.best = load_parameters(ckpt / "best");
        result.resumed = true;
      }
    }
  }

  for (std::size_t epoch = st.next_epoch; epoch < cfg.epochs && !st.finished; ++epoch) {
    EpochStats es;
    es.epoch = epoch;
    es.lr = cfg.cosine_decay ? cosine_lr(cfg.lr, epoch, cfg.epochs) : cfg.lr;
    step_epoch(epoch, es);
    const EvalOut ev = validate();
    es.val_loss = ev.loss;
    es.val_macro_accuracy = ev.macro_accuracy;
    result.history.push_back(es);
    if (opts.on_epoch) opts.on_epoch(es);

    const bool has_val = ev.macro_accuracy >= 0.0;
    if (!has_val || st.best.empty() || ev.macro_accuracy > result.best_val_macro_accuracy) {
      result.best_val_macro_accuracy = ev.macro_accuracy;
      result.best_epoch = epoch;
      st.best = deep_copy(model_state(result));
      st.bad_epochs = 0;
      if (persist) {
        save_parameters(st.best, ckpt / "best",
                        {{"epoch", epoch}, {"val_macro_accuracy", ev.macro_accuracy}, {"config", cfg_json}});
      }
    } else {
      ++st.bad_epochs;
    }
    st.finished = epoch + 1 == cfg.epochs || (cfg.patience > 0 && st.bad_epochs >= cfg.patience);

    if (persist) {
      auto last = model_state(result);
      for (auto& p : opt.state()) last.push_back(p);
      save_parameters(last, ckpt / "last",
                      {{"epoch", epoch},
                       {"bad_epochs", st.bad_epochs},
                       {"finished", st.finished},
                       {"best_epoch", result.best_epoch},
                       {"best_val_macro_accuracy", result.best_val_macro_accuracy},
                       {"history", result.history},
                       {"config", cfg_json},
                       {"split", split_json}});
      write_history(opts.run_dir, result.history);
    }
  }
  if (!st.best.empty()) load_model_state(result, st.best);
}

EvalOut evaluate_probs(const std::vector<std::vector<float>>& probs,
                       const std::vector<std::vector<int>>& labels) {
  ConfusionMatrix cm(kNumClasses);
  double loss = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto pred = argmax_rows(probs[i], kNumClasses);
    for (std::size_t t = 0; t < pred.size(); ++t) {
      const int y = labels[i][t];
      cm.add(y, pred[t]);
      loss -= std::log(std::max(1e-12, static_cast<double>(probs[i][t * kNumClasses + y])));
      ++n;
    }
  }
  if (n == 0) return {};
  return {loss / static_cast<double>(n), per_class_metrics(cm).macro_recall};
}

void check_finite(const ad::Tensor<float>& loss, std::size_t epoch) {
  if (!std::isfinite(loss.item())) {
    throw NumericalError("training loss became non-finite in epoch " + std::to_string(epoch));
  }
}

}  // namespace

TrainResult train_cnn(const TrainConfig& cfg, std::span<const PreparedImage> images,
                      const DatasetSplit& split, const TrainOptions& opts) {
  cfg.validate();
  if (cfg.model != ModelKind::kCnn) throw ConfigError("train_cnn: config model is not cnn");
  if (split.assignment.size() != images.size()) throw ShapeError("train_cnn: split does not match images");
  check_channels(images, cfg.cnn);

  struct Sample {
    std::size_t image, tile;
  };
  std::vector<Sample> train_set;
  for (auto i : split.indices(SplitPart::kTrain)) {
    for (auto t : select_tiles(images[i], cfg.regime)) train_set.push_back({i, t});
  }
  if (train_set.empty()) throw DomainError("train_cnn: empty training set after tile selection");
  const auto val_images = split.indices(SplitPart::kVal);

  TrainResult result = fresh_model(cfg);
  result.train_tiles = train_set.size();
  Optimizer opt(result.cnn.parameters(), cfg.optimizer, cfg.momentum);
  const bool weighted = cfg.regime == TileRegime::kAllWeighted;

  auto step_epoch = [&](std::size_t epoch, EpochStats& es) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed({cfg.seed, 2, epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      std::vector<TilePatch> patches;
      std::vector<int> labels;
      std::vector<float> weights;
      double wsum = 0.0;
      for (std::size_t i = b; i < end; ++i) {
        const auto& s = train_set[order[i]];
        const auto& img = images[s.image];
        auto p = img.patch(s.tile);
        if (cfg.augment) p = augment_patch(p, derive_seed({cfg.seed, 3, epoch, order[i]}), cfg.augment_params);
        patches.push_back(std::move(p));
        labels.push_back(img.labels[s.tile]);
        weights.push_back(weighted ? img.weights[s.tile] : 1.0F);
        wsum += weights.back();
      }
      if (wsum <= 0.0) continue;
      ad::Tape<float> tape;
      const auto out = result.cnn.forward(tape, patches_to_batch<float>(patches), true,
                                          derive_seed({cfg.seed, 4, epoch, b}));
      auto loss = weighted_cross_entropy(tape, out.logits, labels, weights);
      check_finite(loss, epoch);
      opt.zero_grad();
      tape.backward(loss);
      opt.step(es.lr);
      loss_sum += loss.item();
      ++es.steps;
    }
    es.train_loss = es.steps ? loss_sum / static_cast<double>(es.steps) : 0.0;
    es.train_loss_cnn = es.train_loss;
  };

  auto validate = [&]() {
    std::vector<std::vector<float>> probs;
    std::vector<std::vector<int>> labels;
    for (auto i : val_images) {
      const auto tiles = select_tiles(images[i], cfg.regime);
      if (tiles.empty()) continue;
      probs.push_back(predict_cnn(result.cnn, images[i], tiles, cfg.batch_size));
      std::vector<int> y;
      for (auto t : tiles) y.push_back(images[i].labels[t]);
      labels.push_back(std::move(y));
    }
    return evaluate_probs(probs, labels);
  };

  run_loop(cfg, result, opt, split, opts, step_epoch, validate);
  return result;
}

TrainResult train_cnn_gnn(const TrainConfig& cfg, std::span<const PreparedImage> images,
                          const DatasetSplit& split, const TrainOptions& opts) {
  cfg.validate();
  if (cfg.model != ModelKind::kCnnGnn) throw ConfigError("train_cnn_gnn: config model is not cnn+gnn");
  if (split.assignment.size() != images.size()) {
    throw ShapeError("train_cnn_gnn: split does not match images");
  }
  check_channels(images, cfg.cnn);

  std::vector<std::size_t> train_images;
  std::size_t n_tiles = 0;
  for (auto i : split.indices(SplitPart::kTrain)) {
    const auto tiles = select_tiles(images[i], cfg.regime);
    if (tiles.size() <= cfg.knn_k) continue;
    train_images.push_back(i);
    n_tiles += tiles.size();
  }
  if (train_images.empty()) throw DomainError("train_cnn_gnn: empty training set after tile selection");
  const auto val_images = split.indices(SplitPart::kVal);

  TrainResult result = fresh_model(cfg);
  result.train_tiles = n_tiles;
  auto params = result.cnn.parameters();
  for (auto& p : result.gat->parameters()) params.push_back(p);
  Optimizer opt(std::move(params), cfg.optimizer, cfg.momentum);
  const bool weighted = cfg.regime == TileRegime::kAllWeighted;

  auto step_epoch = [&](std::size_t epoch, EpochStats& es) {
    auto order = train_images;
    std::mt19937_64 rng(derive_seed({cfg.seed, 2, epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    double sum_total = 0.0, sum_cnn = 0.0, sum_gnn = 0.0;
    for (std::size_t i : order) {
      const auto& img = images[i];
      TileGraph g;
      for (auto t : select_tiles(img, cfg.regime)) {
        g.coords.push_back(img.coords[t]);
        g.labels.push_back(img.labels[t]);
        g.weights.push_back(weighted ? img.weights[t] : 1.0F);
        g.tile_index.push_back(static_cast<std::uint32_t>(t));
      }
      g.edges = build_knn_graph(g.coords, cfg.knn_k);
      if (cfg.graph_augment) {
        auto gp = cfg.graph_augment_params;
        gp.grid_step = img.grid_step;
        gp.k = cfg.knn_k;
        g = augment_graph(g, derive_seed({cfg.seed, 6, epoch, i}), gp);
      }
      const double wsum = std::accumulate(g.weights.begin(), g.weights.end(), 0.0);
      if (wsum <= 0.0) continue;

      std::vector<std::size_t> tiles(g.tile_index.begin(), g.tile_index.end());
      const auto x = tiles_to_batch(img, tiles, cfg.augment, cfg.augment_params, [&](std::size_t n) {
        return derive_seed({cfg.seed, 3, epoch, i, tiles[n]});
      });
      ad::Tape<float> tape;
      const auto out = result.cnn.forward(tape, x, true, derive_seed({cfg.seed, 4, epoch, i}));
      // The GAT reads the embeddings through a detached copy.
      const auto logits = result.gat->forward(tape, ad::detach(out.embedding), g.edges, true,
                                              derive_seed({cfg.seed, 7, epoch, i}));
      ad::Tensor<float> total;
      double l_cnn = 0.0, l_gnn = 0.0;
      if (cfg.cnn_loss_coef > 0.0) {
        auto l = weighted_cross_entropy(tape, out.logits, g.labels, g.weights);
        l_cnn = l.item();
        total = ad::scale(tape, l, static_cast<float>(cfg.cnn_loss_coef));
      }
      if (cfg.gnn_loss_coef > 0.0) {
        auto l = weighted_cross_entropy(tape, logits, g.labels, g.weights);
        l_gnn = l.item();
        auto term = ad::scale(tape, l, static_cast<float>(cfg.gnn_loss_coef));
        total = total.defined() ? ad::add(tape, total, term) : term;
      }
      check_finite(total, epoch);
      opt.zero_grad();
      tape.backward(total);
      opt.step(es.lr);
      sum_total += total.item();
      sum_cnn += l_cnn;
      sum_gnn += l_gnn;
      ++es.steps;
    }
    if (es.steps) {
      const auto s = static_cast<double>(es.steps);
      es.train_loss = sum_total / s;
      es.train_loss_cnn = sum_cnn / s;
      es.train_loss_gnn = sum_gnn / s;
    }
  };

  auto validate = [&]() {
    std::vector<std::vector<float>> probs;
    std::vector<std::vector<int>> labels;
    for (auto i : val_images) {
      const auto tiles = select_tiles(images[i], cfg.regime);
      if (tiles.size() <= cfg.knn_k) continue;
      probs.push_back(predict_gnn(result.cnn, *result.gat, images[i], cfg.knn_k, tiles));
      std::vector<int> y;
      for (auto t : tiles) y.push_back(images[i].labels[t]);
      labels.push_back(std::move(y));
    }
    return evaluate_probs(probs, labels);
  };

  run_loop(cfg, result, opt, split, opts, step_epoch, validate);
  return result;
}

TrainResult train(const TrainConfig& cfg, std::span<const PreparedImage> images, const DatasetSplit& split,
                  const TrainOptions& opts) {
  return cfg.model == ModelKind::kCnn ? train_cnn(cfg, images, split, opts)
                                      : train_cnn_gnn(cfg, images, split, opts);
}

void save_model(const TrainResult& model, const std::filesystem::path& dir, const nlohmann::json& meta) {
  save_parameters(model_state(model), dir, meta);
}

TrainResult load_model(const TrainConfig& cfg, const std::filesystem::path& dir) {
  TrainResult r = fresh_model(cfg);
  load_model_state(r, load_parameters(dir));
  return r;
}

}  // namespace hsiseg
