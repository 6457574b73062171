#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "hsiseg/classes.hpp"
#include "hsiseg/error.hpp"
#include "hsiseg/rng.hpp"
#include "hsiseg/synth.hpp"
#include "hsiseg/training.hpp"

using namespace hsiseg;

namespace {

constexpr std::size_t kPatch = 16;

PrepareParams small_prepare() {
  PrepareParams p;
  p.slic.target_pixels_per_tile = 100;
  p.patch_size = kPatch;
  return p;
}

// Four 48x48 phantoms with 8 channels, prepared once.
const std::vector<PreparedImage>& tiny_dataset() {
  static const std::vector<PreparedImage> images = [] {
    PhantomSpec spec;
    spec.width = spec.height = 48;
    spec.channels = 8;
    spec.tumor_blobs = 2;
    const auto ds = generate_dataset(4, spec, 5);
    std::vector<PreparedImage> out;
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      out.push_back(prepare_image("img" + std::to_string(i), ds.images[i].cube, ds.images[i].labels,
                                  small_prepare()));
    }
    return out;
  }();
  return images;
}

DatasetSplit fixed_split() {
  DatasetSplit s;
  s.assignment = {SplitPart::kTrain, SplitPart::kTrain, SplitPart::kVal, SplitPart::kTest};
  return s;
}

TrainConfig tiny_config(ModelKind model, TileRegime regime, std::size_t epochs) {
  TrainConfig c;
  c.model = model;
  c.regime = regime;
  c.epochs = epochs;
  c.lr = 3e-3;
  c.optimizer = OptimizerKind::kAdam;
  c.batch_size = 16;
  c.seed = 3;
  c.patience = 100;
  c.cnn.in_channels = 8;
  c.cnn.compressed_channels = 4;
  c.cnn.base_features = 4;
  c.cnn.patch_size = kPatch;
  c.gat.hidden = 8;
  c.gat.heads = 2;
  return c;
}

std::vector<float> flat_params(const ParameterList<float>& ps) {
  std::vector<float> v;
  for (const auto& p : ps) v.insert(v.end(), p.tensor.values().begin(), p.tensor.values().end());
  return v;
}

double ce(const std::vector<float>& logits, int label) {
  double m = *std::max_element(logits.begin(), logits.end()), z = 0.0;
  for (float l : logits) z += std::exp(l - m);
  return std::log(z) + m - logits[static_cast<std::size_t>(label)];
}

}  // namespace

TEST_CASE("weighted cross entropy") {
  const std::vector<float> l0{1.0F, -0.5F, 0.2F}, l1{0.3F, 0.9F, -1.2F};
  std::vector<float> flat(l0);
  flat.insert(flat.end(), l1.begin(), l1.end());
  const std::vector<int> labels{0, 2};

  SUBCASE("weights (1, 3) normalize to 0.25 / 0.75") {
    ad::Tape<float> tape;
    const ad::Tensor<float> x({2, 3}, flat);
    const std::vector<float> w{1.0F, 3.0F};
    const auto l = weighted_cross_entropy(tape, x, labels, w);
    CHECK(l.item() == doctest::Approx(0.25 * ce(l0, 0) + 0.75 * ce(l1, 2)).epsilon(1e-6));
  }
  SUBCASE("a zero weight gives its row a zero gradient") {
    ad::Tape<float> tape;
    ad::Tensor<float> x({2, 3}, flat, true);
    const std::vector<float> w{0.0F, 2.0F};
    tape.backward(weighted_cross_entropy(tape, x, labels, w));
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(x.grad()[k] == 0.0F);
      CHECK(x.grad()[3 + k] != 0.0F);
    }
  }
  SUBCASE("unit weights equal the plain mean") {
    ad::Tape<float> tape;
    const ad::Tensor<float> x({2, 3}, flat);
    const std::vector<float> w{1.0F, 1.0F};
    CHECK(weighted_cross_entropy(tape, x, labels, w).item() == ad::cross_entropy(tape, x, labels).item());
  }
  SUBCASE("all-zero weights are an error") {
    ad::Tape<float> tape;
    const ad::Tensor<float> x({2, 3}, flat);
    const std::vector<float> w{0.0F, 0.0F};
    CHECK_THROWS(weighted_cross_entropy(tape, x, labels, w));
  }
}

TEST_CASE("make_split") {
  const std::vector<std::size_t> twenty(20, 100);
  SUBCASE("20 equal images give 13 / 3 / 4") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto sp = make_split(twenty, {0.65, 0.165, 0.185}, s);
      CHECK(sp.indices(SplitPart::kTrain).size() == 13);
      CHECK(sp.indices(SplitPart::kVal).size() == 3);
      CHECK(sp.indices(SplitPart::kTest).size() == 4);
    }
  }
  SUBCASE("all in train") {
    const auto sp = make_split(twenty, {1.0, 0.0, 0.0}, 1);
    CHECK(sp.indices(SplitPart::kTrain).size() == 20);
  }
  SUBCASE("same seed, same split") {
    CHECK(make_split(twenty, {0.65, 0.165, 0.185}, 9).assignment ==
          make_split(twenty, {0.65, 0.165, 0.185}, 9).assignment);
  }
  SUBCASE("twelve images give 8 / 2 / 2") {
    const std::vector<std::size_t> twelve(12, 75);
    const auto sp = make_split(twelve, {0.65, 0.165, 0.185}, 2);
    CHECK(sp.indices(SplitPart::kTrain).size() == 8);
    CHECK(sp.indices(SplitPart::kVal).size() == 2);
    CHECK(sp.indices(SplitPart::kTest).size() == 2);
  }
  SUBCASE("errors") {
    const std::vector<std::size_t> two(2, 10);
    CHECK_THROWS_AS(make_split(two, {0.65, 0.165, 0.185}, 1), ConfigError);
    CHECK_THROWS_AS(make_split(twenty, {0.5, 0.2, 0.2}, 1), ConfigError);
    CHECK_THROWS_AS(make_split(twenty, {1.2, -0.1, -0.1}, 1), ConfigError);
  }
}

TEST_CASE("gnn loss leaves cnn gradients at zero") {
  auto cfg = tiny_config(ModelKind::kCnnGnn, TileRegime::kAll, 1);
  const auto& img = tiny_dataset()[0];
  CnnModel<float> cnn(cfg.cnn.as_gnn_backbone(), 1);
  GatModel<float> gat(cfg.gat, cfg.cnn.embedding_dim(), 3, 2);
  std::vector<TilePatch> patches;
  std::vector<std::size_t> tiles;
  for (std::size_t t = 0; t < img.num_tiles(); ++t) {
    patches.push_back(img.patch(t));
    tiles.push_back(t);
  }
  const auto edges = build_knn_graph(img.coords, 2);
  ad::Tape<float> tape;
  const auto out = cnn.forward(tape, patches_to_batch<float>(patches), true, 1);
  const auto logits = gat.forward(tape, ad::detach(out.embedding), edges, true, 2);
  const std::vector<float> w(img.num_tiles(), 1.0F);
  tape.backward(weighted_cross_entropy(tape, logits, img.labels, w));
  for (const auto& p : cnn.parameters()) {
    INFO(p.name);
    CHECK(std::all_of(p.tensor.grad().begin(), p.tensor.grad().end(), [](float g) { return g == 0.0F; }));
  }
  bool gat_moved = false;
  for (const auto& p : gat.parameters())
    gat_moved |= std::any_of(p.tensor.grad().begin(), p.tensor.grad().end(), [](float g) { return g != 0.0F; });
  CHECK(gat_moved);
}

TEST_CASE("cnn parameters stay frozen without the cnn loss term") {
  auto cfg = tiny_config(ModelKind::kCnnGnn, TileRegime::kAll, 1);
  cfg.cnn_loss_coef = 0.0;
  const auto before = TrainResult(CnnModel<float>(cfg.cnn.as_gnn_backbone(), derive_seed({cfg.seed, 1})));
  const auto r = train(cfg, tiny_dataset(), fixed_split());
  CHECK(r.history.front().steps > 0);
  CHECK(flat_params(r.cnn.parameters()) == flat_params(before.cnn.parameters()));
  auto cfg2 = cfg;
  cfg2.cnn_loss_coef = 1.0;
  const auto moved = train(cfg2, tiny_dataset(), fixed_split());
  CHECK(flat_params(moved.cnn.parameters()) != flat_params(before.cnn.parameters()));
}

TEST_CASE("combined loss is the sum of its terms") {
  auto cfg = tiny_config(ModelKind::kCnnGnn, TileRegime::kAllWeighted, 1);
  const auto r = train(cfg, tiny_dataset(), fixed_split());
  const auto& e = r.history.front();
  CHECK(e.train_loss == doctest::Approx(e.train_loss_cnn + e.train_loss_gnn).epsilon(1e-6));
}

TEST_CASE("separable two-class tiles are learned within 20 epochs") {
  // Left half one spectrum, right half another, light noise.
  std::vector<PreparedImage> images;
  std::mt19937_64 rng(4);
  std::normal_distribution<float> noise(0.0F, 0.01F);
  for (int i = 0; i < 4; ++i) {
    auto cube = HsiCube::zeros(48, 48, 8);
    std::vector<std::uint8_t> labels(48 * 48);
    const std::size_t cut = 16 + 8 * static_cast<std::size_t>(i % 3);
    for (std::size_t y = 0; y < 48; ++y)
      for (std::size_t x = 0; x < 48; ++x) {
        const bool tumor = x < cut;
        labels[y * 48 + x] = tumor ? kTumor : kHealthy;
        auto s = cube.mutable_spectrum(y * 48 + x);
        for (std::size_t c = 0; c < 8; ++c) {
          const float base = tumor ? 0.2F + 0.05F * static_cast<float>(c) : 0.6F - 0.05F * static_cast<float>(c);
          s[c] = std::clamp(base + noise(rng), 0.0F, 1.0F);
        }
      }
    images.push_back(prepare_image("s" + std::to_string(i), cube, labels, small_prepare()));
  }
  auto cfg = tiny_config(ModelKind::kCnn, TileRegime::kAll, 20);
  DatasetSplit split;
  split.assignment = {SplitPart::kTrain, SplitPart::kTrain, SplitPart::kVal, SplitPart::kTest};
  const auto r = train(cfg, images, split);
  CHECK(r.history.size() <= 20);
  CHECK(r.best_val_macro_accuracy >= 0.99);
}

TEST_CASE("good_only selects filtered tiles only") {
  for (const auto& img : tiny_dataset()) {
    const auto good = select_tiles(img, TileRegime::kGoodOnly);
    CHECK_FALSE(good.empty());
    CHECK(good.size() < img.num_tiles());
    for (auto t : good) CHECK(img.filter.kept[t]);
    CHECK(select_tiles(img, TileRegime::kAll).size() == img.num_tiles());
  }
}

TEST_CASE("training is deterministic under a fixed seed") {
  for (auto model : {ModelKind::kCnn, ModelKind::kCnnGnn}) {
    const auto cfg = tiny_config(model, TileRegime::kAllWeighted, 2);
    const auto a = train(cfg, tiny_dataset(), fixed_split());
    const auto b = train(cfg, tiny_dataset(), fixed_split());
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t e = 0; e < a.history.size(); ++e) {
      CHECK(a.history[e].train_loss == b.history[e].train_loss);
      CHECK(a.history[e].val_loss == b.history[e].val_loss);
    }
  }
}

TEST_CASE("training loss decreases over five epochs in every regime") {
  for (auto model : {ModelKind::kCnn, ModelKind::kCnnGnn}) {
    for (auto regime : {TileRegime::kGoodOnly, TileRegime::kAll, TileRegime::kAllWeighted}) {
      auto cfg = tiny_config(model, regime, 5);
      cfg.augment = false;
      cfg.graph_augment = false;
      const auto r = train(cfg, tiny_dataset(), fixed_split());
      INFO(run_tag(model, regime));
      REQUIRE(r.history.size() == 5);
      CHECK(r.history.back().train_loss < r.history.front().train_loss);
    }
  }
}

TEST_CASE("saved models reproduce their predictions") {
  const auto dir = std::filesystem::temp_directory_path() / "hsiseg_test_training_model";
  std::filesystem::remove_all(dir);
  for (auto model : {ModelKind::kCnn, ModelKind::kCnnGnn}) {
    const auto cfg = tiny_config(model, TileRegime::kAll, 1);
    auto r = train(cfg, tiny_dataset(), fixed_split());
    save_model(r, dir, {{"tag", run_tag(model, cfg.regime)}});
    auto back = load_model(cfg, dir);
    const auto& img = tiny_dataset()[3];
    CHECK(predict(r, img, cfg.knn_k) == predict(back, img, cfg.knn_k));
  }
}

TEST_CASE("interrupted training resumes to the same result") {
  const auto root = std::filesystem::temp_directory_path() / "hsiseg_test_training_resume";
  std::filesystem::remove_all(root);
  for (auto model : {ModelKind::kCnn, ModelKind::kCnnGnn}) {
    const auto cfg = tiny_config(model, TileRegime::kAllWeighted, 4);
    const auto full = train(cfg, tiny_dataset(), fixed_split());

    TrainOptions opts;
    opts.run_dir = root / run_tag(model, cfg.regime);
    struct Interrupt {};
    auto stopping = opts;
    stopping.on_epoch = [](const EpochStats& e) {
      if (e.epoch == 1) throw Interrupt{};
    };
    CHECK_THROWS_AS(train(cfg, tiny_dataset(), fixed_split(), stopping), Interrupt);
    const auto resumed = train(cfg, tiny_dataset(), fixed_split(), opts);
    CHECK(resumed.resumed);
    REQUIRE(resumed.history.size() == full.history.size());
    for (std::size_t e = 0; e < full.history.size(); ++e) {
      CHECK(resumed.history[e].train_loss == full.history[e].train_loss);
      CHECK(resumed.history[e].val_loss == full.history[e].val_loss);
    }
    CHECK(resumed.best_epoch == full.best_epoch);
    CHECK(flat_params(resumed.cnn.parameters()) == flat_params(full.cnn.parameters()));
    CHECK(std::filesystem::exists(opts.run_dir / "history.jsonl"));
  }
}

TEST_CASE("train config validation and json") {
  TrainConfig c;
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TrainConfig d;
  d.model = ModelKind::kCnnGnn;
  d.cnn_loss_coef = d.gnn_loss_coef = 0.0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  const auto e = tiny_config(ModelKind::kCnnGnn, TileRegime::kAllWeighted, 7);
  nlohmann::json j = e;
  const auto back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(run_tag(ModelKind::kCnn, TileRegime::kGoodOnly) == "CNN_g");
  CHECK(run_tag(ModelKind::kCnnGnn, TileRegime::kAllWeighted) == "GNN_aW");
  CHECK_THROWS_AS(parse_regime("some"), ConfigError);
}
