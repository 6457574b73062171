#include "hsiseg/pipeline.hpp"

#include <algorithm>
#include <numeric>

#include "hsiseg/binary_io.hpp"
#include "hsiseg/classes.hpp"
#include "hsiseg/error.hpp"
#include "hsiseg/eval.hpp"
#include "hsiseg/rng.hpp"

namespace hsiseg {

void to_json(nlohmann::json& j, const WeightConfig& w) {
  j = {{"intensity_low_break", w.intensity_low_break},
       {"intensity_high_break", w.intensity_high_break},
       {"intensity_low_slope", w.intensity_low_slope},
       {"intensity_high_slope", w.intensity_high_slope},
       {"l2_base", w.l2_base},
       {"sam_base", w.sam_base}};
}

void from_json(const nlohmann::json& j, WeightConfig& w) {
  WeightConfig d;
  w.intensity_low_break = j.value("intensity_low_break", d.intensity_low_break);
  w.intensity_high_break = j.value("intensity_high_break", d.intensity_high_break);
  w.intensity_low_slope = j.value("intensity_low_slope", d.intensity_low_slope);
  w.intensity_high_slope = j.value("intensity_high_slope", d.intensity_high_slope);
  w.l2_base = j.value("l2_base", d.l2_base);
  w.sam_base = j.value("sam_base", d.sam_base);
  w.validate();
}

nlohmann::json default_run_config() {
  nlohmann::json synth = PhantomSpec{};
  synth["n_images"] = 12;
  const SlicParams slic;
  const FilterParams filter;
  nlohmann::json train = TrainConfig{};
  train.erase("model");
  train.erase("tile_regime");
  train.erase("seed");
  train["cnn"].erase("in_channels");
  return {{"seed", 0},
          {"synth", synth},
          {"tiling",
           {{"target_pixels_per_tile", slic.target_pixels_per_tile},
            {"compactness", nullptr},
            {"max_iters", slic.max_iters},
            {"distance", to_string(slic.distance)},
            {"enforce_connectivity", slic.enforce_connectivity}}},
          {"quality",
           {{"uniformity_percentile", filter.uniformity_percentile},
            {"intensity_low_percentile", filter.intensity_low_percentile},
            {"intensity_high_percentile", filter.intensity_high_percentile},
            {"weights", WeightConfig{}}}},
          {"split", {{"fractions", {0.65, 0.165, 0.185}}}},
          {"train", train},
          {"eval", {{"pixel_weighted", false}, {"render", true}}},
          {"pipeline", {{"models", {"CNN_g", "CNN_a", "CNN_aW", "GNN_g", "GNN_a", "GNN_aW"}}}}};
}

namespace {

void overlay(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("config: unknown key '" + here + "'");
    if (base[key].is_object()) {
      overlay(base[key], value, here);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace

nlohmann::json resolve_run_config(const nlohmann::json& user) {
  auto cfg = default_run_config();
  if (!user.is_null()) overlay(cfg, user, "");
  return cfg;
}

void apply_override(nlohmann::json& cfg, const std::string& dotted_key, const std::string& value) {
  nlohmann::json* node = &cfg;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted_key.find('.', start);
    const auto part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty() || !node->is_object() || !node->contains(part)) {
      throw ConfigError("unknown config key '" + dotted_key + "'");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("config key '" + dotted_key + "' is a section, not a value");
  auto parsed = nlohmann::json::parse(value, nullptr, false);
  *node = parsed.is_discarded() ? nlohmann::json(value) : parsed;
}

std::uint64_t stage_seed(const nlohmann::json& cfg, std::uint64_t stage) {
  return derive_seed({cfg.at("seed").get<std::uint64_t>(), stage});
}

PhantomSpec synth_spec(const nlohmann::json& cfg) {
  auto spec = cfg.at("synth").get<PhantomSpec>();
  spec.validate();
  return spec;
}

PrepareParams prepare_params(const nlohmann::json& cfg) {
  PrepareParams p;
  nlohmann::json flat = cfg.at("tiling");
  for (const auto& [k, v] : cfg.at("quality").items()) {
    if (k != "weights") flat[k] = v;
  }
  flat["patch_size"] = cfg.at("train").at("cnn").value("patch_size", std::size_t{48});
  from_json(flat, p);
  p.weights = cfg.at("quality").at("weights").get<WeightConfig>();
  return p;
}

std::array<double, 3> split_fractions(const nlohmann::json& cfg) {
  const auto f = cfg.at("split").at("fractions").get<std::vector<double>>();
  if (f.size() != 3) throw ConfigError("split.fractions must have three entries");
  return {f[0], f[1], f[2]};
}

TrainConfig train_config(const nlohmann::json& cfg, ModelKind model, TileRegime regime,
                         std::size_t channels) {
  auto t = cfg.at("train").get<TrainConfig>();
  t.model = model;
  t.regime = regime;
  t.seed = stage_seed(cfg, 3);
  t.cnn.in_channels = channels;
  t.validate();
  return t;
}

std::vector<PreparedImage> load_prepared_dataset(const std::filesystem::path& dir,
                                                 const PrepareParams& params, nlohmann::json* manifest) {
  const auto m = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
  std::vector<PreparedImage> images;
  for (const auto& entry : m.at("images")) {
    auto loaded = load_cube(dir / entry.at("cube").get<std::string>());
    std::vector<std::uint8_t> labels;
    if (entry.contains("labels")) {
      auto r = load_raster(dir / entry.at("labels").get<std::string>());
      if (r.width != loaded.cube.width() || r.height != loaded.cube.height()) {
        throw ShapeError("label raster size differs from cube for " + entry.at("name").get<std::string>());
      }
      labels = std::move(r.values);
    }
    images.push_back(prepare_image(entry.at("name").get<std::string>(), std::move(loaded.cube), labels, params));
  }
  if (manifest) *manifest = m;
  return images;
}

ModelEvaluation evaluate_model(TrainResult& model, std::span<const PreparedImage> images,
                               std::span<const std::size_t> indices, std::size_t k, bool pixel_weighted) {
  ModelEvaluation ev;
  ConfusionMatrix cm(kNumClasses);
  for (auto i : indices) {
    const auto& img = images[i];
    const auto probs = predict(model, img, k);
    const auto pred = argmax_rows(probs, kNumClasses);
    for (std::size_t t = 0; t < img.num_tiles(); ++t) {
      if (img.labels[t] < 0) continue;
      cm.add(img.labels[t], pred[t], pixel_weighted ? img.map.tiles[t].pixel_count() : 1);
      ev.truth.push_back(img.labels[t]);
      ev.predicted.push_back(pred[t]);
      ev.probs.insert(ev.probs.end(), probs.begin() + static_cast<long>(t * kNumClasses),
                      probs.begin() + static_cast<long>((t + 1) * kNumClasses));
    }
  }
  const auto report = per_class_metrics(cm);
  ev.metrics = metrics_json(report, tumor_auc(ev.probs, ev.truth));
  ev.metrics["tiles"] = ev.truth.size();
  nlohmann::json counts = nlohmann::json::array();
  for (std::size_t a = 0; a < kNumClasses; ++a) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t b = 0; b < kNumClasses; ++b) row.push_back(cm.at(a, b));
    counts.push_back(row);
  }
  ev.metrics["confusion"] = counts;
  if (!report.warnings.empty()) ev.metrics["warnings"] = report.warnings;
  return ev;
}

std::pair<ModelKind, TileRegime> parse_run_tag(const std::string& tag) {
  const auto us = tag.find('_');
  if (us == std::string::npos) throw ConfigError("pipeline: bad model tag '" + tag + "'");
  const auto family = tag.substr(0, us);
  ModelKind m;
  if (family == "CNN") {
    m = ModelKind::kCnn;
  } else if (family == "GNN") {
    m = ModelKind::kCnnGnn;
  } else {
    throw ConfigError("pipeline: bad model tag '" + tag + "'");
  }
  return {m, parse_regime(tag.substr(us + 1))};
}

namespace {

bool same_dataset(const std::filesystem::path& dir, const nlohmann::json& spec, std::uint64_t seed,
                  std::size_t n) {
  if (!std::filesystem::exists(dir / "manifest.json")) return false;
  const auto m = nlohmann::json::parse(io::read_text(dir / "manifest.json"), nullptr, false);
  return !m.is_discarded() && m.value("spec", nlohmann::json()) == spec &&
         m.value("seed", std::uint64_t{0}) == seed && m.at("images").size() == n;
}

}  // namespace

nlohmann::json run_pipeline(const nlohmann::json& user_cfg, const std::filesystem::path& out,
                            const Logger& log) {
  const nlohmann::json cfg = resolve_run_config(user_cfg);
  auto emit = [&](nlohmann::json j) {
    if (log) log(j);
  };
  std::filesystem::create_directories(out);
  io::write_text(out / "config.json", cfg.dump(2));

  // Synthetic data, reused when an identical dataset is already on disk.
  const auto spec = synth_spec(cfg);
  const auto n_images = cfg.at("synth").at("n_images").get<std::size_t>();
  const auto synth_seed = stage_seed(cfg, 1);
  const auto data_dir = out / "data";
  if (same_dataset(data_dir, nlohmann::json(spec), synth_seed, n_images)) {
    emit({{"event", "synth_reused"}, {"dir", data_dir.string()}});
  } else {
    const auto ds = generate_dataset(n_images, spec, synth_seed);
    write_dataset(ds, spec, synth_seed, data_dir);
    emit({{"event", "synth_done"}, {"images", n_images}, {"max_pairwise_shift", ds.max_pairwise_shift}});
  }

  const auto params = prepare_params(cfg);
  const auto images = load_prepared_dataset(data_dir, params);
  std::vector<std::size_t> tiles_per_image;
  for (const auto& img : images) tiles_per_image.push_back(img.num_tiles());
  const auto split = make_split(tiles_per_image, split_fractions(cfg), stage_seed(cfg, 2));
  io::write_text(out / "split.json", nlohmann::json(split).dump(2));
  nlohmann::json tiles_by_part;
  for (auto part : {SplitPart::kTrain, SplitPart::kVal, SplitPart::kTest}) {
    std::size_t n = 0;
    for (auto i : split.indices(part)) n += images[i].num_tiles();
    tiles_by_part[to_string(part)] = n;
  }
  emit({{"event", "dataset_ready"}, {"tiles", tiles_by_part}, {"split", split}});

  const auto test = split.indices(SplitPart::kTest);
  const bool pixel_weighted = cfg.at("eval").at("pixel_weighted").get<bool>();
  const bool render = cfg.at("eval").at("render").get<bool>();
  nlohmann::json models = nlohmann::json::object();
  for (const auto& tag_json : cfg.at("pipeline").at("models")) {
    const auto tag = tag_json.get<std::string>();
    const auto [kind, regime] = parse_run_tag(tag);
    const auto tcfg = train_config(cfg, kind, regime, spec.channels);
    TrainOptions opts;
    opts.run_dir = out / tag;
    opts.resolved_config = {{"run", cfg}, {"train", tcfg}};
    opts.on_epoch = [&, tag = tag](const EpochStats& e) {
      nlohmann::json j = e;
      j["event"] = "epoch";
      j["model"] = tag;
      emit(j);
    };
    auto result = train(tcfg, images, split, opts);
    auto ev = evaluate_model(result, images, test, tcfg.knn_k, pixel_weighted);
    auto entry = ev.metrics;
    entry["best_epoch"] = result.best_epoch;
    entry["epochs_run"] = result.history.size();
    entry["best_val_macro_accuracy"] = result.best_val_macro_accuracy;
    entry["train_tiles"] = result.train_tiles;
    models[tag] = entry;
    io::write_text(opts.run_dir / "metrics.json", entry.dump(2));
    emit({{"event", "model_done"}, {"model", tag}, {"resumed", result.resumed},
          {"macro_accuracy", entry["accuracy"]["Avg"]}, {"auc", entry["auc"]}});
    if (render && !test.empty()) {
      const auto& img = images[test.front()];
      const auto pred = argmax_rows(predict(result, img, tcfg.knn_k));
      save_ppm(render_overlay(img.cube, img.map, pred), opts.run_dir / ("overlay_" + img.name + ".ppm"));
    }
  }
  if (render && !test.empty()) {
    const auto& img = images[test.front()];
    std::vector<int> truth(img.labels);
    for (auto& t : truth) t = std::max(t, 0);
    save_ppm(render_overlay(img.cube, img.map, truth), out / ("truth_" + img.name + ".ppm"));
  }

  nlohmann::json report{{"config", cfg},
                        {"dataset", {{"images", images.size()}, {"split", split}, {"tiles", tiles_by_part}}},
                        {"models", models}};
  io::write_text(out / "report.json", report.dump(2));
  emit({{"event", "pipeline_done"}, {"report", (out / "report.json").string()}});
  return report;
}

}  // namespace hsiseg
