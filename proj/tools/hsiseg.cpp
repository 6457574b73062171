// hsiseg command-line front end.
//
// Global options come before the subcommand. Any `--section.key value` pair
// anywhere on the line overrides the matching entry of the run config.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hsiseg/autodiff.hpp"
#include "hsiseg/binary_io.hpp"
#include "hsiseg/classes.hpp"
#include "hsiseg/error.hpp"
#include "hsiseg/eval.hpp"
#include "hsiseg/pipeline.hpp"
#include "hsiseg/quality.hpp"
#include "hsiseg/synth.hpp"
#include "hsiseg/tiling.hpp"
#include "hsiseg/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hsiseg;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

void log_line(const json& j) { std::cerr << j.dump() << std::endl; }

fs::path run_root() {
  const char* env = std::getenv("HSISEG_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

struct Override {
  std::string key;
  std::string value;
};

// Pulls `--a.b value` and `--a.b=value` out of argv; everything else is left
// for CLI11.
std::vector<Override> take_overrides(std::vector<std::string>& args) {
  std::vector<Override> out;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto& a = args[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos) {
      rest.push_back(a);
      continue;
    }
    auto key = a.substr(2);
    if (const auto eq = key.find('='); eq != std::string::npos) {
      out.push_back({key.substr(0, eq), key.substr(eq + 1)});
      continue;
    }
    // a dot inside a value-looking token (--out runs/x.y) is not an override
    if (key.find('/') != std::string::npos) {
      rest.push_back(a);
      continue;
    }
    if (i + 1 >= args.size()) throw CLI::ArgumentMismatch("--" + key + " needs a value");
    out.push_back({key, args[++i]});
  }
  args = std::move(rest);
  return out;
}

struct Globals {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  int threads = static_cast<int>(std::max(1U, std::thread::hardware_concurrency()));
  std::vector<Override> overrides;
};

json resolved_config(const Globals& g) {
  json user;
  if (!g.config_file.empty()) {
    user = json::parse(io::read_text(g.config_file), nullptr, false);
    if (user.is_discarded()) throw ConfigError("config file '" + g.config_file + "' is not valid JSON");
    // a saved run config may wrap the run section
    if (user.contains("run") && user.contains("train") && user["run"].is_object()) user = user["run"];
  }
  auto cfg = resolve_run_config(user);
  if (g.seed) cfg["seed"] = *g.seed;
  for (const auto& o : g.overrides) apply_override(cfg, o.key, o.value);
  resolve_run_config(cfg);  // type check of the final result happens in the getters below
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_text(path, j.dump(2));
}

std::vector<std::uint8_t> read_labels(const std::string& path, const HsiCube& cube) {
  if (path.empty()) return {};
  auto r = load_raster(path);
  if (r.width != cube.width() || r.height != cube.height()) {
    throw ShapeError("label raster " + path + " does not match the cube size");
  }
  return std::move(r.values);
}

// Run directory written by `train` or `pipeline`: resolved config plus model.
struct RunDir {
  json run_cfg;
  TrainConfig train_cfg;
  fs::path checkpoint;
};

RunDir open_run(const fs::path& dir) {
  RunDir r;
  const auto saved = json::parse(io::read_text(dir / "config.json"), nullptr, false);
  if (saved.is_discarded() || !saved.contains("run") || !saved.contains("train")) {
    throw FormatError(dir.string() + "/config.json is not a training run config", 0);
  }
  r.run_cfg = resolve_run_config(saved["run"]);
  r.train_cfg = saved["train"].get<TrainConfig>();
  r.checkpoint = dir / "checkpoints" / "best";
  if (!fs::exists(r.checkpoint)) throw FormatError("no checkpoint under " + dir.string(), 0);
  return r;
}

PreparedImage prepare_one(const std::string& cube_path, const std::string& tiles_path,
                          const std::string& labels_path, const PrepareParams& params) {
  auto loaded = load_cube(cube_path);
  if (loaded.clamped > 0) log_line({{"event", "cube_clamped"}, {"values", loaded.clamped}});
  const auto labels = read_labels(labels_path, loaded.cube);
  const auto name = fs::path(cube_path).stem().string();
  if (tiles_path.empty()) return prepare_image(name, std::move(loaded.cube), labels, params);
  auto map = load_tile_map(loaded.cube, tiles_path);
  return prepare_image(name, std::move(loaded.cube), std::move(map), labels, params);
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  Globals g;
  try {
    g.overrides = take_overrides(args);
  } catch (const CLI::Error& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  }

  CLI::App app{"Hyperspectral tile segmentation with CNN and graph attention models"};
  app.require_subcommand(0, 1);
  app.add_option("--config", g.config_file, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--threads", g.threads, "Worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);
  app.add_flag_function(
      "--print-config", [&](std::int64_t) {}, "Print the resolved config and exit");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a labeled phantom dataset");
  std::string synth_out;
  std::optional<std::size_t> synth_n;
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_option("-n,--images", synth_n, "Number of images (synth.n_images)");

  // tile
  auto* tile = app.add_subcommand("tile", "SLIC tiling of one cube");
  std::string tile_cube, tile_out, tile_labels, tile_distance;
  tile->add_option("--cube", tile_cube)->required()->check(CLI::ExistingFile);
  tile->add_option("--labels", tile_labels, "Label raster for majority labels")->check(CLI::ExistingFile);
  tile->add_option("--distance", tile_distance, "sam or l2 (tiling.distance)");
  tile->add_option("--out", tile_out, "Tile map path; stats go to <out>.json")->required();

  // quality
  auto* quality = app.add_subcommand("quality", "Per-tile quality metrics, filter and loss weights");
  std::string q_cube, q_tiles, q_labels, q_out;
  quality->add_option("--cube", q_cube)->required()->check(CLI::ExistingFile);
  quality->add_option("--tiles", q_tiles, "Tile map from `tile`; SLIC runs when absent")->check(CLI::ExistingFile);
  quality->add_option("--labels", q_labels)->check(CLI::ExistingFile);
  quality->add_option("--out", q_out, "JSON lines report")->required();

  // train
  auto* trainc = app.add_subcommand("train", "Train one model regime on a dataset");
  std::string t_data, t_out, t_model = "GNN_aW";
  trainc->add_option("--data", t_data, "Dataset directory with manifest.json")->required()->check(CLI::ExistingDirectory);
  trainc->add_option("--model", t_model, "CNN_g, CNN_a, CNN_aW, GNN_g, GNN_a or GNN_aW");
  trainc->add_option("--out", t_out, "Run directory");

  // infer
  auto* infer = app.add_subcommand("infer", "Predict tile classes for one cube");
  std::string i_run, i_cube, i_tiles, i_out;
  infer->add_option("--run", i_run, "Run directory from `train`")->required()->check(CLI::ExistingDirectory);
  infer->add_option("--cube", i_cube)->required()->check(CLI::ExistingFile);
  infer->add_option("--tiles", i_tiles)->check(CLI::ExistingFile);
  infer->add_option("--out", i_out, "Predictions JSON")->required();

  // eval
  auto* evalc = app.add_subcommand("eval", "Metrics of a trained run on a dataset split");
  std::string e_run, e_data, e_out, e_part = "test";
  bool e_all = false;
  evalc->add_option("--run", e_run)->required()->check(CLI::ExistingDirectory);
  evalc->add_option("--data", e_data)->required()->check(CLI::ExistingDirectory);
  evalc->add_option("--part", e_part, "train, val or test (per the run's split.json)");
  evalc->add_flag("--all-images", e_all, "Evaluate every image of the dataset");
  evalc->add_option("--out", e_out, "Metrics JSON")->required();

  // render
  auto* render = app.add_subcommand("render", "Color overlay of tile predictions");
  std::string r_cube, r_tiles, r_pred, r_labels, r_out;
  render->add_option("--cube", r_cube)->required()->check(CLI::ExistingFile);
  render->add_option("--tiles", r_tiles, "Tile map the predictions refer to")->check(CLI::ExistingFile);
  auto* r_pred_opt = render->add_option("--pred", r_pred, "Predictions JSON from `infer`")->check(CLI::ExistingFile);
  render->add_option("--labels", r_labels, "Render ground truth from a label raster")
      ->check(CLI::ExistingFile)
      ->excludes(r_pred_opt);
  render->add_option("--out", r_out, "PPM image")->required();

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "synth, split, train all regimes, eval, report");
  std::string p_out;
  pipe->add_option("--out", p_out, "Run directory");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    ad::set_num_threads(g.threads);
    if (!tile_distance.empty()) g.overrides.push_back({"tiling.distance", tile_distance});
    if (synth_n) g.overrides.push_back({"synth.n_images", std::to_string(*synth_n)});
    const json cfg = resolved_config(g);
    if (app.count("--print-config")) {
      std::cout << cfg.dump(2) << "\n";
      return kOk;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return kUsage;
    }

    if (synth->parsed()) {
      const fs::path out = synth_out.empty() ? run_root() / "synth" : fs::path(synth_out);
      const auto spec = synth_spec(cfg);
      const auto n = cfg.at("synth").at("n_images").get<std::size_t>();
      const auto seed = stage_seed(cfg, 1);
      const auto ds = generate_dataset(n, spec, seed);
      write_dataset(ds, spec, seed, out);
      write_json(out / "config.json", cfg);
      log_line({{"event", "synth_done"}, {"dir", out.string()}, {"images", n},
                {"max_pairwise_shift", ds.max_pairwise_shift}});
    } else if (tile->parsed()) {
      const auto params = prepare_params(cfg);
      auto loaded = load_cube(tile_cube);
      auto res = slic_segment(loaded.cube, params.slic);
      if (!tile_labels.empty()) assign_tile_labels(res.map, read_labels(tile_labels, loaded.cube));
      save_tile_map(res.map, tile_out);
      log_line({{"event", "tile_done"}, {"tiles", res.map.tiles.size()}, {"iterations", res.iterations},
                {"distance", to_string(params.slic.distance)}, {"out", tile_out}});
    } else if (quality->parsed()) {
      const auto params = prepare_params(cfg);
      const auto img = prepare_one(q_cube, q_tiles, q_labels, params);
      if (fs::path(q_out).has_parent_path()) fs::create_directories(fs::path(q_out).parent_path());
      io::write_text(q_out, quality_report_jsonl(img.quality, img.filter, params.weights));
      log_line({{"event", "quality_done"}, {"tiles", img.num_tiles()}, {"kept", img.filter.kept_count()},
                {"sam_cut", img.filter.sam_cut}, {"l2_cut", img.filter.l2_cut},
                {"intensity_lo", img.filter.intensity_lo}, {"intensity_hi", img.filter.intensity_hi}});
    } else if (trainc->parsed()) {
      const auto [kind, regime] = parse_run_tag(t_model);
      const fs::path out = t_out.empty() ? run_root() / t_model : fs::path(t_out);
      json manifest;
      const auto images = load_prepared_dataset(t_data, prepare_params(cfg), &manifest);
      std::vector<std::size_t> tiles;
      for (const auto& img : images) tiles.push_back(img.num_tiles());
      const auto split = make_split(tiles, split_fractions(cfg), stage_seed(cfg, 2));
      const auto tcfg = train_config(cfg, kind, regime, images.front().cube.channels());
      TrainOptions opts;
      opts.run_dir = out;
      opts.resolved_config = {{"run", cfg}, {"train", tcfg}};
      opts.on_epoch = [&](const EpochStats& e) {
        json j = e;
        j["event"] = "epoch";
        j["model"] = t_model;
        log_line(j);
      };
      const auto result = train(tcfg, images, split, opts);
      log_line({{"event", "train_done"}, {"model", t_model}, {"best_epoch", result.best_epoch},
                {"best_val_macro_accuracy", result.best_val_macro_accuracy}, {"resumed", result.resumed},
                {"dir", out.string()}});
    } else if (infer->parsed()) {
      const auto run = open_run(i_run);
      auto model = load_model(run.train_cfg, run.checkpoint);
      const auto img = prepare_one(i_cube, i_tiles, "", prepare_params(run.run_cfg));
      const auto probs = predict(model, img, run.train_cfg.knn_k);
      const auto pred = argmax_rows(probs, kNumClasses);
      json rows = json::array();
      for (std::size_t t = 0; t < pred.size(); ++t) {
        rows.push_back({probs[t * 3], probs[t * 3 + 1], probs[t * 3 + 2]});
      }
      write_json(i_out, {{"image", img.name},
                         {"model", run_tag(run.train_cfg.model, run.train_cfg.regime)},
                         {"classes", {"tumor", "healthy", "background"}},
                         {"num_tiles", pred.size()},
                         {"predictions", pred},
                         {"probabilities", rows}});
      if (i_tiles.empty()) save_tile_map(img.map, fs::path(i_out).string() + ".tiles");
      log_line({{"event", "infer_done"}, {"tiles", pred.size()}, {"out", i_out}});
    } else if (evalc->parsed()) {
      const auto run = open_run(e_run);
      auto model = load_model(run.train_cfg, run.checkpoint);
      const auto images = load_prepared_dataset(e_data, prepare_params(run.run_cfg));
      std::vector<std::size_t> indices;
      if (e_all) {
        for (std::size_t i = 0; i < images.size(); ++i) indices.push_back(i);
      } else {
        const auto split = json::parse(io::read_text(fs::path(e_run) / "split.json")).get<DatasetSplit>();
        if (split.assignment.size() != images.size()) {
          throw FormatError("split.json covers " + std::to_string(split.assignment.size()) +
                                " images, dataset has " + std::to_string(images.size()),
                            0);
        }
        SplitPart part;
        if (e_part == "train") {
          part = SplitPart::kTrain;
        } else if (e_part == "val") {
          part = SplitPart::kVal;
        } else if (e_part == "test") {
          part = SplitPart::kTest;
        } else {
          throw ConfigError("--part must be train, val or test");
        }
        indices = split.indices(part);
      }
      const auto ev = evaluate_model(model, images, indices, run.train_cfg.knn_k,
                                     run.run_cfg.at("eval").at("pixel_weighted").get<bool>());
      write_json(e_out, ev.metrics);
      log_line({{"event", "eval_done"}, {"tiles", ev.truth.size()}, {"macro_accuracy", ev.metrics["accuracy"]["Avg"]},
                {"auc", ev.metrics["auc"]}});
    } else if (render->parsed()) {
      auto loaded = load_cube(r_cube);
      TileMap map;
      std::vector<int> classes;
      if (!r_labels.empty()) {
        // ground truth, one pseudo tile per pixel
        const auto labels = read_labels(r_labels, loaded.cube);
        map.width = loaded.cube.width();
        map.height = loaded.cube.height();
        map.assignment.resize(labels.size());
        map.tiles.resize(labels.size());
        for (std::size_t p = 0; p < labels.size(); ++p) {
          map.assignment[p] = static_cast<std::uint32_t>(p);
          classes.push_back(labels[p]);
        }
      } else {
        if (r_pred.empty()) throw ConfigError("render needs --pred or --labels");
        const auto pred = json::parse(io::read_text(r_pred));
        classes = pred.at("predictions").get<std::vector<int>>();
        const auto tiles = r_tiles.empty() ? r_pred + ".tiles" : r_tiles;
        map = load_tile_map(loaded.cube, tiles);
      }
      if (fs::path(r_out).has_parent_path()) fs::create_directories(fs::path(r_out).parent_path());
      save_ppm(render_overlay(loaded.cube, map, classes), r_out);
      log_line({{"event", "render_done"}, {"out", r_out}});
    } else if (pipe->parsed()) {
      const fs::path out = p_out.empty() ? run_root() / "pipeline" : fs::path(p_out);
      run_pipeline(cfg, out, log_line);
    }
  } catch (const ConfigError& e) {
    log_line({{"event", "error"}, {"kind", "config"}, {"message", e.what()}});
    return kUsage;
  } catch (const NumericalError& e) {
    log_line({{"event", "error"}, {"kind", "numerical"}, {"message", e.what()}});
    return kNumerical;
  } catch (const json::exception& e) {
    log_line({{"event", "error"}, {"kind", "data"}, {"message", e.what()}});
    return kData;
  } catch (const std::exception& e) {
    // format, shape, domain and filesystem errors
    log_line({{"event", "error"}, {"kind", "data"}, {"message", e.what()}});
    return kData;
  }
  return kOk;
}
