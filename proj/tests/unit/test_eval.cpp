#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "../support/oracles.hpp"
#include "hsiseg/classes.hpp"
#include "hsiseg/error.hpp"
#include "hsiseg/eval.hpp"
#include "hsiseg/tiling.hpp"

using namespace hsiseg;
using testing::auc_oracle;

namespace {

std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

// 12x8 cube whose middle channel ramps left to right, tiled into 4x4 blocks.
std::pair<HsiCube, TileMap> ramp_scene() {
  auto cube = HsiCube::zeros(12, 8, 5);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 12; ++x)
      for (std::size_t c = 0; c < 5; ++c) cube.mutable_spectrum(y * 12 + x)[c] = static_cast<float>(x) / 11.0F;
  std::vector<std::uint32_t> a(96);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 12; ++x) a[y * 12 + x] = static_cast<std::uint32_t>((y / 4) * 3 + x / 4);
  TileMap map;
  map.width = 12;
  map.height = 8;
  map.assignment = a;
  map.tiles = compute_tile_stats(cube, a);
  return {cube, map};
}

}  // namespace

TEST_CASE("metric examples") {
  SUBCASE("perfect prediction") {
    const std::vector<int> y{0, 1, 2, 2, 1};
    const auto r = per_class_metrics(ConfusionMatrix::from_labels(y, y, 3));
    for (const auto& m : r.per_class) {
      CHECK(m.recall == 1.0);
      CHECK(m.f1 == 1.0);
      CHECK(m.iou == 1.0);
    }
    CHECK(r.macro_recall == 1.0);
  }
  SUBCASE("two-class matrix of ones") {
    ConfusionMatrix cm(2);
    cm.add(0, 0);
    cm.add(0, 1);
    cm.add(1, 0);
    cm.add(1, 1);
    const auto r = per_class_metrics(cm);
    for (const auto& m : r.per_class) {
      CHECK(m.recall == 0.5);
      CHECK(m.f1 == 0.5);
      CHECK(m.iou == doctest::Approx(1.0 / 3.0));
    }
  }
  SUBCASE("absent class is excluded with a warning") {
    const std::vector<int> t{0, 0, 1}, p{0, 1, 1};
    const auto r = per_class_metrics(ConfusionMatrix::from_labels(t, p, 3));
    CHECK_FALSE(r.per_class[2].present);
    CHECK(r.warnings.size() == 1);
    CHECK(r.macro_recall == doctest::Approx(0.75));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(per_class_metrics(ConfusionMatrix(3)), DomainError);
    ConfusionMatrix cm(3);
    CHECK_THROWS_AS(cm.add(3, 0), DomainError);
    const std::vector<int> a{0, 1}, b{0};
    CHECK_THROWS_AS(ConfusionMatrix::from_labels(a, b, 3), ShapeError);
  }
}

TEST_CASE("per-class metrics match a counting oracle on random matrices") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 400)(rng);
    std::uniform_int_distribution<int> cls(0, 2);
    std::vector<int> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = cls(rng);
      pred[i] = rng() % 3 == 0 ? cls(rng) : truth[i];
    }
    const auto r = per_class_metrics(ConfusionMatrix::from_labels(truth, pred, 3));
    double macro = 0.0;
    int present = 0;
    for (int c = 0; c < 3; ++c) {
      std::uint64_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        tp += truth[i] == c && pred[i] == c;
        fp += truth[i] != c && pred[i] == c;
        fn += truth[i] == c && pred[i] != c;
      }
      if (tp + fp + fn == 0) continue;
      const double rec = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
      CHECK(r.per_class[c].recall == rec);
      CHECK(r.per_class[c].f1 == 2.0 * static_cast<double>(tp) / (2.0 * static_cast<double>(tp) +
                                                                   static_cast<double>(fp) + static_cast<double>(fn)));
      CHECK(r.per_class[c].iou == static_cast<double>(tp) / static_cast<double>(tp + fp + fn));
      macro += rec;
      ++present;
    }
    CHECK(r.macro_recall == doctest::Approx(macro / present).epsilon(1e-15));
  }
}

TEST_CASE("macro F1 is invariant under class relabeling") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> cls(0, 2);
  const int perm[] = {2, 0, 1};
  for (int t = 0; t < 20; ++t) {
    std::vector<int> truth(50), pred(50), pt(50), pp(50);
    for (std::size_t i = 0; i < 50; ++i) {
      truth[i] = cls(rng);
      pred[i] = cls(rng);
      pt[i] = perm[truth[i]];
      pp[i] = perm[pred[i]];
    }
    const auto a = per_class_metrics(ConfusionMatrix::from_labels(truth, pred, 3));
    const auto b = per_class_metrics(ConfusionMatrix::from_labels(pt, pp, 3));
    CHECK(a.macro_f1 == doctest::Approx(b.macro_f1).epsilon(1e-12));
  }
}

TEST_CASE("auc examples") {
  const std::vector<int> y{0, 0, 1, 1};
  CHECK(roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, y) == 0.75);
  CHECK(roc_auc(std::vector<double>{0.1, 0.2, 0.7, 0.8}, y) == 1.0);
  CHECK(roc_auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, y) == 0.5);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), DomainError);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.1}, y), ShapeError);
}

TEST_CASE("sorting auc equals the pair-count oracle, ties included") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 60; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 1000)(rng);
    // coarse scores force many ties
    const int levels = t % 3 == 0 ? 5 : 1000;
    std::uniform_int_distribution<int> lvl(0, levels);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(lvl(rng)) / levels;
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    CHECK(roc_auc(s, y) == auc_oracle(s, y));
  }
}

TEST_CASE("auc is invariant under strictly monotone transforms") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> s(200), e(200), c(200);
    std::vector<int> y(200);
    for (std::size_t i = 0; i < 200; ++i) {
      s[i] = std::round(u(rng) * 50) / 50;
      y[i] = u(rng) < 0.4 ? 1 : 0;
      e[i] = std::exp(3 * s[i]);
      c[i] = s[i] * s[i] * s[i] - 4;
    }
    CHECK(roc_auc(s, y) == roc_auc(e, y));
    CHECK(roc_auc(s, y) == roc_auc(c, y));
  }
}

TEST_CASE("roc curve runs from the origin to (1, 1)") {
  const auto pts = roc_curve(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1});
  CHECK(pts.front() == std::pair<double, double>{0.0, 0.0});
  CHECK(pts.back() == std::pair<double, double>{1.0, 1.0});
  CHECK(pts[1] == std::pair<double, double>{0.0, 0.5});
}

TEST_CASE("tumor auc drops background samples") {
  // rows: tumor, healthy, background probabilities
  const std::vector<float> probs{0.8F, 0.1F, 0.1F, 0.2F, 0.6F, 0.2F, 0.0F, 0.0F, 1.0F, 0.3F, 0.3F, 0.4F};
  const std::vector<int> truth{kTumor, kHealthy, kBackground, kTumor};
  const auto p = tumor_probability(probs);
  CHECK(p[0] == doctest::Approx(0.8 / 0.9));
  CHECK(p[2] == 0.5);
  CHECK(tumor_auc(probs, truth).value() == 1.0);
  CHECK_FALSE(tumor_auc(probs, std::vector<int>{kTumor, kTumor, kBackground, kTumor}).has_value());
}

TEST_CASE("metrics json layout") {
  const std::vector<int> t{0, 1, 1}, p{0, 1, 0};
  const auto j = metrics_json(per_class_metrics(ConfusionMatrix::from_labels(t, p, 3)), 0.9);
  for (const char* k : {"accuracy", "f1", "iou"}) {
    CHECK(j.at(k).contains("H"));
    CHECK(j.at(k).contains("T"));
    CHECK(j.at(k).at("B").is_null());
    CHECK(j.at(k).contains("Avg"));
  }
  CHECK(j.at("accuracy").at("H") == 0.5);
  CHECK(j.at("auc") == 0.9);
  CHECK(metrics_json(per_class_metrics(ConfusionMatrix::from_labels(t, p, 3)), std::nullopt).at("auc").is_null());
}

TEST_CASE("overlay rendering") {
  auto [cube, map] = ramp_scene();
  SUBCASE("all tumor is a uniform red tint over the gray base") {
    const std::vector<int> pred(6, kTumor);
    const auto img = render_overlay(cube, map, pred);
    for (std::size_t x = 0; x < 12; ++x) {
      const double g = static_cast<double>(x) / 11.0 * 255.0;
      const auto* px = &img.rgb[(3 * 12 + x) * 3];
      // the base is stretched in float; allow one step of rounding
      CHECK(std::abs(px[0] - (0.55 * g + 0.45 * 255)) <= 1.0);
      CHECK(std::abs(px[1] - 0.55 * g) <= 1.0);
      CHECK(px[2] == px[1]);
    }
  }
  SUBCASE("colors follow the tile map") {
    const std::vector<int> pred{kTumor, kHealthy, kBackground, kHealthy, kBackground, kTumor};
    const auto img = render_overlay(cube, map, pred);
    for (std::size_t p = 0; p < 96; ++p) {
      const int cls = pred[map.assignment[p]];
      const auto* px = &img.rgb[p * 3];
      // the class channel is the largest
      CHECK(px[cls] == *std::max_element(px, px + 3));
      CHECK(px[cls] > px[(cls + 1) % 3]);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(render_overlay(cube, map, std::vector<int>(5, 0)), ShapeError);
    CHECK_THROWS_AS(render_overlay(cube, map, std::vector<int>(6, 3)), DomainError);
  }
  SUBCASE("golden image") {
    const std::vector<int> pred{kTumor, kHealthy, kBackground, kHealthy, kBackground, kTumor};
    const auto bytes = encode_ppm(render_overlay(cube, map, pred));
    const std::string header = "P6\n12 8\n255\n";
    CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())) == header);
    CHECK(bytes.size() == header.size() + 12 * 8 * 3);
    CHECK(fnv1a(bytes) == 13203082495170012170ULL);
  }
}
