#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "../support/primitive_checks.hpp"
#include "hsiseg/error.hpp"
#include "hsiseg/graph.hpp"

using namespace hsiseg;

namespace {

std::vector<Point2> random_points(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  std::vector<Point2> p(n);
  for (auto& q : p) q = {u(rng), u(rng)};
  return p;
}

// All-pairs kNN, symmetrized.
EdgeList brute_knn(const std::vector<Point2>& p, std::size_t k) {
  std::set<std::pair<std::uint32_t, std::uint32_t>> e;
  for (std::uint32_t i = 0; i < p.size(); ++i) {
    std::vector<std::pair<double, std::uint32_t>> d;
    for (std::uint32_t j = 0; j < p.size(); ++j)
      if (j != i) d.emplace_back(std::hypot(p[i].x - p[j].x, p[i].y - p[j].y), j);
    std::sort(d.begin(), d.end());
    for (std::size_t r = 0; r < k; ++r) e.emplace(std::min(i, d[r].second), std::max(i, d[r].second));
  }
  return {e.begin(), e.end()};
}

bool canonical(const EdgeList& edges, std::size_t n) {
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (edges[i].first >= edges[i].second || edges[i].second >= n) return false;
    if (i > 0 && !(edges[i - 1] < edges[i])) return false;
  }
  return true;
}

ad::Tensor<double> random_features(std::size_t n, std::size_t f, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n * f);
  for (auto& x : v) x = nd(rng);
  return ad::Tensor<double>({n, f}, std::move(v));
}

}  // namespace

TEST_CASE("knn graph examples") {
  SUBCASE("three collinear points give a triangle") {
    const std::vector<Point2> p{{0, 0}, {1, 0}, {2, 0}};
    CHECK(build_knn_graph(p, 2) == EdgeList{{0, 1}, {0, 2}, {1, 2}});
  }
  SUBCASE("unit square has no diagonals") {
    const std::vector<Point2> p{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    CHECK(build_knn_graph(p, 2) == EdgeList{{0, 1}, {0, 3}, {1, 2}, {2, 3}});
  }
  SUBCASE("too few nodes") {
    const std::vector<Point2> p{{0, 0}, {1, 0}};
    CHECK_THROWS_AS(build_knn_graph(p, 2), ConfigError);
  }
}

TEST_CASE("knn graph matches all-pairs search on random points") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = random_points(100, s);
    const auto e = build_knn_graph(p, 2);
    CHECK(e == brute_knn(p, 2));
    CHECK(canonical(e, p.size()));
    TileGraph g;
    g.coords = p;
    g.edges = e;
    const auto deg = g.degrees();
    CHECK(*std::min_element(deg.begin(), deg.end()) >= 2);
  }
}

TEST_CASE("graph augmentation") {
  TileGraph g;
  g.coords = random_points(100, 3);
  g.edges = build_knn_graph(g.coords, 2);
  for (std::size_t i = 0; i < 100; ++i) {
    g.labels.push_back(static_cast<int>(i % 3));
    g.weights.push_back(static_cast<float>(i) / 100.0F);
    g.tile_index.push_back(static_cast<std::uint32_t>(i));
  }
  SUBCASE("no jitter and no drop leaves the graph unchanged") {
    GraphAugmentParams a;
    a.jitter = false;
    a.fixed_drop = 0.0;
    const auto out = augment_graph(g, 1, a);
    CHECK(out.edges == g.edges);
    CHECK(out.labels == g.labels);
    CHECK(out.num_nodes() == 100);
  }
  SUBCASE("dropping 0.3 of 100 nodes keeps 70") {
    GraphAugmentParams a;
    a.jitter = false;
    a.fixed_drop = 0.3;
    const auto out = augment_graph(g, 2, a);
    CHECK(out.num_nodes() == 70);
    CHECK(out.labels.size() == 70);
    CHECK(canonical(out.edges, 70));
    // per-node data follows the surviving nodes
    for (std::size_t i = 0; i < 70; ++i) {
      const auto t = out.tile_index[i];
      CHECK(out.labels[i] == g.labels[t]);
      CHECK(out.weights[i] == g.weights[t]);
      CHECK(out.coords[i].x == g.coords[t].x);
    }
  }
  SUBCASE("jitter rebuilds a symmetric graph with min degree two") {
    GraphAugmentParams a;
    a.drop_nodes = false;
    a.grid_step = 10.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto out = augment_graph(g, s, a);
      CHECK(canonical(out.edges, 100));
      const auto deg = out.degrees();
      CHECK(*std::min_element(deg.begin(), deg.end()) >= 2);
      for (std::size_t i = 0; i < 100; ++i) {
        CHECK(std::abs(out.coords[i].x - g.coords[i].x) <= 5.0);
        CHECK(std::abs(out.coords[i].y - g.coords[i].y) <= 5.0);
      }
    }
  }
  SUBCASE("random drops stay within bounds and are deterministic") {
    GraphAugmentParams a;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto out = augment_graph(g, s, a);
      CHECK(out.num_nodes() >= 70);
      CHECK(canonical(out.edges, out.num_nodes()));
      CHECK(augment_graph(g, s, a).edges == out.edges);
    }
  }
  SUBCASE("dropping below k + 1 nodes is skipped") {
    TileGraph small;
    small.coords = {{0, 0}, {1, 0}, {2, 0}, {3, 0}};
    small.edges = build_knn_graph(small.coords, 2);
    GraphAugmentParams a;
    a.jitter = false;
    a.fixed_drop = 0.5;
    CHECK(augment_graph(small, 1, a).num_nodes() == 4);
  }
}

TEST_CASE("gat with identity weights passes uniform features through") {
  GatConfig cfg;
  cfg.layers = 1;
  cfg.heads = 1;
  GatModel<double> m(cfg, 3, 3, 1);
  auto& head = m.layers()[0].heads[0];
  auto w = head.weight.mutable_values();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
  const std::vector<Point2> p = random_points(6, 1);
  const auto edges = build_knn_graph(p, 2);
  const std::vector<double> f{0.5, -1.0, 2.0};
  std::vector<double> x;
  for (int i = 0; i < 6; ++i) x.insert(x.end(), f.begin(), f.end());
  ad::Tape<double> tape;
  const auto out = m.forward(tape, ad::Tensor<double>({6, 3}, x), edges, false);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.values()[i] == doctest::Approx(f[i % 3]));
}

TEST_CASE("two-node gat matches a hand computation") {
  GatConfig cfg;
  cfg.layers = 1;
  cfg.heads = 1;
  GatModel<double> m(cfg, 2, 2, 1);
  auto& head = m.layers()[0].heads[0];
  const double w[] = {1, 0, 0, 2};
  std::copy(std::begin(w), std::end(w), head.weight.mutable_values().begin());
  head.att_src.mutable_values()[0] = -1.0;
  head.att_src.mutable_values()[1] = 0.0;
  head.att_dst.mutable_values()[0] = 0.0;
  head.att_dst.mutable_values()[1] = 1.0;
  m.layers()[0].bias.mutable_values()[1] = 0.5;
  const EdgeList edges{{0, 1}};
  ad::Tape<double> tape;
  const auto out = m.forward(tape, ad::Tensor<double>({2, 2}, {1, 0, 0, 1}), edges, false);
  // Wh0 = (1, 0), Wh1 = (0, 2). Scores into node 0: self -0.2 (leaky), from 1: 0.
  // Into node 1: self 2, from 0: 1.
  const double a00 = std::exp(-0.2) / (std::exp(-0.2) + 1.0);
  const double a11 = std::exp(2.0) / (std::exp(2.0) + std::exp(1.0));
  CHECK(out.values()[0] == doctest::Approx(a00));
  CHECK(out.values()[1] == doctest::Approx(2.0 * (1.0 - a00) + 0.5));
  CHECK(out.values()[2] == doctest::Approx(1.0 - a11));
  CHECK(out.values()[3] == doctest::Approx(2.0 * a11 + 0.5));
}

TEST_CASE("attention rows sum to one at every layer and head") {
  GatConfig cfg;
  GatModel<float> m(cfg, 48, 3, 7);
  const auto p = random_points(40, 2);
  const auto edges = build_knn_graph(p, 2);
  std::mt19937_64 rng(3);
  std::normal_distribution<float> nd(0.0F, 1.0F);
  std::vector<float> x(40 * 48);
  for (auto& v : x) v = nd(rng);
  std::vector<AttentionRecord> att;
  ad::Tape<float> tape;
  m.forward(tape, ad::Tensor<float>({40, 48}, x), edges, false, 0, &att);
  REQUIRE(att.size() == 9);
  for (const auto& r : att) {
    std::vector<double> sum(40, 0.0);
    for (std::size_t e = 0; e < r.alpha.size(); ++e) sum[r.target[e]] += r.alpha[e];
    for (double s : sum) CHECK(std::abs(s - 1.0) < 1e-5);
  }
}

TEST_CASE("gat output is permutation equivariant") {
  GatConfig cfg;
  cfg.hidden = 8;
  GatModel<double> m(cfg, 5, 3, 4);
  const std::size_t n = 12;
  const auto p = random_points(n, 9);
  const auto x = random_features(n, 5, 10);
  std::vector<std::uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0U);
  std::mt19937_64 rng(1);
  std::shuffle(perm.begin(), perm.end(), rng);
  // new node i is old node perm[i]
  std::vector<Point2> pp(n);
  std::vector<double> xp(n * 5);
  for (std::size_t i = 0; i < n; ++i) {
    pp[i] = p[perm[i]];
    std::copy_n(x.values().begin() + static_cast<long>(perm[i] * 5), 5, xp.begin() + static_cast<long>(i * 5));
  }
  ad::Tape<double> t1, t2;
  const auto a = m.forward(t1, x, build_knn_graph(p, 2), false);
  const auto b = m.forward(t2, ad::Tensor<double>({n, 5}, xp), build_knn_graph(pp, 2), false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(b.values()[i * 3 + c] == doctest::Approx(a.values()[perm[i] * 3 + c]).epsilon(1e-9));
}

TEST_CASE("gat rejects bad inputs") {
  GatModel<float> m(GatConfig{}, 4, 3, 1);
  ad::Tape<float> tape;
  CHECK_THROWS_AS(m.forward(tape, ad::Tensor<float>::zeros({3, 5}), {{0, 1}}, false), ShapeError);
  CHECK_THROWS_AS(m.forward(tape, ad::Tensor<float>::zeros({3, 4}), {{0, 7}}, false), ShapeError);
  GatConfig bad;
  bad.dropout_before_last = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("gat gradients match finite differences") {
  for (std::uint64_t c = 0; c < 6; ++c) {
    const auto r = testing::gat_model_check(c);
    INFO(r.worst << ", skipped " << r.skipped << " of " << r.checked + r.skipped);
    CHECK(r.max_rel_error < 1e-3);
    CHECK(r.skipped * 4 <= r.checked);
  }
}

TEST_CASE("graph file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "hsiseg_test_graph" / "g";
  std::filesystem::create_directories(path.parent_path());
  TileGraph g;
  g.coords = random_points(10, 4);
  g.edges = build_knn_graph(g.coords, 2);
  g.num_features = 3;
  for (std::size_t i = 0; i < 10; ++i) {
    g.labels.push_back(static_cast<int>(i % 3));
    g.weights.push_back(0.1F * static_cast<float>(i));
    g.mask.push_back(static_cast<NodeSplit>(i % 3));
    g.tile_index.push_back(static_cast<std::uint32_t>(i + 5));
    for (int f = 0; f < 3; ++f) g.features.push_back(static_cast<float>(i) + 0.25F * f);
  }
  save_graph(g, path);
  const auto back = load_graph(path);
  CHECK(back.edges == g.edges);
  CHECK(back.labels == g.labels);
  CHECK(back.weights == g.weights);
  CHECK(back.mask == g.mask);
  CHECK(back.tile_index == g.tile_index);
  CHECK(back.features == g.features);
  CHECK(back.num_features == 3);
  for (std::size_t i = 0; i < 10; ++i) CHECK(back.coords[i].x == g.coords[i].x);
}
