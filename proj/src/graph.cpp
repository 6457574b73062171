#include "hsiseg/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "hsiseg/binary_io.hpp"
#include "hsiseg/error.hpp"
#include "hsiseg/rng.hpp"

namespace hsiseg {

std::vector<std::size_t> TileGraph::degrees() const {
  std::vector<std::size_t> deg(num_nodes(), 0);
  for (const auto& [i, j] : edges) {
    ++deg[i];
    ++deg[j];
  }
  return deg;
}

EdgeList build_knn_graph(std::span<const Point2> coords, std::size_t k) {
  const std::size_t n = coords.size();
  if (n <= k) {
    throw ConfigError("build_knn_graph: need more than k=" + std::to_string(k) + " nodes, got " +
                      std::to_string(n));
  }
  EdgeList edges;
  edges.reserve(n * k);
  std::vector<std::pair<double, std::uint32_t>> cand(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(coords[i].x) || !std::isfinite(coords[i].y)) {
      throw DomainError("build_knn_graph: non-finite coordinate at node " + std::to_string(i));
    }
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = coords[i].x - coords[j].x;
      const double dy = coords[i].y - coords[j].y;
      cand[c++] = {dx * dx + dy * dy, static_cast<std::uint32_t>(j)};
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<long>(k), cand.end());
    for (std::size_t m = 0; m < k; ++m) {
      const auto a = static_cast<std::uint32_t>(i);
      const auto b = cand[m].second;
      edges.emplace_back(std::min(a, b), std::max(a, b));
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

void to_json(nlohmann::json& j, const GraphAugmentParams& a) {
  j = {{"jitter", a.jitter},   {"jitter_fraction", a.jitter_fraction}, {"drop_nodes", a.drop_nodes},
       {"max_drop", a.max_drop}, {"k", a.k}};
}

void from_json(const nlohmann::json& j, GraphAugmentParams& a) {
  GraphAugmentParams d;
  a.jitter = j.value("jitter", d.jitter);
  a.jitter_fraction = j.value("jitter_fraction", d.jitter_fraction);
  a.drop_nodes = j.value("drop_nodes", d.drop_nodes);
  a.max_drop = j.value("max_drop", d.max_drop);
  a.k = j.value("k", d.k);
}

TileGraph augment_graph(const TileGraph& graph, std::uint64_t seed, const GraphAugmentParams& params) {
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  TileGraph g = graph;
  const std::size_t n = g.num_nodes();

  if (params.jitter && params.jitter_fraction > 0.0) {
    const double amp = params.jitter_fraction * params.grid_step;
    for (auto& c : g.coords) {
      c.x += amp * (2.0 * u01(rng) - 1.0);
      c.y += amp * (2.0 * u01(rng) - 1.0);
    }
    if (n > params.k) g.edges = build_knn_graph(g.coords, params.k);
  }

  if (!params.drop_nodes) return g;
  const double frac = params.fixed_drop >= 0.0 ? params.fixed_drop : params.max_drop * u01(rng);
  const auto drop = static_cast<std::size_t>(std::lround(frac * static_cast<double>(n)));
  if (drop == 0 || n - std::min(drop, n) < params.k + 1) return g;

  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0U);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> keep(n, true);
  for (std::size_t i = 0; i < drop; ++i) keep[order[i]] = false;

  std::vector<std::uint32_t> new_id(n, 0);
  TileGraph out;
  out.num_features = g.num_features;
  std::uint32_t next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep[i]) continue;
    new_id[i] = next++;
    out.coords.push_back(g.coords[i]);
    if (!g.labels.empty()) out.labels.push_back(g.labels[i]);
    if (!g.weights.empty()) out.weights.push_back(g.weights[i]);
    if (!g.mask.empty()) out.mask.push_back(g.mask[i]);
    if (!g.tile_index.empty()) out.tile_index.push_back(g.tile_index[i]);
    if (!g.features.empty()) {
      out.features.insert(out.features.end(), g.features.begin() + static_cast<long>(i * g.num_features),
                          g.features.begin() + static_cast<long>((i + 1) * g.num_features));
    }
  }
  for (const auto& [a, b] : g.edges) {
    if (keep[a] && keep[b]) out.edges.emplace_back(new_id[a], new_id[b]);
  }
  return out;
}

// ---------------------------------------------------------------- GAT

void GatConfig::validate() const {
  if (hidden == 0 || layers == 0 || heads == 0) throw ConfigError("GatConfig: sizes must be positive");
  if (dropout_before_last < 0.0 || dropout_before_last >= 1.0) {
    throw ConfigError("GatConfig: dropout must lie in [0, 1)");
  }
}

void to_json(nlohmann::json& j, const GatConfig& c) {
  j = {{"hidden", c.hidden},
       {"layers", c.layers},
       {"heads", c.heads},
       {"dropout_before_last", c.dropout_before_last},
       {"attention_slope", c.attention_slope}};
}

void from_json(const nlohmann::json& j, GatConfig& c) {
  GatConfig d;
  c.hidden = j.value("hidden", d.hidden);
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.dropout_before_last = j.value("dropout_before_last", d.dropout_before_last);
  c.attention_slope = j.value("attention_slope", d.attention_slope);
}

namespace {

template <typename T>
ad::Tensor<T> glorot(ad::Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return ad::Tensor<T>(std::move(shape), std::move(v), true);
}

}  // namespace

template <typename T>
GatModel<T>::GatModel(const GatConfig& cfg, std::size_t in_features, std::size_t num_classes,
                      std::uint64_t seed)
    : cfg_(cfg), in_features_(in_features), num_classes_(num_classes) {
  cfg_.validate();
  std::mt19937_64 rng(splitmix64(seed ^ 0x6A7ULL));
  std::size_t in = in_features;
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const bool last = l + 1 == cfg_.layers;
    const std::size_t out = last ? num_classes : cfg_.hidden;
    Layer layer;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      Head head;
      head.weight = glorot<T>({in, out}, in, out, rng);
      head.att_src = glorot<T>({out, 1}, out, 1, rng);
      head.att_dst = glorot<T>({out, 1}, out, 1, rng);
      layer.heads.push_back(std::move(head));
    }
    layer.bias = ad::Tensor<T>::zeros({last ? out : out * cfg_.heads}, true);
    layers_.push_back(std::move(layer));
    in = out * cfg_.heads;
  }
}

template <typename T>
ad::Tensor<T> GatModel<T>::forward(ad::Tape<T>& tape, const ad::Tensor<T>& x, const EdgeList& edges,
                                   bool train, std::uint64_t dropout_seed,
                                   std::vector<AttentionRecord>* attention) {
  if (x.rank() != 2 || x.dim(1) != in_features_) {
    throw ShapeError("gat_forward: got features " + ad::shape_str(x.shape()) + ", expected [N, " +
                     std::to_string(in_features_) + "]");
  }
  const std::size_t n = x.dim(0);
  // Messages flow both ways along every edge, plus a self-loop per node.
  std::vector<std::uint32_t> src, dst;
  for (std::uint32_t i = 0; i < n; ++i) {
    src.push_back(i);
    dst.push_back(i);
  }
  for (const auto& [a, b] : edges) {
    if (a >= n || b >= n) throw ShapeError("gat_forward: edge references node outside the graph");
    src.push_back(a);
    dst.push_back(b);
    src.push_back(b);
    dst.push_back(a);
  }

  const T slope = static_cast<T>(cfg_.attention_slope);
  ad::Tensor<T> h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const bool last = l + 1 == layers_.size();
    if (last) {
      h = ad::dropout(tape, h, static_cast<T>(cfg_.dropout_before_last), train, dropout_seed);
    }
    std::vector<ad::Tensor<T>> outs;
    for (std::size_t k = 0; k < layers_[l].heads.size(); ++k) {
      const Head& head = layers_[l].heads[k];
      auto wh = ad::matmul(tape, h, head.weight);
      auto s_src = ad::matmul(tape, wh, head.att_src);
      auto s_dst = ad::matmul(tape, wh, head.att_dst);
      auto e = ad::add(tape, ad::gather_rows(tape, s_dst, dst), ad::gather_rows(tape, s_src, src));
      e = ad::leaky_relu(tape, e, slope);
      auto alpha = ad::segment_softmax(tape, e, dst, n);
      if (attention) {
        AttentionRecord rec;
        rec.layer = l;
        rec.head = k;
        rec.source = src;
        rec.target = dst;
        rec.alpha.assign(alpha.values().begin(), alpha.values().end());
        attention->push_back(std::move(rec));
      }
      auto msg = ad::mul(tape, ad::gather_rows(tape, wh, src), alpha);
      outs.push_back(ad::scatter_sum_by_segment(tape, msg, dst, n));
    }
    if (last) {
      auto acc = outs[0];
      for (std::size_t k = 1; k < outs.size(); ++k) acc = ad::add(tape, acc, outs[k]);
      if (outs.size() > 1) acc = ad::scale(tape, acc, T(1) / static_cast<T>(outs.size()));
      h = ad::add(tape, acc, layers_[l].bias);
    } else {
      auto cat = outs.size() == 1 ? outs[0] : ad::concat(tape, outs, 1);
      h = ad::relu(tape, ad::add(tape, cat, layers_[l].bias));
    }
  }
  return h;
}

template <typename T>
ParameterList<T> GatModel<T>::parameters() const {
  ParameterList<T> p;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string lp = "gat.layer" + std::to_string(l) + ".";
    for (std::size_t k = 0; k < layers_[l].heads.size(); ++k) {
      const std::string hp = lp + "head" + std::to_string(k) + ".";
      p.push_back({hp + "weight", layers_[l].heads[k].weight});
      p.push_back({hp + "att_src", layers_[l].heads[k].att_src});
      p.push_back({hp + "att_dst", layers_[l].heads[k].att_dst});
    }
    p.push_back({lp + "bias", layers_[l].bias});
  }
  return p;
}

template <typename T>
void GatModel<T>::load_state(const ParameterList<float>& source) {
  assign_parameters(parameters(), source);
}

template <typename T>
void GatModel<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template class GatModel<float>;
template class GatModel<double>;

// ---------------------------------------------------------------- files

void save_graph(const TileGraph& g, const std::filesystem::path& path) {
  nlohmann::json nodes = nlohmann::json::array();
  for (std::size_t i = 0; i < g.num_nodes(); ++i) {
    nlohmann::json n{{"id", i}, {"coords", {g.coords[i].x, g.coords[i].y}}};
    n["label"] = i < g.labels.size() ? nlohmann::json(g.labels[i]) : nlohmann::json(nullptr);
    n["weight"] = i < g.weights.size() ? g.weights[i] : 1.0F;
    n["mask"] = i < g.mask.size() ? static_cast<int>(g.mask[i]) : 0;
    if (i < g.tile_index.size()) n["tile"] = g.tile_index[i];
    nodes.push_back(std::move(n));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [a, b] : g.edges) edges.push_back({a, b});
  nlohmann::json doc{{"num_nodes", g.num_nodes()},
                     {"num_features", g.num_features},
                     {"nodes", nodes},
                     {"edges", edges}};
  io::write_text(path.string() + ".json", doc.dump(1));
  io::ByteWriter w;
  w.put_all(std::span<const float>(g.features));
  io::write_file(path.string() + ".bin", w.take());
}

TileGraph load_graph(const std::filesystem::path& path) {
  const auto doc = nlohmann::json::parse(io::read_text(path.string() + ".json"));
  TileGraph g;
  g.num_features = doc.at("num_features").get<std::size_t>();
  for (const auto& n : doc.at("nodes")) {
    g.coords.push_back({n.at("coords")[0].get<double>(), n.at("coords")[1].get<double>()});
    g.labels.push_back(n.at("label").is_null() ? -1 : n.at("label").get<int>());
    g.weights.push_back(n.at("weight").get<float>());
    g.mask.push_back(static_cast<NodeSplit>(n.at("mask").get<int>()));
    if (n.contains("tile")) g.tile_index.push_back(n.at("tile").get<std::uint32_t>());
  }
  for (const auto& e : doc.at("edges")) {
    g.edges.emplace_back(e[0].get<std::uint32_t>(), e[1].get<std::uint32_t>());
  }
  const auto bytes = io::read_file(path.string() + ".bin");
  g.features.resize(g.num_nodes() * g.num_features);
  io::ByteReader r(bytes);
  r.get_all(std::span<float>(g.features), "graph features");
  return g;
}

}  // namespace hsiseg
