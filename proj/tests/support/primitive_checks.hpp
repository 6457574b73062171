#pragma once

// Randomized finite-difference cases for every autodiff primitive and for
// both models.

#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "hsiseg/cnn.hpp"
#include "hsiseg/graph.hpp"
#include "hsiseg/rng.hpp"

namespace hsiseg::testing {

struct PrimitiveCase {
  std::string name;
  // Runs case `c`, returns the worst relative error.
  std::function<GradCheckResult(std::uint64_t c)> run;
};

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<PrimitiveCase> primitive_cases() {
  using ad::Shape;
  std::vector<PrimitiveCase> cases;
  auto add_case = [&](std::string name, std::function<GradCheckResult(std::mt19937_64&, std::uint64_t)> f) {
    cases.push_back({name, [f, name](std::uint64_t c) {
                       std::mt19937_64 rng(derive_seed({std::hash<std::string>{}(name), c}));
                       return f(rng, c);
                     }});
  };

  add_case("add", [](auto& rng, std::uint64_t c) {
    const auto r = pick(rng, 1, 5), k = pick(rng, 1, 6);
    auto a = random_tensor({r, k}, rng);
    // odd cases broadcast a row vector
    auto b = c % 2 ? random_tensor({k}, rng) : random_tensor({r, k}, rng);
    return grad_check([&](TapeD& t) { return project(t, ad::add(t, a, b), c); }, {a, b}, {"a", "b"});
  });
  add_case("mul", [](auto& rng, std::uint64_t c) {
    const auto r = pick(rng, 1, 5), k = pick(rng, 1, 6);
    auto a = random_tensor({r, k}, rng);
    auto b = c % 2 ? random_tensor({r, 1}, rng) : random_tensor({r, k}, rng);
    return grad_check([&](TapeD& t) { return project(t, ad::mul(t, a, b), c); }, {a, b}, {"a", "b"});
  });
  add_case("scale_sum_mean", [](auto& rng, std::uint64_t) {
    auto a = random_tensor({pick(rng, 1, 4), pick(rng, 1, 5)}, rng);
    const double f = std::uniform_real_distribution<double>(-2, 2)(rng);
    return grad_check(
        [&](TapeD& t) {
          auto s = ad::scale(t, a, f);
          return ad::add(t, ad::sum(t, ad::mul(t, s, s)), ad::mean(t, ad::mul(t, a, a)));
        },
        {a}, {"a"});
  });
  add_case("matmul", [](auto& rng, std::uint64_t c) {
    const auto m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    return grad_check([&](TapeD& t) { return project(t, ad::matmul(t, a, b), c); }, {a, b}, {"a", "b"});
  });
  add_case("linear", [](auto& rng, std::uint64_t c) {
    const auto n = pick(rng, 1, 5), in = pick(rng, 1, 6), out = pick(rng, 1, 4);
    auto x = random_tensor({n, in}, rng);
    auto w = random_tensor({out, in}, rng);
    auto b = random_tensor({out}, rng);
    if (c % 3 == 0) {
      return grad_check([&](TapeD& t) { return project(t, ad::linear(t, x, w, TensorD()), c); }, {x, w},
                        {"x", "w"});
    }
    return grad_check([&](TapeD& t) { return project(t, ad::linear(t, x, w, b), c); }, {x, w, b},
                      {"x", "w", "b"});
  });
  add_case("conv2d", [](auto& rng, std::uint64_t c) {
    const std::size_t kernels[] = {1, 3, 4};
    const auto k = kernels[c % 3];
    const auto stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
    const auto h = pick(rng, k, 7), w = pick(rng, k, 7);
    const auto cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), b = pick(rng, 1, 2);
    auto x = random_tensor({b, cin, h, w}, rng);
    auto wt = random_tensor({cout, cin, k, k}, rng);
    auto bias = random_tensor({cout}, rng);
    return grad_check([&](TapeD& t) { return project(t, ad::conv2d(t, x, wt, bias, stride, pad), c); },
                      {x, wt, bias}, {"x", "weight", "bias"});
  });
  add_case("leaky_relu", [](auto& rng, std::uint64_t c) {
    auto x = random_tensor_off_zero({pick(rng, 1, 4), pick(rng, 1, 6)}, rng);
    const double slope = c % 2 ? 0.01 : 0.2;
    return grad_check([&](TapeD& t) { return project(t, ad::leaky_relu(t, x, slope), c); }, {x}, {"x"});
  });
  add_case("relu", [](auto& rng, std::uint64_t c) {
    auto x = random_tensor_off_zero({pick(rng, 1, 4), pick(rng, 1, 6)}, rng);
    return grad_check([&](TapeD& t) { return project(t, ad::relu(t, x), c); }, {x}, {"x"});
  });
  add_case("batch_norm", [](auto& rng, std::uint64_t c) {
    const auto ch = pick(rng, 1, 3);
    // alternate [B, C] and [B, C, H, W]
    Shape shape = c % 2 ? Shape{pick(rng, 3, 6), ch} : Shape{pick(rng, 2, 3), ch, pick(rng, 2, 3), pick(rng, 2, 3)};
    auto x = random_tensor(shape, rng);
    auto g = random_tensor({ch}, rng, 0.5, 1.5);
    auto be = random_tensor({ch}, rng);
    ad::BatchNormState<double> st(ch);
    const bool train = c % 3 != 0;
    if (!train) {
      for (auto& v : st.running_mean) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
      for (auto& v : st.running_var) v = std::uniform_real_distribution<double>(0.5, 2)(rng);
    }
    return grad_check([&](TapeD& t) { return project(t, ad::batch_norm(t, x, g, be, st, train), c); },
                      {x, g, be}, {"x", "gamma", "beta"});
  });
  add_case("dropout", [](auto& rng, std::uint64_t c) {
    auto x = random_tensor({pick(rng, 1, 4), pick(rng, 2, 8)}, rng);
    const double p = 0.1 * static_cast<double>(c % 6);
    return grad_check([&](TapeD& t) { return project(t, ad::dropout(t, x, p, true, c), c); }, {x}, {"x"});
  });
  add_case("avg_pool_full", [](auto& rng, std::uint64_t c) {
    auto x = random_tensor({pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng);
    return grad_check([&](TapeD& t) { return project(t, ad::avg_pool_full(t, x), c); }, {x}, {"x"});
  });
  add_case("softmax", [](auto& rng, std::uint64_t c) {
    auto x = random_tensor({pick(rng, 1, 4), pick(rng, 2, 5)}, rng, -3, 3);
    return grad_check([&](TapeD& t) { return project(t, ad::softmax(t, x), c); }, {x}, {"x"});
  });
  add_case("log_softmax", [](auto& rng, std::uint64_t c) {
    auto x = random_tensor({pick(rng, 1, 4), pick(rng, 2, 5)}, rng, -3, 3);
    return grad_check([&](TapeD& t) { return project(t, ad::log_softmax(t, x), c); }, {x}, {"x"});
  });
  add_case("cross_entropy", [](auto& rng, std::uint64_t c) {
    const auto n = pick(rng, 1, 6), k = pick(rng, 2, 4);
    auto x = random_tensor({n, k}, rng, -3, 3);
    std::vector<int> labels(n);
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(pick(rng, 0, k - 1));
      w[i] = std::uniform_real_distribution<double>(0.1, 2.0)(rng);
    }
    if (c % 2) w.clear();
    return grad_check([&](TapeD& t) { return ad::cross_entropy<double>(t, x, labels, w); }, {x}, {"logits"});
  });
  add_case("concat", [](auto& rng, std::uint64_t c) {
    const std::size_t axis = c % 2;
    const auto r = pick(rng, 1, 4), k = pick(rng, 1, 4);
    auto a = random_tensor({r, k}, rng);
    auto b = axis == 0 ? random_tensor({pick(rng, 1, 3), k}, rng) : random_tensor({r, pick(rng, 1, 3)}, rng);
    return grad_check([&](TapeD& t) { return project(t, ad::concat(t, {a, b, a}, axis), c); }, {a, b},
                      {"a", "b"});
  });
  add_case("slice", [](auto& rng, std::uint64_t c) {
    const std::size_t axis = c % 2;
    const auto r = pick(rng, 2, 5), k = pick(rng, 2, 5);
    auto x = random_tensor({r, k}, rng);
    const auto len = axis == 0 ? r : k;
    const auto begin = pick(rng, 0, len - 1);
    const auto end = pick(rng, begin + 1, len);
    return grad_check([&](TapeD& t) { return project(t, ad::slice(t, x, axis, begin, end), c); }, {x}, {"x"});
  });
  add_case("gather_rows", [](auto& rng, std::uint64_t c) {
    const auto n = pick(rng, 1, 5), f = pick(rng, 1, 4), e = pick(rng, 1, 8);
    auto x = random_tensor({n, f}, rng);
    std::vector<std::uint32_t> idx(e);
    for (auto& i : idx) i = static_cast<std::uint32_t>(pick(rng, 0, n - 1));
    return grad_check([&](TapeD& t) { return project(t, ad::gather_rows(t, x, idx), c); }, {x}, {"x"});
  });
  add_case("scatter_sum_by_segment", [](auto& rng, std::uint64_t c) {
    const auto e = pick(rng, 1, 8), f = pick(rng, 1, 4), s = pick(rng, 1, 4);
    auto x = random_tensor({e, f}, rng);
    std::vector<std::uint32_t> seg(e);
    for (auto& i : seg) i = static_cast<std::uint32_t>(pick(rng, 0, s - 1));
    return grad_check([&](TapeD& t) { return project(t, ad::scatter_sum_by_segment(t, x, seg, s), c); }, {x},
                      {"x"});
  });
  add_case("scatter_mean_by_segment", [](auto& rng, std::uint64_t c) {
    const auto e = pick(rng, 1, 8), f = pick(rng, 1, 4), s = pick(rng, 1, 4);
    auto x = random_tensor({e, f}, rng);
    std::vector<std::uint32_t> seg(e);
    for (auto& i : seg) i = static_cast<std::uint32_t>(pick(rng, 0, s - 1));
    return grad_check([&](TapeD& t) { return project(t, ad::scatter_mean_by_segment(t, x, seg, s), c); }, {x},
                      {"x"});
  });
  add_case("segment_softmax", [](auto& rng, std::uint64_t c) {
    const auto e = pick(rng, 1, 9), s = pick(rng, 1, 4);
    auto x = random_tensor({e, 1}, rng, -2, 2);
    std::vector<std::uint32_t> seg(e);
    for (auto& i : seg) i = static_cast<std::uint32_t>(pick(rng, 0, s - 1));
    return grad_check([&](TapeD& t) { return project(t, ad::segment_softmax(t, x, seg, s), c); }, {x}, {"x"});
  });
  return cases;
}

// Cross-entropy of the logits plus a random projection of the embedding, so
// both outputs are covered. BN runs in train mode with batch statistics.
inline GradCheckResult cnn_model_check(std::uint64_t c, bool batch_norm, std::size_t max_entries = 6) {
  std::mt19937_64 rng(derive_seed({0xC22, c}));
  CnnConfig cfg;
  cfg.in_channels = 3;
  cfg.compressed_channels = 4;
  cfg.base_features = 4;
  cfg.patch_size = 8;
  cfg.batch_norm = batch_norm;
  cfg.head_dropout = 0.5;
  CnnModel<double> model(cfg, c + 17);
  auto x = random_tensor({4, 3, 8, 8}, rng, 0.0, 1.0);
  std::vector<int> labels;
  for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>((c + i) % 3));
  std::vector<TensorD> inputs{x};
  std::vector<std::string> names{"input"};
  for (const auto& p : model.parameters()) {
    inputs.push_back(p.tensor);
    names.push_back(p.name);
  }
  return grad_check(
      [&](TapeD& t) {
        auto out = model.forward(t, x, true, c);
        return ad::add(t, ad::cross_entropy<double>(t, out.logits, labels), project(t, out.embedding, c));
      },
      inputs, names, 1e-3, max_entries, c);
}

inline GradCheckResult gat_model_check(std::uint64_t c, std::size_t max_entries = 12) {
  std::mt19937_64 rng(derive_seed({0x6A7, c}));
  const std::size_t n = pick(rng, 4, 9), f = pick(rng, 2, 6);
  GatConfig g;
  g.hidden = 4;
  g.heads = 2;
  g.layers = 3;
  GatModel<double> model(g, f, 3, c + 5);
  std::vector<Point2> pts;
  std::normal_distribution<double> nd(0.0, 3.0);
  for (std::size_t i = 0; i < n; ++i) pts.push_back({nd(rng), nd(rng)});
  const auto edges = build_knn_graph(pts, 2);
  auto x = random_tensor({n, f}, rng);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>((i + c) % 3);
  std::vector<TensorD> inputs{x};
  std::vector<std::string> names{"features"};
  // Zero biases put rows whose neighbors are all inactive exactly on the
  // ReLU kink, where the difference quotient is meaningless.
  std::uniform_real_distribution<double> ub(0.05, 0.3);
  for (auto& layer : model.layers())
    for (auto& v : layer.bias.mutable_values()) v = ub(rng);
  for (const auto& p : model.parameters()) {
    inputs.push_back(p.tensor);
    names.push_back(p.name);
  }
  return grad_check(
      [&](TapeD& t) {
        auto y = model.forward(t, x, edges, true, c);
        return ad::cross_entropy<double>(t, y, labels);
      },
      inputs, names, 1e-3, max_entries, c);
}

}  // namespace hsiseg::testing
