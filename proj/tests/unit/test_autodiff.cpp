#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "../support/gradcheck.hpp"
#include "../support/primitive_checks.hpp"
#include "hsiseg/autodiff.hpp"
#include "hsiseg/error.hpp"

using namespace hsiseg;
using hsiseg::testing::TapeD;
using hsiseg::testing::TensorD;

namespace {

// Direct 7-loop convolution, the oracle for the im2col path.
std::vector<double> naive_conv(const TensorD& x, const TensorD& w, const TensorD& b, std::size_t stride,
                               std::size_t pad) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(0), K = w.dim(2);
  const auto Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(B * O * Ho * Wo, 0.0);
  for (std::size_t s = 0; s < B; ++s)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = b.values()[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < K; ++ki)
              for (std::size_t kj = 0; kj < K; ++kj) {
                const long y = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                acc += x.values()[((s * C + c) * H + y) * W + xx] * w.values()[((o * C + c) * K + ki) * K + kj];
              }
          out[((s * O + o) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d output size for kernel 4, stride 2, padding 1") {
  ad::Tape<float> tape;
  auto x = ad::Tensor<float>::zeros({1, 2, 48, 48});
  auto w = ad::Tensor<float>::zeros({3, 2, 4, 4});
  auto y = ad::conv2d(tape, x, w, ad::Tensor<float>(), 2, 1);
  CHECK(y.shape() == ad::Shape{1, 3, 24, 24});
}

TEST_CASE("conv2d matches a naive loop") {
  std::mt19937_64 rng(5);
  for (int c = 0; c < 20; ++c) {
    const std::size_t k = 1 + c % 4, stride = 1 + c % 2, pad = c % 3 == 0 ? 0 : 1;
    auto x = testing::random_tensor({2, 3, 9, 8}, rng);
    auto w = testing::random_tensor({4, 3, k, k}, rng);
    auto b = testing::random_tensor({4}, rng);
    TapeD tape;
    auto y = ad::conv2d(tape, x, w, b, stride, pad);
    const auto ref = naive_conv(x, w, b, stride, pad);
    REQUIRE(ref.size() == y.numel());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.values()[i] - ref[i]) < 1e-5);
  }
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(1);
  ad::Tape<float> tape;
  auto x = ad::Tensor<float>({5, 4}, std::vector<float>(20));
  std::normal_distribution<float> nd(0.0F, 5.0F);
  for (auto& v : x.mutable_values()) v = nd(rng);
  auto s = ad::softmax(tape, x);
  for (std::size_t r = 0; r < 5; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < 4; ++c) acc += s.values()[r * 4 + c];
    CHECK(acc == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("cross entropy limits") {
  TapeD tape;
  std::vector<int> y{1};
  auto uniform = TensorD({1, 3}, {0.0, 0.0, 0.0});
  CHECK(ad::cross_entropy<double>(tape, uniform, y).item() == doctest::Approx(std::log(3.0)));
  double prev = 1e9;
  for (double gap : {1.0, 5.0, 20.0, 60.0}) {
    auto peaked = TensorD({1, 3}, {0.0, gap, 0.0});
    const double l = ad::cross_entropy<double>(tape, peaked, y).item();
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-20);
}

TEST_CASE("cross entropy weight errors") {
  TapeD tape;
  auto x = TensorD({2, 2}, {0.1, 0.2, 0.3, 0.4});
  std::vector<int> y{0, 1};
  std::vector<double> zero{0.0, 0.0};
  std::vector<double> neg{1.0, -1.0};
  CHECK_THROWS_AS(ad::cross_entropy<double>(tape, x, y, zero), DomainError);
  CHECK_THROWS_AS(ad::cross_entropy<double>(tape, x, y, neg), DomainError);
  std::vector<int> bad{0, 2};
  CHECK_THROWS_AS(ad::cross_entropy<double>(tape, x, bad), ShapeError);
}

TEST_CASE("gradient of sum(W x) with fixed x is x broadcast over rows") {
  TapeD tape;
  auto w = TensorD({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  auto x = TensorD({2, 1}, {0.25, -2.0});
  auto l = ad::sum(tape, ad::matmul(tape, w, x));
  tape.backward(l);
  const std::vector<double> want{0.25, -2.0, 0.25, -2.0, 0.25, -2.0};
  CHECK(std::vector<double>(w.grad().begin(), w.grad().end()) == want);
}

TEST_CASE("backward errors") {
  TapeD tape;
  auto w = TensorD({2}, {1.0, 2.0}, true);
  auto y = ad::scale(tape, w, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
  auto l = ad::sum(tape, y);
  tape.backward(l);
  CHECK_THROWS_AS(tape.backward(l), Error);

  TapeD retained;
  auto l2 = ad::sum(retained, ad::mul(retained, w, w));
  w.zero_grad();
  retained.backward(l2, true);
  const double first = w.grad()[1];
  retained.backward(l2);
  CHECK(w.grad()[1] == doctest::Approx(2 * first));
}

TEST_CASE("shape errors name the primitive and both shapes") {
  TapeD tape;
  auto a = TensorD::zeros({2, 3});
  auto b = TensorD::zeros({4, 5});
  try {
    ad::matmul(tape, a, b);
    FAIL("no throw");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 5]") != std::string::npos);
  }
  CHECK_THROWS_AS(ad::add(tape, a, b), ShapeError);
}

TEST_CASE("detach") {
  TapeD tape;
  auto x = TensorD({3}, {0.5, -1.0, 2.0}, true);
  auto fx = ad::mul(tape, x, x);
  auto d = ad::detach(fx);
  CHECK(std::equal(d.values().begin(), d.values().end(), fx.values().begin()));
  CHECK_FALSE(d.requires_grad());
  // a loss that only reaches x through the detached branch cannot run backward
  auto w = TensorD({3}, {1.0, 1.0, 1.0}, true);
  auto l = ad::sum(tape, ad::mul(tape, d, w));
  tape.backward(l);
  CHECK_FALSE(x.has_grad());
  CHECK(w.has_grad());
}

TEST_CASE("batch norm statistics") {
  std::mt19937_64 rng(3);
  auto x = testing::random_tensor({8, 3, 4, 4}, rng, -3, 7, false);
  auto g = TensorD::full({3}, 1.0);
  auto b = TensorD::zeros({3});
  ad::BatchNormState<double> st(3);
  TapeD tape;
  auto y = ad::batch_norm(tape, x, g, b, st, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t s = 0; s < 8; ++s)
      for (std::size_t i = 0; i < 16; ++i) m += y.values()[(s * 3 + c) * 16 + i];
    m /= 128;
    for (std::size_t s = 0; s < 8; ++s)
      for (std::size_t i = 0; i < 16; ++i) v += std::pow(y.values()[(s * 3 + c) * 16 + i] - m, 2);
    v /= 128;
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }
  // running statistics moved away from (0, 1) and eval mode uses them
  CHECK(st.running_mean[0] != 0.0);
  auto e1 = ad::batch_norm(tape, x, g, b, st, false);
  ad::BatchNormState<double> fresh(3);
  auto e2 = ad::batch_norm(tape, x, g, b, fresh, false);
  CHECK(e1.values()[0] != e2.values()[0]);
  CHECK(e2.values()[0] == doctest::Approx(x.values()[0] / std::sqrt(1.0 + 1e-5)));
}

TEST_CASE("dropout identities and scaling") {
  std::mt19937_64 rng(4);
  auto x = testing::random_tensor({50, 40}, rng, 0.5, 1.5, false);
  TapeD tape;
  auto p0 = ad::dropout(tape, x, 0.0, true, 9);
  auto ev = ad::dropout(tape, x, 0.5, false, 9);
  CHECK(std::equal(p0.values().begin(), p0.values().end(), x.values().begin()));
  CHECK(std::equal(ev.values().begin(), ev.values().end(), x.values().begin()));
  auto d = ad::dropout(tape, x, 0.4, true, 9);
  auto d2 = ad::dropout(tape, x, 0.4, true, 9);
  CHECK(std::equal(d.values().begin(), d.values().end(), d2.values().begin()));
  double sx = 0, sd = 0;
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    sx += x.values()[i];
    sd += d.values()[i];
    if (d.values()[i] == 0.0) ++zeros;
    else CHECK(d.values()[i] == doctest::Approx(x.values()[i] / 0.6));
  }
  CHECK(sd / sx == doctest::Approx(1.0).epsilon(0.05));
  CHECK(static_cast<double>(zeros) / x.numel() == doctest::Approx(0.4).epsilon(0.1));
}

TEST_CASE("segment ops") {
  TapeD tape;
  auto x = TensorD({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  std::vector<std::uint32_t> seg{0, 2, 0, 2};
  auto s = ad::scatter_sum_by_segment(tape, x, seg, 3);
  CHECK(std::vector<double>(s.values().begin(), s.values().end()) == std::vector<double>{6, 8, 0, 0, 10, 12});
  auto m = ad::scatter_mean_by_segment(tape, x, seg, 3);
  CHECK(std::vector<double>(m.values().begin(), m.values().end()) == std::vector<double>{3, 4, 0, 0, 5, 6});
  auto sc = TensorD({4}, {0.0, 1.0, std::log(3.0), 1.0});
  auto sm = ad::segment_softmax(tape, sc, seg, 3);
  CHECK(sm.values()[0] == doctest::Approx(0.25));
  CHECK(sm.values()[2] == doctest::Approx(0.75));
  CHECK(sm.values()[1] == doctest::Approx(0.5));
}

TEST_CASE("finite differences agree for every primitive over 30 random cases") {
  for (const auto& pc : testing::primitive_cases()) {
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    for (std::uint64_t c = 0; c < 30; ++c) {
      const auto r = pc.run(c);
      worst = std::max(worst, r.max_rel_error);
      checked += r.checked;
      skipped += r.skipped;
    }
    INFO(pc.name << " worst relative error " << worst << ", skipped " << skipped << " of " << checked + skipped);
    CHECK(worst < 1e-3);
    CHECK(skipped * 20 <= checked);
  }
}

TEST_CASE("gradients are deterministic") {
  auto run = [] {
    std::mt19937_64 rng(77);
    auto x = testing::random_tensor({2, 2, 6, 6}, rng);
    auto w = testing::random_tensor({3, 2, 3, 3}, rng);
    TapeD tape;
    auto l = testing::project(tape, ad::conv2d(tape, x, w, TensorD(), 1, 1), 3);
    tape.backward(l);
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  CHECK(run() == run());
}
