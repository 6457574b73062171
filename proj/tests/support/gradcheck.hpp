#pragma once

// Central finite-difference checks for the autodiff engine, shared by the
// unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hsiseg/autodiff.hpp"

namespace hsiseg::testing {

using TensorD = ad::Tensor<double>;
using TapeD = ad::Tape<double>;

inline TensorD random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = u(rng);
  return TensorD(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, for inputs that meet a kink at 0.
inline TensorD random_tensor_off_zero(ad::Shape shape, std::mt19937_64& rng, double min_abs = 0.05) {
  std::uniform_real_distribution<double> u(min_abs, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return TensorD(std::move(shape), std::move(v), true);
}

struct GradCheckResult {
  double max_rel_error = 0.0;  // over all checked tensors
  std::string worst;
  std::size_t checked = 0;     // number of entries compared
  std::size_t skipped = 0;     // entries whose stencil straddles a kink
};

// ||analytic - numeric|| / max(||analytic||, ||numeric||, floor), per tensor.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n, double floor = 1e-6) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

// `loss` must rebuild the graph from the current values of `inputs` on the
// given tape and return a scalar. At most `max_entries` entries per input
// are perturbed (all when 0), chosen by `seed`.
//
// ReLU-style kinks make the central difference meaningless when one falls
// inside [x - step, x + step]. Each entry is also differenced at step / 8;
// on a smooth stretch the two agree to O(step^2), so a disagreement marks
// a kink. A kink right at x fools that test, so the second differences
// are compared too: they scale with the step on a smooth stretch and stay
// at the slope jump otherwise. Kink entries are dropped and counted in
// `skipped`. Detection never
// looks at the analytic gradient. Kept entries are compared against the
// Richardson combination of the two quotients.
inline GradCheckResult grad_check(const std::function<TensorD(TapeD&)>& loss, std::vector<TensorD> inputs,
                                  std::vector<std::string> names, double step = 1e-3,
                                  std::size_t max_entries = 0, std::uint64_t seed = 1) {
  for (auto& t : inputs) t.zero_grad();
  {
    TapeD tape;
    auto l = loss(tape);
    tape.backward(l);
  }
  double base;
  {
    TapeD tape;
    base = loss(tape).item();
  }
  // Central quotient and (f(x+h) + f(x-h) - 2 f(x)) / h.
  auto eval = [&](std::span<double> v, std::size_t i, double orig, double h) {
    v[i] = orig + h;
    double up, down;
    {
      TapeD tape;
      up = loss(tape).item();
    }
    v[i] = orig - h;
    {
      TapeD tape;
      down = loss(tape).item();
    }
    v[i] = orig;
    return std::pair{(up - down) / (2 * h), (up + down - 2 * base) / h};
  };
  GradCheckResult res;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    const auto n = t.numel();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const std::size_t want = max_entries && n > max_entries ? max_entries : n;
    if (want < n) std::shuffle(idx.begin(), idx.end(), rng);

    std::vector<double> analytic, numeric, fine, curve, curve_fine;
    std::size_t next = 0;
    for (; next < n && numeric.size() < want; ++next) {
      const auto i = idx[next];
      auto v = t.mutable_values();
      const double orig = v[i];
      analytic.push_back(t.has_grad() ? t.grad()[i] : 0.0);
      const auto [c0, s0] = eval(v, i, orig, step);
      const auto [c1, s1] = eval(v, i, orig, step / 8);
      numeric.push_back(c0);
      fine.push_back(c1);
      curve.push_back(s0);
      curve_fine.push_back(s1);
    }
    double scale = 0.0;
    for (double x : numeric) scale += x * x;
    scale = std::max(std::sqrt(scale), 1e-6);
    std::vector<double> a_ok, n_ok;
    for (std::size_t j = 0; j < numeric.size(); ++j) {
      const bool far_kink = std::abs(numeric[j] - fine[j]) > 1e-4 * scale;
      // h f'' shrinks with h; a slope jump at the point does not
      const bool near_kink = std::abs(curve_fine[j] - curve[j] / 8) > 1e-4 * scale;
      if (far_kink || near_kink) {
        ++res.skipped;
        continue;
      }
      a_ok.push_back(analytic[j]);
      // Richardson: cancels the O(step^2) truncation term of both stencils.
      n_ok.push_back((64.0 * fine[j] - numeric[j]) / 63.0);
    }
    const double e = relative_error(a_ok, n_ok);
    res.checked += a_ok.size();
    if (e > res.max_rel_error || res.worst.empty()) {
      res.max_rel_error = std::max(res.max_rel_error, e);
      if (e >= res.max_rel_error) res.worst = k < names.size() ? names[k] : "input" + std::to_string(k);
    }
  }
  return res;
}

// Scalar probe of an arbitrary-shaped output: sum(out * R) for a fixed
// random R, so every output entry influences the loss differently.
inline TensorD project(TapeD& tape, const TensorD& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto r = random_tensor(out.shape(), rng, -1.0, 1.0, false);
  return ad::sum(tape, ad::mul(tape, out, r));
}

}  // namespace hsiseg::testing
