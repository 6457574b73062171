#include "hsiseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Core>

#ifdef HSISEG_HAVE_OPENMP
#include <omp.h>
#endif

#include "hsiseg/error.hpp"

namespace hsiseg::ad {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMatrix = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapMatrix = Eigen::Map<const RowMatrix<T>>;

int g_threads = 1;

template <typename T>
bool needs_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

template <typename T, typename... Ts>
Tensor<T> make_output(Shape shape, const Ts&... inputs) {
  const bool rg = (needs_grad(inputs) || ...);
  return Tensor<T>(shape, std::vector<T>(numel(shape), T(0)), rg);
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const std::string& want) {
  throw ShapeError(op + ": got shape " + shape_str(a) + ", expected " + want);
}

void require_rank(const std::string& op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) shape_fail(op, s, "rank " + std::to_string(rank));
}

// Patch matrix [C*K*K, Ho*Wo] of one sample; out-of-range taps read 0.
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            row[oy * wo + ox] =
                (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                    ? T(0)
                    : x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* dx) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            dx[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void set_num_threads(int threads) {
  g_threads = std::max(1, threads);
#ifdef HSISEG_HAVE_OPENMP
  omp_set_num_threads(g_threads);
#endif
}

int num_threads() { return g_threads; }

// ---------------------------------------------------------------- Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : s_(std::make_shared<Storage<T>>()) {
  if (ad::numel(shape) != values.size()) {
    throw ShapeError("Tensor: shape " + shape_str(shape) + " needs " +
                     std::to_string(ad::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  s_->shape = std::move(shape);
  s_->value = std::move(values);
  s_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = ad::numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
  return s_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(s_->shape, s_->value, s_->requires_grad);
}

// ---------------------------------------------------------------- Tape

template <typename T>
void Tape<T>::record(std::string_view op, const Tensor<T>& output, BackwardFn fn) {
  consumed_ = false;
  records_.push_back({std::string(op), output.storage(), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss, bool retain) {
  if (consumed_) {
    throw Error("backward: tape was already consumed; pass retain=true to the first backward");
  }
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw Error("backward: loss does not depend on any parameter");
  }
  for (auto& r : records_) r.output->grad.clear();
  loss.storage()->grad_buffer()[0] += T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->fn();
  }
  if (!retain) {
    records_.clear();
    consumed_ = true;
  }
}

template <typename T>
std::vector<std::string> Tape<T>::op_names() const {
  std::vector<std::string> names;
  for (const auto& r : records_) names.push_back(r.op);
  return names;
}

template <typename T>
void Tape<T>::clear() {
  records_.clear();
  consumed_ = false;
}

// ---------------------------------------------------------------- ops

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  const bool row_bcast = !same && a.rank() >= 1 && b.numel() == a.shape().back() &&
                         (b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1));
  if (!same && !row_bcast) shape_fail("add", a.shape(), b.shape());
  auto out = make_output<T>(a.shape(), a, b);
  const auto av = a.values();
  const auto bv = b.values();
  auto ov = out.mutable_values();
  const std::size_t cols = b.numel();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[same ? i : i % cols];
  if (out.requires_grad()) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape.record("add", out, [as, bs, os, same, cols] {
      const auto& g = os->grad;
      if (as->requires_grad) {
        auto ga = as->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bs->requires_grad) {
        auto gb = bs->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[same ? i : i % cols] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  const bool row_scale = !same && a.rank() == 2 && b.rank() == 2 && b.dim(0) == a.dim(0) &&
                         b.dim(1) == 1;
  if (!same && !row_scale) shape_fail("mul", a.shape(), b.shape());
  auto out = make_output<T>(a.shape(), a, b);
  const auto av = a.values();
  const auto bv = b.values();
  auto ov = out.mutable_values();
  const std::size_t cols = same ? 1 : a.dim(1);
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[same ? i : i / cols];
  if (out.requires_grad()) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape.record("mul", out, [as, bs, os, same, cols] {
      const auto& g = os->grad;
      if (as->requires_grad) {
        auto ga = as->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs->value[same ? i : i / cols];
      }
      if (bs->requires_grad) {
        auto gb = bs->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[same ? i : i / cols] += g[i] * as->value[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  auto out = make_output<T>(a.shape(), a);
  auto ov = out.mutable_values();
  const auto av = a.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * factor;
  if (out.requires_grad()) {
    auto as = a.storage(), os = out.storage();
    tape.record("scale", out, [as, os, factor] {
      auto ga = as->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += os->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  auto out = make_output<T>({1}, a);
  double acc = 0.0;
  for (T v : a.values()) acc += static_cast<double>(v);
  out.mutable_values()[0] = static_cast<T>(acc);
  if (out.requires_grad()) {
    auto as = a.storage(), os = out.storage();
    tape.record("sum", out, [as, os] {
      auto ga = as->grad_buffer();
      const T g = os->grad[0];
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  return scale(tape, sum(tape, a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_fail("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_output<T>({m, n}, a, b);
  MapMatrix<T>(out.mutable_values().data(), m, n).noalias() =
      ConstMapMatrix<T>(a.values().data(), m, k) * ConstMapMatrix<T>(b.values().data(), k, n);
  if (out.requires_grad()) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape.record("matmul", out, [as, bs, os, m, k, n] {
      ConstMapMatrix<T> g(os->grad.data(), m, n);
      if (as->requires_grad) {
        MapMatrix<T>(as->grad_buffer().data(), m, k).noalias() +=
            g * ConstMapMatrix<T>(bs->value.data(), k, n).transpose();
      }
      if (bs->requires_grad) {
        MapMatrix<T>(bs->grad_buffer().data(), k, n).noalias() +=
            ConstMapMatrix<T>(as->value.data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    shape_fail("linear", x.shape(), weight.shape());
  }
  const std::size_t n = x.dim(0), in = x.dim(1), o = weight.dim(0);
  if (bias.defined() && bias.numel() != o) shape_fail("linear", bias.shape(), "[" + std::to_string(o) + "]");
  auto out = bias.defined() ? make_output<T>({n, o}, x, weight, bias) : make_output<T>({n, o}, x, weight);
  MapMatrix<T> y(out.mutable_values().data(), n, o);
  y.noalias() = ConstMapMatrix<T>(x.values().data(), n, in) *
                ConstMapMatrix<T>(weight.values().data(), o, in).transpose();
  if (bias.defined()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < o; ++j) y(i, j) += bias.values()[j];
  }
  if (out.requires_grad()) {
    auto xs = x.storage(), ws = weight.storage(), os = out.storage();
    auto bs = bias.defined() ? bias.storage() : nullptr;
    tape.record("linear", out, [xs, ws, bs, os, n, in, o] {
      ConstMapMatrix<T> g(os->grad.data(), n, o);
      if (xs->requires_grad) {
        MapMatrix<T>(xs->grad_buffer().data(), n, in).noalias() +=
            g * ConstMapMatrix<T>(ws->value.data(), o, in);
      }
      if (ws->requires_grad) {
        MapMatrix<T>(ws->grad_buffer().data(), o, in).noalias() +=
            g.transpose() * ConstMapMatrix<T>(xs->value.data(), n, in);
      }
      if (bs && bs->requires_grad) {
        auto gb = bs->grad_buffer();
        for (std::size_t j = 0; j < o; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < n; ++i) acc += g(i, j);
          gb[j] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1) ||
      weight.dim(2) != weight.dim(3)) {
    shape_fail("conv2d", x.shape(), weight.shape());
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(0), k = weight.dim(2);
  if (h + 2 * padding < k || w + 2 * padding < k) {
    shape_fail("conv2d", x.shape(), "spatial size >= kernel " + std::to_string(k));
  }
  if (bias.defined() && bias.numel() != o) shape_fail("conv2d", bias.shape(), "[" + std::to_string(o) + "]");
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t ckk = c * k * k, hw = ho * wo;
  auto out = bias.defined() ? make_output<T>({b, o, ho, wo}, x, weight, bias)
                            : make_output<T>({b, o, ho, wo}, x, weight);
  const T* xv = x.values().data();
  const T* wv = weight.values().data();
  T* ov = out.mutable_values().data();
  const T* bv = bias.defined() ? bias.values().data() : nullptr;

#ifdef HSISEG_HAVE_OPENMP
#pragma omp parallel for schedule(static) if (g_threads > 1 && b > 1)
#endif
  for (long sl = 0; sl < static_cast<long>(b); ++sl) {
    const auto s = static_cast<std::size_t>(sl);
    std::vector<T> cols(ckk * hw);
    im2col(xv + s * c * h * w, c, h, w, k, stride, padding, ho, wo, cols.data());
    MapMatrix<T> y(ov + s * o * hw, o, hw);
    y.noalias() = ConstMapMatrix<T>(wv, o, ckk) * ConstMapMatrix<T>(cols.data(), ckk, hw);
    if (bv) {
      for (std::size_t oc = 0; oc < o; ++oc) y.row(oc).array() += bv[oc];
    }
  }

  if (out.requires_grad()) {
    auto xs = x.storage(), ws = weight.storage(), os = out.storage();
    auto bs = bias.defined() ? bias.storage() : nullptr;
    tape.record("conv2d", out, [=] {
      const T* g = os->grad.data();
      const bool want_w = ws->requires_grad;
      const bool want_x = xs->requires_grad;
      // Per-sample weight gradients are summed in sample order so the
      // result does not depend on the thread count.
      std::vector<T> dw_parts(want_w ? b * o * ckk : 0);
      T* dx = want_x ? xs->grad_buffer().data() : nullptr;
#ifdef HSISEG_HAVE_OPENMP
#pragma omp parallel for schedule(static) if (g_threads > 1 && b > 1)
#endif
      for (long sl = 0; sl < static_cast<long>(b); ++sl) {
        const auto s = static_cast<std::size_t>(sl);
        ConstMapMatrix<T> gs(g + s * o * hw, o, hw);
        std::vector<T> cols(ckk * hw);
        if (want_w) {
          im2col(xs->value.data() + s * c * h * w, c, h, w, k, stride, padding, ho, wo, cols.data());
          MapMatrix<T>(dw_parts.data() + s * o * ckk, o, ckk).noalias() =
              gs * ConstMapMatrix<T>(cols.data(), ckk, hw).transpose();
        }
        if (want_x) {
          MapMatrix<T>(cols.data(), ckk, hw).noalias() =
              ConstMapMatrix<T>(ws->value.data(), o, ckk).transpose() * gs;
          col2im(cols.data(), c, h, w, k, stride, padding, ho, wo, dx + s * c * h * w);
        }
      }
      if (want_w) {
        auto gw = ws->grad_buffer();
        for (std::size_t s = 0; s < b; ++s) {
          const T* part = dw_parts.data() + s * o * ckk;
          for (std::size_t i = 0; i < o * ckk; ++i) gw[i] += part[i];
        }
      }
      if (bs && bs->requires_grad) {
        auto gb = bs->grad_buffer();
        for (std::size_t oc = 0; oc < o; ++oc) {
          double acc = 0.0;
          for (std::size_t s = 0; s < b; ++s) {
            const T* row = g + (s * o + oc) * hw;
            for (std::size_t i = 0; i < hw; ++i) acc += row[i];
          }
          gb[oc] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& x, T slope) {
  auto out = make_output<T>(x.shape(), x);
  const auto xv = x.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : slope * xv[i];
  if (out.requires_grad()) {
    auto xs = x.storage(), os = out.storage();
    tape.record("leaky_relu", out, [xs, os, slope] {
      auto gx = xs->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += xs->value[i] > T(0) ? os->grad[i] : slope * os->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  auto out = make_output<T>(x.shape(), x);
  const auto xv = x.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (out.requires_grad()) {
    auto xs = x.storage(), os = out.storage();
    tape.record("relu", out, [xs, os] {
      auto gx = xs->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (xs->value[i] > T(0)) gx[i] += os->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormState<T>& state, bool train,
                     T momentum, T epsilon) {
  if (x.rank() != 2 && x.rank() != 4) shape_fail("batch_norm", x.shape(), "rank 2 or 4");
  const std::size_t b = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.size() != c) {
    shape_fail("batch_norm", gamma.shape(), "[" + std::to_string(c) + "]");
  }
  const std::size_t count = b * inner;
  if (train && count < 2) throw ShapeError("batch_norm: train mode needs more than one value per channel");
  auto out = make_output<T>(x.shape(), x, gamma, beta);
  const auto xv = x.values();
  auto ov = out.mutable_values();

  std::vector<T> mu(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (train) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const T* p = xv.data() + (n * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      for (std::size_t n = 0; n < b; ++n) {
        const T* p = xv.data() + (n * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) s2 += (p[i] - m) * (p[i] - m);
      }
      const double var = s2 / static_cast<double>(count);
      mu[ch] = static_cast<T>(m);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(epsilon)));
      const double unbiased = s2 / static_cast<double>(count - 1);
      state.running_mean[ch] = (T(1) - momentum) * state.running_mean[ch] + momentum * static_cast<T>(m);
      state.running_var[ch] = (T(1) - momentum) * state.running_var[ch] + momentum * static_cast<T>(unbiased);
    } else {
      mu[ch] = state.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(state.running_var[ch] + epsilon);
    }
  }
  std::vector<T> xhat(xv.size());
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (n * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        xhat[base + i] = (xv[base + i] - mu[ch]) * inv_std[ch];
        ov[base + i] = gamma.values()[ch] * xhat[base + i] + beta.values()[ch];
      }
    }
  }
  if (out.requires_grad()) {
    auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage();
    tape.record("batch_norm", out, [=, xhat = std::move(xhat)] {
      const auto& g = os->grad;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sg = 0.0, sgx = 0.0;
        for (std::size_t n = 0; n < b; ++n) {
          const std::size_t base = (n * c + ch) * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            sg += g[base + i];
            sgx += static_cast<double>(g[base + i]) * xhat[base + i];
          }
        }
        if (gs->requires_grad) gs->grad_buffer()[ch] += static_cast<T>(sgx);
        if (bs->requires_grad) bs->grad_buffer()[ch] += static_cast<T>(sg);
        if (!xs->requires_grad) continue;
        auto gx = xs->grad_buffer();
        const T scale_c = gs->value[ch] * inv_std[ch];
        if (train) {
          const double m = static_cast<double>(count);
          for (std::size_t n = 0; n < b; ++n) {
            const std::size_t base = (n * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              gx[base + i] += static_cast<T>(static_cast<double>(scale_c) / m *
                                             (m * g[base + i] - sg - xhat[base + i] * sgx));
            }
          }
        } else {
          for (std::size_t n = 0; n < b; ++n) {
            const std::size_t base = (n * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) gx[base + i] += scale_c * g[base + i];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, T p, bool train, std::uint64_t seed) {
  if (p < T(0) || p >= T(1)) throw ConfigError("dropout: p must lie in [0, 1)");
  if (!train || p == T(0)) return x;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const T factor = T(1) / (T(1) - p);
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? factor : T(0);
  auto out = make_output<T>(x.shape(), x);
  auto ov = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * mask[i];
  if (out.requires_grad()) {
    auto xs = x.storage(), os = out.storage();
    tape.record("dropout", out, [xs, os, mask = std::move(mask)] {
      auto gx = xs->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += os->grad[i] * mask[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool_full(Tape<T>& tape, const Tensor<T>& x) {
  require_rank("avg_pool_full", x.shape(), 4);
  const std::size_t b = x.dim(0), c = x.dim(1), inner = x.dim(2) * x.dim(3);
  auto out = make_output<T>({b, c}, x);
  auto ov = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t i = 0; i < b * c; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < inner; ++j) acc += xv[i * inner + j];
    ov[i] = static_cast<T>(acc / static_cast<double>(inner));
  }
  if (out.requires_grad()) {
    auto xs = x.storage(), os = out.storage();
    tape.record("avg_pool_full", out, [xs, os, b, c, inner] {
      auto gx = xs->grad_buffer();
      for (std::size_t i = 0; i < b * c; ++i) {
        const T g = os->grad[i] / static_cast<T>(inner);
        for (std::size_t j = 0; j < inner; ++j) gx[i * inner + j] += g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
  require_rank("softmax", x.shape(), 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  auto out = make_output<T>(x.shape(), x);
  auto ov = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) {
      ov[i * c + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
    }
  }
  if (out.requires_grad()) {
    auto xs = x.storage(), os = out.storage();
    tape.record("softmax", out, [xs, os, n, c] {
      auto gx = xs->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += os->grad[i * c + j] * os->value[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          gx[i * c + j] += os->value[i * c + j] * (os->grad[i * c + j] - static_cast<T>(dot));
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax(Tape<T>& tape, const Tensor<T>& x) {
  require_rank("log_softmax", x.shape(), 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  auto out = make_output<T>(x.shape(), x);
  auto ov = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(z);
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = static_cast<T>(row[j] - lse);
  }
  if (out.requires_grad()) {
    auto xs = x.storage(), os = out.storage();
    tape.record("log_softmax", out, [xs, os, n, c] {
      auto gx = xs->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < c; ++j) gs += os->grad[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          gx[i * c + j] += os->grad[i * c + j] -
                           static_cast<T>(std::exp(static_cast<double>(os->value[i * c + j])) * gs);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels,
                        std::span<const T> weights) {
  require_rank("cross_entropy", logits.shape(), 2);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    shape_fail("cross_entropy", logits.shape(), std::to_string(labels.size()) + " rows (labels)");
  }
  if (!weights.empty() && weights.size() != n) {
    shape_fail("cross_entropy", logits.shape(), std::to_string(weights.size()) + " rows (weights)");
  }
  std::vector<T> w(n, T(1));
  if (!weights.empty()) std::copy(weights.begin(), weights.end(), w.begin());
  double wsum = 0.0;
  for (T v : w) {
    if (v < T(0) || !std::isfinite(static_cast<double>(v))) {
      throw DomainError("cross_entropy: weights must be finite and non-negative");
    }
    wsum += v;
  }
  if (wsum <= 0.0) throw DomainError("cross_entropy: all sample weights are zero");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range for " +
                       std::to_string(c) + " classes");
    }
  }
  const auto xv = logits.values();
  std::vector<T> prob(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      prob[i * c + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
    }
    total += static_cast<double>(w[i]) * (lse - static_cast<double>(row[labels[i]]));
  }
  auto out = make_output<T>({1}, logits);
  out.mutable_values()[0] = static_cast<T>(total / wsum);
  if (out.requires_grad()) {
    auto ls = logits.storage(), os = out.storage();
    std::vector<int> lab(labels.begin(), labels.end());
    tape.record("cross_entropy", out,
                [ls, os, n, c, wsum, w = std::move(w), prob = std::move(prob), lab = std::move(lab)] {
                  auto gx = ls->grad_buffer();
                  const T g = os->grad[0];
                  for (std::size_t i = 0; i < n; ++i) {
                    const T coef = static_cast<T>(static_cast<double>(w[i]) / wsum) * g;
                    for (std::size_t j = 0; j < c; ++j) {
                      const T target = static_cast<int>(j) == lab[i] ? T(1) : T(0);
                      gx[i * c + j] += coef * (prob[i * c + j] - target);
                    }
                  }
                });
  }
  return out;
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) require_rank("concat", p.shape(), 2);
  const std::size_t fixed = parts[0].dim(1 - axis);
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.dim(1 - axis) != fixed) shape_fail("concat", parts[0].shape(), p.shape());
    total += p.dim(axis);
    rg = rg || p.requires_grad();
  }
  const Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  Tensor<T> out(shape, std::vector<T>(numel(shape)), rg);
  auto ov = out.mutable_values();
  const std::size_t cols = shape[1];
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto pv = p.values();
    for (std::size_t r = 0; r < p.dim(0); ++r) {
      for (std::size_t k = 0; k < p.dim(1); ++k) {
        const std::size_t dst = axis == 0 ? (offset + r) * cols + k : r * cols + offset + k;
        ov[dst] = pv[r * p.dim(1) + k];
      }
    }
    offset += p.dim(axis);
  }
  if (rg) {
    std::vector<std::shared_ptr<Storage<T>>> ins;
    for (const auto& p : parts) ins.push_back(p.storage());
    auto os = out.storage();
    tape.record("concat", out, [ins, os, axis, cols] {
      std::size_t off = 0;
      for (const auto& in : ins) {
        const std::size_t rows = in->shape[0], pc = in->shape[1];
        if (in->requires_grad) {
          auto gi = in->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < pc; ++k) {
              const std::size_t src = axis == 0 ? (off + r) * cols + k : r * cols + off + k;
              gi[r * pc + k] += os->grad[src];
            }
          }
        }
        off += axis == 0 ? rows : pc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t begin,
                std::size_t end) {
  require_rank("slice", x.shape(), 2);
  if (axis > 1 || begin >= end || end > x.dim(axis)) {
    shape_fail("slice", x.shape(), "range [" + std::to_string(begin) + ", " +
                                       std::to_string(end) + ") on axis " + std::to_string(axis));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const Shape shape = axis == 0 ? Shape{end - begin, cols} : Shape{rows, end - begin};
  auto out = make_output<T>(shape, x);
  auto ov = out.mutable_values();
  const auto xv = x.values();
  const std::size_t oc = shape[1];
  for (std::size_t r = 0; r < shape[0]; ++r) {
    for (std::size_t k = 0; k < oc; ++k) {
      ov[r * oc + k] = axis == 0 ? xv[(begin + r) * cols + k] : xv[r * cols + begin + k];
    }
  }
  if (out.requires_grad()) {
    auto xs = x.storage(), os = out.storage();
    const std::size_t orow = shape[0];
    tape.record("slice", out, [xs, os, axis, begin, cols, orow, oc] {
      auto gx = xs->grad_buffer();
      for (std::size_t r = 0; r < orow; ++r) {
        for (std::size_t k = 0; k < oc; ++k) {
          const std::size_t src = axis == 0 ? (begin + r) * cols + k : r * cols + begin + k;
          gx[src] += os->grad[r * oc + k];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& x, std::span<const std::uint32_t> index) {
  require_rank("gather_rows", x.shape(), 2);
  const std::size_t n = x.dim(0), f = x.dim(1), e = index.size();
  for (auto i : index) {
    if (i >= n) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
  }
  auto out = make_output<T>({e, f}, x);
  auto ov = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t r = 0; r < e; ++r) {
    std::copy_n(xv.data() + index[r] * f, f, ov.data() + r * f);
  }
  if (out.requires_grad()) {
    auto xs = x.storage(), os = out.storage();
    std::vector<std::uint32_t> idx(index.begin(), index.end());
    tape.record("gather_rows", out, [xs, os, f, idx = std::move(idx)] {
      auto gx = xs->grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t k = 0; k < f; ++k) gx[idx[r] * f + k] += os->grad[r * f + k];
      }
    });
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> scatter_scaled(Tape<T>& tape, const char* op, const Tensor<T>& x,
                         std::span<const std::uint32_t> segment, std::size_t num_segments,
                         bool average) {
  require_rank(op, x.shape(), 2);
  const std::size_t e = x.dim(0), f = x.dim(1);
  if (segment.size() != e) shape_fail(op, x.shape(), std::to_string(segment.size()) + " rows");
  std::vector<T> factor(num_segments, T(1));
  if (average) {
    std::vector<std::size_t> count(num_segments, 0);
    for (auto s : segment) {
      if (s >= num_segments) throw ShapeError(std::string(op) + ": segment id out of range");
      ++count[s];
    }
    for (std::size_t s = 0; s < num_segments; ++s) {
      factor[s] = count[s] ? T(1) / static_cast<T>(count[s]) : T(0);
    }
  }
  auto out = make_output<T>({num_segments, f}, x);
  auto ov = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t r = 0; r < e; ++r) {
    const auto s = segment[r];
    if (s >= num_segments) throw ShapeError(std::string(op) + ": segment id out of range");
    for (std::size_t k = 0; k < f; ++k) ov[s * f + k] += xv[r * f + k] * factor[s];
  }
  if (out.requires_grad()) {
    auto xs = x.storage(), os = out.storage();
    std::vector<std::uint32_t> seg(segment.begin(), segment.end());
    tape.record(op, out, [xs, os, f, seg = std::move(seg), factor = std::move(factor)] {
      auto gx = xs->grad_buffer();
      for (std::size_t r = 0; r < seg.size(); ++r) {
        for (std::size_t k = 0; k < f; ++k) gx[r * f + k] += os->grad[seg[r] * f + k] * factor[seg[r]];
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> scatter_sum_by_segment(Tape<T>& tape, const Tensor<T>& x,
                                 std::span<const std::uint32_t> segment,
                                 std::size_t num_segments) {
  return scatter_scaled(tape, "scatter_sum_by_segment", x, segment, num_segments, false);
}

template <typename T>
Tensor<T> scatter_mean_by_segment(Tape<T>& tape, const Tensor<T>& x,
                                  std::span<const std::uint32_t> segment,
                                  std::size_t num_segments) {
  return scatter_scaled(tape, "scatter_mean_by_segment", x, segment, num_segments, true);
}

template <typename T>
Tensor<T> segment_softmax(Tape<T>& tape, const Tensor<T>& scores,
                          std::span<const std::uint32_t> segment, std::size_t num_segments) {
  const bool ok = scores.rank() == 1 || (scores.rank() == 2 && scores.dim(1) == 1);
  if (!ok || segment.size() != scores.numel()) {
    shape_fail("segment_softmax", scores.shape(), "[" + std::to_string(segment.size()) + "] or [E, 1]");
  }
  const std::size_t e = scores.numel();
  const auto sv = scores.values();
  std::vector<T> mx(num_segments, -std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < e; ++i) {
    if (segment[i] >= num_segments) throw ShapeError("segment_softmax: segment id out of range");
    mx[segment[i]] = std::max(mx[segment[i]], sv[i]);
  }
  std::vector<double> z(num_segments, 0.0);
  std::vector<double> ex(e);
  for (std::size_t i = 0; i < e; ++i) {
    ex[i] = std::exp(static_cast<double>(sv[i] - mx[segment[i]]));
    z[segment[i]] += ex[i];
  }
  auto out = make_output<T>(scores.shape(), scores);
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < e; ++i) ov[i] = static_cast<T>(ex[i] / z[segment[i]]);
  if (out.requires_grad()) {
    auto ss = scores.storage(), os = out.storage();
    std::vector<std::uint32_t> seg(segment.begin(), segment.end());
    tape.record("segment_softmax", out, [ss, os, num_segments, seg = std::move(seg)] {
      std::vector<double> dot(num_segments, 0.0);
      for (std::size_t i = 0; i < seg.size(); ++i) {
        dot[seg[i]] += static_cast<double>(os->grad[i]) * os->value[i];
      }
      auto gs = ss->grad_buffer();
      for (std::size_t i = 0; i < seg.size(); ++i) {
        gs[i] += os->value[i] * (os->grad[i] - static_cast<T>(dot[seg[i]]));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return Tensor<T>(x.shape(), std::vector<T>(x.values().begin(), x.values().end()), false);
}

#define HSISEG_AD_INSTANTIATE(T)                                                                  \
  template class Tensor<T>;                                                                       \
  template class Tape<T>;                                                                         \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                        \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> conv2d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                            std::size_t, std::size_t);                                            \
  template Tensor<T> leaky_relu(Tape<T>&, const Tensor<T>&, T);                                   \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> batch_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                BatchNormState<T>&, bool, T, T);                                  \
  template Tensor<T> dropout(Tape<T>&, const Tensor<T>&, T, bool, std::uint64_t);                 \
  template Tensor<T> avg_pool_full(Tape<T>&, const Tensor<T>&);                                   \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&);                                         \
  template Tensor<T> log_softmax(Tape<T>&, const Tensor<T>&);                                     \
  template Tensor<T> cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const int>,              \
                                   std::span<const T>);                                           \
  template Tensor<T> concat(Tape<T>&, const std::vector<Tensor<T>>&, std::size_t);                \
  template Tensor<T> slice(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t);    \
  template Tensor<T> gather_rows(Tape<T>&, const Tensor<T>&, std::span<const std::uint32_t>);     \
  template Tensor<T> scatter_sum_by_segment(Tape<T>&, const Tensor<T>&,                           \
                                            std::span<const std::uint32_t>, std::size_t);         \
  template Tensor<T> scatter_mean_by_segment(Tape<T>&, const Tensor<T>&,                          \
                                             std::span<const std::uint32_t>, std::size_t);        \
  template Tensor<T> segment_softmax(Tape<T>&, const Tensor<T>&, std::span<const std::uint32_t>,  \
                                     std::size_t);                                                \
  template Tensor<T> detach(const Tensor<T>&);

HSISEG_AD_INSTANTIATE(float)
HSISEG_AD_INSTANTIATE(double)

#undef HSISEG_AD_INSTANTIATE

}  // namespace hsiseg::ad
