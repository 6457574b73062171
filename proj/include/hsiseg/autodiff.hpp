#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// Every op takes the Tape it records into as its first argument. An op's
// output requires a gradient iff any input does; only such ops are recorded.
// Tape::backward walks the records in reverse insertion order, which is a
// reverse topological order by construction.
//
// The engine is instantiated for float (model math) and double (gradient
// checks).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hsiseg::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;

  // Zero-initialized gradient buffer, allocated on first use.
  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t numel() const { return s_->value.size(); }

  std::span<const T> values() const { return s_->value; }
  std::span<T> mutable_values() { return s_->value; }
  std::span<const T> grad() const { return s_->grad; }
  bool has_grad() const { return !s_->grad.empty(); }
  void zero_grad() { s_->grad.clear(); }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  T item() const;

  // Deep copy with no gradient history.
  Tensor clone() const;

  const std::shared_ptr<Storage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<Storage<T>> s_;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  // Used by the ops: remembers `output` and how to push its gradient into
  // the op's inputs.
  void record(std::string_view op, const Tensor<T>& output, BackwardFn fn);

  // Populates gradients of everything upstream of `loss`. The tape is
  // cleared afterwards unless `retain` is set; backward on a cleared tape
  // throws.
  void backward(const Tensor<T>& loss, bool retain = false);

  std::size_t size() const { return records_.size(); }
  std::vector<std::string> op_names() const;
  void clear();

 private:
  struct Record {
    std::string op;
    std::shared_ptr<Storage<T>> output;
    BackwardFn fn;
  };
  std::vector<Record> records_;
  bool consumed_ = false;
};

// Running statistics of a batch-norm layer, owned by the model.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Elementwise a + b. b may also be a vector of length a.shape().back(),
// added to every row.
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

// Elementwise a * b. b may also be [rows, 1] for a of shape [rows, cols],
// scaling each row.
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a);

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a);

// [M, K] x [K, N] -> [M, N]
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

// x [N, in], weight [out, in], bias [out] or undefined -> [N, out]
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias);

// x [B, C, H, W], weight [O, C, K, K], bias [O] or undefined.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, std::size_t stride, std::size_t padding);

template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& x, T slope);

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);

// Per-channel normalization over all but axis 1 of x ([B, C] or
// [B, C, H, W]). Train mode uses batch statistics (biased variance) and
// updates the running estimates; eval mode uses the running estimates.
template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormState<T>& state, bool train,
                     T momentum = T(0.1), T epsilon = T(1e-5));

// Inverted dropout; identity when !train or p == 0. The mask depends only on
// `seed`.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, T p, bool train,
                  std::uint64_t seed);

// Mean over the spatial axes: [B, C, H, W] -> [B, C].
template <typename T>
Tensor<T> avg_pool_full(Tape<T>& tape, const Tensor<T>& x);

// Row-wise over [N, C].
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> log_softmax(Tape<T>& tape, const Tensor<T>& x);

// sum_i w_i * CE(logits_i, labels_i) / sum_i w_i. Empty weights mean all
// ones. Throws on negative weights or an all-zero weight vector.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                        std::span<const int> labels, std::span<const T> weights = {});

// Concatenation of rank-2 tensors along axis 0 or 1.
template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis);

// Rows or columns [begin, end) of a rank-2 tensor.
template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& x, std::size_t axis,
                std::size_t begin, std::size_t end);

// out[e] = x[index[e]] for rank-2 x.
template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& x,
                      std::span<const std::uint32_t> index);

// out[s] = sum of rows e with segment[e] == s; [E, F] -> [S, F].
template <typename T>
Tensor<T> scatter_sum_by_segment(Tape<T>& tape, const Tensor<T>& x,
                                 std::span<const std::uint32_t> segment,
                                 std::size_t num_segments);

// Like scatter_sum_by_segment but divided by the segment size; empty
// segments yield zeros.
template <typename T>
Tensor<T> scatter_mean_by_segment(Tape<T>& tape, const Tensor<T>& x,
                                  std::span<const std::uint32_t> segment,
                                  std::size_t num_segments);

// Softmax of a score vector ([E] or [E, 1]) within each segment.
template <typename T>
Tensor<T> segment_softmax(Tape<T>& tape, const Tensor<T>& scores,
                          std::span<const std::uint32_t> segment,
                          std::size_t num_segments);

// Same values, no history: nothing flows back through the result.
template <typename T>
Tensor<T> detach(const Tensor<T>& x);

// Sets the worker count for internally parallel ops. Results do not depend
// on it.
void set_num_threads(int threads);
int num_threads();

}  // namespace hsiseg::ad
