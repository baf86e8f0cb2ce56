#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace smmrec::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient flows into this tensor
  bool requires_grad = false;
};

// Shared handle to a dense row-major array. Copies alias the same storage,
// which is what makes weight tying observable: two parameters slots holding
// the same Tensor read and write one matrix.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t size() const { return storage_->value.size(); }

  std::span<T> values() { return storage_->value; }
  std::span<const T> values() const { return storage_->value; }
  T item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool flag) { storage_->requires_grad = flag; }

  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const T> grad() const { return storage_->grad; }
  // Allocates a zero gradient on first use.
  std::span<T> mutable_grad();
  void zero_grad() { storage_->grad.clear(); }

  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }
  const std::shared_ptr<TensorStorage<T>>& storage() const { return storage_; }

 private:
  std::shared_ptr<TensorStorage<T>> storage_;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

// Byte mask; nonzero marks a position to fill / exclude.
using Mask = std::vector<std::uint8_t>;

// Saved CoPE intermediates, exposed for inspection.
template <typename T>
struct CopeState {
  std::vector<T> gates;      // same layout as the score matrix, 0 where masked
  std::vector<T> positions;  // p_ij after clamping
};

// Records differentiable operations in execution order. backward() replays
// the recorded closures in exact reverse order, accumulating gradients into
// every operand that requires them. A tape built with record=false performs
// forward computation only.
template <typename T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return entries_.size(); }

  // Elementwise sum. `b` either matches `a` or matches a trailing suffix of
  // a's shape (leading-batch expansion, e.g. a bias vector).
  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> scale(const Tensor<T>& a, T factor);
  Tensor<T> sum(const Tensor<T>& a);

  // a: [..., m, k]; b: [k, n] (shared across the batch) or [..., k, n].
  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
  // Swaps the last two axes.
  Tensor<T> transpose(const Tensor<T>& a);
  Tensor<T> reshape(const Tensor<T>& a, Shape shape);
  Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes);
  Tensor<T> concat(std::span<const Tensor<T>> parts, int axis);
  Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end);

  // Rows of `table` selected by `indices`; output shape index_shape + [cols].
  Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> indices,
                             Shape index_shape);
  // Treats `a` as [rows, last_dim] and selects rows.
  Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows);

  Tensor<T> gelu(const Tensor<T>& a);
  Tensor<T> sigmoid(const Tensor<T>& a);
  // Rows whose entries are all -inf produce all-zero output.
  Tensor<T> softmax(const Tensor<T>& a, int axis = -1);

  // gain * x / sqrt(mean(x^2) + eps) over the last axis.
  Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps);
  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

  // Inverted dropout: kept values scale by 1/(1-p). p == 0 returns x itself.
  Tensor<T> dropout(const Tensor<T>& x, T p, std::uint64_t seed);

  // `mask` covers either all of x or a trailing suffix of its shape.
  Tensor<T> masked_fill(const Tensor<T>& x, const Mask& mask, T value);

  // Mean over rows of -log softmax(logits[r])[targets[r]]; logits is [N, V].
  Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

  // Contextual position logits.
  //   q:      [..., L, d]    scores: [..., L, L] (scaled content logits)
  //   mask:   full-size mask over scores (nonzero = excluded key)
  //   table:  [p_max + 1, d]
  // g_ij = sigmoid(scores_ij) on unmasked pairs (0 otherwise); p_ij sums g_iu
  // over the inclusive span between j and i, clamped to p_max; the output is
  // q_i . e(p_ij) with e linearly interpolated between neighbouring rows.
  // Masked pairs produce 0.
  Tensor<T> cope_position_logits(const Tensor<T>& q, const Tensor<T>& scores, const Mask& mask,
                                 const Tensor<T>& table, std::size_t p_max,
                                 CopeState<T>* state = nullptr);

  // Populates gradients of every requires_grad leaf reachable from `loss`.
  // Throws UsageError for a non-scalar loss or a tape already consumed.
  void backward(const Tensor<T>& loss);

 private:
  using Storage = std::shared_ptr<TensorStorage<T>>;
  Tensor<T> finish(Tensor<T> out, std::initializer_list<const Tensor<T>*> inputs,
                   std::function<void()> backward_fn);

  std::vector<std::function<void()>> entries_;
  bool record_ = true;
  bool consumed_ = false;
};

// Central-difference gradient verification.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t components = 0;
};

// `loss_fn` must build a scalar loss on the supplied tape and be
// deterministic. Compares every component of every parameter against
// (f(θ+eps) - f(θ-eps)) / (2 eps) with relative error
// |a - n| / max(|a|, |n|, 1e-8). Throws NumericError naming the parameter
// when a non-finite value appears.
GradCheckResult gradient_check(const std::function<Tensor<double>(Tape<double>&)>& loss_fn,
                               std::span<const Parameter<double>> params, double eps = 1e-5);

}  // namespace smmrec::ad
