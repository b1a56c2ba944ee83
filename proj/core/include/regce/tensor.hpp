#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace regce {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Throws std::invalid_argument with `msg` when cond is false.
void check(bool cond, const std::string& msg);

namespace detail {
template <class S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;   // persistent, accumulated across backward passes
  std::vector<S> flow;   // in-flight gradient of the current backward pass
  std::uint64_t flow_pass = 0;
  std::uint64_t merge_pass = 0;
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major n-d array sharing its storage across copies (handle
// semantics, like the usual dynamic-graph tensor libraries). Scalar type
// is a template parameter: double for verification, float for speed.
template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, S value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false);
  static Tensor scalar_value(S value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::vector<S>& values() { return impl_->data; }
  const std::vector<S>& values() const { return impl_->data; }
  S* data() { return impl_->data.data(); }
  const S* data() const { return impl_->data.data(); }

  // Value of a one-element tensor.
  S item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<S>& grad() const { return impl_->grad; }
  std::vector<S>& grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Deep copy of values only (no grad, no graph link).
  Tensor detached_copy() const;

  // Identity of the underlying storage; used by the tape.
  const void* id() const { return impl_.get(); }

  std::shared_ptr<detail::TensorImpl<S>> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl<S>> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl<S>> impl_;

  template <class T>
  friend class Tape;
};

// While alive, suppresses tape recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool grad_enabled();
};

// Ordered record of executed differentiable operations. Execution order is
// a topological order by construction; backward() walks it exactly once in
// reverse per call. Leaf and intermediate tensors with requires_grad receive
// accumulated gradients, and repeated backward() calls keep accumulating
// until zero_grad() clears them.
template <class S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  class Activation {
   public:
    explicit Activation(Tape* t);
    ~Activation();
    Activation(const Activation&) = delete;
    Activation& operator=(const Activation&) = delete;

   private:
    Tape* tape_;
    Tape* previous_;
  };

  // Makes this tape the recording target for the current thread.
  [[nodiscard]] Activation activate() { return Activation(this); }
  static Tape* current();

  void record(const char* op,
              std::vector<std::shared_ptr<detail::TensorImpl<S>>> involved,
              std::function<void(std::uint64_t)> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and propagates through all recorded ops.
  void backward(const Tensor<S>& loss);

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    const char* op;
    std::vector<std::shared_ptr<detail::TensorImpl<S>>> tensors;
    std::function<void(std::uint64_t)> backward;
  };
  std::vector<Entry> entries_;
  std::uint64_t pass_counter_ = 0;
};

// ---- differentiable operations ----------------------------------------

// Elementwise sum. Also accepts a rank-1 bias against the last axis of a
// rank-2 tensor or the channel axis of a rank-4 NCHW tensor.
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);

// Elementwise product of same-shape tensors.
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);

// Multiplication by a constant.
template <class S>
Tensor<S> scale(const Tensor<S>& a, S factor);

// [M,K] x [K,N] -> [M,N].
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);

template <class S>
Tensor<S> relu(const Tensor<S>& x);

// NCHW input, OIHW kernel, zero padding, square stride.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride, int padding);

// Batch statistics in training mode (running buffers updated in place),
// running statistics in eval mode. gamma/beta/running_* are rank-1 [C].
template <class S>
Tensor<S> batchnorm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                      Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                      double momentum = 0.1, double eps = 1e-5);

// [N,C,H,W] -> [N,C] spatial mean.
template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x);

// Square window / stride, no padding. Ties break to the first element
// in scan order.
template <class S>
Tensor<S> max_pool2d(const Tensor<S>& x, int kernel, int stride);

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape);

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis);

// Reduction of all elements to a one-element tensor.
template <class S>
Tensor<S> sum(const Tensor<S>& x);

// Row-wise softmax of a [N,K] tensor.
template <class S>
Tensor<S> softmax(const Tensor<S>& x);

// ---- losses ------------------------------------------------------------

template <class S>
struct LossValue {
  Tensor<S> loss;                   // one-element tensor, mean over rows
  std::vector<double> per_example;  // row losses, for diagnostics
};

// Mean over rows of -sum_k target_k * log softmax(logits)_k. Targets are
// class indices or probability rows; gradient is (softmax - target)/N.
template <class S>
LossValue<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<std::int32_t>& targets);

template <class S>
LossValue<S> softmax_cross_entropy(const Tensor<S>& logits, const Tensor<S>& target_rows);

// Mean squared error between softmax(logits) and target probability rows,
// averaged over all N*K entries.
template <class S>
Tensor<S> softmax_mse(const Tensor<S>& logits, const Tensor<S>& target_rows);

// ---- optimizer -----------------------------------------------------------

// Classical SGD with momentum and coupled weight decay:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
template <class S>
struct SgdState {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::vector<S>> velocity;  // parallel to the parameter list
};

template <class S>
void sgd_step(std::vector<std::pair<std::string, Tensor<S>>>& params, SgdState<S>& state);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace regce
