#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "psat/errors.hpp"

namespace psat {

std::string shape_str(const std::vector<size_t>& shape);

template <typename T>
struct TensorData {
  std::vector<size_t> shape;
  std::vector<T> v;
  std::vector<T> g;  // allocated lazily, same length as v once touched
  bool requires_grad = false;
};

// Dense row-major tensor. Copying a Tensor copies the handle, not the buffer;
// ops never mutate their inputs, so sharing is safe. detach() deep-copies.
template <typename T>
class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData<T>>()) {}

  static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<size_t> shape, T value, bool requires_grad = false);
  static Tensor from(std::vector<size_t> shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  const std::vector<size_t>& shape() const { return d_->shape; }
  size_t ndim() const { return d_->shape.size(); }
  size_t extent(size_t i) const { return d_->shape[i]; }
  size_t numel() const { return d_->v.size(); }

  std::vector<T>& values() { return d_->v; }
  const std::vector<T>& values() const { return d_->v; }
  T* data() { return d_->v.data(); }
  const T* data() const { return d_->v.data(); }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  bool has_grad() const { return !d_->g.empty(); }
  std::vector<T>& grad() const;              // allocates zeros on first use
  const std::vector<T>& grad_c() const;      // requires has_grad()
  void zero_grad();                          // zero in place if allocated

  T item() const;          // scalar tensors only
  Tensor detach() const;   // deep copy of values, requires_grad = false

  bool same_data(const Tensor& o) const { return d_ == o.d_; }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

// Records backward closures of executed ops in order; backward() replays them
// in exact reverse. One tape per thread: activation is thread-local, nested
// scopes restore the previous tape.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
  size_t size() const { return entries_.size(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates into every requires_grad tensor
  // that participated. Tensors outside the graph are untouched.
  void backward(const Tensor<T>& loss);

  static Tape* active();

  class Scope {
   public:
    explicit Scope(Tape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  std::vector<std::function<void()>> entries_;
};

// ---- differentiable ops (pure; inputs never mutated) ----

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, double c);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, std::vector<size_t> shape);
template <typename T> Tensor<T> sum(const Tensor<T>& a);

// 1/sqrt(a + shift), elementwise.
template <typename T> Tensor<T> rsqrt_shift(const Tensor<T>& a, double shift);

// Natural log, elementwise; inputs must be positive.
template <typename T> Tensor<T> log_elem(const Tensor<T>& a);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// y[n,o] = sum_f x[n,f] * w[o,f] + b[o]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Cross-correlation. x: [N,C_in,H,W], w: [C_out,C_in,k,k].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, size_t stride, size_t padding);

template <typename T> Tensor<T> maxpool2d(const Tensor<T>& x, size_t window, size_t stride);
template <typename T> Tensor<T> avgpool2d(const Tensor<T>& x, size_t window, size_t stride);

// Per-channel broadcasts over [N,C,H,W].
template <typename T> Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& s);
template <typename T> Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& s);
template <typename T> Tensor<T> channel_mean(const Tensor<T>& x);

// x[n,f] + v[f] broadcast over rows.
template <typename T> Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v);

template <typename T> Tensor<T> softmax_rows(const Tensor<T>& x);

// Mean over the batch of -log softmax(logits)[label], max-stabilized.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels);

// Same quantity per example, shape [N].
template <typename T>
Tensor<T> ce_per_example(const Tensor<T>& logits, const std::vector<int>& labels);

// -log(probs[label]) per example; probs must already be probabilities.
template <typename T>
Tensor<T> nll_per_example(const Tensor<T>& probs, const std::vector<int>& labels);

// Tiles D unit blocks [C_u,C_u,k_u,k_u] into a conv weight [c_out,c_in,k_u,k_u];
// chunk i covers filter block i / (c_in/C_u) and channel block i % (c_in/C_u).
template <typename T>
Tensor<T> assemble_units(const Tensor<T>& units, size_t c_out, size_t c_in, size_t c_u,
                         size_t k_u);

enum class KernelReduce { mean, max, sum };

// [c_out,c_in,k,k] -> [c_out,c_in,1,1] by reducing each kernel's taps.
template <typename T> Tensor<T> kernel_reduce(const Tensor<T>& w, KernelReduce mode);

}  // namespace psat
