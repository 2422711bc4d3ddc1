#include "psat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace psat {

std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

size_t shape_numel(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t e : shape) {
    if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

// Dot product with eight independent accumulator lanes. The lane layout is
// fixed by this source, so results are reproducible and the vectorizer can
// pack the lanes without reassociating anything it is not allowed to.
template <typename T>
T lane_dot(const T* a, const T* b, size_t n) {
  T acc[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  for (; i < n; ++i) acc[0] += a[i] * b[i];
  T s01 = acc[0] + acc[1], s23 = acc[2] + acc[3];
  T s45 = acc[4] + acc[5], s67 = acc[6] + acc[7];
  return (s01 + s23) + (s45 + s67);
}

// Strictly left-to-right accumulation: the sum a naive nested loop over
// (channel, kernel row, kernel column) produces, exactly.
template <typename T>
T seq_dot(const T* a, const T* b, size_t n) {
  T acc(0);
  for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
thread_local Tape<T>* g_active_tape = nullptr;

template <typename T>
void maybe_record(const Tensor<T>& out, std::function<void()> fn) {
  if (!out.requires_grad()) return;
  if (auto* t = Tape<T>::active()) t->record(std::move(fn));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename T>
void check_labels(const std::vector<int>& labels, size_t n, size_t classes, const char* op) {
  if (labels.size() != n)
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  for (size_t i = 0; i < n; ++i)
    if (labels[i] < 0 || static_cast<size_t>(labels[i]) >= classes)
      throw IndexError(std::string(op) + ": label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside [0," + std::to_string(classes) + ")");
}

}  // namespace

// ---- Tensor ----

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<size_t> shape, bool requires_grad) {
  Tensor t;
  size_t n = shape_numel(shape);
  t.d_->shape = std::move(shape);
  t.d_->v.assign(n, T(0));
  t.d_->requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<size_t> shape, T value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.d_->v.begin(), t.d_->v.end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(std::vector<size_t> shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("from: " + std::to_string(data.size()) + " values for shape " +
                     shape_str(shape));
  Tensor t;
  t.d_->shape = std::move(shape);
  t.d_->v = std::move(data);
  t.d_->requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
std::vector<T>& Tensor<T>::grad() const {
  if (d_->g.empty()) d_->g.assign(d_->v.size(), T(0));
  return d_->g;
}

template <typename T>
const std::vector<T>& Tensor<T>::grad_c() const {
  if (d_->g.empty()) throw ContractError("grad_c: gradient never materialized");
  return d_->g;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(d_->g.begin(), d_->g.end(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item: tensor has shape " + shape_str(shape()));
  return d_->v[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor t;
  t.d_->shape = d_->shape;
  t.d_->v = d_->v;
  t.d_->requires_grad = false;
  return t;
}

// ---- Tape ----

template <typename T>
Tape<T>* Tape<T>::active() {
  return g_active_tape<T>;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& t) : prev_(g_active_tape<T>) {
  g_active_tape<T> = &t;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  g_active_tape<T> = prev_;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ContractError("backward: loss has shape " + shape_str(loss.shape()));
  Tensor<T> l = loss;  // handle copy; grad buffer is shared
  l.grad()[0] = T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

// ---- helpers for closures ----

namespace {

// Propagated requires_grad for an op output.
template <typename T>
Tensor<T> make_out(std::vector<size_t> shape, bool rg) {
  return Tensor<T>::zeros(std::move(shape), rg);
}

}  // namespace

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out = make_out<T>(a.shape(), a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  maybe_record(out, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    const auto& go = out.grad_c();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out = make_out<T>(a.shape(), a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  maybe_record(out, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    const auto& go = out.grad_c();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out = make_out<T>(a.shape(), a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  maybe_record(out, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    const auto& go = out.grad_c();
    // a and b may alias (x*x); both branches still accumulate correctly.
    if (a.requires_grad()) {
      auto& ga = a.grad();
      const T* pb2 = b.data();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb2[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      const T* pa2 = a.data();
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa2[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  Tensor<T> out = make_out<T>(a.shape(), a.requires_grad());
  const T cc = static_cast<T>(c);
  const T* pa = a.data();
  T* po = out.data();
  for (size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * cc;
  maybe_record(out, [a, out, cc]() mutable {
    if (!out.has_grad()) return;
    const auto& go = out.grad_c();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * cc;
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = make_out<T>(a.shape(), a.requires_grad());
  const T* pa = a.data();
  T* po = out.data();
  for (size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  maybe_record(out, [a, out]() mutable {
    if (!out.has_grad()) return;
    const auto& go = out.grad_c();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      const T* pa2 = a.data();
      for (size_t i = 0; i < go.size(); ++i)
        if (pa2[i] > T(0)) ga[i] += go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<size_t> shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  Tensor<T> out = Tensor<T>::from(std::move(shape), a.values(), a.requires_grad());
  maybe_record(out, [a, out]() mutable {
    if (!out.has_grad()) return;
    const auto& go = out.grad_c();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = make_out<T>({1}, a.requires_grad());
  const T* pa = a.data();
  T s = 0;
  for (size_t i = 0; i < a.numel(); ++i) s += pa[i];
  out.data()[0] = s;
  maybe_record(out, [a, out]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad_c()[0];
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    }
  });
  return out;
}

template <typename T>
Tensor<T> rsqrt_shift(const Tensor<T>& a, double shift) {
  Tensor<T> out = make_out<T>(a.shape(), a.requires_grad());
  const T sh = static_cast<T>(shift);
  const T* pa = a.data();
  T* po = out.data();
  for (size_t i = 0; i < out.numel(); ++i) po[i] = T(1) / std::sqrt(pa[i] + sh);
  maybe_record(out, [a, out]() mutable {
    if (!out.has_grad()) return;
    const auto& go = out.grad_c();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      const T* po2 = out.data();
      for (size_t i = 0; i < go.size(); ++i)
        ga[i] += go[i] * T(-0.5) * po2[i] * po2[i] * po2[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> log_elem(const Tensor<T>& a) {
  Tensor<T> out = make_out<T>(a.shape(), a.requires_grad());
  const T* pa = a.data();
  T* po = out.data();
  for (size_t i = 0; i < out.numel(); ++i) po[i] = std::log(pa[i]);
  maybe_record(out, [a, out]() mutable {
    if (!out.has_grad()) return;
    const auto& go = out.grad_c();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      const T* pa2 = a.data();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / pa2[i];
    }
  });
  return out;
}

// ---- matmul / linear ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.extent(1) != b.extent(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<T> out = make_out<T>({m, n}, a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (size_t i = 0; i < m; ++i)
    for (size_t l = 0; l < k; ++l) axpy(pa[i * k + l], pb + l * n, po + i * n, n);
  maybe_record(out, [a, b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    const T* go = out.grad_c().data();
    if (a.requires_grad()) {
      T* ga = a.grad().data();
      const T* pb2 = b.data();
      for (size_t i = 0; i < m; ++i)
        for (size_t l = 0; l < k; ++l) ga[i * k + l] += lane_dot(go + i * n, pb2 + l * n, n);
    }
    if (b.requires_grad()) {
      T* gb = b.grad().data();
      const T* pa2 = a.data();
      for (size_t i = 0; i < m; ++i)
        for (size_t l = 0; l < k; ++l) axpy(pa2[i * k + l], go + i * n, gb + l * n, n);
    }
  });
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.extent(1) != w.extent(1))
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  const size_t n = x.extent(0), f = x.extent(1), o = w.extent(0);
  if (b.numel() != o)
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " for " + std::to_string(o) +
                     " outputs");
  Tensor<T> out =
      make_out<T>({n, o}, x.requires_grad() || w.requires_grad() || b.requires_grad());
  const T* px = x.data();
  const T* pw = w.data();
  const T* pb = b.data();
  T* po = out.data();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < o; ++j) po[i * o + j] = lane_dot(px + i * f, pw + j * f, f) + pb[j];
  maybe_record(out, [x, w, b, out, n, f, o]() mutable {
    if (!out.has_grad()) return;
    const T* go = out.grad_c().data();
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      const T* pw2 = w.data();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < o; ++j) axpy(go[i * o + j], pw2 + j * f, gx + i * f, f);
    }
    if (w.requires_grad()) {
      T* gw = w.grad().data();
      const T* px2 = x.data();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < o; ++j) axpy(go[i * o + j], px2 + i * f, gw + j * f, f);
    }
    if (b.requires_grad()) {
      T* gb = b.grad().data();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < o; ++j) gb[j] += go[i * o + j];
    }
  });
  return out;
}

// ---- conv2d ----

namespace {

struct ConvDims {
  size_t n, ci, h, w, co, k, stride, pad, ho, wo, patch;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& w, size_t stride, size_t padding) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ShapeError("conv2d: need 4-d input and weight, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  ConvDims d;
  d.n = x.extent(0);
  d.ci = x.extent(1);
  d.h = x.extent(2);
  d.w = x.extent(3);
  d.co = w.extent(0);
  d.k = w.extent(2);
  if (w.extent(1) != d.ci)
    throw ShapeError("conv2d: weight expects " + std::to_string(w.extent(1)) + " channels, input has " +
                     std::to_string(d.ci));
  if (w.extent(3) != d.k) throw ShapeError("conv2d: non-square kernel");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  d.stride = stride;
  d.pad = padding;
  if (d.h + 2 * padding < d.k || d.w + 2 * padding < d.k)
    throw ShapeError("conv2d: kernel " + std::to_string(d.k) + " larger than padded input " +
                     std::to_string(d.h + 2 * padding) + "x" + std::to_string(d.w + 2 * padding));
  d.ho = (d.h + 2 * padding - d.k) / stride + 1;
  d.wo = (d.w + 2 * padding - d.k) / stride + 1;
  d.patch = d.ci * d.k * d.k;
  return d;
}

// One example's patches, one row per output position: cols[o][ci*k*k].
template <typename T>
void im2col(const T* x, const ConvDims& d, T* cols) {
  for (size_t oy = 0; oy < d.ho; ++oy)
    for (size_t ox = 0; ox < d.wo; ++ox) {
      T* row = cols + (oy * d.wo + ox) * d.patch;
      for (size_t c = 0; c < d.ci; ++c) {
        const T* xc = x + c * d.h * d.w;
        for (size_t u = 0; u < d.k; ++u) {
          const long iy = static_cast<long>(oy * d.stride + u) - static_cast<long>(d.pad);
          for (size_t v = 0; v < d.k; ++v) {
            const long ix = static_cast<long>(ox * d.stride + v) - static_cast<long>(d.pad);
            T val = T(0);
            if (iy >= 0 && iy < static_cast<long>(d.h) && ix >= 0 && ix < static_cast<long>(d.w))
              val = xc[iy * d.w + ix];
            row[(c * d.k + u) * d.k + v] = val;
          }
        }
      }
    }
}

template <typename T>
void col2im_add(const T* cols, const ConvDims& d, T* gx) {
  for (size_t oy = 0; oy < d.ho; ++oy)
    for (size_t ox = 0; ox < d.wo; ++ox) {
      const T* row = cols + (oy * d.wo + ox) * d.patch;
      for (size_t c = 0; c < d.ci; ++c) {
        T* xc = gx + c * d.h * d.w;
        for (size_t u = 0; u < d.k; ++u) {
          const long iy = static_cast<long>(oy * d.stride + u) - static_cast<long>(d.pad);
          if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
          for (size_t v = 0; v < d.k; ++v) {
            const long ix = static_cast<long>(ox * d.stride + v) - static_cast<long>(d.pad);
            if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
            xc[iy * d.w + ix] += row[(c * d.k + u) * d.k + v];
          }
        }
      }
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, size_t stride, size_t padding) {
  const ConvDims d = conv_dims(x, w, stride, padding);
  Tensor<T> out = make_out<T>({d.n, d.co, d.ho, d.wo}, x.requires_grad() || w.requires_grad());
  const size_t positions = d.ho * d.wo;
  std::vector<T> cols(positions * d.patch);
  const T* px = x.data();
  const T* pw = w.data();
  T* po = out.data();
  // Small patches keep the naive per-coordinate accumulation order, so they
  // reproduce a straightforward reference convolution to the last bit; wide
  // patches trade that order for the faster eight-lane dot.
  const bool naive_order = d.ci <= 8 && d.k <= 8;
  for (size_t i = 0; i < d.n; ++i) {
    im2col(px + i * d.ci * d.h * d.w, d, cols.data());
    T* yo = po + i * d.co * positions;
    for (size_t c = 0; c < d.co; ++c)
      for (size_t o = 0; o < positions; ++o)
        yo[c * positions + o] =
            naive_order ? seq_dot(pw + c * d.patch, cols.data() + o * d.patch, d.patch)
                        : lane_dot(pw + c * d.patch, cols.data() + o * d.patch, d.patch);
  }
  maybe_record(out, [x, w, out, d]() mutable {
    if (!out.has_grad()) return;
    const size_t positions = d.ho * d.wo;
    const T* go = out.grad_c().data();
    std::vector<T> cols(positions * d.patch);
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      const T* pw2 = w.data();
      for (size_t i = 0; i < d.n; ++i) {
        std::fill(cols.begin(), cols.end(), T(0));
        const T* gyo = go + i * d.co * positions;
        for (size_t c = 0; c < d.co; ++c)
          for (size_t o = 0; o < positions; ++o)
            axpy(gyo[c * positions + o], pw2 + c * d.patch, cols.data() + o * d.patch, d.patch);
        col2im_add(cols.data(), d, gx + i * d.ci * d.h * d.w);
      }
    }
    if (w.requires_grad()) {
      T* gw = w.grad().data();
      const T* px2 = x.data();
      for (size_t i = 0; i < d.n; ++i) {
        im2col(px2 + i * d.ci * d.h * d.w, d, cols.data());
        const T* gyo = go + i * d.co * positions;
        for (size_t c = 0; c < d.co; ++c)
          for (size_t o = 0; o < positions; ++o)
            axpy(gyo[c * positions + o], cols.data() + o * d.patch, gw + c * d.patch, d.patch);
      }
    }
  });
  return out;
}

// ---- pooling ----

namespace {

struct PoolDims {
  size_t n, c, h, w, win, stride, ho, wo;
};

template <typename T>
PoolDims pool_dims(const Tensor<T>& x, size_t window, size_t stride, const char* op) {
  if (x.ndim() != 4) throw ShapeError(std::string(op) + ": need 4-d input, got " + shape_str(x.shape()));
  if (window == 0 || stride == 0) throw ShapeError(std::string(op) + ": window and stride must be positive");
  PoolDims d;
  d.n = x.extent(0);
  d.c = x.extent(1);
  d.h = x.extent(2);
  d.w = x.extent(3);
  if (d.h < window || d.w < window)
    throw ShapeError(std::string(op) + ": window " + std::to_string(window) + " larger than input " +
                     std::to_string(d.h) + "x" + std::to_string(d.w));
  d.win = window;
  d.stride = stride;
  d.ho = (d.h - window) / stride + 1;
  d.wo = (d.w - window) / stride + 1;
  return d;
}

}  // namespace

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, size_t window, size_t stride) {
  const PoolDims d = pool_dims(x, window, stride, "maxpool2d");
  Tensor<T> out = make_out<T>({d.n, d.c, d.ho, d.wo}, x.requires_grad());
  // Flat input index of each output's max, for backward routing; ties keep the
  // first position scanned.
  auto argmax = std::make_shared<std::vector<size_t>>(out.numel());
  const T* px = x.data();
  T* po = out.data();
  size_t oi = 0;
  for (size_t i = 0; i < d.n; ++i)
    for (size_t c = 0; c < d.c; ++c) {
      const T* plane = px + (i * d.c + c) * d.h * d.w;
      const size_t base = (i * d.c + c) * d.h * d.w;
      for (size_t oy = 0; oy < d.ho; ++oy)
        for (size_t ox = 0; ox < d.wo; ++ox, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          size_t besti = 0;
          for (size_t u = 0; u < d.win; ++u)
            for (size_t v = 0; v < d.win; ++v) {
              const size_t iy = oy * d.stride + u, ix = ox * d.stride + v;
              const T val = plane[iy * d.w + ix];
              if (val > best) {
                best = val;
                besti = base + iy * d.w + ix;
              }
            }
          po[oi] = best;
          (*argmax)[oi] = besti;
        }
    }
  maybe_record(out, [x, out, argmax]() mutable {
    if (!out.has_grad()) return;
    const auto& go = out.grad_c();
    if (x.requires_grad()) {
      auto& gx = x.grad();
      for (size_t i = 0; i < go.size(); ++i) gx[(*argmax)[i]] += go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, size_t window, size_t stride) {
  const PoolDims d = pool_dims(x, window, stride, "avgpool2d");
  Tensor<T> out = make_out<T>({d.n, d.c, d.ho, d.wo}, x.requires_grad());
  const T inv = T(1) / static_cast<T>(d.win * d.win);
  const T* px = x.data();
  T* po = out.data();
  size_t oi = 0;
  for (size_t i = 0; i < d.n; ++i)
    for (size_t c = 0; c < d.c; ++c) {
      const T* plane = px + (i * d.c + c) * d.h * d.w;
      for (size_t oy = 0; oy < d.ho; ++oy)
        for (size_t ox = 0; ox < d.wo; ++ox, ++oi) {
          T s = 0;
          for (size_t u = 0; u < d.win; ++u)
            for (size_t v = 0; v < d.win; ++v)
              s += plane[(oy * d.stride + u) * d.w + ox * d.stride + v];
          po[oi] = s * inv;
        }
    }
  maybe_record(out, [x, out, d, inv]() mutable {
    if (!out.has_grad()) return;
    const T* go = out.grad_c().data();
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      size_t oi = 0;
      for (size_t i = 0; i < d.n; ++i)
        for (size_t c = 0; c < d.c; ++c) {
          T* plane = gx + (i * d.c + c) * d.h * d.w;
          for (size_t oy = 0; oy < d.ho; ++oy)
            for (size_t ox = 0; ox < d.wo; ++ox, ++oi) {
              const T g = go[oi] * inv;
              for (size_t u = 0; u < d.win; ++u)
                for (size_t v = 0; v < d.win; ++v)
                  plane[(oy * d.stride + u) * d.w + ox * d.stride + v] += g;
            }
        }
    }
  });
  return out;
}

// ---- per-channel broadcast ----

namespace {

template <typename T>
void check_channel(const Tensor<T>& x, const Tensor<T>& s, const char* op) {
  if (x.ndim() != 4)
    throw ShapeError(std::string(op) + ": need 4-d input, got " + shape_str(x.shape()));
  if (s.numel() != x.extent(1))
    throw ShapeError(std::string(op) + ": " + std::to_string(s.numel()) + " channel values for " +
                     std::to_string(x.extent(1)) + " channels");
}

}  // namespace

template <typename T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& s) {
  check_channel(x, s, "add_channel");
  const size_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Tensor<T> out = make_out<T>(x.shape(), x.requires_grad() || s.requires_grad());
  const T* px = x.data();
  const T* ps = s.data();
  T* po = out.data();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < c; ++j) {
      const T sv = ps[j];
      const T* xr = px + (i * c + j) * hw;
      T* orow = po + (i * c + j) * hw;
      for (size_t q = 0; q < hw; ++q) orow[q] = xr[q] + sv;
    }
  maybe_record(out, [x, s, out, n, c, hw]() mutable {
    if (!out.has_grad()) return;
    const T* go = out.grad_c().data();
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      for (size_t i = 0; i < n * c * hw; ++i) gx[i] += go[i];
    }
    if (s.requires_grad()) {
      T* gs = s.grad().data();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < c; ++j) {
          const T* gr = go + (i * c + j) * hw;
          T acc = 0;
          for (size_t q = 0; q < hw; ++q) acc += gr[q];
          gs[j] += acc;
        }
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& s) {
  check_channel(x, s, "mul_channel");
  const size_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Tensor<T> out = make_out<T>(x.shape(), x.requires_grad() || s.requires_grad());
  const T* px = x.data();
  const T* ps = s.data();
  T* po = out.data();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < c; ++j) {
      const T sv = ps[j];
      const T* xr = px + (i * c + j) * hw;
      T* orow = po + (i * c + j) * hw;
      for (size_t q = 0; q < hw; ++q) orow[q] = xr[q] * sv;
    }
  maybe_record(out, [x, s, out, n, c, hw]() mutable {
    if (!out.has_grad()) return;
    const T* go = out.grad_c().data();
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      const T* ps2 = s.data();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < c; ++j) {
          const T sv = ps2[j];
          const T* gr = go + (i * c + j) * hw;
          T* gxr = gx + (i * c + j) * hw;
          for (size_t q = 0; q < hw; ++q) gxr[q] += gr[q] * sv;
        }
    }
    if (s.requires_grad()) {
      T* gs = s.grad().data();
      const T* px2 = x.data();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < c; ++j) {
          const T* gr = go + (i * c + j) * hw;
          const T* xr = px2 + (i * c + j) * hw;
          T acc = 0;
          for (size_t q = 0; q < hw; ++q) acc += gr[q] * xr[q];
          gs[j] += acc;
        }
    }
  });
  return out;
}

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  if (x.ndim() != 4) throw ShapeError("channel_mean: need 4-d input, got " + shape_str(x.shape()));
  const size_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Tensor<T> out = make_out<T>({c}, x.requires_grad());
  const T inv = T(1) / static_cast<T>(n * hw);
  const T* px = x.data();
  T* po = out.data();
  for (size_t j = 0; j < c; ++j) {
    T acc = 0;
    for (size_t i = 0; i < n; ++i) {
      const T* xr = px + (i * c + j) * hw;
      for (size_t q = 0; q < hw; ++q) acc += xr[q];
    }
    po[j] = acc * inv;
  }
  maybe_record(out, [x, out, n, c, hw, inv]() mutable {
    if (!out.has_grad()) return;
    const T* go = out.grad_c().data();
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < c; ++j) {
          const T g = go[j] * inv;
          T* gxr = gx + (i * c + j) * hw;
          for (size_t q = 0; q < hw; ++q) gxr[q] += g;
        }
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.ndim() != 2 || v.numel() != x.extent(1))
    throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " with vector " +
                     shape_str(v.shape()));
  const size_t n = x.extent(0), f = x.extent(1);
  Tensor<T> out = make_out<T>(x.shape(), x.requires_grad() || v.requires_grad());
  const T* px = x.data();
  const T* pv = v.data();
  T* po = out.data();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < f; ++j) po[i * f + j] = px[i * f + j] + pv[j];
  maybe_record(out, [x, v, out, n, f]() mutable {
    if (!out.has_grad()) return;
    const T* go = out.grad_c().data();
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      for (size_t i = 0; i < n * f; ++i) gx[i] += go[i];
    }
    if (v.requires_grad()) {
      T* gv = v.grad().data();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < f; ++j) gv[j] += go[i * f + j];
    }
  });
  return out;
}

// ---- softmax / losses ----

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.ndim() != 2) throw ShapeError("softmax_rows: need 2-d input, got " + shape_str(x.shape()));
  const size_t n = x.extent(0), c = x.extent(1);
  Tensor<T> out = make_out<T>(x.shape(), x.requires_grad());
  const T* px = x.data();
  T* po = out.data();
  for (size_t i = 0; i < n; ++i) {
    const T* row = px + i * c;
    T m = row[0];
    for (size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    T s = 0;
    T* orow = po + i * c;
    for (size_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - m);
      s += orow[j];
    }
    const T inv = T(1) / s;
    for (size_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  maybe_record(out, [x, out, n, c]() mutable {
    if (!out.has_grad()) return;
    const T* go = out.grad_c().data();
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      const T* po2 = out.data();
      for (size_t i = 0; i < n; ++i) {
        const T* y = po2 + i * c;
        const T* g = go + i * c;
        T dotv = 0;
        for (size_t j = 0; j < c; ++j) dotv += g[j] * y[j];
        T* gr = gx + i * c;
        for (size_t j = 0; j < c; ++j) gr[j] += y[j] * (g[j] - dotv);
      }
    }
  });
  return out;
}

namespace {

// Shared by cross_entropy and ce_per_example: per-row loss and, lazily in
// backward, the softmax recomputation.
template <typename T>
void ce_forward_rows(const T* logits, size_t n, size_t c, const std::vector<int>& labels,
                     T* loss_rows) {
  for (size_t i = 0; i < n; ++i) {
    const T* row = logits + i * c;
    T m = row[0];
    for (size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    T s = 0;
    for (size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    loss_rows[i] = (m + std::log(s)) - row[labels[i]];
  }
}

template <typename T>
void ce_backward_rows(const T* logits, size_t n, size_t c, const std::vector<int>& labels,
                      const T* row_grads, T* gx) {
  for (size_t i = 0; i < n; ++i) {
    const T* row = logits + i * c;
    T m = row[0];
    for (size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    T s = 0;
    for (size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    const T inv = T(1) / s;
    const T g = row_grads[i];
    T* gr = gx + i * c;
    for (size_t j = 0; j < c; ++j) gr[j] += g * std::exp(row[j] - m) * inv;
    gr[labels[i]] -= g;
  }
}

}  // namespace

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2)
    throw ShapeError("cross_entropy: need 2-d logits, got " + shape_str(logits.shape()));
  const size_t n = logits.extent(0), c = logits.extent(1);
  if (n == 0) throw ContractError("cross_entropy: empty batch");
  check_labels<T>(labels, n, c, "cross_entropy");
  std::vector<T> rows(n);
  ce_forward_rows(logits.data(), n, c, labels, rows.data());
  T total = 0;
  for (size_t i = 0; i < n; ++i) total += rows[i];
  Tensor<T> out = make_out<T>({1}, logits.requires_grad());
  out.data()[0] = total / static_cast<T>(n);
  maybe_record(out, [logits, out, labels, n, c]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad_c()[0] / static_cast<T>(n);
    if (logits.requires_grad()) {
      std::vector<T> row_grads(n, g);
      ce_backward_rows(logits.data(), n, c, labels, row_grads.data(), logits.grad().data());
    }
  });
  return out;
}

template <typename T>
Tensor<T> ce_per_example(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2)
    throw ShapeError("ce_per_example: need 2-d logits, got " + shape_str(logits.shape()));
  const size_t n = logits.extent(0), c = logits.extent(1);
  if (n == 0) throw ContractError("ce_per_example: empty batch");
  check_labels<T>(labels, n, c, "ce_per_example");
  Tensor<T> out = make_out<T>({n}, logits.requires_grad());
  ce_forward_rows(logits.data(), n, c, labels, out.data());
  maybe_record(out, [logits, out, labels, n, c]() mutable {
    if (!out.has_grad()) return;
    if (logits.requires_grad())
      ce_backward_rows(logits.data(), n, c, labels, out.grad_c().data(), logits.grad().data());
  });
  return out;
}

template <typename T>
Tensor<T> nll_per_example(const Tensor<T>& probs, const std::vector<int>& labels) {
  if (probs.ndim() != 2)
    throw ShapeError("nll_per_example: need 2-d probabilities, got " + shape_str(probs.shape()));
  const size_t n = probs.extent(0), c = probs.extent(1);
  if (n == 0) throw ContractError("nll_per_example: empty batch");
  check_labels<T>(labels, n, c, "nll_per_example");
  Tensor<T> out = make_out<T>({n}, probs.requires_grad());
  const T* pp = probs.data();
  T* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = -std::log(pp[i * c + labels[i]]);
  maybe_record(out, [probs, out, labels, n, c]() mutable {
    if (!out.has_grad()) return;
    const T* go = out.grad_c().data();
    if (probs.requires_grad()) {
      T* gp = probs.grad().data();
      const T* pp2 = probs.data();
      for (size_t i = 0; i < n; ++i)
        gp[i * c + labels[i]] -= go[i] / pp2[i * c + labels[i]];
    }
  });
  return out;
}

// ---- hypernet structure ops ----

template <typename T>
Tensor<T> assemble_units(const Tensor<T>& units, size_t c_out, size_t c_in, size_t c_u,
                         size_t k_u) {
  const size_t unit_len = c_u * c_u * k_u * k_u;
  if (units.ndim() != 2 || units.extent(1) != unit_len)
    throw GenerationError("assemble_units: units shape " + shape_str(units.shape()) +
                          " does not match unit length " + std::to_string(unit_len));
  if (c_out % c_u != 0 || c_in % c_u != 0)
    throw GenerationError("assemble_units: " + std::to_string(c_out) + "x" + std::to_string(c_in) +
                          " not divisible by unit channels " + std::to_string(c_u));
  const size_t blocks_out = c_out / c_u, blocks_in = c_in / c_u;
  if (units.extent(0) != blocks_out * blocks_in)
    throw GenerationError("assemble_units: got " + std::to_string(units.extent(0)) +
                          " chunks, need " + std::to_string(blocks_out * blocks_in));
  Tensor<T> out = make_out<T>({c_out, c_in, k_u, k_u}, units.requires_grad());
  const size_t kk = k_u * k_u;
  const T* pu = units.data();
  T* po = out.data();
  for (size_t bo = 0; bo < blocks_out; ++bo)
    for (size_t bi = 0; bi < blocks_in; ++bi) {
      const T* block = pu + (bo * blocks_in + bi) * unit_len;
      for (size_t fo = 0; fo < c_u; ++fo)
        for (size_t fi = 0; fi < c_u; ++fi) {
          const T* src = block + (fo * c_u + fi) * kk;
          T* dst = po + ((bo * c_u + fo) * c_in + (bi * c_u + fi)) * kk;
          for (size_t t = 0; t < kk; ++t) dst[t] = src[t];
        }
    }
  maybe_record(out, [units, out, c_out, c_in, c_u, k_u]() mutable {
    if (!out.has_grad()) return;
    const size_t blocks_in = c_in / c_u, kk = k_u * k_u, unit_len = c_u * c_u * kk;
    const T* go = out.grad_c().data();
    if (units.requires_grad()) {
      T* gu = units.grad().data();
      for (size_t bo = 0; bo < c_out / c_u; ++bo)
        for (size_t bi = 0; bi < blocks_in; ++bi) {
          T* block = gu + (bo * blocks_in + bi) * unit_len;
          for (size_t fo = 0; fo < c_u; ++fo)
            for (size_t fi = 0; fi < c_u; ++fi) {
              T* dst = block + (fo * c_u + fi) * kk;
              const T* src = go + ((bo * c_u + fo) * c_in + (bi * c_u + fi)) * kk;
              for (size_t t = 0; t < kk; ++t) dst[t] += src[t];
            }
        }
    }
  });
  return out;
}

template <typename T>
Tensor<T> kernel_reduce(const Tensor<T>& w, KernelReduce mode) {
  if (w.ndim() != 4) throw GenerationError("kernel_reduce: need 4-d weight, got " + shape_str(w.shape()));
  const size_t co = w.extent(0), ci = w.extent(1), k = w.extent(2), kk = k * w.extent(3);
  Tensor<T> out = make_out<T>({co, ci, 1, 1}, w.requires_grad());
  auto argmax = std::make_shared<std::vector<size_t>>();
  if (mode == KernelReduce::max) argmax->resize(co * ci);
  const T* pw = w.data();
  T* po = out.data();
  for (size_t i = 0; i < co * ci; ++i) {
    const T* taps = pw + i * kk;
    if (mode == KernelReduce::max) {
      T best = taps[0];
      size_t bi = 0;
      for (size_t t = 1; t < kk; ++t)
        if (taps[t] > best) {
          best = taps[t];
          bi = t;
        }
      po[i] = best;
      (*argmax)[i] = bi;
    } else {
      T s = 0;
      for (size_t t = 0; t < kk; ++t) s += taps[t];
      po[i] = mode == KernelReduce::mean ? s / static_cast<T>(kk) : s;
    }
  }
  maybe_record(out, [w, out, mode, argmax, co, ci, kk]() mutable {
    if (!out.has_grad()) return;
    const T* go = out.grad_c().data();
    if (w.requires_grad()) {
      T* gw = w.grad().data();
      for (size_t i = 0; i < co * ci; ++i) {
        if (mode == KernelReduce::max) {
          gw[i * kk + (*argmax)[i]] += go[i];
        } else {
          const T g = mode == KernelReduce::mean ? go[i] / static_cast<T>(kk) : go[i];
          for (size_t t = 0; t < kk; ++t) gw[i * kk + t] += g;
        }
      }
    }
  });
  return out;
}

// ---- explicit instantiation ----

#define PSAT_INSTANTIATE(T)                                                               \
  template class Tensor<T>;                                                               \
  template class Tape<T>;                                                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale(const Tensor<T>&, double);                                     \
  template Tensor<T> relu(const Tensor<T>&);                                              \
  template Tensor<T> reshape(const Tensor<T>&, std::vector<size_t>);                      \
  template Tensor<T> sum(const Tensor<T>&);                                               \
  template Tensor<T> rsqrt_shift(const Tensor<T>&, double);                               \
  template Tensor<T> log_elem(const Tensor<T>&);                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, size_t, size_t);          \
  template Tensor<T> maxpool2d(const Tensor<T>&, size_t, size_t);                         \
  template Tensor<T> avgpool2d(const Tensor<T>&, size_t, size_t);                         \
  template Tensor<T> add_channel(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> mul_channel(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> channel_mean(const Tensor<T>&);                                      \
  template Tensor<T> add_rowvec(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                      \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int>&);            \
  template Tensor<T> ce_per_example(const Tensor<T>&, const std::vector<int>&);           \
  template Tensor<T> nll_per_example(const Tensor<T>&, const std::vector<int>&);          \
  template Tensor<T> assemble_units(const Tensor<T>&, size_t, size_t, size_t, size_t);    \
  template Tensor<T> kernel_reduce(const Tensor<T>&, KernelReduce);

PSAT_INSTANTIATE(float)
PSAT_INSTANTIATE(double)

#undef PSAT_INSTANTIATE

}  // namespace psat
