#include "psat/backbone.hpp"

#include <algorithm>

#include "psat/errors.hpp"

namespace psat {

std::string layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::fc: return "fc";
    case LayerKind::add: return "add";
  }
  return "?";
}

namespace {

[[noreturn]] void plan_fail(size_t layer, const std::string& what) {
  throw PlanError("layer " + std::to_string(layer) + ": " + what);
}

}  // namespace

BackbonePlan build_plan(const PlanDesc& desc, size_t unit_channels) {
  if (desc.in_c == 0 || desc.in_h == 0 || desc.in_w == 0)
    throw PlanError("input shape must be positive, got " +
                    shape_str({desc.in_c, desc.in_h, desc.in_w}));
  if (unit_channels == 0) throw PlanError("unit channel count must be positive");
  if (desc.layers.empty()) throw PlanError("plan has no layers");

  BackbonePlan plan;
  plan.in_c = desc.in_c;
  plan.in_h = desc.in_h;
  plan.in_w = desc.in_w;
  plan.unit_channels = unit_channels;

  size_t c = desc.in_c, h = desc.in_h, w = desc.in_w;
  bool seen_conv = false;
  size_t fc_count = 0;

  for (size_t i = 0; i < desc.layers.size(); ++i) {
    const LayerDesc& d = desc.layers[i];
    LayerSpec s;
    s.kind = d.kind;
    if (fc_count > 0) plan_fail(i, "fc head must be the last layer");
    switch (d.kind) {
      case LayerKind::conv: {
        if (d.c_out == 0 || d.k == 0 || d.stride == 0)
          plan_fail(i, "conv needs positive c_out, k, stride");
        s.c_in = c;
        s.c_out = d.c_out;
        s.k = d.k;
        s.stride = d.stride;
        s.padding = d.padding;
        s.generated = d.generated;
        if (s.generated) {
          if (!seen_conv) plan_fail(i, "the first conv layer cannot be generated");
          if (s.k != 1 && s.k != 3)
            plan_fail(i, "generated conv kernel must be 1 or 3, got " + std::to_string(s.k));
          if (s.c_out % unit_channels != 0)
            plan_fail(i, std::to_string(s.c_out) + " not divisible by " +
                             std::to_string(unit_channels));
          if (s.c_in % unit_channels != 0)
            plan_fail(i, std::to_string(s.c_in) + " not divisible by " +
                             std::to_string(unit_channels));
        }
        if (h + 2 * s.padding < s.k || w + 2 * s.padding < s.k)
          plan_fail(i, "kernel " + std::to_string(s.k) + " larger than padded input " +
                           std::to_string(h + 2 * s.padding) + "x" +
                           std::to_string(w + 2 * s.padding));
        h = (h + 2 * s.padding - s.k) / s.stride + 1;
        w = (w + 2 * s.padding - s.k) / s.stride + 1;
        c = s.c_out;
        // Bias is absorbed by a directly following batchnorm.
        s.bias = !(i + 1 < desc.layers.size() && desc.layers[i + 1].kind == LayerKind::batchnorm);
        seen_conv = true;
        if (s.generated) plan.generated_layers.push_back(i);
        break;
      }
      case LayerKind::batchnorm:
        if (d.generated) plan_fail(i, "batchnorm cannot be generated");
        s.channels = c;
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool: {
        const size_t win = d.window, st = d.pool_stride ? d.pool_stride : d.window;
        if (win == 0) plan_fail(i, "pool needs a positive window");
        if (h < win || w < win)
          plan_fail(i, "pool window " + std::to_string(win) + " larger than input " +
                           std::to_string(h) + "x" + std::to_string(w));
        s.window = win;
        s.pool_stride = st;
        h = (h - win) / st + 1;
        w = (w - win) / st + 1;
        break;
      }
      case LayerKind::fc: {
        if (d.generated) plan_fail(i, "fc layers cannot be generated");
        if (d.out_features == 0) plan_fail(i, "fc needs positive out_features");
        s.in_features = c * h * w;
        s.out_features = d.out_features;
        ++fc_count;
        plan.num_classes = d.out_features;
        break;
      }
      case LayerKind::add: {
        const int from = d.from;
        size_t fc2, fh, fw;
        if (from < 0) {
          fc2 = desc.in_c;
          fh = desc.in_h;
          fw = desc.in_w;
        } else if (static_cast<size_t>(from) < i) {
          const LayerSpec& src = plan.layers[from];
          fc2 = src.out_c;
          fh = src.out_h;
          fw = src.out_w;
        } else {
          plan_fail(i, "add source " + std::to_string(from) + " is not an earlier layer");
        }
        if (fc2 != c || fh != h || fw != w)
          plan_fail(i, "add source shape " + shape_str({fc2, fh, fw}) + " differs from " +
                           shape_str({c, h, w}));
        s.from = from;
        break;
      }
    }
    s.out_c = c;
    s.out_h = h;
    s.out_w = w;
    plan.layers.push_back(s);
  }
  if (fc_count != 1) throw PlanError("plan needs exactly one fc head, found " +
                                     std::to_string(fc_count));
  return plan;
}

namespace {

size_t layer_param_count(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::conv:
      return s.c_out * s.c_in * s.k * s.k + (s.bias ? s.c_out : 0);
    case LayerKind::batchnorm:
      return 2 * s.channels;  // scale + shift; running stats excluded
    case LayerKind::fc:
      return s.in_features * s.out_features + s.out_features;
    default:
      return 0;
  }
}

}  // namespace

PlanDesc plan_desc(const BackbonePlan& plan) {
  PlanDesc d;
  d.in_c = plan.in_c;
  d.in_h = plan.in_h;
  d.in_w = plan.in_w;
  for (const LayerSpec& s : plan.layers) {
    LayerDesc l;
    l.kind = s.kind;
    l.c_out = s.c_out;
    l.k = s.k;
    l.stride = s.stride;
    l.padding = s.padding;
    l.generated = s.generated;
    l.window = s.window;
    l.pool_stride = s.pool_stride;
    l.out_features = s.out_features;
    l.from = s.from;
    d.layers.push_back(l);
  }
  return d;
}

size_t count_params(const BackbonePlan& plan, ParamPartition which) {
  size_t total = 0;
  for (const LayerSpec& s : plan.layers) {
    const bool gen_weight = s.kind == LayerKind::conv && s.generated;
    switch (which) {
      case ParamPartition::all:
        total += layer_param_count(s);
        break;
      case ParamPartition::generated:
        if (gen_weight) total += s.c_out * s.c_in * s.k * s.k;
        break;
      case ParamPartition::direct:
        total += layer_param_count(s);
        if (gen_weight) total -= s.c_out * s.c_in * s.k * s.k;
        break;
    }
  }
  return total;
}

// ---- ParamBundle ----

std::string param_name(size_t layer, const std::string& suffix) {
  return "layer" + std::to_string(layer) + "." + suffix;
}

namespace {

template <typename T>
const BundleEntry<T>* find_entry(const std::vector<BundleEntry<T>>& list, size_t layer,
                                 const std::string& suffix) {
  const std::string name = param_name(layer, suffix);
  for (const auto& e : list)
    if (e.name == name) return &e;
  return nullptr;
}

}  // namespace

template <typename T>
const Tensor<T>& ParamBundle<T>::get(size_t layer, const std::string& suffix) const {
  const auto* e = find_entry(params, layer, suffix);
  if (!e) throw BundleError("missing parameter " + param_name(layer, suffix));
  return e->t;
}

template <typename T>
Tensor<T>& ParamBundle<T>::get(size_t layer, const std::string& suffix) {
  return const_cast<Tensor<T>&>(static_cast<const ParamBundle<T>*>(this)->get(layer, suffix));
}

template <typename T>
const Tensor<T>& ParamBundle<T>::buffer(size_t layer, const std::string& suffix) const {
  const auto* e = find_entry(buffers, layer, suffix);
  if (!e) throw BundleError("missing buffer " + param_name(layer, suffix));
  return e->t;
}

template <typename T>
Tensor<T>& ParamBundle<T>::buffer(size_t layer, const std::string& suffix) {
  return const_cast<Tensor<T>&>(static_cast<const ParamBundle<T>*>(this)->buffer(layer, suffix));
}

template <typename T>
bool ParamBundle<T>::has(size_t layer, const std::string& suffix) const {
  return find_entry(params, layer, suffix) != nullptr;
}

template <typename T>
void validate_bundle(const BackbonePlan& plan, const ParamBundle<T>& bundle) {
  auto expect = [&](size_t layer, const std::string& suffix, std::vector<size_t> shape,
                    bool generated) {
    const auto* e = find_entry(bundle.params, layer, suffix);
    if (!e) throw BundleError("missing parameter " + param_name(layer, suffix));
    if (e->t.shape() != shape)
      throw BundleError("parameter " + e->name + " has shape " + shape_str(e->t.shape()) +
                        ", plan needs " + shape_str(shape));
    if (e->generated != generated)
      throw BundleError("parameter " + e->name + (generated ? " must" : " must not") +
                        " be tagged generated");
  };
  auto expect_buffer = [&](size_t layer, const std::string& suffix, std::vector<size_t> shape) {
    const auto* e = find_entry(bundle.buffers, layer, suffix);
    if (!e) throw BundleError("missing buffer " + param_name(layer, suffix));
    if (e->t.shape() != shape)
      throw BundleError("buffer " + e->name + " has shape " + shape_str(e->t.shape()) +
                        ", plan needs " + shape_str(shape));
  };
  size_t expected = 0, expected_buffers = 0;
  for (size_t i = 0; i < plan.layers.size(); ++i) {
    const LayerSpec& s = plan.layers[i];
    switch (s.kind) {
      case LayerKind::conv:
        expect(i, "conv.weight", {s.c_out, s.c_in, s.k, s.k}, s.generated);
        ++expected;
        if (s.bias) {
          expect(i, "conv.bias", {s.c_out}, false);
          ++expected;
        }
        break;
      case LayerKind::batchnorm:
        expect(i, "bn.scale", {s.channels}, false);
        expect(i, "bn.shift", {s.channels}, false);
        expect_buffer(i, "bn.running_mean", {s.channels});
        expect_buffer(i, "bn.running_var", {s.channels});
        expected += 2;
        expected_buffers += 2;
        break;
      case LayerKind::fc:
        expect(i, "fc.weight", {s.out_features, s.in_features}, false);
        expect(i, "fc.bias", {s.out_features}, false);
        expected += 2;
        break;
      default:
        break;
    }
  }
  if (bundle.params.size() != expected)
    throw BundleError("bundle has " + std::to_string(bundle.params.size()) + " parameters, plan needs " +
                      std::to_string(expected));
  if (bundle.buffers.size() != expected_buffers)
    throw BundleError("bundle has " + std::to_string(bundle.buffers.size()) + " buffers, plan needs " +
                      std::to_string(expected_buffers));
}

// ---- forward ----

template <typename T>
Tensor<T> forward(const BackbonePlan& plan, const ParamBundle<T>& bundle, const Tensor<T>& batch,
                  Mode mode) {
  validate_bundle(plan, bundle);
  if (batch.ndim() != 4 || batch.extent(1) != plan.in_c || batch.extent(2) != plan.in_h ||
      batch.extent(3) != plan.in_w)
    throw ShapeError("forward: batch " + shape_str(batch.shape()) + " does not match plan input " +
                     shape_str({plan.in_c, plan.in_h, plan.in_w}));

  Tensor<T> x = batch;
  std::vector<Tensor<T>> outputs;
  outputs.reserve(plan.layers.size());
  Tensor<T> logits;
  for (size_t i = 0; i < plan.layers.size(); ++i) {
    const LayerSpec& s = plan.layers[i];
    switch (s.kind) {
      case LayerKind::conv: {
        x = conv2d(x, bundle.get(i, "conv.weight"), s.stride, s.padding);
        if (s.bias) x = add_channel(x, bundle.get(i, "conv.bias"));
        break;
      }
      case LayerKind::batchnorm: {
        const Tensor<T>& gamma = bundle.get(i, "bn.scale");
        const Tensor<T>& beta = bundle.get(i, "bn.shift");
        if (mode == Mode::train) {
          Tensor<T> mu = channel_mean(x);
          Tensor<T> xc = add_channel(x, scale(mu, -1.0));
          Tensor<T> var = channel_mean(mul(xc, xc));
          Tensor<T> inv = rsqrt_shift(var, kBnEps);
          x = add_channel(mul_channel(mul_channel(xc, inv), gamma), beta);
          // Running stats track batch statistics outside the tape; variance
          // updates use the unbiased estimate. Tensors are handles, so these
          // writes land in the member's buffers.
          const size_t nhw =
              batch.extent(0) * plan.layers[i].out_h * plan.layers[i].out_w;
          const T factor = nhw > 1 ? static_cast<T>(nhw) / static_cast<T>(nhw - 1) : T(1);
          Tensor<T> rm_t = bundle.buffer(i, "bn.running_mean");
          Tensor<T> rv_t = bundle.buffer(i, "bn.running_var");
          auto& rm = rm_t.values();
          auto& rv = rv_t.values();
          const auto& muv = mu.values();
          const auto& varv = var.values();
          const T m = static_cast<T>(kBnMomentum);
          for (size_t j = 0; j < rm.size(); ++j) {
            rm[j] = (T(1) - m) * rm[j] + m * muv[j];
            rv[j] = (T(1) - m) * rv[j] + m * varv[j] * factor;
          }
        } else {
          const Tensor<T>& rm = bundle.buffer(i, "bn.running_mean");
          const Tensor<T>& rv = bundle.buffer(i, "bn.running_var");
          Tensor<T> inv = rsqrt_shift(rv, kBnEps);
          Tensor<T> xc = add_channel(x, scale(rm, -1.0));
          x = add_channel(mul_channel(mul_channel(xc, inv), gamma), beta);
        }
        break;
      }
      case LayerKind::relu:
        x = relu(x);
        break;
      case LayerKind::maxpool:
        x = maxpool2d(x, s.window, s.pool_stride);
        break;
      case LayerKind::avgpool:
        x = avgpool2d(x, s.window, s.pool_stride);
        break;
      case LayerKind::fc: {
        Tensor<T> flat = reshape(x, {batch.extent(0), s.in_features});
        logits = linear(flat, bundle.get(i, "fc.weight"), bundle.get(i, "fc.bias"));
        x = logits;
        break;
      }
      case LayerKind::add: {
        const Tensor<T>& other = s.from < 0 ? batch : outputs[s.from];
        x = add(x, other);
        break;
      }
    }
    outputs.push_back(x);
  }
  return logits;
}

#define PSAT_INSTANTIATE(T)                                                            \
  template struct ParamBundle<T>;                                                     \
  template void validate_bundle(const BackbonePlan&, const ParamBundle<T>&);          \
  template Tensor<T> forward(const BackbonePlan&, const ParamBundle<T>&, const Tensor<T>&, Mode);

PSAT_INSTANTIATE(float)
PSAT_INSTANTIATE(double)

#undef PSAT_INSTANTIATE

}  // namespace psat
