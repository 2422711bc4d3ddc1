#include "psat/hypernet.hpp"

#include <cmath>

#include "psat/errors.hpp"

namespace psat {

namespace {

template <typename T>
void fill_normal(Tensor<T>& t, RandomStream& rs, double std) {
  for (auto& x : t.values()) x = static_cast<T>(rs.normal() * std);
}

}  // namespace

size_t chunk_count(const LayerSpec& layer, size_t c_u) {
  return (layer.c_out / c_u) * (layer.c_in / c_u);
}

template <typename T>
std::vector<Tensor<T>> Member<T>::trainables() {
  std::vector<Tensor<T>> out = {hyper.w_in, hyper.b_in, hyper.w_out, hyper.b_out};
  for (auto& e : emb.layers) out.push_back(e);
  for (auto& e : direct.params) out.push_back(e.t);
  return out;
}

template <typename T>
size_t Member<T>::trainable_count() {
  size_t n = 0;
  for (auto& t : trainables()) n += t.numel();
  return n;
}

template <typename T>
Member<T> init_member(const BackbonePlan& plan, const HypernetConfig& cfg, uint64_t seed,
                      std::string tag) {
  if (cfg.n_z == 0 || cfg.d_h == 0 || cfg.c_u == 0 || cfg.k_u == 0)
    throw PlanError("hypernet config extents must be positive");
  if (plan.unit_channels != cfg.c_u)
    throw PlanError("plan was validated for unit channels " + std::to_string(plan.unit_channels) +
                    ", config says " + std::to_string(cfg.c_u));
  RandomStream rs(seed);
  Member<T> m;
  m.tag = std::move(tag);
  m.hyper.cfg = cfg;
  const size_t unit = cfg.c_u * cfg.c_u * cfg.k_u * cfg.k_u;
  m.hyper.w_in = Tensor<T>::zeros({cfg.d_h, cfg.n_z}, true);
  fill_normal(m.hyper.w_in, rs, 1.0 / std::sqrt(static_cast<double>(cfg.n_z)));
  m.hyper.b_in = Tensor<T>::zeros({cfg.d_h}, true);
  m.hyper.w_out = Tensor<T>::zeros({cfg.d_h, unit}, true);
  fill_normal(m.hyper.w_out, rs, 1.0 / std::sqrt(static_cast<double>(cfg.d_h)));
  m.hyper.b_out = Tensor<T>::zeros({unit}, true);

  for (size_t li : plan.generated_layers) {
    const LayerSpec& s = plan.layers[li];
    Tensor<T> chunks = Tensor<T>::zeros({chunk_count(s, cfg.c_u), cfg.n_z}, true);
    fill_normal(chunks, rs, 1.0);
    m.emb.layers.push_back(chunks);
    m.emb.layer_indices.push_back(li);
  }

  for (size_t i = 0; i < plan.layers.size(); ++i) {
    const LayerSpec& s = plan.layers[i];
    switch (s.kind) {
      case LayerKind::conv: {
        if (!s.generated) {
          Tensor<T> w = Tensor<T>::zeros({s.c_out, s.c_in, s.k, s.k}, true);
          fill_normal(w, rs, 1.0 / std::sqrt(static_cast<double>(s.c_in * s.k * s.k)));
          m.direct.params.push_back({param_name(i, "conv.weight"), i, w, false});
        }
        if (s.bias)
          m.direct.params.push_back(
              {param_name(i, "conv.bias"), i, Tensor<T>::zeros({s.c_out}, true), false});
        break;
      }
      case LayerKind::batchnorm:
        m.direct.params.push_back(
            {param_name(i, "bn.scale"), i, Tensor<T>::full({s.channels}, T(1), true), false});
        m.direct.params.push_back(
            {param_name(i, "bn.shift"), i, Tensor<T>::zeros({s.channels}, true), false});
        m.direct.buffers.push_back(
            {param_name(i, "bn.running_mean"), i, Tensor<T>::zeros({s.channels}), false});
        m.direct.buffers.push_back(
            {param_name(i, "bn.running_var"), i, Tensor<T>::full({s.channels}, T(1)), false});
        break;
      case LayerKind::fc: {
        Tensor<T> w = Tensor<T>::zeros({s.out_features, s.in_features}, true);
        fill_normal(w, rs, 1.0 / std::sqrt(static_cast<double>(s.in_features)));
        m.direct.params.push_back({param_name(i, "fc.weight"), i, w, false});
        m.direct.params.push_back(
            {param_name(i, "fc.bias"), i, Tensor<T>::zeros({s.out_features}, true), false});
        break;
      }
      default:
        break;
    }
  }
  return m;
}

template <typename T>
Tensor<T> generate_layer(const Hypernet<T>& h, const Tensor<T>& chunks, const LayerSpec& layer) {
  const HypernetConfig& cfg = h.cfg;
  if (layer.kind != LayerKind::conv || !layer.generated)
    throw GenerationError("generate_layer: layer is not a generated conv");
  if (layer.k != cfg.k_u && layer.k != 1)
    throw GenerationError("generate_layer: kernel " + std::to_string(layer.k) +
                          " not generatable from unit kernel " + std::to_string(cfg.k_u));
  const size_t want = chunk_count(layer, cfg.c_u);
  if (chunks.ndim() != 2 || chunks.extent(0) != want || chunks.extent(1) != cfg.n_z)
    throw GenerationError("generate_layer: chunks " + shape_str(chunks.shape()) + ", need " +
                          shape_str({want, cfg.n_z}));
  Tensor<T> hidden = linear(chunks, h.w_in, h.b_in);          // [D, d_h]
  Tensor<T> units = add_rowvec(matmul(hidden, h.w_out), h.b_out);  // [D, unit]
  Tensor<T> full = assemble_units(units, layer.c_out, layer.c_in, cfg.c_u, cfg.k_u);
  if (layer.k == cfg.k_u) return full;
  return kernel_reduce(full, cfg.reduction);
}

template <typename T>
ParamBundle<T> generate_all(const Hypernet<T>& h, const EmbeddingSet<T>& z,
                            const BackbonePlan& plan, const ParamBundle<T>& direct) {
  if (z.layer_indices != plan.generated_layers) {
    std::string got = "[";
    for (size_t i = 0; i < z.layer_indices.size(); ++i)
      got += (i ? "," : "") + std::to_string(z.layer_indices[i]);
    throw GenerationError("generate_all: embedding layers " + got +
                          "] do not match the plan's generated layers");
  }
  ParamBundle<T> bundle = direct;  // entry vectors copied, tensor handles shared
  for (size_t e = 0; e < z.layers.size(); ++e) {
    const size_t li = z.layer_indices[e];
    Tensor<T> w = generate_layer(h, z.layers[e], plan.layers[li]);
    bundle.params.push_back({param_name(li, "conv.weight"), li, w, true});
  }
  return bundle;
}

size_t member_param_count(const BackbonePlan& plan, const HypernetConfig& cfg) {
  const size_t unit = cfg.c_u * cfg.c_u * cfg.k_u * cfg.k_u;
  size_t total = cfg.d_h * cfg.n_z + cfg.d_h + cfg.d_h * unit + unit;
  for (size_t li : plan.generated_layers)
    total += chunk_count(plan.layers[li], cfg.c_u) * cfg.n_z;
  return total + count_params(plan, ParamPartition::direct);
}

#define PSAT_INSTANTIATE(T)                                                                  \
  template struct Member<T>;                                                                 \
  template Member<T> init_member(const BackbonePlan&, const HypernetConfig&, uint64_t,       \
                                 std::string);                                               \
  template Tensor<T> generate_layer(const Hypernet<T>&, const Tensor<T>&, const LayerSpec&); \
  template ParamBundle<T> generate_all(const Hypernet<T>&, const EmbeddingSet<T>&,           \
                                       const BackbonePlan&, const ParamBundle<T>&);

PSAT_INSTANTIATE(float)
PSAT_INSTANTIATE(double)

#undef PSAT_INSTANTIATE

}  // namespace psat
