#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psat/backbone.hpp"
#include "psat/rng.hpp"
#include "psat/tensor.hpp"

namespace psat {

struct HypernetConfig {
  size_t n_z = 16;  // embedding width
  size_t d_h = 16;  // hidden width
  size_t c_u = 8;   // unit channels
  size_t k_u = 3;   // unit kernel
  KernelReduce reduction = KernelReduce::mean;
};

// Two linear maps shared by all generated layers of one member:
// h = z W_in^T + B_in, unit = h W_out + B_out.
template <typename T>
struct Hypernet {
  Tensor<T> w_in;   // [d_h, n_z]
  Tensor<T> b_in;   // [d_h]
  Tensor<T> w_out;  // [d_h, c_u*c_u*k_u*k_u]
  Tensor<T> b_out;  // [c_u*c_u*k_u*k_u]
  HypernetConfig cfg;

  size_t core_param_count() const {
    const size_t unit = cfg.c_u * cfg.c_u * cfg.k_u * cfg.k_u;
    return cfg.d_h * cfg.n_z + cfg.d_h + cfg.d_h * unit + unit;
  }
};

// One [D_l, n_z] chunk matrix per generated layer, in plan order.
template <typename T>
struct EmbeddingSet {
  std::vector<Tensor<T>> layers;
  std::vector<size_t> layer_indices;  // plan layer index per entry
};

// One PSAT member: hypernetwork, its embeddings, and the directly trained
// parameters (first conv, batchnorms, fc) with their running-stat buffers.
template <typename T>
struct Member {
  std::string tag;  // norm tag ("inf", "2", "1") or a strategy tag
  Hypernet<T> hyper;
  EmbeddingSet<T> emb;
  ParamBundle<T> direct;

  std::vector<Tensor<T>> trainables();  // stable order: hypernet, embeddings, direct
  size_t trainable_count();
};

// Embedding chunk count of a generated conv layer.
size_t chunk_count(const LayerSpec& layer, size_t c_u);

// Embeddings ~ N(0,1); weights fan-in-scaled normal (std 1/sqrt(fan_in));
// biases zero; BN scale 1 / shift 0, running stats (0,1). The draw order is
// fixed, so a seed fully determines the member.
template <typename T>
Member<T> init_member(const BackbonePlan& plan, const HypernetConfig& cfg, uint64_t seed,
                      std::string tag);

// Weight tensor for one generated layer from its chunk matrix.
template <typename T>
Tensor<T> generate_layer(const Hypernet<T>& h, const Tensor<T>& chunks, const LayerSpec& layer);

// Full bundle: generated weights from the hypernetwork, everything else
// passed through from `direct` (handles shared, not copied).
template <typename T>
ParamBundle<T> generate_all(const Hypernet<T>& h, const EmbeddingSet<T>& z,
                            const BackbonePlan& plan, const ParamBundle<T>& direct);

// |W_in|+|B_in|+|W_out|+|B_out| + sum_l D_l*n_z + count_params(plan, direct).
size_t member_param_count(const BackbonePlan& plan, const HypernetConfig& cfg);

}  // namespace psat
