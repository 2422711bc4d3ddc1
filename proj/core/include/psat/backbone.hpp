#pragma once

#include <string>
#include <vector>

#include "psat/tensor.hpp"

namespace psat {

enum class LayerKind { conv, batchnorm, relu, maxpool, avgpool, fc, add };

std::string layer_kind_name(LayerKind k);

// Plan as described by config: channel counts downstream of the input are
// inferred during build_plan, only the requested extents appear here.
struct LayerDesc {
  LayerKind kind = LayerKind::relu;
  size_t c_out = 0, k = 0, stride = 1, padding = 0;  // conv
  bool generated = false;
  size_t window = 0, pool_stride = 0;  // pools
  size_t out_features = 0;             // fc
  int from = -1;                       // add: earlier layer index, -1 = plan input
};

struct PlanDesc {
  size_t in_c = 0, in_h = 0, in_w = 0;
  std::vector<LayerDesc> layers;
};

struct LayerSpec {
  LayerKind kind;
  size_t c_out = 0, c_in = 0, k = 0, stride = 1, padding = 0;
  bool generated = false;
  bool bias = false;  // convs directly followed by batchnorm carry none
  size_t channels = 0;                 // batchnorm
  size_t window = 0, pool_stride = 0;  // pools
  size_t in_features = 0, out_features = 0;  // fc
  int from = -1;                             // add
  size_t out_c = 0, out_h = 0, out_w = 0;    // propagated output shape
};

struct BackbonePlan {
  std::vector<LayerSpec> layers;
  size_t num_classes = 0;
  size_t in_c = 0, in_h = 0, in_w = 0;
  size_t unit_channels = 0;  // C_u the generated layers were validated against
  std::vector<size_t> generated_layers;  // indices into layers
};

// Validates divisibility of generated convs by unit_channels, k in {1,3},
// first conv never generated, exactly one fc head (the last layer), and
// propagates shapes.
BackbonePlan build_plan(const PlanDesc& desc, size_t unit_channels);

// Inverse of build_plan up to defaulting: build_plan(plan_desc(p), u) == p.
PlanDesc plan_desc(const BackbonePlan& plan);

enum class ParamPartition { all, generated, direct };

// Scalar parameter count of the plan itself (BN running stats excluded).
size_t count_params(const BackbonePlan& plan, ParamPartition which);

template <typename T>
struct BundleEntry {
  std::string name;
  size_t layer = 0;
  Tensor<T> t;
  bool generated = false;
};

// Parameters plus BN running-stat buffers for one forward-capable model.
// Entries are handles: a bundle assembled from a member shares the member's
// storage, so train-mode stat updates persist.
template <typename T>
struct ParamBundle {
  std::vector<BundleEntry<T>> params;
  std::vector<BundleEntry<T>> buffers;

  const Tensor<T>& get(size_t layer, const std::string& suffix) const;
  Tensor<T>& get(size_t layer, const std::string& suffix);
  const Tensor<T>& buffer(size_t layer, const std::string& suffix) const;
  Tensor<T>& buffer(size_t layer, const std::string& suffix);
  bool has(size_t layer, const std::string& suffix) const;
};

std::string param_name(size_t layer, const std::string& suffix);

enum class Mode { train, eval };

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// Shape/completeness-check the bundle against the plan. Forward calls this.
template <typename T>
void validate_bundle(const BackbonePlan& plan, const ParamBundle<T>& bundle);

// Logits [N, num_classes]. Train mode normalizes with batch statistics and
// updates the bundle's running stats in place; eval mode reads running stats
// and is safe to call concurrently.
template <typename T>
Tensor<T> forward(const BackbonePlan& plan, const ParamBundle<T>& bundle, const Tensor<T>& batch,
                  Mode mode);

}  // namespace psat
