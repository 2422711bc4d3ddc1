#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "psat/rng.hpp"
#include "psat/tensor.hpp"

namespace psat {

// Images [N, C, H, W] with values in [0, 1], labels in [0, num_classes).
template <typename T>
struct Dataset {
  Tensor<T> x;
  std::vector<int> y;
  size_t num_classes = 0;
  std::string split;       // "train" or "test"
  std::string provenance;  // generator name + seed, or source path

  size_t size() const { return y.size(); }
};

enum class SynthKind { blobs, stripes, checker };

std::string synth_kind_name(SynthKind k);
SynthKind synth_kind_from_name(const std::string& s);

struct SynthConfig {
  SynthKind kind = SynthKind::blobs;
  size_t classes = 3;
  size_t channels = 1;
  size_t height = 16;
  size_t width = 16;
  size_t n_per_class = 200;  // per split
  double noise_std = 0.1;
  uint64_t seed = 0;
};

// Class-conditional deterministic pattern + gaussian pixel noise, clamped to
// [0, 1]. Train and test consume disjoint seed streams; labels cycle through
// the classes, so the histogram is exactly uniform. Example i's noise comes
// from its own stream, independent of every other example.
template <typename T>
std::pair<Dataset<T>, Dataset<T>> synth_generate(const SynthConfig& cfg);

// One split ("train" or "test") on its own; splits of different sizes stay
// mutually disjoint because each split owns a seed stream.
template <typename T>
Dataset<T> synth_generate_one(const SynthConfig& cfg, const std::string& split);

// Classic binary records: [1-byte label][1024 R][1024 G][1024 B], 32x32,
// pixels scaled to [0,1] by /255, order preserved across files.
template <typename T>
Dataset<T> read_cifar10_binary(const std::vector<std::string>& paths, std::string split);

// Inverse of the reader; read(write(d)) is the identity.
template <typename T>
void write_cifar10_binary(const Dataset<T>& d, const std::string& path);

// Mirrors each image along the width axis with probability 1/2.
template <typename T>
void random_hflip(Tensor<T>& batch, RandomStream& rs);

}  // namespace psat
