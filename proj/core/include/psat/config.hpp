#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "psat/attacks.hpp"
#include "psat/backbone.hpp"
#include "psat/datasets.hpp"
#include "psat/hypernet.hpp"
#include "psat/training.hpp"

namespace psat {

struct DatasetSpec {
  std::string kind = "blobs";  // blobs | stripes | checker | cifar10
  size_t classes = 3;
  size_t channels = 1;
  size_t height = 16;
  size_t width = 16;
  size_t train_per_class = 200;
  size_t test_per_class = 100;
  double noise_std = 0.1;
  uint64_t seed = 0;
  std::vector<std::string> train_files, test_files;  // cifar10 only
};

// One experiment, fully described. The top-level seed drives training; the
// dataset keeps its own so data stays fixed across seed sweeps.
struct RunConfig {
  PlanDesc plan;
  HypernetConfig hypernet;
  PerturbationSet attacks = default_perturbation_set();
  TrainConfig train;
  DatasetSpec dataset;
  std::string out_dir = "runs/out";
  uint64_t seed = 0;
  std::string precision = "f32";  // f32 | f64

  void validate() const;
};

// Strict JSON parse: a key the schema does not know, anywhere in the tree,
// is rejected with its full path. `origin` prefixes error messages.
RunConfig parse_run_config(const std::string& text, const std::string& origin = "config");
RunConfig load_run_config(const std::string& path);

// Canonical form: sorted keys, shortest round-trip numbers, defaults made
// explicit. Equal configs have equal canonical dumps.
std::string run_config_canonical(const RunConfig& cfg);
uint64_t config_hash(const RunConfig& cfg);

uint64_t fnv1a64(const void* data, size_t n);

template <typename T>
std::pair<Dataset<T>, Dataset<T>> load_dataset(const RunConfig& cfg);

}  // namespace psat
