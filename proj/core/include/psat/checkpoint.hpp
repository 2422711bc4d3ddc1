#pragma once

#include <cstdint>
#include <string>

#include "psat/training.hpp"

namespace psat {

inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
struct LoadedCheckpoint {
  AggregatedModel<T> model;
  uint64_t config_hash = 0;
  std::string config_json;  // canonical embedded run config, empty when absent
};

// Layout: "PSAT" magic, u32 LE version, u64 LE header length, UTF-8 JSON
// header (plan, hypernet config, member tags, config hash, optional embedded
// config, tensor table of name/dtype/shape/offset/nbytes), then the tightly
// packed little-endian payload. Generated conv weights are not stored; they
// come back from the hypernetwork. load(save(m)) restores every tensor
// exactly and save(load(f)) reproduces f byte for byte.
template <typename T>
void save_checkpoint(const std::string& path, const AggregatedModel<T>& model,
                     uint64_t config_hash = 0, const std::string& config_json = "");

// Fail-closed: any malformed header field, dtype mismatch, shape mismatch,
// missing/extra/overlapping tensor or out-of-bounds offset is a format error
// and nothing is returned.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path);

}  // namespace psat
