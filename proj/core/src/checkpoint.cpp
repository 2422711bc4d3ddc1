#include "psat/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "config_json.hpp"
#include "psat/errors.hpp"

namespace psat {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace {

using cfgjson::json;

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos)
    throw FormatError("config_hash \"" + s + "\" is not 16 hex digits");
  return std::strtoull(s.c_str(), nullptr, 16);
}

// Every persisted tensor of the model, in the fixed file order. Handles are
// passed by value, so a callback may write through them into shared storage.
template <typename T, typename F>
void for_each_tensor(const AggregatedModel<T>& model, F fn) {
  for (size_t i = 0; i < model.members.size(); ++i) {
    const Member<T>& m = model.members[i];
    const std::string p = "member" + std::to_string(i) + ".";
    fn(p + "hyper.w_in", m.hyper.w_in);
    fn(p + "hyper.b_in", m.hyper.b_in);
    fn(p + "hyper.w_out", m.hyper.w_out);
    fn(p + "hyper.b_out", m.hyper.b_out);
    for (size_t e = 0; e < m.emb.layers.size(); ++e)
      fn(p + "emb.layer" + std::to_string(m.emb.layer_indices[e]), m.emb.layers[e]);
    for (const auto& entry : m.direct.params) fn(p + entry.name, entry.t);
    for (const auto& entry : m.direct.buffers) fn(p + "buffer." + entry.name, entry.t);
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const AggregatedModel<T>& model,
                     uint64_t config_hash, const std::string& config_json) {
  if (model.members.empty()) throw BundleError("cannot save an aggregate with no members");

  json tensors = json::array();
  size_t offset = 0;
  for_each_tensor(model, [&](const std::string& name, Tensor<T> t) {
    const size_t nbytes = t.numel() * sizeof(T);
    tensors.push_back(json{{"name", name},
                           {"dtype", dtype_name<T>()},
                           {"shape", t.shape()},
                           {"offset", offset},
                           {"nbytes", nbytes}});
    offset += nbytes;
  });

  json members = json::array();
  for (const auto& m : model.members) members.push_back(json{{"tag", m.tag}});

  json header{{"config", nullptr},
              {"config_hash", hex64(config_hash)},
              {"dtype", dtype_name<T>()},
              {"hypernet", cfgjson::hypernet_to_json(model.hcfg)},
              {"members", members},
              {"plan", cfgjson::plan_to_json(plan_desc(model.plan))},
              {"tensors", tensors}};
  if (!config_json.empty()) {
    try {
      header["config"] = json::parse(config_json);
    } catch (const json::parse_error& e) {
      throw FormatError(std::string("embedded config is not valid JSON: ") + e.what());
    }
  }
  const std::string head = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write("PSAT", 4);
  const uint32_t version = kCheckpointVersion;
  f.write(reinterpret_cast<const char*>(&version), 4);
  const uint64_t head_len = head.size();
  f.write(reinterpret_cast<const char*>(&head_len), 8);
  f.write(head.data(), std::streamsize(head.size()));
  for_each_tensor(model, [&](const std::string&, Tensor<T> t) {
    f.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.numel() * sizeof(T)));
  });
  if (!f) throw IoError("write failed: " + path);
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (bytes.size() < 16) throw FormatError(path + ": too short for a checkpoint");
  if (std::memcmp(bytes.data(), "PSAT", 4) != 0) throw FormatError(path + ": bad magic");
  uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  uint64_t head_len = 0;
  std::memcpy(&head_len, bytes.data() + 8, 8);
  if (16 + head_len > bytes.size())
    throw FormatError(path + ": header length " + std::to_string(head_len) + " overflows file");
  const char* payload = bytes.data() + 16 + head_len;
  const size_t payload_size = bytes.size() - 16 - head_len;

  json header;
  try {
    header = json::parse(std::string(bytes.data() + 16, head_len));
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": header is not valid JSON: " + e.what());
  }

  LoadedCheckpoint<T> out;
  try {
    cfgjson::check_keys(header, "header",
                        {"config", "config_hash", "dtype", "hypernet", "members", "plan",
                         "tensors"});
    const std::string dtype =
        cfgjson::str_at(cfgjson::need(header, "header", "dtype"), "header.dtype");
    if (dtype != dtype_name<T>())
      throw FormatError(path + ": holds " + dtype + " tensors, load requested " +
                        dtype_name<T>());
    out.config_hash =
        parse_hex64(cfgjson::str_at(cfgjson::need(header, "header", "config_hash"),
                                    "header.config_hash"));
    const json& cfg = cfgjson::need(header, "header", "config");
    if (!cfg.is_null()) out.config_json = cfg.dump();

    const HypernetConfig hcfg = cfgjson::hypernet_from_json(
        cfgjson::need(header, "header", "hypernet"), "header.hypernet");
    const PlanDesc desc =
        cfgjson::plan_from_json(cfgjson::need(header, "header", "plan"), "header.plan");
    const BackbonePlan plan = build_plan(desc, hcfg.c_u);

    const json& members = cfgjson::need(header, "header", "members");
    if (!members.is_array() || members.empty())
      throw FormatError(path + ": header lists no members");

    // Tensor table, keyed by name.
    const json& table = cfgjson::need(header, "header", "tensors");
    if (!table.is_array()) throw FormatError(path + ": tensor table is not an array");
    struct Entry {
      std::vector<size_t> shape;
      size_t offset = 0, nbytes = 0;
      bool used = false;
    };
    std::vector<std::pair<std::string, Entry>> entries;
    for (size_t i = 0; i < table.size(); ++i) {
      const std::string tp = "header.tensors[" + std::to_string(i) + "]";
      const json& o = table[i];
      cfgjson::check_keys(o, tp, {"name", "dtype", "shape", "offset", "nbytes"});
      Entry e;
      const std::string name = cfgjson::str_at(cfgjson::need(o, tp, "name"), tp + ".name");
      if (cfgjson::str_at(cfgjson::need(o, tp, "dtype"), tp + ".dtype") != dtype)
        throw FormatError(path + ": tensor " + name + " dtype differs from header dtype");
      const json& shape = cfgjson::need(o, tp, "shape");
      if (!shape.is_array()) throw FormatError(path + ": tensor " + name + " shape not an array");
      size_t numel = 1;
      for (const auto& s : shape) {
        e.shape.push_back(cfgjson::uint_at(s, tp + ".shape[]"));
        numel *= e.shape.back();
      }
      e.offset = cfgjson::uint_at(cfgjson::need(o, tp, "offset"), tp + ".offset");
      e.nbytes = cfgjson::uint_at(cfgjson::need(o, tp, "nbytes"), tp + ".nbytes");
      if (e.nbytes != numel * sizeof(T))
        throw FormatError(path + ": tensor " + name + " declares " + std::to_string(e.nbytes) +
                          " bytes for shape " + shape_str(e.shape));
      if (e.offset > payload_size || e.offset + e.nbytes > payload_size)
        throw FormatError(path + ": tensor " + name + " offset " + std::to_string(e.offset) +
                          " overflows the payload");
      for (const auto& [other, oe] : entries)
        if (e.offset < oe.offset + oe.nbytes && oe.offset < e.offset + e.nbytes)
          throw FormatError(path + ": tensors " + other + " and " + name + " overlap");
      entries.emplace_back(name, e);
    }

    // Rebuild members as freshly initialized skeletons, then overwrite every
    // tensor from the payload; the skeleton fixes order and expected shapes.
    out.model.plan = plan;
    out.model.hcfg = hcfg;
    size_t expected_end = 0;
    for (size_t i = 0; i < members.size(); ++i) {
      const std::string mp = "header.members[" + std::to_string(i) + "]";
      cfgjson::check_keys(members[i], mp, {"tag"});
      const std::string tag =
          cfgjson::str_at(cfgjson::need(members[i], mp, "tag"), mp + ".tag");
      out.model.members.push_back(init_member<T>(plan, hcfg, 0, tag));
    }
    for_each_tensor(out.model, [&](const std::string& name, Tensor<T> t) {
      Entry* found = nullptr;
      for (auto& [n, e] : entries)
        if (n == name) {
          found = &e;
          break;
        }
      if (!found) throw FormatError(path + ": missing tensor " + name);
      if (found->used) throw FormatError(path + ": duplicate tensor " + name);
      found->used = true;
      if (found->shape != t.shape())
        throw FormatError(path + ": tensor " + name + " has shape " + shape_str(found->shape) +
                          ", expected " + shape_str(t.shape()));
      if (found->offset != expected_end)
        throw FormatError(path + ": tensor " + name + " at offset " +
                          std::to_string(found->offset) + ", expected " +
                          std::to_string(expected_end) + " (payload must be tightly packed)");
      std::memcpy(t.data(), payload + found->offset, found->nbytes);
      expected_end = found->offset + found->nbytes;
    });
    for (const auto& [name, e] : entries)
      if (!e.used) throw FormatError(path + ": unexpected tensor " + name);
    if (expected_end != payload_size)
      throw FormatError(path + ": payload has " + std::to_string(payload_size) +
                        " bytes, tensor table covers " + std::to_string(expected_end));
  } catch (const ConfigError& e) {
    throw FormatError(path + ": corrupt header: " + e.what());
  } catch (const PlanError& e) {
    throw FormatError(path + ": corrupt header: " + e.what());
  }
  return out;
}

#define PSAT_INSTANTIATE(T)                                                                \
  template void save_checkpoint(const std::string&, const AggregatedModel<T>&, uint64_t,   \
                                const std::string&);                                       \
  template LoadedCheckpoint<T> load_checkpoint(const std::string&);

PSAT_INSTANTIATE(float)
PSAT_INSTANTIATE(double)

#undef PSAT_INSTANTIATE

}  // namespace psat
