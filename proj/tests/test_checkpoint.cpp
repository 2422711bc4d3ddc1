#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "psat/backbone.hpp"
#include "psat/checkpoint.hpp"
#include "psat/errors.hpp"
#include "psat/hypernet.hpp"
#include "psat/rng.hpp"
#include "psat/tensor.hpp"
#include "psat/training.hpp"

using namespace psat;

namespace {

LayerDesc conv(size_t c_out, size_t k, size_t stride, size_t padding, bool generated = false) {
  LayerDesc l;
  l.kind = LayerKind::conv;
  l.c_out = c_out;
  l.k = k;
  l.stride = stride;
  l.padding = padding;
  l.generated = generated;
  return l;
}

LayerDesc bn() {
  LayerDesc l;
  l.kind = LayerKind::batchnorm;
  return l;
}

LayerDesc rl() {
  LayerDesc l;
  l.kind = LayerKind::relu;
  return l;
}

LayerDesc pool(LayerKind kind, size_t window) {
  LayerDesc l;
  l.kind = kind;
  l.window = window;
  return l;
}

LayerDesc fc(size_t out) {
  LayerDesc l;
  l.kind = LayerKind::fc;
  l.out_features = out;
  return l;
}

PlanDesc small_desc(size_t c_u) {
  PlanDesc d;
  d.in_c = 1;
  d.in_h = 8;
  d.in_w = 8;
  d.layers = {conv(c_u, 3, 1, 1), bn(), rl(), conv(c_u, 3, 2, 1, true),
              bn(), rl(), pool(LayerKind::avgpool, 4), fc(3)};
  return d;
}

// Three members with distinct random state in every tensor, buffers included.
template <typename T>
AggregatedModel<T> random_model(uint64_t seed) {
  HypernetConfig hcfg;
  hcfg.n_z = 4;
  hcfg.d_h = 3;
  hcfg.c_u = 2;
  hcfg.k_u = 3;
  AggregatedModel<T> m;
  m.plan = build_plan(small_desc(hcfg.c_u), hcfg.c_u);
  m.hcfg = hcfg;
  RandomStream rs(seed);
  const char* tags[] = {"inf", "2", "1"};
  for (int i = 0; i < 3; ++i) {
    Member<T> mem = init_member<T>(m.plan, hcfg, seed + uint64_t(i), tags[i]);
    for (Tensor<T>& t : mem.trainables())
      for (size_t k = 0; k < t.numel(); ++k) t.values()[k] = T(rs.uniform() * 2 - 1);
    for (auto& entry : mem.direct.buffers)
      for (size_t k = 0; k < entry.t.numel(); ++k)
        entry.t.values()[k] = T(rs.uniform() + 0.5);  // plausible running stats
    m.members.push_back(std::move(mem));
  }
  return m;
}

std::string temp_path(const std::string& name) {
  return std::string("/tmp/psat_checkpoint_test_") + name;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(bool(f));
  return std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), std::streamsize(bytes.size()));
}

template <typename T>
void check_same_model(AggregatedModel<T>& a, AggregatedModel<T>& b) {
  REQUIRE(a.members.size() == b.members.size());
  for (size_t i = 0; i < a.members.size(); ++i) {
    CHECK(a.members[i].tag == b.members[i].tag);
    auto ta = a.members[i].trainables(), tb = b.members[i].trainables();
    REQUIRE(ta.size() == tb.size());
    for (size_t k = 0; k < ta.size(); ++k) {
      CHECK(ta[k].shape() == tb[k].shape());
      CHECK(ta[k].values() == tb[k].values());
    }
    REQUIRE(a.members[i].direct.buffers.size() == b.members[i].direct.buffers.size());
    for (size_t k = 0; k < a.members[i].direct.buffers.size(); ++k) {
      CHECK(a.members[i].direct.buffers[k].name == b.members[i].direct.buffers[k].name);
      CHECK(a.members[i].direct.buffers[k].t.values() == b.members[i].direct.buffers[k].t.values());
    }
  }
}

}  // namespace

TEST_CASE("load restores every tensor, tag, hash and embedded config exactly") {
  AggregatedModel<float> m = random_model<float>(42);
  const std::string path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, m, 0x0123456789abcdefULL, R"({"run":{"note":"x"}})");

  LoadedCheckpoint<float> back = load_checkpoint<float>(path);
  CHECK(back.config_hash == 0x0123456789abcdefULL);
  CHECK(back.config_json == R"({"run":{"note":"x"}})");
  CHECK(back.model.hcfg.n_z == m.hcfg.n_z);
  CHECK(back.model.hcfg.d_h == m.hcfg.d_h);
  CHECK(back.model.plan.layers.size() == m.plan.layers.size());
  check_same_model(m, back.model);
  CHECK(back.model.find(Norm::l2).tag == "2");
  std::remove(path.c_str());
}

TEST_CASE("save of a loaded checkpoint reproduces the file byte for byte") {
  AggregatedModel<double> m = random_model<double>(7);
  const std::string p1 = temp_path("bytes1.ckpt"), p2 = temp_path("bytes2.ckpt");
  save_checkpoint(p1, m, 11, R"({"a":[1,2]})");
  LoadedCheckpoint<double> back = load_checkpoint<double>(p1);
  save_checkpoint(p2, back.model, back.config_hash, back.config_json);
  CHECK(slurp(p1) == slurp(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("a loaded model forwards identically to the one that was saved") {
  AggregatedModel<float> m = random_model<float>(99);
  const std::string path = temp_path("forward.ckpt");
  save_checkpoint(path, m);
  AggregatedModel<float> back = load_checkpoint<float>(path).model;

  RandomStream rs(5);
  std::vector<float> px(4 * 1 * 8 * 8);
  for (float& v : px) v = float(rs.uniform());
  Tensor<float> batch = Tensor<float>::from({4, 1, 8, 8}, std::move(px));
  for (size_t i = 0; i < m.members.size(); ++i) {
    const Member<float>& ma = m.members[i];
    const Member<float>& mb = back.members[i];
    Tensor<float> la = forward(m.plan, generate_all(ma.hyper, ma.emb, m.plan, ma.direct), batch,
                               Mode::eval);
    Tensor<float> lb = forward(back.plan, generate_all(mb.hyper, mb.emb, back.plan, mb.direct),
                               batch, Mode::eval);
    CHECK(la.values() == lb.values());
  }
  std::remove(path.c_str());
}

TEST_CASE("no bytes of a corrupted checkpoint are trusted") {
  AggregatedModel<float> m = random_model<float>(3);
  const std::string good = temp_path("good.ckpt"), bad = temp_path("bad.ckpt");
  save_checkpoint(good, m, 1, R"({"b":2})");
  const std::vector<char> bytes = slurp(good);

  SUBCASE("magic") {
    std::vector<char> b = bytes;
    b[0] = 'Q';
    spit(bad, b);
    CHECK_THROWS_WITH_AS(load_checkpoint<float>(bad), doctest::Contains("bad magic"), FormatError);
  }
  SUBCASE("version") {
    std::vector<char> b = bytes;
    b[4] = 9;
    spit(bad, b);
    CHECK_THROWS_WITH_AS(load_checkpoint<float>(bad), doctest::Contains("version"), FormatError);
  }
  SUBCASE("header length overflow") {
    std::vector<char> b = bytes;
    b[8] = char(0xFF);
    b[9] = char(0xFF);
    b[10] = char(0xFF);
    spit(bad, b);
    CHECK_THROWS_WITH_AS(load_checkpoint<float>(bad), doctest::Contains("overflows"), FormatError);
  }
  SUBCASE("header json") {
    std::vector<char> b = bytes;
    b[16] = 'X';  // first header byte; the header opens with '{'
    spit(bad, b);
    CHECK_THROWS_WITH_AS(load_checkpoint<float>(bad), doctest::Contains("not valid JSON"),
                         FormatError);
  }
  SUBCASE("truncated payload") {
    std::vector<char> b = bytes;
    b.resize(b.size() - 4);
    spit(bad, b);
    CHECK_THROWS_AS(load_checkpoint<float>(bad), FormatError);
  }
  SUBCASE("trailing junk") {
    std::vector<char> b = bytes;
    b.insert(b.end(), {1, 2, 3, 4});
    spit(bad, b);
    CHECK_THROWS_WITH_AS(load_checkpoint<float>(bad), doctest::Contains("tensor table covers"),
                         FormatError);
  }
  SUBCASE("dtype mismatch") {
    spit(bad, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(bad),
                         doctest::Contains("load requested f64"), FormatError);
  }
  SUBCASE("truncated before the payload") {
    std::vector<char> b = bytes;
    b.resize(10);
    spit(bad, b);
    CHECK_THROWS_WITH_AS(load_checkpoint<float>(bad), doctest::Contains("too short"), FormatError);
  }
  std::remove(good.c_str());
  std::remove(bad.c_str());
}

TEST_CASE("checkpoint io errors are reported as such") {
  CHECK_THROWS_AS(load_checkpoint<float>(temp_path("missing.ckpt")), IoError);
  AggregatedModel<float> empty;
  CHECK_THROWS_AS(save_checkpoint(temp_path("never.ckpt"), empty), BundleError);
}

TEST_CASE("a checkpoint without an embedded config loads with an empty one") {
  AggregatedModel<float> m = random_model<float>(1);
  const std::string path = temp_path("noconfig.ckpt");
  save_checkpoint(path, m);
  LoadedCheckpoint<float> back = load_checkpoint<float>(path);
  CHECK(back.config_hash == 0);
  CHECK(back.config_json.empty());
  std::remove(path.c_str());
}
