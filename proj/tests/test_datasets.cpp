#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "psat/datasets.hpp"
#include "psat/errors.hpp"
#include "psat/rng.hpp"
#include "psat/tensor.hpp"

using namespace psat;

namespace {

SynthConfig small_cfg(SynthKind kind, double noise, uint64_t seed) {
  SynthConfig c;
  c.kind = kind;
  c.classes = 3;
  c.channels = 1;
  c.height = 8;
  c.width = 8;
  c.n_per_class = 12;
  c.noise_std = noise;
  c.seed = seed;
  return c;
}

std::string temp_path(const std::string& name) {
  return std::string("/tmp/psat_dataset_test_") + name;
}

}  // namespace

TEST_CASE("synthetic generation is bitwise deterministic in the seed") {
  for (SynthKind kind : {SynthKind::blobs, SynthKind::stripes, SynthKind::checker}) {
    auto [tr1, te1] = synth_generate<float>(small_cfg(kind, 0.1, 7));
    auto [tr2, te2] = synth_generate<float>(small_cfg(kind, 0.1, 7));
    CHECK(tr1.x.values() == tr2.x.values());
    CHECK(te1.x.values() == te2.x.values());
    CHECK(tr1.y == tr2.y);
    CHECK(te1.y == te2.y);

    auto [tr3, te3] = synth_generate<float>(small_cfg(kind, 0.1, 8));
    CHECK(tr1.x.values() != tr3.x.values());

    CHECK(tr1.x.values() != te1.x.values());  // splits use disjoint streams
    CHECK(tr1.split == "train");
    CHECK(te1.split == "test");
    CHECK(tr1.provenance.find(synth_kind_name(kind)) == 0);
  }
}

TEST_CASE("zero noise collapses every class to a single repeated image") {
  for (SynthKind kind : {SynthKind::blobs, SynthKind::stripes, SynthKind::checker}) {
    auto [train, test] = synth_generate<double>(small_cfg(kind, 0.0, 3));
    const size_t per = train.x.numel() / train.size();
    for (size_t ex = 0; ex < train.size(); ++ex) {
      const size_t ref = size_t(train.y[ex]);  // first examples cycle the classes
      for (size_t k = 0; k < per; ++k)
        CHECK(train.x.data()[ex * per + k] == train.x.data()[ref * per + k]);
    }
    // Without noise the splits are the same deterministic patterns.
    CHECK(train.x.values() == test.x.values());
  }
}

TEST_CASE("labels cycle uniformly and pixels stay inside the unit interval") {
  SynthConfig cfg = small_cfg(SynthKind::blobs, 3.0, 11);  // huge noise forces clipping
  auto [train, test] = synth_generate<float>(cfg);
  REQUIRE(train.size() == cfg.classes * cfg.n_per_class);

  std::vector<int> hist(cfg.classes, 0);
  for (int y : train.y) {
    REQUIRE(y >= 0);
    REQUIRE(y < int(cfg.classes));
    ++hist[size_t(y)];
  }
  for (int h : hist) CHECK(h == int(cfg.n_per_class));

  bool low = false, high = false;
  for (float v : train.x.values()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
    low |= v == 0.0f;
    high |= v == 1.0f;
  }
  CHECK(low);   // clipping actually occurred at both ends
  CHECK(high);
}

TEST_CASE("generation rejects degenerate shapes") {
  SynthConfig cfg = small_cfg(SynthKind::blobs, 0.1, 0);
  cfg.classes = 1;
  CHECK_THROWS_AS(synth_generate<float>(cfg), ContractError);
  cfg = small_cfg(SynthKind::blobs, 0.1, 0);
  cfg.height = 0;
  CHECK_THROWS_AS(synth_generate<float>(cfg), ContractError);
  CHECK_THROWS_AS(synth_generate_one<float>(small_cfg(SynthKind::blobs, 0.1, 0), "validation"),
                  ContractError);
  CHECK_THROWS_AS(synth_kind_from_name("spirals"), ConfigError);
}

TEST_CASE("a logistic probe separates low-noise blobs") {
  for (uint64_t seed : {0, 1, 2}) {
    SynthConfig cfg;
    cfg.kind = SynthKind::blobs;
    cfg.classes = 3;
    cfg.channels = 1;
    cfg.height = 16;
    cfg.width = 16;
    cfg.n_per_class = 100;
    cfg.noise_std = 0.05;
    cfg.seed = seed;
    auto [train, test] = synth_generate<double>(cfg);

    const size_t n = train.size(), dim = train.x.numel() / n;
    Tensor<double> xtr = reshape(train.x, {n, dim});
    Tensor<double> w = Tensor<double>::zeros({dim, 3}, true);
    Tensor<double> b = Tensor<double>::zeros({3}, true);
    for (int it = 0; it < 150; ++it) {
      Tape<double> tape;
      Tape<double>::Scope scope(tape);
      Tensor<double> loss = cross_entropy(add_rowvec(matmul(xtr, w), b), train.y);
      tape.backward(loss);
      for (size_t k = 0; k < w.numel(); ++k) w.values()[k] -= 0.5 * w.grad()[k];
      for (size_t k = 0; k < 3; ++k) b.values()[k] -= 0.5 * b.grad()[k];
      w.zero_grad();
      b.zero_grad();
    }

    const size_t m = test.size();
    Tensor<double> logits = add_rowvec(matmul(reshape(test.x, {m, dim}), w), b);
    size_t correct = 0;
    for (size_t i = 0; i < m; ++i) {
      const double* row = logits.data() + i * 3;
      int best = 0;
      for (int c = 1; c < 3; ++c)
        if (row[c] > row[best]) best = c;
      if (best == test.y[i]) ++correct;
    }
    INFO("seed " << seed);
    CHECK(double(correct) / double(m) >= 0.95);
  }
}

TEST_CASE("the binary image reader parses a hand-built record byte for byte") {
  const std::string path = temp_path("one_record.bin");
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.put(char(7));
    for (size_t i = 0; i < 3072; ++i) f.put(char(0xFF));
  }
  Dataset<float> d = read_cifar10_binary<float>({path}, "test");
  REQUIRE(d.size() == 1);
  CHECK(d.y[0] == 7);
  CHECK(d.num_classes == 10);
  CHECK(d.x.shape() == std::vector<size_t>{1, 3, 32, 32});
  for (float v : d.x.values()) CHECK(v == 1.0f);
  std::remove(path.c_str());
}

TEST_CASE("write-then-read of the binary image format is the identity") {
  RandomStream rs(77);
  Dataset<float> d;
  d.num_classes = 10;
  d.split = "train";
  std::vector<float> px(2 * 3 * 32 * 32);
  for (float& v : px) v = float(size_t(rs.uniform() * 256) % 256) / 255.0f;
  d.x = Tensor<float>::from({2, 3, 32, 32}, std::move(px));
  d.y = {3, 9};

  const std::string path = temp_path("roundtrip.bin");
  write_cifar10_binary(d, path);
  Dataset<float> back = read_cifar10_binary<float>({path}, "train");
  CHECK(back.x.values() == d.x.values());
  CHECK(back.y == d.y);
  std::remove(path.c_str());
}

TEST_CASE("the binary image reader fails closed on malformed files") {
  const std::string truncated = temp_path("truncated.bin");
  {
    std::ofstream f(truncated, std::ios::binary | std::ios::trunc);
    for (size_t i = 0; i < 3072; ++i) f.put(char(1));  // one byte short of a record
  }
  CHECK_THROWS_WITH_AS(read_cifar10_binary<float>({truncated}, "test"),
                       doctest::Contains("offset 0"), FormatError);
  std::remove(truncated.c_str());

  const std::string badlabel = temp_path("badlabel.bin");
  {
    std::ofstream f(badlabel, std::ios::binary | std::ios::trunc);
    f.put(char(10));
    for (size_t i = 0; i < 3072; ++i) f.put(char(0));
  }
  CHECK_THROWS_AS(read_cifar10_binary<float>({badlabel}, "test"), FormatError);
  std::remove(badlabel.c_str());

  CHECK_THROWS_AS(read_cifar10_binary<float>({temp_path("does_not_exist.bin")}, "test"), IoError);
}

TEST_CASE("multiple binary files concatenate in argument order") {
  const std::string a = temp_path("part_a.bin"), b = temp_path("part_b.bin");
  auto write_one = [](const std::string& path, int label, unsigned char fill) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.put(char(label));
    for (size_t i = 0; i < 3072; ++i) f.put(char(fill));
  };
  write_one(a, 1, 10);
  write_one(b, 2, 20);
  Dataset<float> d = read_cifar10_binary<float>({a, b}, "train");
  REQUIRE(d.size() == 2);
  CHECK(d.y == std::vector<int>{1, 2});
  CHECK(d.x.data()[0] == doctest::Approx(10.0 / 255.0));
  CHECK(d.x.data()[3072] == doctest::Approx(20.0 / 255.0));
  std::remove(a.c_str());
  std::remove(b.c_str());
}

TEST_CASE("random mirroring flips whole rows or leaves them untouched") {
  SynthConfig cfg = small_cfg(SynthKind::stripes, 0.2, 9);
  cfg.n_per_class = 40;
  Dataset<float> d = synth_generate_one<float>(cfg, "train");
  Tensor<float> flipped = Tensor<float>::from(d.x.shape(), d.x.values());
  RandomStream rs(123);
  random_hflip(flipped, rs);

  const size_t n = d.size(), hw = 8 * 8, wdt = 8;
  size_t changed = 0;
  for (size_t ex = 0; ex < n; ++ex) {
    const float* orig = d.x.data() + ex * hw;
    const float* got = flipped.data() + ex * hw;
    bool same = true, mirror = true;
    for (size_t i = 0; i < 8; ++i)
      for (size_t j = 0; j < wdt; ++j) {
        same &= got[i * wdt + j] == orig[i * wdt + j];
        mirror &= got[i * wdt + j] == orig[i * wdt + (wdt - 1 - j)];
      }
    CHECK((same || mirror));
    changed += same ? 0 : 1;
  }
  CHECK(changed > n / 4);  // a fair coin rarely strays this far
  CHECK(changed < 3 * n / 4);

  // Same seed, same decisions.
  Tensor<float> again = Tensor<float>::from(d.x.shape(), d.x.values());
  RandomStream rs2(123);
  random_hflip(again, rs2);
  CHECK(again.values() == flipped.values());
}
