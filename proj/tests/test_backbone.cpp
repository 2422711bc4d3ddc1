#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "psat/backbone.hpp"
#include "psat/errors.hpp"
#include "psat/hypernet.hpp"
#include "psat/rng.hpp"

using namespace psat;
using testsupport::random_tensor;

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

LayerDesc pool(LayerKind kind, size_t window, size_t stride = 0) {
  LayerDesc l;
  l.kind = kind;
  l.window = window;
  l.pool_stride = stride;
  return l;
}

LayerDesc fc(size_t out) {
  LayerDesc l;
  l.kind = LayerKind::fc;
  l.out_features = out;
  return l;
}

// The small all-direct plan used across these tests.
PlanDesc tiny_desc() {
  PlanDesc d;
  d.in_c = 1;
  d.in_h = 6;
  d.in_w = 6;
  d.layers = {conv(4, 3, 1, 1), bn(), rl(), pool(LayerKind::maxpool, 2), fc(3)};
  return d;
}

// Fill every parameter with values from one stream; buffers keep their init.
template <typename T>
ParamBundle<T> random_bundle(const BackbonePlan& plan, uint64_t seed) {
  ParamBundle<T> b = init_member<T>(plan, HypernetConfig{}, seed, "x").direct;
  RandomStream rs(seed + 1000);
  for (auto& e : b.params)
    for (T& v : e.t.values()) v = T(rs.uniform(-0.5, 0.5));
  return b;
}

}  // namespace

TEST_CASE("build_plan accepts the reference desk plan and finds generated layers") {
  PlanDesc d;
  d.in_c = 3;
  d.in_h = 16;
  d.in_w = 16;
  d.layers = {conv(16, 3, 1, 1),       bn(), rl(), conv(16, 3, 1, 1, true), bn(), rl(),
              conv(16, 3, 1, 1, true), bn(), rl(), pool(LayerKind::avgpool, 4), fc(3)};
  BackbonePlan plan = build_plan(d, 8);
  CHECK(plan.generated_layers.size() == 2);
  CHECK(plan.generated_layers[0] == 3);
  CHECK(plan.generated_layers[1] == 6);
  CHECK(plan.num_classes == 3);
  CHECK(plan.layers[0].bias == false);  // conv followed by batchnorm
}

TEST_CASE("build_plan rejects divisibility violations naming the numbers") {
  PlanDesc d;
  d.in_c = 3;
  d.in_h = 8;
  d.in_w = 8;
  d.layers = {conv(8, 3, 1, 1), bn(), rl(), conv(20, 3, 1, 1, true), bn(), rl(), fc(3)};
  try {
    build_plan(d, 8);
    FAIL("expected a plan error");
  } catch (const PlanError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("20") != std::string::npos);
    CHECK(msg.find("8") != std::string::npos);
  }
}

TEST_CASE("build_plan rejects a generated first conv and bad shapes") {
  PlanDesc d;
  d.in_c = 8;
  d.in_h = 8;
  d.in_w = 8;
  d.layers = {conv(8, 3, 1, 1, true), bn(), rl(), fc(3)};
  CHECK_THROWS_AS(build_plan(d, 8), PlanError);

  PlanDesc shrink;
  shrink.in_c = 1;
  shrink.in_h = 4;
  shrink.in_w = 4;
  shrink.layers = {conv(4, 3, 1, 0), rl(), conv(4, 3, 1, 0), rl(), fc(2)};
  // second conv sees 2x2 input, kernel 3 no longer fits
  CHECK_THROWS_AS(build_plan(shrink, 8), PlanError);

  PlanDesc nofc;
  nofc.in_c = 1;
  nofc.in_h = 4;
  nofc.in_w = 4;
  nofc.layers = {conv(4, 3, 1, 1), rl()};
  CHECK_THROWS_AS(build_plan(nofc, 8), PlanError);
}

TEST_CASE("plan_desc inverts build_plan") {
  PlanDesc d = tiny_desc();
  BackbonePlan plan = build_plan(d, 8);
  PlanDesc back = plan_desc(plan);
  BackbonePlan again = build_plan(back, 8);
  CHECK(again.layers.size() == plan.layers.size());
  for (size_t i = 0; i < plan.layers.size(); ++i) {
    CHECK(again.layers[i].kind == plan.layers[i].kind);
    CHECK(again.layers[i].c_out == plan.layers[i].c_out);
    CHECK(again.layers[i].out_h == plan.layers[i].out_h);
  }
}

TEST_CASE("count_params matches an explicit plan walk") {
  PlanDesc d;
  d.in_c = 3;
  d.in_h = 16;
  d.in_w = 16;
  d.layers = {conv(16, 3, 2, 1),       bn(), rl(), conv(32, 3, 1, 1, true), bn(), rl(),
              pool(LayerKind::avgpool, 2), fc(5)};
  BackbonePlan plan = build_plan(d, 8);

  size_t want_all = 0, want_gen = 0;
  for (const LayerSpec& l : plan.layers) {
    size_t n = 0;
    if (l.kind == LayerKind::conv) n = l.c_out * l.c_in * l.k * l.k + (l.bias ? l.c_out : 0);
    if (l.kind == LayerKind::batchnorm) n = 2 * l.channels;
    if (l.kind == LayerKind::fc) n = l.out_features * l.in_features + l.out_features;
    want_all += n;
    if (l.kind == LayerKind::conv && l.generated) want_gen += n;
  }
  CHECK(count_params(plan, ParamPartition::all) == want_all);
  CHECK(count_params(plan, ParamPartition::generated) == want_gen);
  CHECK(count_params(plan, ParamPartition::direct) == want_all - want_gen);
}

TEST_CASE("forward with all-zero parameters produces exactly zero logits") {
  BackbonePlan plan = build_plan(tiny_desc(), 8);
  ParamBundle<double> bundle = random_bundle<double>(plan, 1);
  for (auto& e : bundle.params)
    for (double& v : e.t.values()) v = 0.0;
  RandomStream rs(2);
  Tensor<double> x = random_tensor({2, 1, 6, 6}, rs, 0, 1);
  Tensor<double> logits = forward(plan, bundle, x, Mode::eval);
  CHECK(logits.shape() == std::vector<size_t>{2, 3});
  for (double v : logits.values()) CHECK(v == 0.0);
}

TEST_CASE("eval-mode forward treats examples independently") {
  BackbonePlan plan = build_plan(tiny_desc(), 8);
  ParamBundle<double> bundle = random_bundle<double>(plan, 3);
  RandomStream rs(4);
  Tensor<double> a = random_tensor({1, 1, 6, 6}, rs, 0, 1);
  Tensor<double> b = random_tensor({1, 1, 6, 6}, rs, 0, 1);

  std::vector<double> both = a.values();
  both.insert(both.end(), b.values().begin(), b.values().end());
  Tensor<double> batch = Tensor<double>::from({2, 1, 6, 6}, both);

  Tensor<double> la = forward(plan, bundle, a, Mode::eval);
  Tensor<double> lb = forward(plan, bundle, b, Mode::eval);
  Tensor<double> lboth = forward(plan, bundle, batch, Mode::eval);
  for (size_t j = 0; j < 3; ++j) {
    CHECK(lboth.values()[j] == la.values()[j]);
    CHECK(lboth.values()[3 + j] == lb.values()[j]);
  }

  // duplicated example, duplicated row
  std::vector<double> dup = a.values();
  dup.insert(dup.end(), a.values().begin(), a.values().end());
  Tensor<double> ldup = forward(plan, bundle, Tensor<double>::from({2, 1, 6, 6}, dup), Mode::eval);
  for (size_t j = 0; j < 3; ++j) CHECK(ldup.values()[j] == ldup.values()[3 + j]);
}

TEST_CASE("hand-computed logits of a one-conv one-fc plan") {
  // 1x1 conv with weight 2, input [[1,2],[3,4]], avgpool over 2x2 -> 5,
  // fc weights [[1],[−1]], bias [0.5, −0.5] -> logits [5.5, −5.5].
  PlanDesc d;
  d.in_c = 1;
  d.in_h = 2;
  d.in_w = 2;
  d.layers = {conv(1, 1, 1, 0), pool(LayerKind::avgpool, 2), fc(2)};
  BackbonePlan plan = build_plan(d, 8);

  ParamBundle<double> bundle = random_bundle<double>(plan, 5);
  bundle.get(0, "conv.weight").values() = {2.0};
  bundle.get(0, "conv.bias").values() = {0.0};
  bundle.get(2, "fc.weight").values() = {1.0, -1.0};
  bundle.get(2, "fc.bias").values() = {0.5, -0.5};

  Tensor<double> x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> logits = forward(plan, bundle, x, Mode::eval);
  CHECK(logits.values()[0] == doctest::Approx(5.5).epsilon(1e-12));
  CHECK(logits.values()[1] == doctest::Approx(-5.5).epsilon(1e-12));
}

TEST_CASE("batchnorm composes batch statistics in train mode") {
  // One BN layer between conv(identity) and fc(identity-ish readout):
  // train-mode output is (x - mean) / sqrt(var + eps) * scale + shift.
  PlanDesc d;
  d.in_c = 1;
  d.in_h = 1;
  d.in_w = 1;
  d.layers = {conv(1, 1, 1, 0), bn(), fc(1)};
  BackbonePlan plan = build_plan(d, 8);
  ParamBundle<double> bundle = random_bundle<double>(plan, 6);
  bundle.get(0, "conv.weight").values() = {1.0};
  bundle.get(1, "bn.scale").values() = {2.0};
  bundle.get(1, "bn.shift").values() = {0.25};
  bundle.get(2, "fc.weight").values() = {1.0};
  bundle.get(2, "fc.bias").values() = {0.0};

  Tensor<double> x = Tensor<double>::from({2, 1, 1, 1}, {1.0, 3.0});
  Tensor<double> y = forward(plan, bundle, x, Mode::train);
  const double mean = 2.0, var = 1.0;  // biased variance of {1,3}
  const double n0 = (1.0 - mean) / std::sqrt(var + kBnEps);
  const double n1 = (3.0 - mean) / std::sqrt(var + kBnEps);
  CHECK(y.values()[0] == doctest::Approx(2.0 * n0 + 0.25).epsilon(1e-9));
  CHECK(y.values()[1] == doctest::Approx(2.0 * n1 + 0.25).epsilon(1e-9));

  // Running stats moved toward the batch: m <- 0.9*0 + 0.1*mean.
  CHECK(bundle.buffer(1, "bn.running_mean").values()[0] == doctest::Approx(0.1 * mean));
  // Unbiased variance of {1,3} is 2.
  CHECK(bundle.buffer(1, "bn.running_var").values()[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0));
}

TEST_CASE("validate_bundle rejects missing and misshaped entries") {
  BackbonePlan plan = build_plan(tiny_desc(), 8);
  ParamBundle<double> good = random_bundle<double>(plan, 7);
  CHECK_NOTHROW(validate_bundle(plan, good));

  ParamBundle<double> missing = good;
  missing.params.erase(missing.params.begin());
  CHECK_THROWS_AS(validate_bundle(plan, missing), BundleError);

  ParamBundle<double> bad = random_bundle<double>(plan, 8);
  bad.get(0, "conv.weight") = Tensor<double>::zeros({4, 1, 2, 2});
  CHECK_THROWS_AS(validate_bundle(plan, bad), BundleError);
}

TEST_CASE("gradients flow through the full forward") {
  BackbonePlan plan = build_plan(tiny_desc(), 8);
  ParamBundle<double> bundle = random_bundle<double>(plan, 9);
  RandomStream rs(10);
  Tensor<double> x = random_tensor({2, 1, 6, 6}, rs, 0, 1);
  std::vector<int> labels = {0, 2};

  std::vector<Tensor<double>> leaves;
  for (auto& e : bundle.params) leaves.push_back(e.t);

  auto f = [&](const std::vector<Tensor<double>>&) {
    return cross_entropy(forward(plan, bundle, x, Mode::eval), labels);
  };
  CHECK(testsupport::gradcheck_rel_err(f, leaves) < 1e-6);
}
