#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "psat/backbone.hpp"
#include "psat/ensemble.hpp"
#include "psat/errors.hpp"
#include "psat/rng.hpp"
#include "psat/training.hpp"

using namespace psat;
using testsupport::random_tensor;

namespace {

// fc-only head over a 1x2x2 input; logits are fully controlled by fc params.
BackbonePlan head_plan() {
  PlanDesc d;
  d.in_c = 1;
  d.in_h = 2;
  d.in_w = 2;
  LayerDesc l;
  l.kind = LayerKind::fc;
  l.out_features = 2;
  d.layers = {l};
  return build_plan(d, 8);
}

// Member whose logits are the constant `bias` regardless of input.
template <typename T>
Member<T> constant_member(const BackbonePlan& plan, std::vector<T> bias, uint64_t seed) {
  Member<T> m = init_member<T>(plan, HypernetConfig{}, seed, "inf");
  for (T& v : m.direct.get(0, "fc.weight").values()) v = 0;
  m.direct.get(0, "fc.bias").values() = std::move(bias);
  return m;
}

// Small conv net with distinct random members, for oracle comparisons.
template <typename T>
AggregatedModel<T> random_aggregate(size_t members, uint64_t seed) {
  PlanDesc d;
  d.in_c = 1;
  d.in_h = 4;
  d.in_w = 4;
  LayerDesc c;
  c.kind = LayerKind::conv;
  c.c_out = 3;
  c.k = 3;
  c.stride = 1;
  c.padding = 1;
  LayerDesc r;
  r.kind = LayerKind::relu;
  LayerDesc p;
  p.kind = LayerKind::avgpool;
  p.window = 4;
  LayerDesc f;
  f.kind = LayerKind::fc;
  f.out_features = 4;
  AggregatedModel<T> agg;
  agg.plan = build_plan({1, 4, 4, {c, r, p, f}}, 8);
  for (size_t i = 0; i < members; ++i) {
    Member<T> m = init_member<T>(agg.plan, HypernetConfig{}, seed + i, "m");
    RandomStream rs(seed + 100 + i);
    for (auto& e : m.direct.params)
      for (T& v : e.t.values()) v = T(rs.uniform(-1, 1));
    agg.members.push_back(std::move(m));
  }
  return agg;
}

}  // namespace

TEST_CASE("entropy hits the closed-form symmetric values") {
  std::vector<double> uniform10(10, 0.1);
  CHECK(entropy(uniform10) == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  std::vector<double> onehot = {0, 0, 1, 0};
  CHECK(entropy(onehot) == 0.0);

  std::vector<double> binary = {0.5, 0.5};
  CHECK(entropy(binary) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  std::vector<float> skew = {0.9f, 0.1f};
  CHECK(entropy(skew) ==
        doctest::Approx(-0.9 * std::log(0.9) - 0.1 * std::log(0.1)).epsilon(1e-6));
}

TEST_CASE("entropy rejects out-of-contract inputs") {
  std::vector<double> negative = {1.2, -0.2};
  CHECK_THROWS_AS(entropy(negative), ContractError);
  std::vector<double> off_sum = {0.6, 0.6};
  CHECK_THROWS_AS(entropy(off_sum), ContractError);
  std::vector<double> nearly = {0.50004, 0.50001};  // within the 1e-4 slack
  CHECK_NOTHROW(entropy(nearly));
}

TEST_CASE("lowest-entropy selection matches an exhaustive recomputation oracle") {
  AggregatedModel<double> agg = random_aggregate<double>(3, 21);
  RandomStream rs(22);
  Tensor<double> x = random_tensor({6, 1, 4, 4}, rs, 0, 1);

  std::vector<Prediction<double>> got = predict_lowest_entropy(agg, x);
  REQUIRE(got.size() == 6);

  std::vector<Tensor<double>> probs;
  for (const auto& m : agg.members) probs.push_back(member_probs(agg.plan, m, x));

  for (size_t i = 0; i < 6; ++i) {
    int best = 0;
    double best_h = 1e300;
    for (size_t m = 0; m < 3; ++m) {
      std::vector<double> row(probs[m].data() + i * 4, probs[m].data() + (i + 1) * 4);
      const double h = entropy(row);
      if (h < best_h) {
        best_h = h;
        best = int(m);
      }
    }
    CHECK(got[i].member_index == best);
    CHECK(got[i].entropy == doctest::Approx(best_h).epsilon(1e-12));
    std::vector<double> row(probs[best].data() + i * 4, probs[best].data() + (i + 1) * 4);
    CHECK(got[i].probs == row);
    double sum = 0;
    int argmax = 0;
    for (int c = 0; c < 4; ++c) {
      sum += row[c];
      if (row[c] > row[argmax]) argmax = c;
    }
    CHECK(got[i].label == argmax);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(got[i].entropy >= 0);
    CHECK(got[i].entropy <= std::log(4.0) + 1e-12);
  }
}

TEST_CASE("identical members tie to the earliest one") {
  AggregatedModel<double> agg = random_aggregate<double>(1, 5);
  agg.members.push_back(agg.members[0]);  // shared handles: bitwise-equal outputs
  agg.members.push_back(agg.members[0]);
  RandomStream rs(6);
  Tensor<double> x = random_tensor({4, 1, 4, 4}, rs, 0, 1);
  for (const auto& p : predict_lowest_entropy(agg, x)) CHECK(p.member_index == 0);
}

TEST_CASE("reversing member order relabels indices without changing predictions") {
  AggregatedModel<double> agg = random_aggregate<double>(3, 31);
  RandomStream rs(32);
  Tensor<double> x = random_tensor({8, 1, 4, 4}, rs, 0, 1);
  std::vector<Prediction<double>> fwd = predict_lowest_entropy(agg, x);

  AggregatedModel<double> rev;
  rev.plan = agg.plan;
  rev.hcfg = agg.hcfg;
  rev.members = {agg.members[2], agg.members[1], agg.members[0]};
  std::vector<Prediction<double>> bwd = predict_lowest_entropy(rev, x);

  for (size_t i = 0; i < fwd.size(); ++i) {
    CHECK(bwd[i].member_index == 2 - fwd[i].member_index);
    CHECK(bwd[i].label == fwd[i].label);
    CHECK(bwd[i].probs == fwd[i].probs);
  }
}

TEST_CASE("average inference takes the elementwise mean of member outputs") {
  AggregatedModel<double> agg = random_aggregate<double>(3, 41);
  RandomStream rs(42);
  Tensor<double> x = random_tensor({5, 1, 4, 4}, rs, 0, 1);

  std::vector<Prediction<double>> got = predict_average(agg, x);
  std::vector<Tensor<double>> probs;
  for (const auto& m : agg.members) probs.push_back(member_probs(agg.plan, m, x));

  for (size_t i = 0; i < 5; ++i) {
    CHECK(got[i].member_index == kEnsembleIndex);
    double sum = 0;
    for (int c = 0; c < 4; ++c) {
      const double mean =
          (probs[0].data()[i * 4 + c] + probs[1].data()[i * 4 + c] + probs[2].data()[i * 4 + c]) /
          3.0;
      CHECK(got[i].probs[c] == doctest::Approx(mean).epsilon(1e-9));
      sum += got[i].probs[c];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(got[i].entropy >= 0);
    CHECK(got[i].entropy <= std::log(4.0) + 1e-12);
  }
}

TEST_CASE("a singleton aggregate averages to the member itself") {
  AggregatedModel<double> agg = random_aggregate<double>(1, 51);
  RandomStream rs(52);
  Tensor<double> x = random_tensor({3, 1, 4, 4}, rs, 0, 1);
  std::vector<Prediction<double>> avg = predict_average(agg, x);
  Tensor<double> probs = member_probs(agg.plan, agg.members[0], x);
  for (size_t i = 0; i < 3; ++i)
    for (int c = 0; c < 4; ++c)
      CHECK(avg[i].probs[c] == doctest::Approx(probs.data()[i * 4 + c]).epsilon(1e-12));
}

TEST_CASE("opposed saturated members average to a coin flip that breaks low") {
  BackbonePlan plan = head_plan();
  AggregatedModel<float> agg;
  agg.plan = plan;
  agg.members.push_back(constant_member<float>(plan, {60.f, -60.f}, 1));
  agg.members.push_back(constant_member<float>(plan, {-60.f, 60.f}, 2));

  Tensor<float> x = Tensor<float>::full({2, 1, 2, 2}, 0.3f);
  std::vector<Prediction<float>> avg = predict_average(agg, x);
  for (const auto& p : avg) {
    CHECK(p.probs[0] == 0.5f);  // e^-100 underflows the f32 softmax exactly
    CHECK(p.probs[1] == 0.5f);
    CHECK(p.label == 0);  // argmax tie -> lowest class
    CHECK(p.entropy == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }

  // Both members are fully certain: zero entropy ties to the first.
  std::vector<Prediction<float>> low = predict_lowest_entropy(agg, x);
  for (const auto& p : low) {
    CHECK(p.member_index == 0);
    CHECK(p.label == 0);
    CHECK(p.entropy == 0.0f);
  }
}

TEST_CASE("an empty aggregate is rejected") {
  AggregatedModel<double> agg;
  agg.plan = head_plan();
  RandomStream rs(1);
  Tensor<double> x = random_tensor({1, 1, 2, 2}, rs, 0, 1);
  CHECK_THROWS_AS(predict_lowest_entropy(agg, x), EvalError);
  CHECK_THROWS_AS(predict_average(agg, x), EvalError);
}
