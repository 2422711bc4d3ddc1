#include "psat/ensemble.hpp"

#include <cmath>

#include "psat/errors.hpp"

namespace psat {

template <typename T>
T entropy(const std::vector<T>& probs) {
  double sum = 0;
  for (const T p : probs) {
    if (p < 0)
      throw ContractError("entropy: negative probability " + std::to_string(double(p)));
    sum += double(p);
  }
  if (std::abs(sum - 1.0) > 1e-4)
    throw ContractError("entropy: probabilities sum to " + std::to_string(sum) + ", expected 1");
  double h = 0;
  for (const T p : probs)
    if (p > 0) h -= double(p) * std::log(double(p));
  return static_cast<T>(h);
}

template <typename T>
Tensor<T> member_probs(const BackbonePlan& plan, const Member<T>& member, const Tensor<T>& x) {
  const ModelFn<T> model = attack_model(plan, member);
  return softmax_rows(model(x));
}

namespace {

template <typename T>
std::vector<Tensor<T>> all_member_probs(const AggregatedModel<T>& agg, const Tensor<T>& x) {
  if (agg.members.empty()) throw EvalError("aggregate has no members");
  std::vector<Tensor<T>> probs;
  probs.reserve(agg.members.size());
  for (const auto& m : agg.members) {
    try {
      probs.push_back(member_probs(agg.plan, m, x));
    } catch (const Error& e) {
      throw EvalError("member " + m.tag + ": " + e.what());
    }
  }
  return probs;
}

template <typename T>
int argmax_row(const T* row, size_t classes) {
  size_t best = 0;
  for (size_t c = 1; c < classes; ++c)
    if (row[c] > row[best]) best = c;  // ties keep the lowest class
  return int(best);
}

}  // namespace

template <typename T>
std::vector<Prediction<T>> predict_lowest_entropy(const AggregatedModel<T>& agg,
                                                  const Tensor<T>& x) {
  const std::vector<Tensor<T>> probs = all_member_probs(agg, x);
  const size_t n = x.extent(0);
  const size_t classes = probs[0].extent(1);
  std::vector<Prediction<T>> out(n);
  std::vector<T> row(classes);
  for (size_t i = 0; i < n; ++i) {
    size_t sel = 0;
    T sel_h = 0;
    for (size_t m = 0; m < probs.size(); ++m) {
      const T* r = probs[m].data() + i * classes;
      row.assign(r, r + classes);
      const T h = entropy(row);
      if (m == 0 || h < sel_h) {  // strict: ties keep the earliest member
        sel = m;
        sel_h = h;
      }
    }
    const T* r = probs[sel].data() + i * classes;
    out[i].probs.assign(r, r + classes);
    out[i].label = argmax_row(r, classes);
    out[i].member_index = int(sel);
    out[i].entropy = sel_h;
  }
  return out;
}

template <typename T>
std::vector<Prediction<T>> predict_average(const AggregatedModel<T>& agg, const Tensor<T>& x) {
  const std::vector<Tensor<T>> probs = all_member_probs(agg, x);
  const size_t n = x.extent(0);
  const size_t classes = probs[0].extent(1);
  const double inv = 1.0 / double(probs.size());
  std::vector<Prediction<T>> out(n);
  for (size_t i = 0; i < n; ++i) {
    std::vector<T> mean(classes);
    for (size_t c = 0; c < classes; ++c) {
      double s = 0;
      for (const auto& p : probs) s += double(p.data()[i * classes + c]);
      mean[c] = static_cast<T>(s * inv);
    }
    out[i].label = argmax_row(mean.data(), classes);
    out[i].entropy = entropy(mean);
    out[i].member_index = kEnsembleIndex;
    out[i].probs = std::move(mean);
  }
  return out;
}

#define PSAT_INSTANTIATE(T)                                                                  \
  template T entropy(const std::vector<T>&);                                                 \
  template Tensor<T> member_probs(const BackbonePlan&, const Member<T>&, const Tensor<T>&);  \
  template std::vector<Prediction<T>> predict_lowest_entropy(const AggregatedModel<T>&,      \
                                                             const Tensor<T>&);              \
  template std::vector<Prediction<T>> predict_average(const AggregatedModel<T>&,             \
                                                      const Tensor<T>&);

PSAT_INSTANTIATE(float)
PSAT_INSTANTIATE(double)

#undef PSAT_INSTANTIATE

}  // namespace psat
