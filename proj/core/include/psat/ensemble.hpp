#pragma once

#include <vector>

#include "psat/tensor.hpp"
#include "psat/training.hpp"

namespace psat {

// Output for one example. member_index is the position in the aggregate's
// member order, or kEnsembleIndex for averaged predictions.
inline constexpr int kEnsembleIndex = -1;

template <typename T>
struct Prediction {
  std::vector<T> probs;   // sums to 1 within 1e-6
  int label = 0;          // argmax of probs, ties to the lowest class
  int member_index = 0;
  T entropy = 0;          // nats, in [0, ln #classes]
};

// Shannon entropy in nats with 0*ln(0) := 0. Rejects a negative entry or a
// sum off 1 by more than 1e-4.
template <typename T>
T entropy(const std::vector<T>& probs);

// Softmax outputs [N, classes] of one member in eval mode.
template <typename T>
Tensor<T> member_probs(const BackbonePlan& plan, const Member<T>& member, const Tensor<T>& x);

// Per example: every member runs, the one with minimal output entropy wins,
// ties to the earliest member.
template <typename T>
std::vector<Prediction<T>> predict_lowest_entropy(const AggregatedModel<T>& agg,
                                                  const Tensor<T>& x);

// Per example: probs = elementwise mean of member softmax outputs.
template <typename T>
std::vector<Prediction<T>> predict_average(const AggregatedModel<T>& agg, const Tensor<T>& x);

}  // namespace psat
