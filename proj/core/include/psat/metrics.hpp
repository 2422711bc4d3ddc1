#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "psat/attacks.hpp"
#include "psat/datasets.hpp"
#include "psat/ensemble.hpp"
#include "psat/training.hpp"

namespace psat {

// Mean of exactly six accuracy percentages: clean, one per norm, worst-case,
// average. Anything else is a contract error.
double tradeoff_accuracy(const std::vector<double>& six);

// (1 - model/reference) * 100; positive means the model is smaller.
double param_savings(size_t model_count, size_t reference_count);

// How adversarial inputs are produced against an aggregate: attack a
// differentiable surrogate (log of the averaged member probabilities), or
// attack each member and require the aggregate to survive all of them.
enum class EvalMode { avg_surrogate, per_member_worst };
std::string eval_mode_name(EvalMode m);
EvalMode eval_mode_from_name(const std::string& s);

enum class InferenceMode { lowest_entropy, average };
std::string inference_mode_name(InferenceMode m);
InferenceMode inference_mode_from_name(const std::string& s);

struct EvalOptions {
  uint64_t seed = 0;
  int workers = 1;
  ClampRange clamp{true, 0.0, 1.0};
  size_t batch = 256;
  EvalMode mode = EvalMode::avg_surrogate;
  InferenceMode inference = InferenceMode::lowest_entropy;
  uint64_t config_hash = 0;
  std::string name;  // row label
};

struct MetricsReport {
  std::string name;
  double acc_clean = 0;
  std::vector<std::pair<Norm, double>> acc_per_norm;  // in perturbation-set order
  double acc_max_adv = 0;   // per-example correct under every norm
  double acc_avg_adv = 0;   // mean of per-norm accuracies
  double acc_tradeoff = 0;  // mean of clean, per-norm, max, avg
  size_t param_count_model = 0;
  size_t param_count_reference = 0;
  double savings_percent = 0;
  uint64_t seed = 0;
  uint64_t config_hash = 0;
  std::string eval_mode;
  std::string inference;
};

// Full metric suite for one member attacked white-box.
template <typename T>
MetricsReport evaluate_member(const BackbonePlan& plan, const Member<T>& member,
                              const Dataset<T>& data, const PerturbationSet& set,
                              const EvalOptions& opts);

// Full metric suite for an aggregate under opts.mode / opts.inference.
template <typename T>
MetricsReport evaluate_aggregate(const AggregatedModel<T>& agg, const Dataset<T>& data,
                                 const PerturbationSet& set, const EvalOptions& opts);

// Differentiable stand-in for the aggregate: log of the averaged member
// probabilities, shaped like logits.
template <typename T>
ModelFn<T> aggregate_surrogate(const AggregatedModel<T>& agg);

std::string metrics_to_json(const std::vector<MetricsReport>& reports);
std::vector<MetricsReport> metrics_from_json(const std::string& text);
void write_metrics_json(const std::vector<MetricsReport>& reports, const std::string& path);
void write_metrics_csv(const std::vector<MetricsReport>& reports, const std::string& path);

// Text table, one row per report, columns in the usual benchmark order.
std::string render_metrics_table(const std::vector<MetricsReport>& reports);

// Per-example CSV: id, chosen member, per-member entropies, label.
template <typename T>
void write_prediction_dump(const AggregatedModel<T>& agg, const Dataset<T>& data,
                           const std::string& path);

}  // namespace psat
