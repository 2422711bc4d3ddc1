#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "psat/attacks.hpp"
#include "psat/backbone.hpp"
#include "psat/datasets.hpp"
#include "psat/hypernet.hpp"
#include "psat/tensor.hpp"

namespace psat {

enum class Strategy { single, max, avg, msd, psat };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& s);

struct TrainConfig {
  int epochs = 40;
  int batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> lr_milestones;  // epochs at which lr multiplies by lr_factor
  double lr_factor = 0.1;
  uint64_t seed = 0;
  Strategy strategy = Strategy::psat;
  PerturbationSet attacks = default_perturbation_set();
  int eval_every = 0;  // epochs between clean-accuracy evals; 0 disables
  int workers = 1;     // attack fan-out inside a batch
  ClampRange clamp{true, 0.0, 1.0};
  bool hflip = false;

  void validate() const;  // lr > 0, batch_size >= 1, milestones strictly increasing
};

struct HistoryRow {
  int epoch = 0;
  std::string split;
  std::string metric;
  double value = 0;
};

struct History {
  std::vector<HistoryRow> rows;
  void add(int epoch, std::string split, std::string metric, double value) {
    rows.push_back({epoch, std::move(split), std::move(metric), value});
  }
};

void write_history_csv(const History& h, const std::string& path);

template <typename T>
struct BatchStats {
  int epoch = 0;
  int batch = 0;
  double lr = 0;
  T loss = 0;                     // training loss after the outer forward
  std::vector<T> per_norm_loss;   // mean attack loss per spec (max/avg/msd)
  T selected_loss = 0;            // mean of per-example selected losses (max)
  std::vector<size_t> selected;   // per-spec selection counts (max)
};

template <typename T>
struct TrainHooks {
  std::function<void(const BatchStats<T>&)> on_batch;
  const Dataset<T>* eval_data = nullptr;  // clean accuracy target for eval_every
};

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
// Velocity lives with the caller and persists across steps; a param with no
// populated gradient is a training error.
template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, std::vector<std::vector<T>>& velocity, double lr,
              double momentum, double weight_decay);

template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor<T>> params, double momentum, double weight_decay);
  void zero_grad();
  void step(double lr);

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_, weight_decay_;
};

// Attack view of the current member: parameters are regenerated, deep-copied
// and detached, and the forward runs in eval mode, so attack tapes never touch
// member state and examples stay independent.
template <typename T>
ModelFn<T> attack_model(const BackbonePlan& plan, const Member<T>& member);

// Clean argmax accuracy of the current member over a dataset, eval mode.
template <typename T>
double clean_accuracy(const BackbonePlan& plan, const Member<T>& member, const Dataset<T>& data);

// The strategies below mutate `member` in place and return the training
// history. Fixed seed + workers=1 is bitwise reproducible. cfg.strategy and
// cfg.attacks are carried for provenance; the explicit spec/set argument is
// what runs.

template <typename T>
History train_single(const BackbonePlan& plan, Member<T>& member, const Dataset<T>& data,
                     const PerturbationSpec& spec, const TrainConfig& cfg,
                     const TrainHooks<T>& hooks = {});

template <typename T>
History train_max(const BackbonePlan& plan, Member<T>& member, const Dataset<T>& data,
                  const PerturbationSet& set, const TrainConfig& cfg,
                  const TrainHooks<T>& hooks = {});

template <typename T>
History train_avg(const BackbonePlan& plan, Member<T>& member, const Dataset<T>& data,
                  const PerturbationSet& set, const TrainConfig& cfg,
                  const TrainHooks<T>& hooks = {});

template <typename T>
History train_msd(const BackbonePlan& plan, Member<T>& member, const Dataset<T>& data,
                  const PerturbationSet& set, const TrainConfig& cfg,
                  const TrainHooks<T>& hooks = {});

// One specialist per norm, shared plan.
template <typename T>
struct AggregatedModel {
  BackbonePlan plan;
  HypernetConfig hcfg;
  std::vector<Member<T>> members;  // tags match the perturbation set, in order

  Member<T>& find(Norm p);
  const Member<T>& find(Norm p) const;
};

// Seed for member p of a PSAT run.
inline uint64_t member_seed(uint64_t run_seed, Norm p) {
  return mix64(run_seed, norm_tag_id(p) + 1);
}

// Independently init + train_single one member per spec, in set order.
// Member p's seed is member_seed(cfg.seed, p); members share no mutable
// state, so retraining one in isolation reproduces it bitwise.
template <typename T>
AggregatedModel<T> train_psat(const BackbonePlan& plan, const HypernetConfig& hcfg,
                              const Dataset<T>& data, const PerturbationSet& set,
                              const TrainConfig& cfg, const TrainHooks<T>& hooks = {},
                              std::vector<History>* histories = nullptr);

}  // namespace psat
