#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "psat/tensor.hpp"

namespace psat {

enum class Norm { inf, l2, l1 };

std::string norm_name(Norm p);            // "inf", "2", "1"
Norm norm_from_name(const std::string&);  // inverse, ConfigError on junk
uint64_t norm_tag_id(Norm p);             // stable ids for seed derivation

struct PerturbationSpec {
  Norm p = Norm::inf;
  double eps = 0.0;
  double alpha = 0.0;
  int tau = 10;
  enum class Init { zero, random } init = Init::random;
  int l1_topk = 1;  // coordinates per l1 step; 1 is the exact steepest step

  void validate() const;
};

// The attack set A; norms pairwise distinct, order as configured.
struct PerturbationSet {
  std::vector<PerturbationSpec> specs;

  void validate() const;
  const PerturbationSpec* find(Norm p) const;
};

PerturbationSet default_perturbation_set();

// argmax_{||v||_p <= alpha} v.g, on the whole tensor. Zero gradient gives a
// zero step for every norm.
template <typename T>
Tensor<T> steepest_step(const Tensor<T>& grad, Norm p, double alpha, int l1_topk = 1);

// Euclidean projection onto the p-ball of radius eps. Points already inside
// (up to accumulated-rounding slack) are returned unchanged, which makes the
// projection bitwise idempotent.
template <typename T>
Tensor<T> project_ball(const Tensor<T>& omega, Norm p, double eps);

struct ClampRange {
  bool enabled = false;
  double lo = 0.0;
  double hi = 1.0;
};

// Classifier closure: batch -> logits, differentiable under the active tape.
template <typename T>
using ModelFn = std::function<Tensor<T>(const Tensor<T>&)>;

template <typename T>
struct AttackResult {
  Tensor<T> delta;      // same shape as x, in the ball (and range when clamped)
  std::vector<T> loss;  // per-example loss at the returned delta
};

// PGD, per example: spec.tau steepest steps, each followed by the exact ball
// projection and then the range clamp; the returned iterate is the best-loss
// one over steps 1..tau (strictly-greater updates, so ties keep the earliest).
// Per-coordinate range clamping never grows a coordinate's magnitude, so the
// clamped delta stays inside the ball. example_seeds[i] drives example i's
// random init; derive them from (seed, example index) so results are
// worker-count invariant.
template <typename T>
AttackResult<T> pgd_attack(const ModelFn<T>& model, const Tensor<T>& x,
                           const std::vector<int>& y, const PerturbationSpec& spec,
                           const ClampRange& clamp, const std::vector<uint64_t>& example_seeds,
                           int workers = 1);

// Multi steepest descent: per step and per example, try every norm's
// candidate step and keep the one with maximal loss (ties go to the earliest
// spec in A). Starts from delta = 0; returns the best-loss iterate.
template <typename T>
AttackResult<T> msd_attack(const ModelFn<T>& model, const Tensor<T>& x, const std::vector<int>& y,
                           const PerturbationSet& set, int tau, const ClampRange& clamp,
                           const std::vector<uint64_t>& example_seeds, int workers = 1);

}  // namespace psat
