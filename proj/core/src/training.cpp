#include "psat/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "psat/errors.hpp"

namespace psat {

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::single: return "single";
    case Strategy::max: return "max";
    case Strategy::avg: return "avg";
    case Strategy::msd: return "msd";
    case Strategy::psat: return "psat";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& s) {
  if (s == "single") return Strategy::single;
  if (s == "max") return Strategy::max;
  if (s == "avg") return Strategy::avg;
  if (s == "msd") return Strategy::msd;
  if (s == "psat") return Strategy::psat;
  throw ConfigError("unknown strategy \"" + s + "\", expected single, max, avg, msd or psat");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1, got " + std::to_string(epochs));
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1, got " + std::to_string(batch_size));
  if (!(lr > 0)) throw ConfigError("lr must be positive, got " + std::to_string(lr));
  if (momentum < 0) throw ConfigError("momentum must be >= 0, got " + std::to_string(momentum));
  if (weight_decay < 0)
    throw ConfigError("weight_decay must be >= 0, got " + std::to_string(weight_decay));
  if (!(lr_factor > 0)) throw ConfigError("lr_factor must be positive");
  for (size_t i = 1; i < lr_milestones.size(); ++i)
    if (lr_milestones[i] <= lr_milestones[i - 1])
      throw ConfigError("lr_milestones must be strictly increasing");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (workers < 1) throw ConfigError("workers must be >= 1");
}

void write_history_csv(const History& h, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "epoch,split,metric,value\n";
  for (const auto& r : h.rows)
    f << r.epoch << "," << r.split << "," << r.metric << "," << r.value << "\n";
  if (!f) throw IoError("write failed: " + path);
}

template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, std::vector<std::vector<T>>& velocity, double lr,
              double momentum, double weight_decay) {
  if (velocity.size() != params.size()) velocity.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i];
    if (!p.has_grad())
      throw TrainError("sgd_step: parameter " + std::to_string(i) + " has no gradient");
    const std::vector<T>& g = p.grad_c();
    std::vector<T>& v = velocity[i];
    if (v.size() != p.numel()) v.assign(p.numel(), T(0));
    T* pv = p.data();
    const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay);
    const T step = static_cast<T>(lr);
    for (size_t k = 0; k < v.size(); ++k) {
      v[k] = mu * v[k] + g[k] + wd * pv[k];
      pv[k] -= step * v[k];
    }
  }
}

template <typename T>
SgdOptimizer<T>::SgdOptimizer(std::vector<Tensor<T>> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.resize(params_.size());
}

template <typename T>
void SgdOptimizer<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void SgdOptimizer<T>::step(double lr) {
  sgd_step(params_, velocity_, lr, momentum_, weight_decay_);
}

namespace {

constexpr uint64_t kShuffleDomain = 1;
constexpr uint64_t kAttackDomain = 2;
constexpr uint64_t kFlipDomain = 3;

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const size_t* idx, size_t count) {
  const size_t per = x.numel() / x.extent(0);
  std::vector<size_t> shape = x.shape();
  shape[0] = count;
  std::vector<T> v(count * per);
  for (size_t i = 0; i < count; ++i)
    std::copy(x.data() + idx[i] * per, x.data() + (idx[i] + 1) * per, v.begin() + i * per);
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
ParamBundle<T> detached_generate(const BackbonePlan& plan, const Member<T>& member) {
  ParamBundle<T> live = generate_all(member.hyper, member.emb, plan, member.direct);
  ParamBundle<T> out;
  out.params.reserve(live.params.size());
  out.buffers.reserve(live.buffers.size());
  for (const auto& e : live.params) out.params.push_back({e.name, e.layer, e.t.detach(), e.generated});
  for (const auto& e : live.buffers)
    out.buffers.push_back({e.name, e.layer, e.t.detach(), e.generated});
  return out;
}

template <typename T>
T mean_of(const std::vector<T>& v) {
  double s = 0;
  for (const T x : v) s += double(x);
  return static_cast<T>(s / double(v.size()));
}

// Shared epoch/batch loop. run_batch owns the attack, the tape, zero_grad and
// backward for one batch, and returns the scalar loss; the driver shuffles,
// derives seeds, steps the optimizer and keeps history.
template <typename T>
History train_driver(
    const BackbonePlan& plan, Member<T>& member, const Dataset<T>& data, const TrainConfig& cfg,
    const TrainHooks<T>& hooks,
    const std::function<T(const Tensor<T>&, const std::vector<int>&,
                          const std::vector<uint64_t>&, BatchStats<T>&)>& run_batch) {
  cfg.validate();
  const size_t n = data.size();
  if (n == 0) throw TrainError("training dataset is empty");

  SgdOptimizer<T> opt(member.trainables(), cfg.momentum, cfg.weight_decay);
  History hist;
  for (int e = 0; e < cfg.epochs; ++e) {
    double lr = cfg.lr;
    for (const int m : cfg.lr_milestones)
      if (e >= m) lr *= cfg.lr_factor;
    RandomStream shuffle(mix64(mix64(cfg.seed, kShuffleDomain), uint64_t(e)));
    const std::vector<size_t> perm = shuffle.permutation(n);

    double loss_sum = 0;
    int batches = 0;
    for (size_t start = 0; start < n; start += size_t(cfg.batch_size), ++batches) {
      const size_t count = std::min(n - start, size_t(cfg.batch_size));
      Tensor<T> xb = gather_rows(data.x, perm.data() + start, count);
      std::vector<int> yb(count);
      std::vector<uint64_t> seeds(count);
      const uint64_t epoch_attack = mix64(mix64(cfg.seed, kAttackDomain), uint64_t(e));
      for (size_t i = 0; i < count; ++i) {
        yb[i] = data.y[perm[start + i]];
        seeds[i] = mix64(epoch_attack, perm[start + i]);
      }
      if (cfg.hflip) {
        RandomStream fr(mix64(mix64(mix64(cfg.seed, kFlipDomain), uint64_t(e)), uint64_t(batches)));
        random_hflip(xb, fr);
      }

      BatchStats<T> stats;
      stats.epoch = e;
      stats.batch = batches;
      stats.lr = lr;
      const T loss = run_batch(xb, yb, seeds, stats);
      if (!std::isfinite(double(loss)))
        throw TrainError("non-finite training loss " + std::to_string(double(loss)) +
                         " at epoch " + std::to_string(e) + " batch " + std::to_string(batches));
      opt.step(lr);
      stats.loss = loss;
      if (hooks.on_batch) hooks.on_batch(stats);
      loss_sum += double(loss);
    }
    hist.add(e, "train", "loss", loss_sum / double(batches));
    if (cfg.eval_every > 0 && (e + 1) % cfg.eval_every == 0 && hooks.eval_data)
      hist.add(e, "test", "clean_acc", clean_accuracy(plan, member, *hooks.eval_data));
  }
  return hist;
}

// Loss phase shared by every strategy: regenerate tracked parameters, run the
// train-mode forward on the adversarial batch, backprop through generation.
template <typename T>
T outer_step(const BackbonePlan& plan, Member<T>& member, const Tensor<T>& x_adv,
             const std::vector<int>& yb) {
  Tape<T> tape;
  typename Tape<T>::Scope scope(tape);
  ParamBundle<T> bundle = generate_all(member.hyper, member.emb, plan, member.direct);
  Tensor<T> loss = cross_entropy(forward(plan, bundle, x_adv, Mode::train), yb);
  for (auto& p : member.trainables()) p.zero_grad();
  tape.backward(loss);
  return loss.item();
}

}  // namespace

template <typename T>
ModelFn<T> attack_model(const BackbonePlan& plan, const Member<T>& member) {
  ParamBundle<T> bundle = detached_generate(plan, member);
  return [plan, bundle](const Tensor<T>& x) { return forward(plan, bundle, x, Mode::eval); };
}

template <typename T>
double clean_accuracy(const BackbonePlan& plan, const Member<T>& member, const Dataset<T>& data) {
  const ModelFn<T> model = attack_model(plan, member);
  const size_t n = data.size();
  size_t correct = 0;
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  for (size_t start = 0; start < n; start += 256) {
    const size_t count = std::min<size_t>(256, n - start);
    Tensor<T> xb = gather_rows(data.x, idx.data() + start, count);
    Tensor<T> logits = model(xb);
    const size_t classes = logits.extent(1);
    for (size_t i = 0; i < count; ++i) {
      const T* row = logits.data() + i * classes;
      size_t best = 0;
      for (size_t c = 1; c < classes; ++c)
        if (row[c] > row[best]) best = c;
      if (int(best) == data.y[start + i]) ++correct;
    }
  }
  return double(correct) / double(n);
}

template <typename T>
History train_single(const BackbonePlan& plan, Member<T>& member, const Dataset<T>& data,
                     const PerturbationSpec& spec, const TrainConfig& cfg,
                     const TrainHooks<T>& hooks) {
  spec.validate();
  return train_driver<T>(
      plan, member, data, cfg, hooks,
      [&](const Tensor<T>& xb, const std::vector<int>& yb, const std::vector<uint64_t>& seeds,
          BatchStats<T>& stats) {
        const ModelFn<T> model = attack_model(plan, member);
        AttackResult<T> r = pgd_attack(model, xb, yb, spec, cfg.clamp, seeds, cfg.workers);
        stats.per_norm_loss = {mean_of(r.loss)};
        return outer_step(plan, member, add(xb, r.delta), yb);
      });
}

template <typename T>
History train_max(const BackbonePlan& plan, Member<T>& member, const Dataset<T>& data,
                  const PerturbationSet& set, const TrainConfig& cfg, const TrainHooks<T>& hooks) {
  set.validate();
  return train_driver<T>(
      plan, member, data, cfg, hooks,
      [&](const Tensor<T>& xb, const std::vector<int>& yb, const std::vector<uint64_t>& seeds,
          BatchStats<T>& stats) {
        const ModelFn<T> model = attack_model(plan, member);
        std::vector<AttackResult<T>> results;
        results.reserve(set.specs.size());
        for (const auto& spec : set.specs)
          results.push_back(pgd_attack(model, xb, yb, spec, cfg.clamp, seeds, cfg.workers));

        const size_t count = yb.size();
        const size_t per = xb.numel() / count;
        Tensor<T> delta = Tensor<T>::zeros(xb.shape());
        stats.selected.assign(set.specs.size(), 0);
        stats.per_norm_loss.resize(set.specs.size());
        for (size_t s = 0; s < set.specs.size(); ++s)
          stats.per_norm_loss[s] = mean_of(results[s].loss);
        double sel_sum = 0;
        for (size_t i = 0; i < count; ++i) {
          size_t sel = 0;
          for (size_t s = 1; s < set.specs.size(); ++s)
            if (results[s].loss[i] > results[sel].loss[i]) sel = s;  // ties keep set order
          ++stats.selected[sel];
          sel_sum += double(results[sel].loss[i]);
          std::copy(results[sel].delta.data() + i * per, results[sel].delta.data() + (i + 1) * per,
                    delta.data() + i * per);
        }
        stats.selected_loss = static_cast<T>(sel_sum / double(count));
        return outer_step(plan, member, add(xb, delta), yb);
      });
}

template <typename T>
History train_avg(const BackbonePlan& plan, Member<T>& member, const Dataset<T>& data,
                  const PerturbationSet& set, const TrainConfig& cfg, const TrainHooks<T>& hooks) {
  set.validate();
  return train_driver<T>(
      plan, member, data, cfg, hooks,
      [&](const Tensor<T>& xb, const std::vector<int>& yb, const std::vector<uint64_t>& seeds,
          BatchStats<T>& stats) {
        const ModelFn<T> model = attack_model(plan, member);
        std::vector<Tensor<T>> x_advs;
        stats.per_norm_loss.clear();
        for (const auto& spec : set.specs) {
          AttackResult<T> r = pgd_attack(model, xb, yb, spec, cfg.clamp, seeds, cfg.workers);
          stats.per_norm_loss.push_back(mean_of(r.loss));
          x_advs.push_back(add(xb, r.delta));
        }

        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        ParamBundle<T> bundle = generate_all(member.hyper, member.emb, plan, member.direct);
        Tensor<T> total;
        for (size_t s = 0; s < x_advs.size(); ++s) {
          Tensor<T> l = cross_entropy(forward(plan, bundle, x_advs[s], Mode::train), yb);
          total = s == 0 ? l : add(total, l);
        }
        Tensor<T> loss = scale(total, 1.0 / double(set.specs.size()));
        for (auto& p : member.trainables()) p.zero_grad();
        tape.backward(loss);
        return loss.item();
      });
}

template <typename T>
History train_msd(const BackbonePlan& plan, Member<T>& member, const Dataset<T>& data,
                  const PerturbationSet& set, const TrainConfig& cfg, const TrainHooks<T>& hooks) {
  set.validate();
  const int tau = set.specs.front().tau;  // shared step budget
  return train_driver<T>(
      plan, member, data, cfg, hooks,
      [&](const Tensor<T>& xb, const std::vector<int>& yb, const std::vector<uint64_t>& seeds,
          BatchStats<T>& stats) {
        const ModelFn<T> model = attack_model(plan, member);
        AttackResult<T> r = msd_attack(model, xb, yb, set, tau, cfg.clamp, seeds, cfg.workers);
        stats.selected_loss = mean_of(r.loss);
        return outer_step(plan, member, add(xb, r.delta), yb);
      });
}

template <typename T>
Member<T>& AggregatedModel<T>::find(Norm p) {
  for (auto& m : members)
    if (m.tag == norm_name(p)) return m;
  throw BundleError("no member tagged \"" + norm_name(p) + "\"");
}

template <typename T>
const Member<T>& AggregatedModel<T>::find(Norm p) const {
  for (const auto& m : members)
    if (m.tag == norm_name(p)) return m;
  throw BundleError("no member tagged \"" + norm_name(p) + "\"");
}

template <typename T>
AggregatedModel<T> train_psat(const BackbonePlan& plan, const HypernetConfig& hcfg,
                              const Dataset<T>& data, const PerturbationSet& set,
                              const TrainConfig& cfg, const TrainHooks<T>& hooks,
                              std::vector<History>* histories) {
  set.validate();
  cfg.validate();
  AggregatedModel<T> model;
  model.plan = plan;
  model.hcfg = hcfg;
  for (const auto& spec : set.specs) {
    const uint64_t seed = member_seed(cfg.seed, spec.p);
    Member<T> mem = init_member<T>(plan, hcfg, seed, norm_name(spec.p));
    TrainConfig mc = cfg;
    mc.seed = seed;
    mc.strategy = Strategy::single;
    mc.attacks.specs = {spec};
    try {
      History h = train_single(plan, mem, data, spec, mc, hooks);
      if (histories) histories->push_back(std::move(h));
    } catch (const TrainError& e) {
      throw TrainError("member " + norm_name(spec.p) + ": " + e.what());
    }
    model.members.push_back(std::move(mem));
  }
  return model;
}

#define PSAT_INSTANTIATE(T)                                                                     \
  template void sgd_step(std::vector<Tensor<T>>&, std::vector<std::vector<T>>&, double, double, \
                         double);                                                               \
  template class SgdOptimizer<T>;                                                               \
  template ModelFn<T> attack_model(const BackbonePlan&, const Member<T>&);                            \
  template double clean_accuracy(const BackbonePlan&, const Member<T>&, const Dataset<T>&);           \
  template History train_single(const BackbonePlan&, Member<T>&, const Dataset<T>&,             \
                                const PerturbationSpec&, const TrainConfig&,                    \
                                const TrainHooks<T>&);                                          \
  template History train_max(const BackbonePlan&, Member<T>&, const Dataset<T>&,                \
                             const PerturbationSet&, const TrainConfig&, const TrainHooks<T>&); \
  template History train_avg(const BackbonePlan&, Member<T>&, const Dataset<T>&,                \
                             const PerturbationSet&, const TrainConfig&, const TrainHooks<T>&); \
  template History train_msd(const BackbonePlan&, Member<T>&, const Dataset<T>&,                \
                             const PerturbationSet&, const TrainConfig&, const TrainHooks<T>&); \
  template struct AggregatedModel<T>;                                                           \
  template AggregatedModel<T> train_psat(const BackbonePlan&, const HypernetConfig&,            \
                                         const Dataset<T>&, const PerturbationSet&,             \
                                         const TrainConfig&, const TrainHooks<T>&,              \
                                         std::vector<History>*);

PSAT_INSTANTIATE(float)
PSAT_INSTANTIATE(double)

#undef PSAT_INSTANTIATE

}  // namespace psat
