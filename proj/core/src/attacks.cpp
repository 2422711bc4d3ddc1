#include "psat/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "psat/errors.hpp"
#include "psat/parallel.hpp"
#include "psat/rng.hpp"

namespace psat {

std::string norm_name(Norm p) {
  switch (p) {
    case Norm::inf: return "inf";
    case Norm::l2: return "2";
    case Norm::l1: return "1";
  }
  return "?";
}

Norm norm_from_name(const std::string& s) {
  if (s == "inf") return Norm::inf;
  if (s == "2" || s == "l2") return Norm::l2;
  if (s == "1" || s == "l1") return Norm::l1;
  throw ConfigError("unknown norm \"" + s + "\", expected inf, 2 or 1");
}

uint64_t norm_tag_id(Norm p) {
  switch (p) {
    case Norm::inf: return 0;
    case Norm::l2: return 1;
    case Norm::l1: return 2;
  }
  return ~0ull;
}

void PerturbationSpec::validate() const {
  if (!(eps > 0)) throw ConfigError("attack eps must be positive, got " + std::to_string(eps));
  if (!(alpha > 0)) throw ConfigError("attack alpha must be positive, got " + std::to_string(alpha));
  if (tau < 1) throw ConfigError("attack tau must be >= 1, got " + std::to_string(tau));
  if (l1_topk < 1) throw ConfigError("l1_topk must be >= 1, got " + std::to_string(l1_topk));
}

void PerturbationSet::validate() const {
  if (specs.empty()) throw ConfigError("perturbation set is empty");
  for (size_t i = 0; i < specs.size(); ++i) {
    specs[i].validate();
    for (size_t j = i + 1; j < specs.size(); ++j)
      if (specs[i].p == specs[j].p)
        throw ConfigError("duplicate norm \"" + norm_name(specs[i].p) + "\" in perturbation set");
  }
}

const PerturbationSpec* PerturbationSet::find(Norm p) const {
  for (const auto& s : specs)
    if (s.p == p) return &s;
  return nullptr;
}

PerturbationSet default_perturbation_set() {
  PerturbationSet set;
  set.specs = {
      {Norm::inf, 0.03, 0.0075, 10, PerturbationSpec::Init::random, 1},
      {Norm::l2, 0.5, 0.125, 10, PerturbationSpec::Init::random, 1},
      {Norm::l1, 8.0, 2.0, 10, PerturbationSpec::Init::random, 1},
  };
  return set;
}

namespace {

template <typename T>
void steepest_vec(const T* g, T* out, size_t n, Norm p, double alpha, int topk) {
  const T a = static_cast<T>(alpha);
  switch (p) {
    case Norm::inf:
      for (size_t i = 0; i < n; ++i) out[i] = g[i] > 0 ? a : (g[i] < 0 ? -a : T(0));
      break;
    case Norm::l2: {
      double nrm = 0;
      for (size_t i = 0; i < n; ++i) nrm += double(g[i]) * double(g[i]);
      nrm = std::sqrt(nrm);
      if (nrm == 0) {
        std::fill(out, out + n, T(0));
      } else {
        const double f = alpha / nrm;
        for (size_t i = 0; i < n; ++i) out[i] = static_cast<T>(double(g[i]) * f);
      }
      break;
    }
    case Norm::l1: {
      std::fill(out, out + n, T(0));
      const size_t k = std::min<size_t>(topk, n);
      if (k == 1) {
        size_t best = 0;
        T besta = std::abs(g[0]);
        for (size_t i = 1; i < n; ++i) {
          const T ai = std::abs(g[i]);
          if (ai > besta) {  // strict: ties keep the lowest index
            besta = ai;
            best = i;
          }
        }
        if (g[best] != 0) out[best] = g[best] > 0 ? a : -a;
      } else {
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t{0});
        std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](size_t i, size_t j) {
          const T ai = std::abs(g[i]), aj = std::abs(g[j]);
          return ai != aj ? ai > aj : i < j;
        });
        const T per = static_cast<T>(alpha / double(k));
        for (size_t t = 0; t < k; ++t) {
          const size_t i = idx[t];
          if (g[i] != 0) out[i] = g[i] > 0 ? per : -per;
        }
      }
      break;
    }
  }
}

// Inside-ball slack: a freshly projected point measures within rounding of
// eps; treating it as inside keeps the projection bitwise idempotent.
template <typename T>
double inside_tol(double eps) {
  return (eps + 1.0) * (sizeof(T) == 4 ? 1e-4 : 1e-12);
}

template <typename T>
void project_vec(T* w, size_t n, Norm p, double eps) {
  switch (p) {
    case Norm::inf: {
      const T e = static_cast<T>(eps);
      for (size_t i = 0; i < n; ++i) w[i] = std::min(e, std::max(-e, w[i]));
      break;
    }
    case Norm::l2: {
      double nrm = 0;
      for (size_t i = 0; i < n; ++i) nrm += double(w[i]) * double(w[i]);
      nrm = std::sqrt(nrm);
      if (nrm <= eps + inside_tol<T>(eps)) return;
      const double f = eps / nrm;
      for (size_t i = 0; i < n; ++i) w[i] = static_cast<T>(double(w[i]) * f);
      break;
    }
    case Norm::l1: {
      double nrm = 0;
      for (size_t i = 0; i < n; ++i) nrm += std::abs(double(w[i]));
      if (nrm <= eps + inside_tol<T>(eps)) return;
      std::vector<double> a(n);
      for (size_t i = 0; i < n; ++i) a[i] = std::abs(double(w[i]));
      std::sort(a.begin(), a.end(), std::greater<double>());
      double csum = 0, lambda = 0;
      for (size_t m = 1; m <= n; ++m) {
        csum += a[m - 1];
        const double cand = (csum - eps) / double(m);
        if (a[m - 1] - cand > 0)
          lambda = cand;
        else
          break;
      }
      for (size_t i = 0; i < n; ++i) {
        const double mag = std::max(std::abs(double(w[i])) - lambda, 0.0);
        w[i] = static_cast<T>(w[i] > 0 ? mag : -mag);
      }
      break;
    }
  }
}

// delta <- clamp(x + delta, lo, hi) - x. Never grows |delta_i| when x is in
// range, so the result stays inside whatever ball delta was projected onto.
template <typename T>
void clamp_vec(const T* x, T* d, size_t n, const ClampRange& c) {
  if (!c.enabled) return;
  const T lo = static_cast<T>(c.lo), hi = static_cast<T>(c.hi);
  for (size_t i = 0; i < n; ++i) {
    const T s = x[i] + d[i];
    if (s > hi)
      d[i] = hi - x[i];
    else if (s < lo)
      d[i] = lo - x[i];
  }
}

template <typename T>
void check_logits(const Tensor<T>& logits) {
  for (const T v : logits.values())
    if (!std::isfinite(v)) throw AttackError("model produced non-finite logits");
}

template <typename T>
void init_delta_vec(T* d, const T* x, size_t n, const PerturbationSpec& spec,
                    const ClampRange& clamp, uint64_t seed) {
  std::fill(d, d + n, T(0));
  if (spec.init == PerturbationSpec::Init::random) {
    RandomStream rs(seed);
    switch (spec.p) {
      case Norm::inf:
        for (size_t i = 0; i < n; ++i)
          d[i] = static_cast<T>(rs.uniform(-spec.eps, spec.eps));
        break;
      case Norm::l2: {
        double nrm = 0;
        std::vector<double> g(n);
        for (size_t i = 0; i < n; ++i) {
          g[i] = rs.normal();
          nrm += g[i] * g[i];
        }
        nrm = std::sqrt(nrm);
        const double u = rs.uniform();
        if (nrm > 0) {
          const double r = spec.eps * std::pow(u, 1.0 / double(n)) / nrm;
          for (size_t i = 0; i < n; ++i) d[i] = static_cast<T>(g[i] * r);
        }
        break;
      }
      case Norm::l1:
        break;  // random init for the l1 ball starts at zero
    }
  }
  clamp_vec(x, d, n, clamp);
}

// Per-example losses and the gradient w.r.t. delta at the current iterate.
template <typename T>
std::vector<T> loss_and_grad(const ModelFn<T>& model, const Tensor<T>& x_chunk,
                             const std::vector<int>& y_chunk, const std::vector<T>& delta,
                             std::vector<T>& grad_out) {
  Tensor<T> d_leaf = Tensor<T>::from(x_chunk.shape(), delta, true);
  Tape<T> tape;
  typename Tape<T>::Scope scope(tape);
  Tensor<T> x_adv = add(x_chunk, d_leaf);
  Tensor<T> logits = model(x_adv);
  check_logits(logits);
  Tensor<T> per_ex = ce_per_example(logits, y_chunk);
  Tensor<T> total = sum(per_ex);
  tape.backward(total);
  grad_out = d_leaf.grad();
  return per_ex.values();
}

template <typename T>
std::vector<T> loss_only(const ModelFn<T>& model, const Tensor<T>& x_chunk,
                         const std::vector<int>& y_chunk, const std::vector<T>& delta) {
  Tensor<T> d = Tensor<T>::from(x_chunk.shape(), delta, false);
  Tensor<T> logits = model(add(x_chunk, d));
  check_logits(logits);
  return ce_per_example(logits, y_chunk).values();
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, size_t lo, size_t hi) {
  const size_t per = x.numel() / x.extent(0);
  std::vector<size_t> shape = x.shape();
  shape[0] = hi - lo;
  std::vector<T> v(x.data() + lo * per, x.data() + hi * per);
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
void attack_validate(const Tensor<T>& x, const std::vector<int>& y,
                     const std::vector<uint64_t>& seeds) {
  if (x.ndim() < 2) throw AttackError("attack input must be batched, got " + shape_str(x.shape()));
  const size_t n = x.extent(0);
  if (y.size() != n || seeds.size() != n)
    throw AttackError("attack needs one label and one seed per example: " + std::to_string(n) +
                      " examples, " + std::to_string(y.size()) + " labels, " +
                      std::to_string(seeds.size()) + " seeds");
}

}  // namespace

template <typename T>
Tensor<T> steepest_step(const Tensor<T>& grad, Norm p, double alpha, int l1_topk) {
  Tensor<T> out = Tensor<T>::zeros(grad.shape());
  steepest_vec(grad.data(), out.data(), grad.numel(), p, alpha, l1_topk);
  return out;
}

template <typename T>
Tensor<T> project_ball(const Tensor<T>& omega, Norm p, double eps) {
  Tensor<T> out = omega.detach();
  project_vec(out.data(), out.numel(), p, eps);
  return out;
}

template <typename T>
AttackResult<T> pgd_attack(const ModelFn<T>& model, const Tensor<T>& x,
                           const std::vector<int>& y, const PerturbationSpec& spec,
                           const ClampRange& clamp, const std::vector<uint64_t>& example_seeds,
                           int workers) {
  spec.validate();
  attack_validate(x, y, example_seeds);
  const size_t n_total = x.extent(0);
  const size_t per = x.numel() / n_total;

  AttackResult<T> result;
  result.delta = Tensor<T>::zeros(x.shape());
  result.loss.assign(n_total, T(0));

  parallel_chunks(n_total, workers, [&](size_t lo, size_t hi) {
    const size_t n = hi - lo;
    Tensor<T> x_chunk = slice_rows(x, lo, hi);
    std::vector<int> y_chunk(y.begin() + lo, y.begin() + hi);
    std::vector<T> delta(n * per);
    for (size_t i = 0; i < n; ++i)
      init_delta_vec(delta.data() + i * per, x_chunk.data() + i * per, per, spec, clamp,
                     example_seeds[lo + i]);

    std::vector<T> best_delta(n * per, T(0));
    std::vector<T> best_loss(n, -std::numeric_limits<T>::infinity());
    auto track = [&](const std::vector<T>& losses, const std::vector<T>& at) {
      for (size_t i = 0; i < n; ++i)
        if (losses[i] > best_loss[i]) {
          best_loss[i] = losses[i];
          std::copy(at.begin() + i * per, at.begin() + (i + 1) * per,
                    best_delta.begin() + i * per);
        }
    };

    std::vector<T> grad;
    for (int t = 0; t < spec.tau; ++t) {
      std::vector<T> losses = loss_and_grad(model, x_chunk, y_chunk, delta, grad);
      if (t >= 1) track(losses, delta);  // losses were taken at delta^t
      std::vector<T> step(per);
      for (size_t i = 0; i < n; ++i) {
        T* drow = delta.data() + i * per;
        steepest_vec(grad.data() + i * per, step.data(), per, spec.p, spec.alpha, spec.l1_topk);
        for (size_t j = 0; j < per; ++j) drow[j] += step[j];
        project_vec(drow, per, spec.p, spec.eps);
        clamp_vec(x_chunk.data() + i * per, drow, per, clamp);
      }
    }
    track(loss_only(model, x_chunk, y_chunk, delta), delta);  // delta^tau

    std::copy(best_delta.begin(), best_delta.end(), result.delta.data() + lo * per);
    std::copy(best_loss.begin(), best_loss.end(), result.loss.begin() + lo);
  });
  return result;
}

template <typename T>
AttackResult<T> msd_attack(const ModelFn<T>& model, const Tensor<T>& x, const std::vector<int>& y,
                           const PerturbationSet& set, int tau, const ClampRange& clamp,
                           const std::vector<uint64_t>& example_seeds, int workers) {
  set.validate();
  if (tau < 1) throw ConfigError("attack tau must be >= 1, got " + std::to_string(tau));
  attack_validate(x, y, example_seeds);
  const size_t n_total = x.extent(0);
  const size_t per = x.numel() / n_total;
  const size_t n_specs = set.specs.size();

  AttackResult<T> result;
  result.delta = Tensor<T>::zeros(x.shape());
  result.loss.assign(n_total, T(0));

  parallel_chunks(n_total, workers, [&](size_t lo, size_t hi) {
    const size_t n = hi - lo;
    Tensor<T> x_chunk = slice_rows(x, lo, hi);
    std::vector<int> y_chunk(y.begin() + lo, y.begin() + hi);
    std::vector<T> delta(n * per, T(0));
    for (size_t i = 0; i < n; ++i)
      clamp_vec(x_chunk.data() + i * per, delta.data() + i * per, per, clamp);

    std::vector<T> best_delta(n * per, T(0));
    std::vector<T> best_loss(n, -std::numeric_limits<T>::infinity());

    std::vector<T> grad;
    std::vector<std::vector<T>> cand(n_specs);
    std::vector<std::vector<T>> cand_loss(n_specs);
    std::vector<T> step(per);
    for (int t = 0; t < tau; ++t) {
      loss_and_grad(model, x_chunk, y_chunk, delta, grad);
      for (size_t s = 0; s < n_specs; ++s) {
        const PerturbationSpec& spec = set.specs[s];
        cand[s] = delta;
        for (size_t i = 0; i < n; ++i) {
          T* drow = cand[s].data() + i * per;
          steepest_vec(grad.data() + i * per, step.data(), per, spec.p, spec.alpha, spec.l1_topk);
          for (size_t j = 0; j < per; ++j) drow[j] += step[j];
          project_vec(drow, per, spec.p, spec.eps);
          clamp_vec(x_chunk.data() + i * per, drow, per, clamp);
        }
        cand_loss[s] = loss_only(model, x_chunk, y_chunk, cand[s]);
      }
      for (size_t i = 0; i < n; ++i) {
        size_t sel = 0;
        for (size_t s = 1; s < n_specs; ++s)
          if (cand_loss[s][i] > cand_loss[sel][i]) sel = s;  // ties keep earliest spec
        std::copy(cand[sel].begin() + i * per, cand[sel].begin() + (i + 1) * per,
                  delta.begin() + i * per);
        if (cand_loss[sel][i] > best_loss[i]) {
          best_loss[i] = cand_loss[sel][i];
          std::copy(delta.begin() + i * per, delta.begin() + (i + 1) * per,
                    best_delta.begin() + i * per);
        }
      }
    }

    std::copy(best_delta.begin(), best_delta.end(), result.delta.data() + lo * per);
    std::copy(best_loss.begin(), best_loss.end(), result.loss.begin() + lo);
  });
  return result;
}

#define PSAT_INSTANTIATE(T)                                                                    \
  template Tensor<T> steepest_step(const Tensor<T>&, Norm, double, int);                       \
  template Tensor<T> project_ball(const Tensor<T>&, Norm, double);                             \
  template AttackResult<T> pgd_attack(const ModelFn<T>&, const Tensor<T>&,                     \
                                      const std::vector<int>&, const PerturbationSpec&,        \
                                      const ClampRange&, const std::vector<uint64_t>&, int);   \
  template AttackResult<T> msd_attack(const ModelFn<T>&, const Tensor<T>&,                     \
                                      const std::vector<int>&, const PerturbationSet&, int,    \
                                      const ClampRange&, const std::vector<uint64_t>&, int);

PSAT_INSTANTIATE(float)
PSAT_INSTANTIATE(double)

#undef PSAT_INSTANTIATE

}  // namespace psat
