#include "psat/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>

#include "json.hpp"
#include "psat/errors.hpp"

namespace psat {

double tradeoff_accuracy(const std::vector<double>& six) {
  if (six.size() != 6)
    throw ContractError("tradeoff_accuracy expects exactly 6 values, got " +
                        std::to_string(six.size()));
  double s = 0;
  for (const double v : six) {
    if (v < 0 || v > 100)
      throw ContractError("accuracy " + std::to_string(v) + " outside [0,100]");
    s += v;
  }
  return s / 6.0;
}

double param_savings(size_t model_count, size_t reference_count) {
  if (reference_count == 0) throw ContractError("reference parameter count is zero");
  if (model_count == 0) throw ContractError("model parameter count is zero");
  return (1.0 - double(model_count) / double(reference_count)) * 100.0;
}

std::string eval_mode_name(EvalMode m) {
  return m == EvalMode::avg_surrogate ? "avg-surrogate" : "per-member-worst";
}

EvalMode eval_mode_from_name(const std::string& s) {
  if (s == "avg-surrogate") return EvalMode::avg_surrogate;
  if (s == "per-member-worst") return EvalMode::per_member_worst;
  throw ConfigError("unknown eval mode \"" + s +
                    "\", expected avg-surrogate or per-member-worst");
}

std::string inference_mode_name(InferenceMode m) {
  return m == InferenceMode::lowest_entropy ? "lowest-entropy" : "average";
}

InferenceMode inference_mode_from_name(const std::string& s) {
  if (s == "lowest-entropy") return InferenceMode::lowest_entropy;
  if (s == "average") return InferenceMode::average;
  throw ConfigError("unknown inference mode \"" + s +
                    "\", expected lowest-entropy or average");
}

template <typename T>
ModelFn<T> aggregate_surrogate(const AggregatedModel<T>& agg) {
  if (agg.members.empty()) throw EvalError("aggregate has no members");
  std::vector<ModelFn<T>> nets;
  nets.reserve(agg.members.size());
  for (const auto& m : agg.members) nets.push_back(attack_model(agg.plan, m));
  const double inv = 1.0 / double(nets.size());
  return [nets, inv](const Tensor<T>& x) {
    Tensor<T> acc;
    for (size_t i = 0; i < nets.size(); ++i) {
      Tensor<T> p = softmax_rows(nets[i](x));
      acc = i == 0 ? p : add(acc, p);
    }
    return log_elem(scale(acc, inv));
  };
}

namespace {

constexpr uint64_t kEvalAttackDomain = 4;

template <typename T>
Tensor<T> rows_of(const Tensor<T>& x, size_t lo, size_t hi) {
  const size_t per = x.numel() / x.extent(0);
  std::vector<size_t> shape = x.shape();
  shape[0] = hi - lo;
  std::vector<T> v(x.data() + lo * per, x.data() + hi * per);
  return Tensor<T>::from(std::move(shape), std::move(v));
}

// Everything evaluate() needs from a concrete model: a label predictor and
// the set of attack targets whose adversarial inputs it must all survive.
template <typename T>
struct EvalSubject {
  std::function<std::vector<int>(const Tensor<T>&)> predict;
  std::vector<ModelFn<T>> targets;
  size_t param_count = 0;
};

template <typename T>
MetricsReport evaluate_core(const EvalSubject<T>& subject, const BackbonePlan& plan,
                            const Dataset<T>& data, const PerturbationSet& set,
                            const EvalOptions& opts) {
  set.validate();
  const size_t n = data.size();
  if (n == 0) throw EvalError("evaluation dataset is empty");

  const size_t n_specs = set.specs.size();
  std::vector<std::vector<char>> survive(n_specs, std::vector<char>(n, 1));
  size_t clean_correct = 0;

  for (size_t lo = 0; lo < n; lo += opts.batch) {
    const size_t hi = std::min(n, lo + opts.batch);
    Tensor<T> xb = rows_of(data.x, lo, hi);
    std::vector<int> yb(data.y.begin() + lo, data.y.begin() + hi);
    std::vector<uint64_t> seeds(hi - lo);
    for (size_t i = 0; i < seeds.size(); ++i)
      seeds[i] = mix64(mix64(opts.seed, kEvalAttackDomain), lo + i);

    const std::vector<int> clean = subject.predict(xb);
    for (size_t i = 0; i < clean.size(); ++i)
      if (clean[i] == yb[i]) ++clean_correct;

    for (size_t s = 0; s < n_specs; ++s) {
      for (const auto& target : subject.targets) {
        AttackResult<T> r =
            pgd_attack(target, xb, yb, set.specs[s], opts.clamp, seeds, opts.workers);
        const std::vector<int> adv = subject.predict(add(xb, r.delta));
        for (size_t i = 0; i < adv.size(); ++i)
          if (adv[i] != yb[i]) survive[s][lo + i] = 0;
      }
    }
  }

  MetricsReport rep;
  rep.name = opts.name;
  rep.acc_clean = 100.0 * double(clean_correct) / double(n);
  double per_norm_sum = 0;
  for (size_t s = 0; s < n_specs; ++s) {
    size_t c = 0;
    for (const char v : survive[s]) c += v;
    const double acc = 100.0 * double(c) / double(n);
    rep.acc_per_norm.emplace_back(set.specs[s].p, acc);
    per_norm_sum += acc;
  }
  size_t all_correct = 0;
  double survival_sum = 0;
  for (size_t i = 0; i < n; ++i) {
    size_t c = 0;
    for (size_t s = 0; s < n_specs; ++s) c += survive[s][i];
    if (c == n_specs) ++all_correct;
    survival_sum += double(c) / double(n_specs);
  }
  rep.acc_max_adv = 100.0 * double(all_correct) / double(n);
  rep.acc_avg_adv = per_norm_sum / double(n_specs);
  const double avg_by_example = 100.0 * survival_sum / double(n);
  if (std::abs(avg_by_example - rep.acc_avg_adv) > 1e-9)
    throw ContractError("per-norm and per-example average accuracies disagree: " +
                        std::to_string(rep.acc_avg_adv) + " vs " +
                        std::to_string(avg_by_example));

  std::vector<double> cols{rep.acc_clean};
  for (const auto& [p, acc] : rep.acc_per_norm) cols.push_back(acc);
  cols.push_back(rep.acc_max_adv);
  cols.push_back(rep.acc_avg_adv);
  if (cols.size() == 6) {
    rep.acc_tradeoff = tradeoff_accuracy(cols);
  } else {
    double s = 0;
    for (const double v : cols) s += v;
    rep.acc_tradeoff = s / double(cols.size());
  }

  rep.param_count_model = subject.param_count;
  rep.param_count_reference = count_params(plan, ParamPartition::all);
  rep.savings_percent = param_savings(rep.param_count_model, rep.param_count_reference);
  rep.seed = opts.seed;
  rep.config_hash = opts.config_hash;
  return rep;
}

template <typename T>
std::vector<int> argmax_labels(const Tensor<T>& logits) {
  const size_t n = logits.extent(0), classes = logits.extent(1);
  std::vector<int> out(n);
  for (size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * classes;
    size_t best = 0;
    for (size_t c = 1; c < classes; ++c)
      if (row[c] > row[best]) best = c;
    out[i] = int(best);
  }
  return out;
}

}  // namespace

template <typename T>
MetricsReport evaluate_member(const BackbonePlan& plan, const Member<T>& member,
                              const Dataset<T>& data, const PerturbationSet& set,
                              const EvalOptions& opts) {
  const ModelFn<T> model = attack_model(plan, member);
  EvalSubject<T> subject;
  subject.predict = [model](const Tensor<T>& x) { return argmax_labels(model(x)); };
  subject.targets = {model};
  subject.param_count = member_param_count(plan, member.hyper.cfg);
  MetricsReport rep = evaluate_core(subject, plan, data, set, opts);
  rep.eval_mode = "member";
  rep.inference = "argmax";
  return rep;
}

template <typename T>
MetricsReport evaluate_aggregate(const AggregatedModel<T>& agg, const Dataset<T>& data,
                                 const PerturbationSet& set, const EvalOptions& opts) {
  if (agg.members.empty()) throw EvalError("aggregate has no members");
  EvalSubject<T> subject;
  const InferenceMode inf = opts.inference;
  const AggregatedModel<T>* model = &agg;
  subject.predict = [model, inf](const Tensor<T>& x) {
    const std::vector<Prediction<T>> preds = inf == InferenceMode::lowest_entropy
                                                 ? predict_lowest_entropy(*model, x)
                                                 : predict_average(*model, x);
    std::vector<int> out(preds.size());
    for (size_t i = 0; i < preds.size(); ++i) out[i] = preds[i].label;
    return out;
  };
  if (opts.mode == EvalMode::avg_surrogate) {
    subject.targets = {aggregate_surrogate(agg)};
  } else {
    for (const auto& m : agg.members) subject.targets.push_back(attack_model(agg.plan, m));
  }
  subject.param_count = 0;
  for (const auto& m : agg.members)
    subject.param_count += member_param_count(agg.plan, m.hyper.cfg);
  MetricsReport rep = evaluate_core(subject, agg.plan, data, set, opts);
  rep.eval_mode = eval_mode_name(opts.mode);
  rep.inference = inference_mode_name(opts.inference);
  return rep;
}

namespace {

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

double per_norm_or(const MetricsReport& r, Norm p, double fallback) {
  for (const auto& [q, acc] : r.acc_per_norm)
    if (q == p) return acc;
  return fallback;
}

bool has_norm(const MetricsReport& r, Norm p) {
  for (const auto& [q, acc] : r.acc_per_norm)
    if (q == p) return true;
  return false;
}

}  // namespace

std::string metrics_to_json(const std::vector<MetricsReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [p, acc] : r.acc_per_norm) per[norm_name(p)] = acc;
    arr.push_back({{"name", r.name},
                   {"acc_clean", r.acc_clean},
                   {"acc_per_norm", per},
                   {"acc_max_adv", r.acc_max_adv},
                   {"acc_avg_adv", r.acc_avg_adv},
                   {"acc_tradeoff", r.acc_tradeoff},
                   {"params",
                    {{"model", r.param_count_model},
                     {"reference", r.param_count_reference},
                     {"savings_percent", r.savings_percent}}},
                   {"seed", r.seed},
                   {"config_hash", hex64(r.config_hash)},
                   {"eval_mode", r.eval_mode},
                   {"inference", r.inference}});
  }
  return arr.dump(2);
}

std::vector<MetricsReport> metrics_from_json(const std::string& text) {
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("metrics file is not valid JSON: ") + e.what());
  }
  if (!arr.is_array()) throw FormatError("metrics file must hold a JSON array");
  std::vector<MetricsReport> out;
  for (const auto& o : arr) {
    if (!o.is_object()) throw FormatError("metrics entry must be an object");
    MetricsReport r;
    r.name = o.value("name", std::string());
    r.acc_clean = o.value("acc_clean", 0.0);
    if (o.contains("acc_per_norm"))
      for (const auto& [key, acc] : o.at("acc_per_norm").items())
        r.acc_per_norm.emplace_back(norm_from_name(key), acc.get<double>());
    r.acc_max_adv = o.value("acc_max_adv", 0.0);
    r.acc_avg_adv = o.value("acc_avg_adv", 0.0);
    r.acc_tradeoff = o.value("acc_tradeoff", 0.0);
    if (o.contains("params")) {
      const auto& p = o.at("params");
      r.param_count_model = p.value("model", size_t{0});
      r.param_count_reference = p.value("reference", size_t{0});
      r.savings_percent = p.value("savings_percent", 0.0);
    }
    r.seed = o.value("seed", uint64_t{0});
    if (o.contains("config_hash"))
      r.config_hash = std::strtoull(o.at("config_hash").get<std::string>().c_str(), nullptr, 16);
    r.eval_mode = o.value("eval_mode", std::string());
    r.inference = o.value("inference", std::string());
    out.push_back(std::move(r));
  }
  return out;
}

void write_metrics_json(const std::vector<MetricsReport>& reports, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << metrics_to_json(reports) << "\n";
  if (!f) throw IoError("write failed: " + path);
}

void write_metrics_csv(const std::vector<MetricsReport>& reports, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "name,acc_clean,acc_inf,acc_2,acc_1,acc_max,acc_avg,acc_tradeoff,"
       "params_model,params_reference,savings_percent,seed,config_hash,eval_mode,inference\n";
  for (const auto& r : reports) {
    f << r.name << "," << fmt2(r.acc_clean) << ",";
    for (const Norm p : {Norm::inf, Norm::l2, Norm::l1})
      f << (has_norm(r, p) ? fmt2(per_norm_or(r, p, 0)) : std::string()) << ",";
    f << fmt2(r.acc_max_adv) << "," << fmt2(r.acc_avg_adv) << "," << fmt2(r.acc_tradeoff) << ","
      << r.param_count_model << "," << r.param_count_reference << ","
      << fmt2(r.savings_percent) << "," << r.seed << "," << hex64(r.config_hash) << ","
      << r.eval_mode << "," << r.inference << "\n";
  }
  if (!f) throw IoError("write failed: " + path);
}

std::string render_metrics_table(const std::vector<MetricsReport>& reports) {
  const std::vector<std::string> head = {"model",   "clean", "inf",      "2",
                                         "1",       "max",   "avg",      "tradeoff",
                                         "params",  "saving"};
  std::vector<std::vector<std::string>> rows{head};
  for (const auto& r : reports) {
    std::vector<std::string> row{r.name.empty() ? "(unnamed)" : r.name, fmt2(r.acc_clean)};
    for (const Norm p : {Norm::inf, Norm::l2, Norm::l1})
      row.push_back(has_norm(r, p) ? fmt2(per_norm_or(r, p, 0)) : "-");
    row.push_back(fmt2(r.acc_max_adv));
    row.push_back(fmt2(r.acc_avg_adv));
    row.push_back(fmt2(r.acc_tradeoff));
    row.push_back(std::to_string(r.param_count_model));
    const double s = r.savings_percent;
    row.push_back(s >= 0 ? fmt2(s) + "% saved" : fmt2(-s) + "% added");
    rows.push_back(std::move(row));
  }
  std::vector<size_t> width(head.size(), 0);
  for (const auto& row : rows)
    for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::string out;
  for (const auto& row : rows) {
    for (size_t c = 0; c < row.size(); ++c) {
      out += row[c];
      if (c + 1 < row.size()) out.append(width[c] - row[c].size() + 2, ' ');
    }
    out += "\n";
  }
  return out;
}

template <typename T>
void write_prediction_dump(const AggregatedModel<T>& agg, const Dataset<T>& data,
                           const std::string& path) {
  if (agg.members.empty()) throw EvalError("aggregate has no members");
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "example,member";
  for (const auto& m : agg.members) f << ",entropy_" << m.tag;
  f << ",label\n";
  const size_t n = data.size();
  for (size_t lo = 0; lo < n; lo += 256) {
    const size_t hi = std::min(n, lo + size_t{256});
    Tensor<T> xb = rows_of(data.x, lo, hi);
    std::vector<std::vector<T>> ent(agg.members.size());
    for (size_t m = 0; m < agg.members.size(); ++m) {
      Tensor<T> probs = member_probs(agg.plan, agg.members[m], xb);
      const size_t classes = probs.extent(1);
      std::vector<T> row(classes);
      for (size_t i = 0; i < hi - lo; ++i) {
        row.assign(probs.data() + i * classes, probs.data() + (i + 1) * classes);
        ent[m].push_back(entropy(row));
      }
    }
    const std::vector<Prediction<T>> preds = predict_lowest_entropy(agg, xb);
    for (size_t i = 0; i < preds.size(); ++i) {
      f << lo + i << "," << preds[i].member_index;
      for (size_t m = 0; m < agg.members.size(); ++m) f << "," << double(ent[m][i]);
      f << "," << preds[i].label << "\n";
    }
  }
  if (!f) throw IoError("write failed: " + path);
}

#define PSAT_INSTANTIATE(T)                                                                   \
  template ModelFn<T> aggregate_surrogate(const AggregatedModel<T>&);                         \
  template MetricsReport evaluate_member(const BackbonePlan&, const Member<T>&,               \
                                         const Dataset<T>&, const PerturbationSet&,           \
                                         const EvalOptions&);                                 \
  template MetricsReport evaluate_aggregate(const AggregatedModel<T>&, const Dataset<T>&,     \
                                            const PerturbationSet&, const EvalOptions&);      \
  template void write_prediction_dump(const AggregatedModel<T>&, const Dataset<T>&,           \
                                      const std::string&);

PSAT_INSTANTIATE(float)
PSAT_INSTANTIATE(double)

#undef PSAT_INSTANTIATE

}  // namespace psat
