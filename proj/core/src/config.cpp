#include "psat/config.hpp"

#include <fstream>
#include <sstream>

#include "config_json.hpp"
#include "psat/errors.hpp"

namespace psat {

namespace cfgjson {

void fail(const std::string& path, const std::string& what) {
  throw ConfigError(path + ": " + what);
}

void check_keys(const json& obj, const std::string& path,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) fail(path, "expected an object");
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (key == a) {
        known = true;
        break;
      }
    if (!known) fail(path.empty() ? key : path + "." + key, "unknown key");
  }
}

const json* find(const json& obj, const char* key) {
  const auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

const json& need(const json& obj, const std::string& path, const char* key) {
  const json* v = find(obj, key);
  if (!v) fail(path, std::string("missing key \"") + key + "\"");
  return *v;
}

double num_at(const json& v, const std::string& path) {
  if (!v.is_number()) fail(path, "expected a number");
  return v.get<double>();
}

size_t uint_at(const json& v, const std::string& path) {
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<int64_t>() < 0))
    fail(path, "expected a nonnegative integer");
  return static_cast<size_t>(v.get<int64_t>());
}

uint64_t u64_at(const json& v, const std::string& path) {
  if (v.is_number_unsigned()) return v.get<uint64_t>();
  if (v.is_number_integer() && v.get<int64_t>() >= 0)
    return static_cast<uint64_t>(v.get<int64_t>());
  fail(path, "expected a nonnegative integer");
}

int int_at(const json& v, const std::string& path) {
  if (!v.is_number_integer()) fail(path, "expected an integer");
  return static_cast<int>(v.get<int64_t>());
}

bool bool_at(const json& v, const std::string& path) {
  if (!v.is_boolean()) fail(path, "expected a boolean");
  return v.get<bool>();
}

std::string str_at(const json& v, const std::string& path) {
  if (!v.is_string()) fail(path, "expected a string");
  return v.get<std::string>();
}

namespace {

LayerKind kind_from_name(const std::string& s, const std::string& path) {
  if (s == "conv") return LayerKind::conv;
  if (s == "batchnorm") return LayerKind::batchnorm;
  if (s == "relu") return LayerKind::relu;
  if (s == "maxpool") return LayerKind::maxpool;
  if (s == "avgpool") return LayerKind::avgpool;
  if (s == "fc") return LayerKind::fc;
  if (s == "add") return LayerKind::add;
  fail(path, "unknown layer kind \"" + s +
                 "\", expected conv, batchnorm, relu, maxpool, avgpool, fc or add");
}

std::string reduce_name(KernelReduce r) {
  switch (r) {
    case KernelReduce::mean: return "mean";
    case KernelReduce::max: return "max";
    case KernelReduce::sum: return "sum";
  }
  return "?";
}

KernelReduce reduce_from_name(const std::string& s, const std::string& path) {
  if (s == "mean") return KernelReduce::mean;
  if (s == "max") return KernelReduce::max;
  if (s == "sum") return KernelReduce::sum;
  fail(path, "unknown kernel reduction \"" + s + "\", expected mean, max or sum");
}

}  // namespace

json plan_to_json(const PlanDesc& p) {
  json layers = json::array();
  for (const auto& l : p.layers) {
    json o{{"kind", layer_kind_name(l.kind)}};
    switch (l.kind) {
      case LayerKind::conv:
        o["c_out"] = l.c_out;
        o["k"] = l.k;
        o["stride"] = l.stride;
        o["padding"] = l.padding;
        o["generated"] = l.generated;
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        o["window"] = l.window;
        o["stride"] = l.pool_stride == 0 ? l.window : l.pool_stride;
        break;
      case LayerKind::fc:
        o["out_features"] = l.out_features;
        break;
      case LayerKind::add:
        o["from"] = l.from;
        break;
      default:
        break;
    }
    layers.push_back(std::move(o));
  }
  return json{{"in_c", p.in_c}, {"in_h", p.in_h}, {"in_w", p.in_w}, {"layers", layers}};
}

PlanDesc plan_from_json(const json& v, const std::string& path) {
  check_keys(v, path, {"in_c", "in_h", "in_w", "layers"});
  PlanDesc p;
  p.in_c = uint_at(need(v, path, "in_c"), path + ".in_c");
  p.in_h = uint_at(need(v, path, "in_h"), path + ".in_h");
  p.in_w = uint_at(need(v, path, "in_w"), path + ".in_w");
  const json& layers = need(v, path, "layers");
  if (!layers.is_array()) fail(path + ".layers", "expected an array");
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string lp = path + ".layers[" + std::to_string(i) + "]";
    const json& o = layers[i];
    if (!o.is_object()) fail(lp, "expected an object");
    LayerDesc l;
    l.kind = kind_from_name(str_at(need(o, lp, "kind"), lp + ".kind"), lp + ".kind");
    switch (l.kind) {
      case LayerKind::conv:
        check_keys(o, lp, {"kind", "c_out", "k", "stride", "padding", "generated"});
        l.c_out = uint_at(need(o, lp, "c_out"), lp + ".c_out");
        l.k = uint_at(need(o, lp, "k"), lp + ".k");
        if (const json* s = find(o, "stride")) l.stride = uint_at(*s, lp + ".stride");
        if (const json* s = find(o, "padding")) l.padding = uint_at(*s, lp + ".padding");
        if (const json* s = find(o, "generated")) l.generated = bool_at(*s, lp + ".generated");
        break;
      case LayerKind::batchnorm:
      case LayerKind::relu:
        check_keys(o, lp, {"kind"});
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        check_keys(o, lp, {"kind", "window", "stride"});
        l.window = uint_at(need(o, lp, "window"), lp + ".window");
        if (const json* s = find(o, "stride")) l.pool_stride = uint_at(*s, lp + ".stride");
        break;
      case LayerKind::fc:
        check_keys(o, lp, {"kind", "out_features"});
        l.out_features = uint_at(need(o, lp, "out_features"), lp + ".out_features");
        break;
      case LayerKind::add:
        check_keys(o, lp, {"kind", "from"});
        l.from = int_at(need(o, lp, "from"), lp + ".from");
        if (l.from < -1) fail(lp + ".from", "expected a layer index or -1 for the input");
        break;
    }
    p.layers.push_back(l);
  }
  return p;
}

json hypernet_to_json(const HypernetConfig& h) {
  return json{{"n_z", h.n_z},
              {"d_h", h.d_h},
              {"c_u", h.c_u},
              {"k_u", h.k_u},
              {"reduction", reduce_name(h.reduction)}};
}

HypernetConfig hypernet_from_json(const json& v, const std::string& path) {
  check_keys(v, path, {"n_z", "d_h", "c_u", "k_u", "reduction"});
  HypernetConfig h;
  if (const json* x = find(v, "n_z")) h.n_z = uint_at(*x, path + ".n_z");
  if (const json* x = find(v, "d_h")) h.d_h = uint_at(*x, path + ".d_h");
  if (const json* x = find(v, "c_u")) h.c_u = uint_at(*x, path + ".c_u");
  if (const json* x = find(v, "k_u")) h.k_u = uint_at(*x, path + ".k_u");
  if (const json* x = find(v, "reduction"))
    h.reduction = reduce_from_name(str_at(*x, path + ".reduction"), path + ".reduction");
  return h;
}

json attacks_to_json(const PerturbationSet& s) {
  json arr = json::array();
  for (const auto& spec : s.specs)
    arr.push_back(json{{"norm", norm_name(spec.p)},
                       {"eps", spec.eps},
                       {"alpha", spec.alpha},
                       {"tau", spec.tau},
                       {"init", spec.init == PerturbationSpec::Init::zero ? "zero" : "random"},
                       {"l1_topk", spec.l1_topk}});
  return arr;
}

PerturbationSet attacks_from_json(const json& v, const std::string& path) {
  if (!v.is_array()) fail(path, "expected an array");
  if (v.empty()) fail(path, "perturbation set is empty");
  PerturbationSet set;
  for (size_t i = 0; i < v.size(); ++i) {
    const std::string sp = path + "[" + std::to_string(i) + "]";
    const json& o = v[i];
    check_keys(o, sp, {"norm", "eps", "alpha", "tau", "init", "l1_topk"});
    PerturbationSpec spec;
    const std::string norm = str_at(need(o, sp, "norm"), sp + ".norm");
    try {
      spec.p = norm_from_name(norm);
    } catch (const ConfigError& e) {
      fail(sp + ".norm", e.what());
    }
    for (const auto& prev : set.specs)
      if (prev.p == spec.p) fail(sp + ".norm", "duplicate norm \"" + norm_name(spec.p) + "\"");
    spec.eps = num_at(need(o, sp, "eps"), sp + ".eps");
    if (!(spec.eps > 0)) fail(sp + ".eps", "must be positive");
    spec.alpha = num_at(need(o, sp, "alpha"), sp + ".alpha");
    if (!(spec.alpha > 0)) fail(sp + ".alpha", "must be positive");
    if (const json* x = find(o, "tau")) {
      spec.tau = int_at(*x, sp + ".tau");
      if (spec.tau < 1) fail(sp + ".tau", "must be >= 1");
    }
    if (const json* x = find(o, "init")) {
      const std::string init = str_at(*x, sp + ".init");
      if (init == "zero")
        spec.init = PerturbationSpec::Init::zero;
      else if (init == "random")
        spec.init = PerturbationSpec::Init::random;
      else
        fail(sp + ".init", "expected \"zero\" or \"random\"");
    }
    if (const json* x = find(o, "l1_topk")) {
      spec.l1_topk = int_at(*x, sp + ".l1_topk");
      if (spec.l1_topk < 1) fail(sp + ".l1_topk", "must be >= 1");
    }
    set.specs.push_back(spec);
  }
  return set;
}

json train_to_json(const TrainConfig& t) {
  return json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"lr", t.lr},
              {"momentum", t.momentum},
              {"weight_decay", t.weight_decay},
              {"lr_milestones", t.lr_milestones},
              {"lr_factor", t.lr_factor},
              {"strategy", strategy_name(t.strategy)},
              {"eval_every", t.eval_every},
              {"workers", t.workers},
              {"clamp_input", t.clamp.enabled},
              {"hflip", t.hflip}};
}

TrainConfig train_from_json(const json& v, const std::string& path) {
  check_keys(v, path,
             {"epochs", "batch_size", "lr", "momentum", "weight_decay", "lr_milestones",
              "lr_factor", "strategy", "eval_every", "workers", "clamp_input", "hflip"});
  TrainConfig t;
  if (const json* x = find(v, "epochs")) t.epochs = int_at(*x, path + ".epochs");
  if (const json* x = find(v, "batch_size")) t.batch_size = int_at(*x, path + ".batch_size");
  if (const json* x = find(v, "lr")) t.lr = num_at(*x, path + ".lr");
  if (const json* x = find(v, "momentum")) t.momentum = num_at(*x, path + ".momentum");
  if (const json* x = find(v, "weight_decay")) t.weight_decay = num_at(*x, path + ".weight_decay");
  if (const json* x = find(v, "lr_milestones")) {
    if (!x->is_array()) fail(path + ".lr_milestones", "expected an array");
    for (size_t i = 0; i < x->size(); ++i)
      t.lr_milestones.push_back(
          int_at((*x)[i], path + ".lr_milestones[" + std::to_string(i) + "]"));
  }
  if (const json* x = find(v, "lr_factor")) t.lr_factor = num_at(*x, path + ".lr_factor");
  if (const json* x = find(v, "strategy")) {
    try {
      t.strategy = strategy_from_name(str_at(*x, path + ".strategy"));
    } catch (const ConfigError& e) {
      fail(path + ".strategy", e.what());
    }
  }
  if (const json* x = find(v, "eval_every")) t.eval_every = int_at(*x, path + ".eval_every");
  if (const json* x = find(v, "workers")) t.workers = int_at(*x, path + ".workers");
  if (const json* x = find(v, "clamp_input")) t.clamp.enabled = bool_at(*x, path + ".clamp_input");
  if (const json* x = find(v, "hflip")) t.hflip = bool_at(*x, path + ".hflip");
  return t;
}

json dataset_to_json(const DatasetSpec& d) {
  json o{{"kind", d.kind},
         {"classes", d.classes},
         {"channels", d.channels},
         {"height", d.height},
         {"width", d.width},
         {"train_per_class", d.train_per_class},
         {"test_per_class", d.test_per_class},
         {"noise_std", d.noise_std},
         {"seed", d.seed}};
  if (d.kind == "cifar10") {
    o["train_files"] = d.train_files;
    o["test_files"] = d.test_files;
  }
  return o;
}

DatasetSpec dataset_from_json(const json& v, const std::string& path) {
  check_keys(v, path,
             {"kind", "classes", "channels", "height", "width", "train_per_class",
              "test_per_class", "noise_std", "seed", "train_files", "test_files"});
  DatasetSpec d;
  if (const json* x = find(v, "kind")) d.kind = str_at(*x, path + ".kind");
  if (d.kind != "blobs" && d.kind != "stripes" && d.kind != "checker" && d.kind != "cifar10")
    fail(path + ".kind", "unknown dataset \"" + d.kind +
                             "\", expected blobs, stripes, checker or cifar10");
  if (const json* x = find(v, "classes")) d.classes = uint_at(*x, path + ".classes");
  if (const json* x = find(v, "channels")) d.channels = uint_at(*x, path + ".channels");
  if (const json* x = find(v, "height")) d.height = uint_at(*x, path + ".height");
  if (const json* x = find(v, "width")) d.width = uint_at(*x, path + ".width");
  if (const json* x = find(v, "train_per_class"))
    d.train_per_class = uint_at(*x, path + ".train_per_class");
  if (const json* x = find(v, "test_per_class"))
    d.test_per_class = uint_at(*x, path + ".test_per_class");
  if (const json* x = find(v, "noise_std")) {
    d.noise_std = num_at(*x, path + ".noise_std");
    if (d.noise_std < 0) fail(path + ".noise_std", "must be >= 0");
  }
  if (const json* x = find(v, "seed")) d.seed = u64_at(*x, path + ".seed");
  if (const json* x = find(v, "train_files")) {
    if (!x->is_array()) fail(path + ".train_files", "expected an array");
    for (const auto& f : *x) d.train_files.push_back(str_at(f, path + ".train_files[]"));
  }
  if (const json* x = find(v, "test_files")) {
    if (!x->is_array()) fail(path + ".test_files", "expected an array");
    for (const auto& f : *x) d.test_files.push_back(str_at(f, path + ".test_files[]"));
  }
  return d;
}

json run_config_to_json(const RunConfig& cfg) {
  return json{{"plan", plan_to_json(cfg.plan)},
              {"hypernet", hypernet_to_json(cfg.hypernet)},
              {"attacks", attacks_to_json(cfg.attacks)},
              {"train", train_to_json(cfg.train)},
              {"dataset", dataset_to_json(cfg.dataset)},
              {"out_dir", cfg.out_dir},
              {"seed", cfg.seed},
              {"precision", cfg.precision}};
}

RunConfig run_config_from_json(const json& v, const std::string& origin) {
  check_keys(v, origin,
             {"plan", "hypernet", "attacks", "train", "dataset", "out_dir", "seed", "precision"});
  RunConfig cfg;
  cfg.plan = plan_from_json(need(v, origin, "plan"), origin + ".plan");
  if (const json* x = find(v, "hypernet"))
    cfg.hypernet = hypernet_from_json(*x, origin + ".hypernet");
  if (const json* x = find(v, "attacks")) cfg.attacks = attacks_from_json(*x, origin + ".attacks");
  if (const json* x = find(v, "train")) cfg.train = train_from_json(*x, origin + ".train");
  if (const json* x = find(v, "dataset")) cfg.dataset = dataset_from_json(*x, origin + ".dataset");
  if (const json* x = find(v, "out_dir")) cfg.out_dir = str_at(*x, origin + ".out_dir");
  if (const json* x = find(v, "seed")) cfg.seed = u64_at(*x, origin + ".seed");
  if (const json* x = find(v, "precision")) cfg.precision = str_at(*x, origin + ".precision");
  cfg.train.seed = cfg.seed;
  cfg.train.attacks = cfg.attacks;
  return cfg;
}

}  // namespace cfgjson

void RunConfig::validate() const {
  if (precision != "f32" && precision != "f64")
    throw ConfigError("precision must be \"f32\" or \"f64\", got \"" + precision + "\"");
  if (hypernet.n_z == 0 || hypernet.d_h == 0 || hypernet.c_u == 0)
    throw ConfigError("hypernet dimensions must be positive");
  if (hypernet.k_u != 1 && hypernet.k_u != 3)
    throw ConfigError("hypernet.k_u must be 1 or 3, got " + std::to_string(hypernet.k_u));
  try {
    build_plan(plan, hypernet.c_u);
  } catch (const Error& e) {
    throw ConfigError(std::string("plan: ") + e.what());
  }
  attacks.validate();
  train.validate();
  if (dataset.kind == "cifar10") {
    if (dataset.train_files.empty() || dataset.test_files.empty())
      throw ConfigError("dataset.train_files and dataset.test_files are required for cifar10");
  } else {
    if (dataset.classes < 2) throw ConfigError("dataset.classes must be >= 2");
    if (dataset.channels == 0 || dataset.height == 0 || dataset.width == 0 ||
        dataset.train_per_class == 0 || dataset.test_per_class == 0)
      throw ConfigError("dataset sizes must be positive");
    const BackbonePlan p = build_plan(plan, hypernet.c_u);
    if (p.in_c != dataset.channels || p.in_h != dataset.height || p.in_w != dataset.width)
      throw ConfigError("plan input " + shape_str({p.in_c, p.in_h, p.in_w}) +
                        " does not match dataset shape " +
                        shape_str({dataset.channels, dataset.height, dataset.width}));
    if (p.num_classes != dataset.classes)
      throw ConfigError("fc head emits " + std::to_string(p.num_classes) +
                        " classes but the dataset has " + std::to_string(dataset.classes));
  }
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  cfgjson::json v;
  try {
    v = cfgjson::json::parse(text);
  } catch (const cfgjson::json::parse_error& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
  RunConfig cfg = cfgjson::run_config_from_json(v, origin);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), path);
}

std::string run_config_canonical(const RunConfig& cfg) {
  return cfgjson::run_config_to_json(cfg).dump();
}

uint64_t fnv1a64(const void* data, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t config_hash(const RunConfig& cfg) {
  const std::string s = run_config_canonical(cfg);
  return fnv1a64(s.data(), s.size());
}

template <typename T>
std::pair<Dataset<T>, Dataset<T>> load_dataset(const RunConfig& cfg) {
  const DatasetSpec& d = cfg.dataset;
  if (d.kind == "cifar10")
    return {read_cifar10_binary<T>(d.train_files, "train"),
            read_cifar10_binary<T>(d.test_files, "test")};
  SynthConfig sc;
  sc.kind = synth_kind_from_name(d.kind);
  sc.classes = d.classes;
  sc.channels = d.channels;
  sc.height = d.height;
  sc.width = d.width;
  sc.noise_std = d.noise_std;
  sc.seed = d.seed;
  sc.n_per_class = d.train_per_class;
  Dataset<T> train = synth_generate_one<T>(sc, "train");
  sc.n_per_class = d.test_per_class;
  Dataset<T> test = synth_generate_one<T>(sc, "test");
  return {std::move(train), std::move(test)};
}

template std::pair<Dataset<float>, Dataset<float>> load_dataset(const RunConfig&);
template std::pair<Dataset<double>, Dataset<double>> load_dataset(const RunConfig&);

}  // namespace psat
