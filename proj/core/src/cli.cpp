#include "psat/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "psat/checkpoint.hpp"
#include "psat/config.hpp"
#include "psat/ensemble.hpp"
#include "psat/errors.hpp"
#include "psat/metrics.hpp"
#include "psat/training.hpp"

namespace psat {
namespace {

namespace fs = std::filesystem;

enum class LogLevel { debug = 0, info = 1, quiet = 2 };

LogLevel log_level_from_env() {
  const char* e = std::getenv("PSAT_LOG");
  if (e == nullptr) return LogLevel::info;
  const std::string s(e);
  if (s == "debug") return LogLevel::debug;
  if (s == "quiet") return LogLevel::quiet;
  return LogLevel::info;
}

// stderr stays timestamp-free so piped output is reproducible; only the run
// directory's sidecar log carries wall-clock times.
class Logger {
 public:
  Logger() : level_(log_level_from_env()) {}

  void attach(const std::string& path) {
    side_.open(path, std::ios::app);
    if (side_.is_open()) side_ << stamp() << "log opened\n";
  }

  void info(const std::string& msg) { emit(LogLevel::info, msg); }
  void debug(const std::string& msg) { emit(LogLevel::debug, msg); }

 private:
  static std::string stamp() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::strftime(buf, sizeof(buf), "[%Y-%m-%d %H:%M:%S] ", &tm);
    return buf;
  }

  void emit(LogLevel lv, const std::string& msg) {
    if (int(lv) >= int(level_) && level_ != LogLevel::quiet) std::cerr << msg << "\n";
    if (side_.is_open() && (lv != LogLevel::debug || level_ == LogLevel::debug)) {
      side_ << stamp() << msg << "\n";
      side_.flush();
    }
  }

  LogLevel level_;
  std::ofstream side_;
};

// One writer per run directory. The lock file is created exclusively and
// removed on scope exit; a leftover lock from a crashed run must be removed
// by hand.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(dir + "/.lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw IoError("run directory is locked by " + path_ +
                    " (another process is writing here, or a stale lock needs removing)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    ssize_t rc = ::write(fd_, pid.data(), pid.size());
    (void)rc;
  }

  ~DirLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }

  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  int workers = 0;
  bool workers_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--config", c.config_path, "run configuration (JSON)")->required();
  cmd->add_option("--out", c.out_dir, "output directory override");
  cmd->add_option("--seed", c.seed, "seed override")->each([&c](const std::string&) {
    c.seed_set = true;
  });
  cmd->add_option("--workers", c.workers, "attack worker override")
      ->each([&c](const std::string&) { c.workers_set = true; });
}

RunConfig load_with_overrides(const CommonOpts& c) {
  RunConfig cfg = load_run_config(c.config_path);
  if (c.seed_set) {
    cfg.seed = c.seed;
    cfg.train.seed = c.seed;
  }
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  if (c.workers_set) cfg.train.workers = c.workers;
  cfg.validate();
  return cfg;
}

template <typename F>
int with_precision(const RunConfig& cfg, F&& f) {
  if (cfg.precision == "f64") return f(double{});
  return f(float{});
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

template <typename T>
TrainHooks<T> logging_hooks(Logger& log, const Dataset<T>* eval_data) {
  TrainHooks<T> hooks;
  hooks.eval_data = eval_data;
  hooks.on_batch = [&log](const BatchStats<T>& s) {
    if (s.batch == 0) log.info("epoch " + std::to_string(s.epoch) + " lr " + fmt("%g", s.lr));
    log.debug("epoch " + std::to_string(s.epoch) + " batch " + std::to_string(s.batch) +
              " loss " + fmt("%.6g", double(s.loss)));
  };
  return hooks;
}

// Per-example attack seeds share the evaluation stream so attack CSV rows
// line up with eval's per-norm accuracies.
constexpr uint64_t kEvalAttackDomain = 4;

template <typename T>
Tensor<T> slice_examples(const Tensor<T>& x, size_t start, size_t count) {
  std::vector<size_t> shape = x.shape();
  const size_t row = x.numel() / shape[0];
  shape[0] = count;
  std::vector<T> out(x.values().begin() + start * row, x.values().begin() + (start + count) * row);
  return Tensor<T>::from(std::move(shape), std::move(out));
}

// ---------------------------------------------------------------------------
// train

template <typename T>
int train_impl(const RunConfig& cfg, Logger& log) {
  const BackbonePlan plan = build_plan(cfg.plan, cfg.hypernet.c_u);
  auto [train_data, test_data] = load_dataset<T>(cfg);
  log.info("dataset: " + train_data.provenance + ", " + std::to_string(train_data.size()) +
           " train / " + std::to_string(test_data.size()) + " test");

  TrainHooks<T> hooks = logging_hooks<T>(log, &test_data);

  AggregatedModel<T> model;
  model.plan = plan;
  model.hcfg = cfg.hypernet;
  History merged;
  auto append = [&merged](const History& h, const std::string& tag) {
    for (const HistoryRow& r : h.rows) merged.add(r.epoch, r.split + "/" + tag, r.metric, r.value);
  };

  switch (cfg.train.strategy) {
    case Strategy::psat: {
      std::vector<History> hist;
      model = train_psat<T>(plan, cfg.hypernet, train_data, cfg.attacks, cfg.train, hooks, &hist);
      for (size_t i = 0; i < model.members.size(); ++i) append(hist[i], model.members[i].tag);
      break;
    }
    case Strategy::single: {
      if (cfg.attacks.specs.size() != 1)
        throw ConfigError("strategy \"single\" needs exactly one attack spec, got " +
                          std::to_string(cfg.attacks.specs.size()));
      const PerturbationSpec spec = cfg.attacks.specs.front();
      Member<T> m = init_member<T>(plan, cfg.hypernet, cfg.seed, norm_name(spec.p));
      append(train_single(plan, m, train_data, spec, cfg.train, hooks), m.tag);
      model.members.push_back(std::move(m));
      break;
    }
    case Strategy::max:
    case Strategy::avg:
    case Strategy::msd: {
      const std::string tag = strategy_name(cfg.train.strategy);
      Member<T> m = init_member<T>(plan, cfg.hypernet, cfg.seed, tag);
      History h;
      if (cfg.train.strategy == Strategy::max)
        h = train_max(plan, m, train_data, cfg.attacks, cfg.train, hooks);
      else if (cfg.train.strategy == Strategy::avg)
        h = train_avg(plan, m, train_data, cfg.attacks, cfg.train, hooks);
      else
        h = train_msd(plan, m, train_data, cfg.attacks, cfg.train, hooks);
      append(h, tag);
      model.members.push_back(std::move(m));
      break;
    }
  }

  const std::string ckpt = cfg.out_dir + "/model.ckpt";
  save_checkpoint(ckpt, model, config_hash(cfg), run_config_canonical(cfg));
  write_history_csv(merged, cfg.out_dir + "/history.csv");

  size_t params = 0;
  for (size_t i = 0; i < model.members.size(); ++i)
    params += member_param_count(plan, cfg.hypernet);
  std::cout << "trained " << strategy_name(cfg.train.strategy) << ": " << model.members.size()
            << " member(s), " << params << " parameters\n";
  std::cout << "wrote " << ckpt << "\n";
  std::cout << "wrote " << cfg.out_dir << "/history.csv\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalCliOpts {
  std::string checkpoint;
  std::string eval_mode = "avg-surrogate";
  std::string inference = "lowest-entropy";
  bool dump_predictions = false;
  bool member_rows = false;
};

template <typename T>
int eval_impl(const RunConfig& cfg, const EvalCliOpts& eo, Logger& log) {
  const std::string path = eo.checkpoint.empty() ? cfg.out_dir + "/model.ckpt" : eo.checkpoint;
  LoadedCheckpoint<T> ck = load_checkpoint<T>(path);
  log.info("loaded " + path + ", " + std::to_string(ck.model.members.size()) + " member(s)");
  if (ck.config_hash != 0 && ck.config_hash != config_hash(cfg))
    log.info("warning: config hash differs from the checkpoint's; metrics may not correspond "
             "to this config");

  auto [train_data, test_data] = load_dataset<T>(cfg);
  (void)train_data;

  EvalOptions opts;
  opts.seed = cfg.seed;
  opts.workers = cfg.train.workers;
  opts.clamp = cfg.train.clamp;
  opts.mode = eval_mode_from_name(eo.eval_mode);
  opts.inference = inference_mode_from_name(eo.inference);
  opts.config_hash = config_hash(cfg);
  opts.name = ck.model.members.size() > 1 ? "psat" : ck.model.members.front().tag;

  std::vector<MetricsReport> reports;
  if (eo.member_rows && ck.model.members.size() > 1) {
    for (const Member<T>& m : ck.model.members) {
      EvalOptions mo = opts;
      mo.name = m.tag;
      reports.push_back(evaluate_member(ck.model.plan, m, test_data, cfg.attacks, mo));
      log.info("member " + m.tag + " evaluated");
    }
  }
  reports.push_back(evaluate_aggregate(ck.model, test_data, cfg.attacks, opts));

  write_metrics_json(reports, cfg.out_dir + "/metrics.json");
  write_metrics_csv(reports, cfg.out_dir + "/metrics.csv");
  const std::string table = render_metrics_table(reports);
  std::ofstream(cfg.out_dir + "/table.txt") << table;
  if (eo.dump_predictions)
    write_prediction_dump(ck.model, test_data, cfg.out_dir + "/predictions.csv");

  std::cout << table;
  return 0;
}

// ---------------------------------------------------------------------------
// attack

struct AttackCliOpts {
  std::string checkpoint;
  std::string norm;  // empty = all configured norms
  std::string inference = "lowest-entropy";
};

template <typename T>
int attack_impl(const RunConfig& cfg, const AttackCliOpts& ao, Logger& log) {
  const std::string path = ao.checkpoint.empty() ? cfg.out_dir + "/model.ckpt" : ao.checkpoint;
  LoadedCheckpoint<T> ck = load_checkpoint<T>(path);
  auto [train_data, test_data] = load_dataset<T>(cfg);
  (void)train_data;

  PerturbationSet set = cfg.attacks;
  if (!ao.norm.empty()) {
    const Norm p = norm_from_name(ao.norm);
    const PerturbationSpec* spec = cfg.attacks.find(p);
    if (spec == nullptr)
      throw ConfigError("attacks: no spec for norm \"" + ao.norm + "\" in this config");
    set.specs = {*spec};
  }

  const InferenceMode inference = inference_mode_from_name(ao.inference);
  ModelFn<T> surrogate = aggregate_surrogate(ck.model);
  const size_t n = test_data.size();

  std::ofstream out(cfg.out_dir + "/attack.csv");
  if (!out) throw IoError("cannot write " + cfg.out_dir + "/attack.csv");
  out << "example,norm,attack_loss,delta_inf,delta_l2,delta_l1,true_label,adv_label,success\n";

  for (const PerturbationSpec& spec : set.specs) {
    size_t flipped = 0;
    for (size_t start = 0; start < n; start += 256) {
      const size_t count = std::min<size_t>(256, n - start);
      Tensor<T> xb = slice_examples(test_data.x, start, count);
      std::vector<int> yb(test_data.y.begin() + start, test_data.y.begin() + start + count);
      std::vector<uint64_t> seeds(count);
      for (size_t i = 0; i < count; ++i)
        seeds[i] = mix64(mix64(cfg.seed, kEvalAttackDomain), start + i);

      AttackResult<T> r =
          pgd_attack(surrogate, xb, yb, spec, cfg.train.clamp, seeds, cfg.train.workers);
      Tensor<T> x_adv = add(xb, r.delta);
      std::vector<Prediction<T>> preds = inference == InferenceMode::lowest_entropy
                                             ? predict_lowest_entropy(ck.model, x_adv)
                                             : predict_average(ck.model, x_adv);

      const size_t row = xb.numel() / count;
      for (size_t i = 0; i < count; ++i) {
        double dinf = 0, d1 = 0, d2 = 0;
        const T* d = r.delta.data() + i * row;
        for (size_t j = 0; j < row; ++j) {
          const double a = std::fabs(double(d[j]));
          dinf = std::max(dinf, a);
          d1 += a;
          d2 += a * a;
        }
        const bool success = preds[i].label != yb[i];
        flipped += success ? 1 : 0;
        out << (start + i) << ',' << norm_name(spec.p) << ',' << fmt("%.6g", double(r.loss[i]))
            << ',' << fmt("%.6g", dinf) << ',' << fmt("%.6g", std::sqrt(d2)) << ','
            << fmt("%.6g", d1) << ',' << yb[i] << ',' << preds[i].label << ','
            << (success ? 1 : 0) << "\n";
      }
      log.debug("norm " + norm_name(spec.p) + ": " + std::to_string(start + count) + "/" +
                std::to_string(n) + " examples");
    }
    std::cout << "norm " << norm_name(spec.p) << ": flipped " << flipped << "/" << n << " ("
              << fmt("%.2f", 100.0 * double(flipped) / double(n)) << "%)\n";
  }
  if (!out.flush()) throw IoError("short write to " + cfg.out_dir + "/attack.csv");
  std::cout << "wrote " << cfg.out_dir << "/attack.csv\n";
  return 0;
}

// ---------------------------------------------------------------------------
// params

int params_impl(const RunConfig& cfg) {
  const BackbonePlan plan = build_plan(cfg.plan, cfg.hypernet.c_u);
  const size_t backbone = count_params(plan, ParamPartition::all);
  const size_t direct = count_params(plan, ParamPartition::direct);
  const size_t member = member_param_count(plan, cfg.hypernet);

  const HypernetConfig& h = cfg.hypernet;
  const size_t unit = h.c_u * h.c_u * h.k_u * h.k_u;
  const size_t core = h.d_h * h.n_z + h.d_h + h.d_h * unit + unit;
  size_t embeddings = 0;
  for (size_t li : plan.generated_layers) embeddings += chunk_count(plan.layers[li], h.c_u) * h.n_z;

  const size_t members = cfg.attacks.specs.size();
  const size_t aggregate = member * members;
  const double saving = param_savings(aggregate, backbone);

  std::cout << "backbone:  " << backbone << "\n";
  std::cout << "member:    " << member << " (hypernet " << core << ", embeddings " << embeddings
            << ", direct " << direct << ")\n";
  std::cout << "aggregate: " << aggregate << " (" << members << " members)\n";
  std::cout << "savings:   " << fmt("%.2f", std::fabs(saving)) << "% "
            << (saving >= 0 ? "saved" : "added") << " vs backbone\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report

std::string render_tradeoff_svg(const std::vector<MetricsReport>& reports) {
  // Trade-off accuracy against parameter percentage of the reference count.
  struct Pt {
    double x, y;
    std::string name;
  };
  std::vector<Pt> pts;
  for (const MetricsReport& r : reports) {
    if (r.param_count_reference == 0) continue;
    pts.push_back({100.0 * double(r.param_count_model) / double(r.param_count_reference),
                   r.acc_tradeoff, r.name});
  }
  std::sort(pts.begin(), pts.end(), [](const Pt& a, const Pt& b) { return a.x < b.x; });

  const double w = 640, hgt = 400, ml = 60, mr = 20, mt = 20, mb = 50;
  double xmax = 100;
  for (const Pt& p : pts) xmax = std::max(xmax, p.x);
  xmax = std::ceil(xmax / 20.0) * 20.0;
  auto sx = [&](double v) { return ml + (w - ml - mr) * v / xmax; };
  auto sy = [&](double v) { return hgt - mb - (hgt - mt - mb) * v / 100.0; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << hgt
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int v = 0; v <= 100; v += 20) {
    s << "<line x1=\"" << ml << "\" y1=\"" << sy(v) << "\" x2=\"" << w - mr << "\" y2=\"" << sy(v)
      << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << ml - 8 << "\" y=\"" << sy(v) + 4
      << "\" text-anchor=\"end\">" << v << "</text>\n";
  }
  for (double v = 0; v <= xmax + 0.5; v += 20) {
    s << "<text x=\"" << sx(v) << "\" y=\"" << hgt - mb + 18
      << "\" text-anchor=\"middle\">" << int(v) << "</text>\n";
  }
  s << "<line x1=\"" << ml << "\" y1=\"" << sy(0) << "\" x2=\"" << w - mr << "\" y2=\"" << sy(0)
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << ml << "\" y1=\"" << sy(0) << "\" x2=\"" << ml << "\" y2=\"" << sy(100)
    << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << hgt - 10
    << "\" text-anchor=\"middle\">parameters (% of reference)</text>\n";
  s << "<text x=\"15\" y=\"" << (mt + hgt - mb) / 2
    << "\" text-anchor=\"middle\" transform=\"rotate(-90 15 " << (mt + hgt - mb) / 2
    << ")\">trade-off accuracy (%)</text>\n";
  if (pts.size() > 1) {
    s << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (const Pt& p : pts) s << sx(p.x) << ',' << sy(p.y) << ' ';
    s << "\"/>\n";
  }
  for (const Pt& p : pts) {
    s << "<circle cx=\"" << sx(p.x) << "\" cy=\"" << sy(p.y)
      << "\" r=\"4\" fill=\"#1f77b4\"/>\n";
    s << "<text x=\"" << sx(p.x) + 6 << "\" y=\"" << sy(p.y) - 6 << "\">" << p.name
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

int report_impl(const std::vector<std::string>& files, const std::string& svg_path) {
  std::vector<MetricsReport> merged;
  for (const std::string& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw IoError("cannot open " + f);
    std::ostringstream ss;
    ss << in.rdbuf();
    std::vector<MetricsReport> rs = metrics_from_json(ss.str());
    merged.insert(merged.end(), rs.begin(), rs.end());
  }
  std::cout << render_metrics_table(merged);
  if (!svg_path.empty()) {
    std::ofstream out(svg_path);
    if (!out) throw IoError("cannot write " + svg_path);
    out << render_tradeoff_svg(merged);
    std::cout << "wrote " << svg_path << "\n";
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"parameter-saving adversarial training"};
  app.name("psat");
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  CommonOpts tc, ac, ec, pc;
  EvalCliOpts eo;
  AttackCliOpts ao;
  std::vector<std::string> report_files;
  std::string svg_path;

  CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train, tc);

  CLI::App* attack = app.add_subcommand("attack", "attack a checkpoint, one CSV row per example");
  add_common(attack, ac);
  attack->add_option("--checkpoint", ao.checkpoint, "checkpoint path (default <out>/model.ckpt)");
  attack->add_option("--norm", ao.norm, "restrict to one configured norm (inf|2|1)");
  attack->add_option("--inference", ao.inference, "lowest-entropy | average");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint, write metric reports");
  add_common(eval, ec);
  eval->add_option("--checkpoint", eo.checkpoint, "checkpoint path (default <out>/model.ckpt)");
  eval->add_option("--eval-mode", eo.eval_mode, "avg-surrogate | per-member-worst");
  eval->add_option("--inference", eo.inference, "lowest-entropy | average");
  eval->add_flag("--dump-predictions", eo.dump_predictions, "write per-example entropies");
  eval->add_flag("--members", eo.member_rows, "add one white-box row per member");

  CLI::App* params = app.add_subcommand("params", "print parameter counts and savings");
  add_common(params, pc);

  CLI::App* report = app.add_subcommand("report", "merge metric JSON files into one table");
  report->add_option("files", report_files, "metrics.json files")->required();
  report->add_option("--svg", svg_path, "also plot trade-off vs parameter percentage");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(std::move(rev));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  Logger log;
  try {
    if (train->parsed()) {
      RunConfig cfg = load_with_overrides(tc);
      fs::create_directories(cfg.out_dir);
      DirLock lock(cfg.out_dir);
      log.attach(cfg.out_dir + "/run.log");
      log.info("train: config " + tc.config_path + ", seed " + std::to_string(cfg.seed) +
               ", strategy " + strategy_name(cfg.train.strategy));
      return with_precision(cfg, [&](auto z) { return train_impl<decltype(z)>(cfg, log); });
    }
    if (attack->parsed()) {
      RunConfig cfg = load_with_overrides(ac);
      fs::create_directories(cfg.out_dir);
      DirLock lock(cfg.out_dir);
      log.attach(cfg.out_dir + "/run.log");
      return with_precision(cfg, [&](auto z) { return attack_impl<decltype(z)>(cfg, ao, log); });
    }
    if (eval->parsed()) {
      RunConfig cfg = load_with_overrides(ec);
      fs::create_directories(cfg.out_dir);
      DirLock lock(cfg.out_dir);
      log.attach(cfg.out_dir + "/run.log");
      return with_precision(cfg, [&](auto z) { return eval_impl<decltype(z)>(cfg, eo, log); });
    }
    if (params->parsed()) {
      RunConfig cfg = load_with_overrides(pc);
      return params_impl(cfg);
    }
    if (report->parsed()) return report_impl(report_files, svg_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

}  // namespace psat
