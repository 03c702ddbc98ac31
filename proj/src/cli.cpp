#include "cosoc/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "cosoc/cos_seeker.hpp"
#include "cosoc/crop_geometry.hpp"
#include "cosoc/feature_store.hpp"
#include "cosoc/fsl_eval.hpp"
#include "cosoc/io.hpp"
#include "cosoc/parallel.hpp"
#include "cosoc/synthetic_world.hpp"

#ifndef COSOC_VERSION
#define COSOC_VERSION "0.0.0"
#endif

namespace cosoc::cli {
namespace {

using nlohmann::json;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  int workers = default_workers();
  std::string out;
};

struct CropPlanArgs {
  std::string images;
  int l = 30;
  double min_area = CropConstraints{}.min_area_ratio;
  double aspect_lo = CropConstraints{}.aspect_lo;
  double aspect_hi = CropConstraints{}.aspect_hi;
};

struct CosArgs {
  std::string store;
  double gamma = 0.5;
  int clusters = 5;
  int topk = 3;
  int max_iter = 100;
};

struct EvalArgs {
  std::string store;
  std::string classifier = "soc";
  int n = 5;
  int k = 5;
  int m = 15;
  int tasks = 2000;
  int repeats = 5;
  double alpha = 0.8;
  double beta = 0.8;
  int crops = 7;
  std::string method = "auto";
  bool cos_select = false;
  double gamma = 0.5;
  int clusters = 5;
  std::string trace;
};

struct SweepArgs {
  std::string param;
  std::vector<double> values;
};

struct WorldArgs {
  WorldConfig world;
  std::string preset = "shortcut";
};

struct SynthArgs {
  std::string split = "train";
};

struct ShortcutArgs {
  int seeds = 10;
  int episodes = 500;
  int n = 5;
  int k = 5;
  int m = 15;
  int crops = 7;
  double alpha = 0.8;
  double beta = 0.8;
  int epochs = 200;
  double lr = 1.0;
};

void add_common(CLI::App& sub, Common& c, bool output_file = true) {
  sub.add_option("--config", c.config, "JSON file whose keys match flag names (flags win)");
  sub.add_option("--seed", c.seed, "master seed (COSOC_SEED overrides)");
  sub.add_option("--workers", c.workers, "parallel workers")->check(CLI::PositiveNumber);
  if (output_file) sub.add_option("--out", c.out, "output JSON file (stdout if omitted)");
}

void add_eval_options(CLI::App& sub, EvalArgs& a) {
  sub.add_option("--store", a.store, "feature store directory");
  sub.add_option("--classifier", a.classifier, "cc | pn-proto | soc | multicrop-cc");
  sub.add_option("--n", a.n, "ways");
  sub.add_option("--k", a.k, "shots");
  sub.add_option("--m", a.m, "queries per class");
  sub.add_option("--tasks", a.tasks, "episodes per repeat");
  sub.add_option("--repeats", a.repeats);
  sub.add_option("--alpha", a.alpha, "prototype rank weight");
  sub.add_option("--beta", a.beta, "match round weight");
  sub.add_option("--crops", a.crops, "crops per image (V)");
  sub.add_option("--method", a.method, "shared prototype search: auto | exact | iterative");
  sub.add_flag("--cos-select", a.cos_select, "rank crop views by foreground score before taking the first V");
  sub.add_option("--gamma", a.gamma, "cluster pruning threshold for --cos-select");
  sub.add_option("--clusters", a.clusters, "cluster count H for --cos-select");
}

void add_world_options(CLI::App& sub, WorldArgs& w) {
  auto& c = w.world;
  sub.add_option("--preset", w.preset, "named world configuration")->check(CLI::IsMember({"shortcut"}));
  sub.add_option("--classes", c.classes);
  sub.add_option("--images", c.images, "images per class");
  sub.add_option("--crops", c.crops, "crops per image");
  sub.add_option("--d", c.d, "feature dimension");
  sub.add_option("--fg-dims", c.fg_dims)->delimiter(',');
  sub.add_option("--bg-dims", c.bg_dims)->delimiter(',');
  sub.add_option("--rho-train", c.rho_train);
  sub.add_option("--rho-eval", c.rho_eval);
  sub.add_option("--sigma", c.sigma);
  sub.add_option("--fg-crop-fraction", c.fg_crop_fraction);
  sub.add_option("--novel-eval-classes", c.novel_eval_classes);
  sub.add_option("--embed-dim", c.embed_dim);
}

std::string config_value(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw Error(ErrorCode::ConfigInvalid, "field '" + key + "': expected a string, number or boolean");
}

// Fills options not given on the command line from a JSON config. A previous
// output file works too: its embedded run_config is used.
void apply_config(CLI::App& sub, const std::string& path) {
  json j = read_json_file(path);
  if (j.is_object() && j.contains("run_config")) j = j["run_config"];
  if (!j.is_object()) throw Error(ErrorCode::ConfigInvalid, path + ": config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "subcommand" || key == "config") continue;
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    CLI::Option* opt = sub.get_option_no_throw("--" + flag);
    if (!opt) throw Error(ErrorCode::ConfigInvalid, "field '" + key + "': not an option of '" + sub.get_name() + "'");
    if (opt->count() > 0) continue;
    if (value.is_array()) {
      for (const auto& item : value) opt->add_result(config_value(item, key));
    } else {
      opt->add_result(config_value(value, key));
    }
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw Error(ErrorCode::ConfigInvalid, "field '" + key + "': " + e.what());
    }
  }
}

void apply_env_seed(std::uint64_t& seed) {
  const char* env = std::getenv("COSOC_SEED");
  if (!env || !*env) return;
  const std::string text = env;
  std::size_t used = 0;
  try {
    if (text.front() == '-') throw std::invalid_argument("negative");
    seed = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size()) throw Error(ErrorCode::ConfigInvalid, "COSOC_SEED must be a non-negative integer");
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw Error(ErrorCode::ConfigInvalid, std::string("field '") + flag + "': required");
}

json tool_version() { return {{"tool", "cosoc"}, {"version", COSOC_VERSION}}; }

json stamp(json body, const json& run_config) {
  body["run_config"] = run_config;
  body["version"] = tool_version();
  return body;
}

void emit(const json& doc, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << doc.dump(2) << "\n";
  } else {
    write_json_file(path, doc);
  }
}

std::vector<std::string> read_image_ids(const std::string& path) {
  const json j = read_json_file(path);
  const json& list = j.is_object() && j.contains("images") ? j["images"] : j;
  if (!list.is_array()) throw Error(ErrorCode::SchemaError, path + ": expected a list of image ids");
  std::vector<std::string> ids;
  for (const auto& id : list) {
    if (!id.is_string()) throw Error(ErrorCode::SchemaError, path + ": image ids must be strings");
    ids.push_back(id.get<std::string>());
  }
  return ids;
}

int cmd_crop_plan(const Common& c, const CropPlanArgs& a, std::ostream& out) {
  require(a.images, "images");
  const json run_config{{"subcommand", "crop-plan"}, {"images", a.images},       {"l", a.l},
                        {"min-area", a.min_area},    {"aspect-lo", a.aspect_lo}, {"aspect-hi", a.aspect_hi},
                        {"seed", c.seed},            {"out", c.out}};
  const auto ids = read_image_ids(a.images);
  const CropConstraints constraints{a.min_area, a.aspect_lo, a.aspect_hi};
  const CropPlan plan = make_crop_plan(ids, a.l, c.seed, constraints);
  emit(stamp(plan_to_json(plan), run_config), c.out, out);
  return kExitOk;
}

CosParams cos_params(const Common& c, const CosArgs& a) {
  CosParams p;
  p.gamma = a.gamma;
  p.clusters = a.clusters;
  p.topk = a.topk;
  p.seed = c.seed;
  p.max_iter = a.max_iter;
  return p;
}

int cmd_cos(const Common& c, const CosArgs& a, std::ostream& out) {
  require(a.store, "store");
  const json run_config{{"subcommand", "cos"}, {"store", a.store}, {"gamma", a.gamma},       {"clusters", a.clusters},
                        {"topk", a.topk},      {"seed", c.seed},   {"max-iter", a.max_iter}, {"out", c.out}};
  const FeatureStore store = load_store(a.store);
  const ForegroundTable table = seek_store(store, cos_params(c, a), c.workers);
  emit(stamp(foreground_json(table, store), run_config), c.out, out);
  return kExitOk;
}

PrototypeMethod method_from_string(const std::string& name) {
  if (name == "auto") return PrototypeMethod::Auto;
  if (name == "exact") return PrototypeMethod::Exact;
  if (name == "iterative") return PrototypeMethod::Iterative;
  throw Error(ErrorCode::ConfigInvalid, "field 'method': unknown value '" + name + "'");
}

json eval_run_config(const char* subcommand, const Common& c, const EvalArgs& a) {
  return {{"subcommand", subcommand}, {"store", a.store},     {"classifier", a.classifier},
          {"n", a.n},                 {"k", a.k},             {"m", a.m},
          {"tasks", a.tasks},         {"repeats", a.repeats}, {"alpha", a.alpha},
          {"beta", a.beta},           {"crops", a.crops},     {"method", a.method},
          {"cos-select", a.cos_select}, {"gamma", a.gamma},   {"clusters", a.clusters},
          {"seed", c.seed},           {"out", c.out}};
}

BenchmarkConfig benchmark_config(const Common& c, const EvalArgs& a) {
  BenchmarkConfig b;
  b.classifier = classifier_from_string(a.classifier);
  b.shape = {a.n, a.k, a.m};
  b.tasks = a.tasks;
  b.repeats = a.repeats;
  b.alpha = a.alpha;
  b.beta = a.beta;
  b.crops = a.crops;
  b.seed = c.seed;
  b.workers = c.workers;
  b.prototypes.method = method_from_string(a.method);
  b.prototypes.seed = c.seed;
  return b;
}

FeatureStore eval_store(const FeatureStore& store, const Common& c, const EvalArgs& a) {
  if (!a.cos_select) return store;
  CosArgs cos;
  cos.gamma = a.gamma;
  cos.clusters = a.clusters;
  cos.topk = 1;
  return order_by_foreground(store, seek_store(store, cos_params(c, cos), c.workers));
}

json evaluate(const FeatureStore& store, const Common& c, const EvalArgs& a) {
  const BenchmarkConfig config = benchmark_config(c, a);
  json report = report_json(run_benchmark(eval_store(store, c, a), config));
  report["config"]["gamma"] = a.gamma;
  report["config"]["H"] = a.clusters;
  report["config"]["cos_select"] = a.cos_select;
  return report;
}

int cmd_eval(const Common& c, const EvalArgs& a, std::ostream& out) {
  require(a.store, "store");
  json run_config = eval_run_config("eval", c, a);
  run_config["trace"] = a.trace;
  const BenchmarkConfig config = benchmark_config(c, a);
  if (!a.trace.empty() && config.classifier != ClassifierKind::Soc) {
    throw Error(ErrorCode::ConfigInvalid, "field 'trace': only available with --classifier soc");
  }
  const FeatureStore store = load_store(a.store);
  emit(stamp(evaluate(store, c, a), run_config), c.out, out);
  if (!a.trace.empty()) {
    const json traces = soc_trace_json(eval_store(store, c, a), config);
    write_json_file(a.trace, stamp({{"task", 0}, {"queries", traces}}, run_config));
  }
  return kExitOk;
}

int cmd_sweep(const Common& c, const EvalArgs& base, const SweepArgs& s, std::ostream& out, std::ostream& err) {
  require(base.store, "store");
  require(s.param, "param");
  if (s.param != "alpha" && s.param != "beta" && s.param != "gamma" && s.param != "H") {
    throw Error(ErrorCode::ConfigInvalid, "field 'param': unknown value '" + s.param + "'");
  }
  if (s.values.empty()) throw Error(ErrorCode::ConfigInvalid, "field 'values': at least one value required");
  json run_config = eval_run_config("sweep", c, base);
  run_config["param"] = s.param;
  run_config["values"] = s.values;
  const FeatureStore store = load_store(base.store);

  json reports = json::array();
  json summary = json::array();
  int status = kExitOk;
  for (double value : s.values) {
    EvalArgs a = base;
    try {
      if (s.param == "alpha") {
        a.alpha = value;
      } else if (s.param == "beta") {
        a.beta = value;
      } else if (s.param == "gamma") {
        a.gamma = value;
        a.cos_select = true;
      } else {
        if (value != std::floor(value) || value < 1.0) {
          throw Error(ErrorCode::InvalidArgument, "H must be a positive integer");
        }
        a.clusters = static_cast<int>(value);
        a.cos_select = true;
      }
      json report = evaluate(store, c, a);
      summary.push_back({{"value", value}, {"mean", report["mean"]}, {"ci95", report["ci95"]}});
      reports.push_back({{"value", value}, {"report", std::move(report)}});
    } catch (const Error& e) {
      err << "sweep " << s.param << "=" << value << ": " << e.what() << "\n";
      if (status == kExitOk) status = exit_code(e.code());
      reports.push_back({{"value", value}, {"error", e.what()}});
      summary.push_back({{"value", value}, {"error", to_string(e.code())}});
    }
  }
  emit(stamp({{"param", s.param}, {"summary", std::move(summary)}, {"reports", std::move(reports)}}, run_config), c.out,
       out);
  return status;
}

json world_run_config(const char* subcommand, const Common& c, const WorldArgs& w) {
  json cfg = config_to_json(w.world);
  json out{{"subcommand", subcommand}, {"preset", w.preset}, {"seed", c.seed}, {"out", c.out}};
  for (auto& [key, value] : cfg.items()) {
    if (key == "seed") continue;
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    out[flag] = value;
  }
  return out;
}

int cmd_synth(const Common& c, WorldArgs w, const SynthArgs& s) {
  require(c.out, "out");
  if (s.split != "train" && s.split != "eval" && s.split != "fg-eval") {
    throw Error(ErrorCode::ConfigInvalid, "field 'split': unknown value '" + s.split + "'");
  }
  if (w.preset != "shortcut") throw Error(ErrorCode::ConfigInvalid, "field 'preset': unknown value '" + w.preset + "'");
  w.world.seed = c.seed;
  w.world.validate();
  json run_config = world_run_config("synth", c, w);
  run_config["split"] = s.split;
  const json stamp_fields{{"run_config", run_config}, {"version", tool_version()}};

  World world = generate_world(w.world, s.split == "train" ? Split::Train : Split::Eval);
  FeatureStore store = std::move(world.store);
  GroundTruth truth = std::move(world.truth);
  if (s.split == "fg-eval") {
    store = foreground_store(store, truth);
    GroundTruth fg_truth;
    for (const auto& cls : store.classes) {
      for (const auto& img : cls.images) fg_truth.flags[cls.name][img.id] = {{"fg", true}};
    }
    truth = std::move(fg_truth);
  }
  const std::filesystem::path dir = c.out;
  save_store(store, dir, stamp_fields);
  write_json_file(dir / kGroundTruthFile, stamp(truth_to_json(truth), run_config));
  return kExitOk;
}

int cmd_shortcut(const Common& c, WorldArgs w, const ShortcutArgs& a, std::ostream& out) {
  if (w.preset != "shortcut") throw Error(ErrorCode::ConfigInvalid, "field 'preset': unknown value '" + w.preset + "'");
  w.world.seed = c.seed;
  w.world.validate();
  json run_config = world_run_config("shortcut", c, w);
  const json extra{{"seeds", a.seeds}, {"episodes", a.episodes}, {"n", a.n},         {"k", a.k},
                   {"m", a.m},         {"eval-crops", a.crops},   {"alpha", a.alpha}, {"beta", a.beta},
                   {"epochs", a.epochs}, {"lr", a.lr}};
  for (const auto& [key, value] : extra.items()) run_config[key] = value;
  ShortcutParams p;
  p.world = w.world;
  p.seeds = a.seeds;
  p.episodes = a.episodes;
  p.shape = {a.n, a.k, a.m};
  p.crops = a.crops;
  p.alpha = a.alpha;
  p.beta = a.beta;
  p.epochs = a.epochs;
  p.lr = a.lr;
  p.workers = c.workers;
  emit(stamp(shortcut_json(shortcut_experiment(p)), run_config), c.out, out);
  return kExitOk;
}

}  // namespace

int exit_code(ErrorCode code) { return code == ErrorCode::Io ? kExitIo : kExitData; }

std::string version() { return COSOC_VERSION; }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Foreground-aware few-shot evaluation toolkit", "cosoc"};
  app.set_version_flag("--version", std::string("cosoc ") + COSOC_VERSION);
  app.require_subcommand(1);

  Common common;
  CropPlanArgs plan_args;
  CosArgs cos_args;
  EvalArgs eval_args;
  EvalArgs sweep_base;
  SweepArgs sweep_args;
  WorldArgs world_args;
  SynthArgs synth_args;
  ShortcutArgs shortcut_args;

  auto* plan = app.add_subcommand("crop-plan", "random crop rectangles per image");
  add_common(*plan, common);
  plan->add_option("--images", plan_args.images, "JSON list of image ids");
  plan->add_option("--l", plan_args.l, "crops per image");
  plan->add_option("--min-area", plan_args.min_area, "minimum crop area ratio");
  plan->add_option("--aspect-lo", plan_args.aspect_lo);
  plan->add_option("--aspect-hi", plan_args.aspect_hi);

  auto* cos = app.add_subcommand("cos", "foreground scores and fusion rows per image");
  add_common(*cos, common);
  cos->add_option("--store", cos_args.store, "feature store directory");
  cos->add_option("--gamma", cos_args.gamma, "cluster pruning threshold");
  cos->add_option("--clusters", cos_args.clusters, "k-means cluster count H");
  cos->add_option("--topk", cos_args.topk, "patches kept per image");
  cos->add_option("--max-iter", cos_args.max_iter, "k-means iteration cap");

  auto* eval = app.add_subcommand("eval", "episodic few-shot benchmark");
  add_common(*eval, common);
  add_eval_options(*eval, eval_args);
  eval->add_option("--trace", eval_args.trace, "write soc match traces of the first task here");

  auto* sweep = app.add_subcommand("sweep", "benchmark over values of one parameter");
  add_common(*sweep, common);
  add_eval_options(*sweep, sweep_base);
  sweep->add_option("--param", sweep_args.param, "alpha | beta | gamma | H")
      ->check(CLI::IsMember({"alpha", "beta", "gamma", "H"}));
  sweep->add_option("--values", sweep_args.values, "comma separated values")->delimiter(',');

  auto* synth = app.add_subcommand("synth", "generate a synthetic feature store");
  add_common(*synth, common);
  add_world_options(*synth, world_args);
  synth->add_option("--split", synth_args.split, "train | eval | fg-eval")
      ->check(CLI::IsMember({"train", "eval", "fg-eval"}));

  auto* shortcut = app.add_subcommand("shortcut", "train/eval regime comparison on synthetic worlds");
  add_common(*shortcut, common);
  add_world_options(*shortcut, world_args);
  shortcut->add_option("--seeds", shortcut_args.seeds);
  shortcut->add_option("--episodes", shortcut_args.episodes, "episodes per seed and cell");
  shortcut->add_option("--n", shortcut_args.n);
  shortcut->add_option("--k", shortcut_args.k);
  shortcut->add_option("--m", shortcut_args.m);
  shortcut->add_option("--eval-crops", shortcut_args.crops, "crops per image for soc and multicrop-cc");
  shortcut->add_option("--alpha", shortcut_args.alpha);
  shortcut->add_option("--beta", shortcut_args.beta);
  shortcut->add_option("--epochs", shortcut_args.epochs);
  shortcut->add_option("--lr", shortcut_args.lr);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitData;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (!common.config.empty()) apply_config(*sub, common.config);
    apply_env_seed(common.seed);
    if (sub == plan) return cmd_crop_plan(common, plan_args, out);
    if (sub == cos) return cmd_cos(common, cos_args, out);
    if (sub == eval) return cmd_eval(common, eval_args, out);
    if (sub == sweep) return cmd_sweep(common, sweep_base, sweep_args, out, err);
    if (sub == synth) return cmd_synth(common, world_args, synth_args);
    if (sub == shortcut) return cmd_shortcut(common, world_args, shortcut_args, out);
    err << "error: unhandled subcommand\n";
    return kExitInternal;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace cosoc::cli
