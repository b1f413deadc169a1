// SPDX-License-Identifier: Apache-2.0
// Command-line front end. Talks to the toolkit exclusively through the C
// interface in kdistill.h; JSON/flag handling is local plumbing.
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kdistill.h"

namespace {

namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;

constexpr int kExitUsage = 2;

// Owns a string returned by the library.
struct OwnedStr {
  char* p = nullptr;
  ~OwnedStr() { kdf_string_free(p); }
  std::string str() const { return p != nullptr ? p : ""; }
};

struct ConfigHandle {
  kdf_config* p = nullptr;
  ~ConfigHandle() { kdf_config_free(p); }
};

struct DatasetHandle {
  kdf_dataset* p = nullptr;
  ~DatasetHandle() { kdf_dataset_free(p); }
};

struct ModelHandle {
  kdf_model* p = nullptr;
  ~ModelHandle() { kdf_model_free(p); }
};

int exit_code(kdf_status status) {
  if (status == KDF_OK) return 0;
  return status == KDF_ERR_NUMERIC ? 3 : kExitUsage;
}

int report_error(kdf_status status) {
  std::fprintf(stderr, "error: %s\n", kdf_last_error());
  return exit_code(status);
}

// Evaluates a library call; on failure prints the error and returns the
// mapped exit code from the enclosing function.
#define REQUIRE_OK(call)                                 \
  do {                                                   \
    kdf_status require_ok_status_ = (call);              \
    if (require_ok_status_ != KDF_OK) {                  \
      return report_error(require_ok_status_);           \
    }                                                    \
  } while (0)

int usage_error(const std::string& message) {
  std::fprintf(stderr, "error: %s\n", message.c_str());
  return kExitUsage;
}

// Options shared by the config-driven commands. `sets` collects key=value
// overrides in flag order; typed flags are sugar that appends here.
struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
};

void add_config_options(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "run configuration file (key = value lines)");
  cmd->add_option("--set", opts.sets, "override a config key, e.g. --set lr=0.01")
      ->option_text("KEY=VALUE")
      ->allow_extra_args(false);
  auto sugar = [&opts, cmd](const std::string& flag, const std::string& key,
                            const std::string& help) {
    cmd->add_option_function<std::string>(
           flag, [&opts, key](const std::string& v) { opts.sets.push_back(key + "=" + v); }, help)
        ->option_text("VALUE");
  };
  sugar("--name", "name", "model name or preset: teacher, student_a, student_b, student_c");
  sugar("--seed", "seed", "master seed");
  sugar("--epochs", "epochs", "training epochs");
  sugar("--batch-size", "batch_size", "samples per training batch");
  sugar("--lr", "lr", "initial learning rate");
  sugar("--temperature", "temperature", "distillation softmax temperature");
  sugar("--alpha", "alpha", "weight of the soft-target term");
  cmd->add_flag_callback(
      "--deterministic", [&opts] { opts.sets.push_back("deterministic=true"); },
      "pin batch order and blank timing fields in outputs");
}

// Loads/creates the config, applies overrides, materializes all defaults.
int build_config(const CommonOpts& opts, ConfigHandle& out) {
  if (!opts.config_path.empty()) {
    REQUIRE_OK(kdf_config_load(opts.config_path.c_str(), &out.p));
  } else {
    REQUIRE_OK(kdf_config_create(&out.p));
  }
  for (const std::string& kv : opts.sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      return usage_error("--set expects KEY=VALUE, got '" + kv + "'");
    }
    REQUIRE_OK(kdf_config_set(out.p, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
  }
  REQUIRE_OK(kdf_config_resolve(out.p));
  return 0;
}

int write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  f.write(content.data(), (std::streamsize)content.size());
  if (!f) return usage_error("cannot write " + path);
  return 0;
}

// Emits report.json, report.csv and manifest.json under out_dir (when set)
// and the text rendering on stdout. `args` replay this run via `rerun`.
int emit_outputs(const std::string& out_dir, const std::string& report_json,
                 const kdf_config* resolved, const std::string& command,
                 const std::vector<std::string>& args, const std::vector<std::string>& inputs) {
  OwnedStr text;
  REQUIRE_OK(kdf_report_render(report_json.c_str(), "text", &text.p));
  std::fputs(text.str().c_str(), stdout);
  if (out_dir.empty()) return 0;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) return usage_error("cannot create output directory " + out_dir);
  OwnedStr csv;
  REQUIRE_OK(kdf_report_render(report_json.c_str(), "csv", &csv.p));
  if (int rc = write_file(out_dir + "/report.json", report_json)) return rc;
  if (int rc = write_file(out_dir + "/report.csv", csv.str())) return rc;

  std::vector<const char*> input_ptrs;
  input_ptrs.reserve(inputs.size());
  for (const std::string& s : inputs) input_ptrs.push_back(s.c_str());
  OwnedStr manifest;
  REQUIRE_OK(kdf_manifest(command.c_str(), resolved, input_ptrs.data(), input_ptrs.size(),
                          &manifest.p));
  njson mj = njson::parse(manifest.str());
  mj["args"] = args;
  if (int rc = write_file(out_dir + "/manifest.json", mj.dump(2) + "\n")) return rc;
  std::fprintf(stderr, "wrote %s/report.json, report.csv, manifest.json\n", out_dir.c_str());
  return 0;
}

// Canonical replay arguments: the command word, its path/selector flags, the
// output directory, and every resolved config entry as --set pairs.
std::vector<std::string> replay_args(const std::string& command,
                                     const std::vector<std::string>& extra,
                                     const kdf_config* resolved, const std::string& out_dir) {
  std::vector<std::string> args{command};
  args.insert(args.end(), extra.begin(), extra.end());
  OwnedStr rendered;
  if (kdf_config_render(resolved, &rendered.p) == KDF_OK) {
    std::istringstream lines(rendered.str());
    std::string line;
    while (std::getline(lines, line)) {
      size_t eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(0, eq);
      std::string value = line.substr(eq + 1);
      while (!key.empty() && key.back() == ' ') key.pop_back();
      while (!value.empty() && value.front() == ' ') value.erase(value.begin());
      args.push_back("--set");
      args.push_back(key + "=" + value);
    }
  }
  if (!out_dir.empty()) {
    args.push_back("--out");
    args.push_back(out_dir);
  }
  return args;
}

int64_t config_int(const kdf_config* cfg, const char* key, int64_t fallback) {
  OwnedStr v;
  if (kdf_config_get(cfg, key, &v.p) != KDF_OK) return fallback;
  return std::strtoll(v.str().c_str(), nullptr, 10);
}

double config_num(const kdf_config* cfg, const char* key, double fallback) {
  OwnedStr v;
  if (kdf_config_get(cfg, key, &v.p) != KDF_OK) return fallback;
  return std::strtod(v.str().c_str(), nullptr);
}

bool config_flag(const kdf_config* cfg, const char* key) {
  OwnedStr v;
  if (kdf_config_get(cfg, key, &v.p) != KDF_OK) return false;
  std::string s = v.str();
  return s == "true" || s == "1" || s == "yes" || s == "on";
}

int load_data(const kdf_config* cfg, const std::string& path, double val_fraction_override,
              DatasetHandle& out) {
  int64_t h = config_int(cfg, "input_height", 64);
  int64_t w = config_int(cfg, "input_width", 64);
  double vf = val_fraction_override >= 0.0 ? val_fraction_override
                                           : config_num(cfg, "val_fraction", 0.1);
  uint64_t seed = (uint64_t)config_int(cfg, "seed", 0);
  REQUIRE_OK(kdf_dataset_load(path.c_str(), h, w, vf, seed, &out.p));
  return 0;
}

int64_t worker_cap() {
  if (const char* env = std::getenv("KDF_THREADS")) {
    int64_t n = std::strtoll(env, nullptr, 10);
    return n >= 1 ? n : 1;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw != 0 ? (int64_t)hw : 1;
}

// ------------------------------------------------------------------- stats

int cmd_stats(const CommonOpts& opts, const std::string& data, const std::string& format) {
  if (!format.empty()) {
    bool is_dir = fs::is_directory(data);
    if (format == "csv" && is_dir) return usage_error(data + " is a directory, not a CSV file");
    if (format == "folder" && !is_dir) return usage_error(data + " is not a directory");
  }
  ConfigHandle cfg;
  if (int rc = build_config(opts, cfg)) return rc;
  DatasetHandle ds;
  // Raw corpus counts: no synthetic hold-out.
  if (int rc = load_data(cfg.p, data, 0.0, ds)) return rc;
  OwnedStr report;
  REQUIRE_OK(kdf_dataset_stats_json(ds.p, &report.p));
  std::vector<std::string> extra{"--data", data};
  if (!format.empty()) {
    extra.push_back("--format");
    extra.push_back(format);
  }
  return emit_outputs(opts.out_dir, report.str(), cfg.p, "stats",
                      replay_args("stats", extra, cfg.p, opts.out_dir), {data});
}

// ----------------------------------------------------------------- inspect

int cmd_inspect(const CommonOpts& opts, const std::string& model_path) {
  ConfigHandle cfg;
  if (int rc = build_config(opts, cfg)) return rc;
  OwnedStr report;
  std::vector<std::string> extra;
  std::vector<std::string> inputs;
  if (!model_path.empty()) {
    ModelHandle model;
    REQUIRE_OK(kdf_model_load(model_path.c_str(), &model.p));
    REQUIRE_OK(kdf_model_summary_json(model.p, &report.p));
    extra = {"--model", model_path};
    inputs = {model_path};
  } else {
    REQUIRE_OK(kdf_config_summary_json(cfg.p, &report.p));
  }
  return emit_outputs(opts.out_dir, report.str(), cfg.p, "inspect",
                      replay_args("inspect", extra, cfg.p, opts.out_dir), inputs);
}

// ----------------------------------------------------------- train/distill

int cmd_train(const CommonOpts& opts, const std::string& data, const std::string& teacher_path,
              bool distill) {
  ConfigHandle cfg;
  if (int rc = build_config(opts, cfg)) return rc;
  DatasetHandle ds;
  if (int rc = load_data(cfg.p, data, -1.0, ds)) return rc;
  ModelHandle teacher;
  if (distill) REQUIRE_OK(kdf_model_load(teacher_path.c_str(), &teacher.p));
  ModelHandle model;
  REQUIRE_OK(kdf_model_create(cfg.p, &model.p));
  std::string ckpt = opts.out_dir + "/model.ckpt";
  std::error_code ec;
  fs::create_directories(opts.out_dir, ec);
  if (ec) return usage_error("cannot create output directory " + opts.out_dir);
  OwnedStr report;
  REQUIRE_OK(kdf_train(model.p, teacher.p, ds.p, cfg.p, ckpt.c_str(), distill ? 1 : 0,
                       &report.p));
  std::string command = distill ? "distill" : "train";
  std::vector<std::string> extra{"--data", data};
  std::vector<std::string> inputs{data};
  if (distill) {
    extra.push_back("--teacher");
    extra.push_back(teacher_path);
    inputs.push_back(teacher_path);
  }
  if (int rc = emit_outputs(opts.out_dir, report.str(), cfg.p, command,
                            replay_args(command, extra, cfg.p, opts.out_dir), inputs)) {
    return rc;
  }
  std::fprintf(stderr, "wrote %s\n", ckpt.c_str());
  return 0;
}

// -------------------------------------------------------------------- eval

int cmd_eval(const CommonOpts& opts, const std::string& data, const std::string& model_path,
             std::string split) {
  ConfigHandle cfg;
  if (int rc = build_config(opts, cfg)) return rc;
  ModelHandle model;
  REQUIRE_OK(kdf_model_load(model_path.c_str(), &model.p));
  // The corpus must be shaped for the checkpoint, not for the run config.
  int64_t h = 0, w = 0;
  REQUIRE_OK(kdf_model_input(model.p, nullptr, &h, &w));
  double vf = config_num(cfg.p, "val_fraction", 0.1);
  uint64_t seed = (uint64_t)config_int(cfg.p, "seed", 0);
  DatasetHandle ds;
  REQUIRE_OK(kdf_dataset_load(data.c_str(), h, w, vf, seed, &ds.p));
  if (split.empty()) {
    for (const char* candidate : {"test", "val", "train"}) {
      int64_t n = 0;
      if (kdf_dataset_split_size(ds.p, candidate, &n) == KDF_OK && n > 0) {
        split = candidate;
        break;
      }
    }
  }
  OwnedStr report;
  REQUIRE_OK(kdf_evaluate(model.p, ds.p, split.c_str(), config_int(cfg.p, "eval_batch", 64),
                          &report.p));
  std::vector<std::string> extra{"--data", data, "--model", model_path, "--split", split};
  return emit_outputs(opts.out_dir, report.str(), cfg.p, "eval",
                      replay_args("eval", extra, cfg.p, opts.out_dir), {data, model_path});
}

// ------------------------------------------------------------------- bench

int cmd_bench(const CommonOpts& opts, const std::vector<std::string>& model_paths,
              const std::vector<std::string>& presets, int64_t height, int64_t width) {
  if (model_paths.empty() && presets.empty()) {
    return usage_error("bench needs at least one --model or --preset");
  }
  ConfigHandle cfg;
  if (int rc = build_config(opts, cfg)) return rc;
  int64_t warmup = config_int(cfg.p, "bench_warmup", 20);
  int64_t runs = config_int(cfg.p, "bench_runs", 100);
  int zero_timing = config_flag(cfg.p, "deterministic") ? 1 : 0;

  std::vector<ModelHandle> models(model_paths.size() + presets.size());
  size_t slot = 0;
  for (const std::string& path : model_paths) {
    REQUIRE_OK(kdf_model_load(path.c_str(), &models[slot++].p));
  }
  for (const std::string& preset : presets) {
    ConfigHandle pc;
    REQUIRE_OK(kdf_config_create(&pc.p));
    REQUIRE_OK(kdf_config_set(pc.p, "name", preset.c_str()));
    REQUIRE_OK(kdf_model_create(pc.p, &models[slot++].p));
  }

  std::vector<std::string> reports;
  for (ModelHandle& m : models) {
    int64_t h = height, w = width;
    if (h <= 0) REQUIRE_OK(kdf_model_input(m.p, nullptr, &h, nullptr));
    if (w <= 0) REQUIRE_OK(kdf_model_input(m.p, nullptr, nullptr, &w));
    OwnedStr r;
    REQUIRE_OK(kdf_bench(m.p, h, w, warmup, runs, zero_timing, &r.p));
    reports.push_back(r.str());
  }

  std::string primary;
  if (reports.size() == 1) {
    primary = reports.front();
  } else {
    std::vector<const char*> ptrs;
    for (const std::string& r : reports) ptrs.push_back(r.c_str());
    OwnedStr cmp;
    REQUIRE_OK(kdf_compare_benches(ptrs.data(), ptrs.size(), &cmp.p));
    primary = cmp.str();
    for (const std::string& r : reports) {
      OwnedStr text;
      REQUIRE_OK(kdf_report_render(r.c_str(), "text", &text.p));
      std::fputs(text.str().c_str(), stdout);
    }
  }

  std::vector<std::string> extra;
  for (const std::string& p : model_paths) {
    extra.push_back("--model");
    extra.push_back(p);
  }
  for (const std::string& p : presets) {
    extra.push_back("--preset");
    extra.push_back(p);
  }
  if (height > 0) {
    extra.push_back("--height");
    extra.push_back(std::to_string(height));
  }
  if (width > 0) {
    extra.push_back("--width");
    extra.push_back(std::to_string(width));
  }
  return emit_outputs(opts.out_dir, primary, cfg.p, "bench",
                      replay_args("bench", extra, cfg.p, opts.out_dir), model_paths);
}

// ------------------------------------------------------------------- sweep

int cmd_sweep(const CommonOpts& opts, const std::string& data, const std::string& teacher_path) {
  ConfigHandle cfg;
  if (int rc = build_config(opts, cfg)) return rc;
  DatasetHandle ds;
  if (int rc = load_data(cfg.p, data, -1.0, ds)) return rc;
  ModelHandle teacher;
  REQUIRE_OK(kdf_model_load(teacher_path.c_str(), &teacher.p));
  OwnedStr report;
  REQUIRE_OK(kdf_sweep(cfg.p, teacher.p, ds.p, worker_cap(), &report.p));
  std::vector<std::string> extra{"--data", data, "--teacher", teacher_path};
  return emit_outputs(opts.out_dir, report.str(), cfg.p, "sweep",
                      replay_args("sweep", extra, cfg.p, opts.out_dir), {data, teacher_path});
}

// ------------------------------------------------------------------- rerun

int run_cli(const std::vector<std::string>& args);

int cmd_rerun(const std::string& manifest_path, const std::string& new_out) {
  std::ifstream in(manifest_path);
  if (!in) return usage_error("cannot open manifest " + manifest_path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  njson m = njson::parse(buffer.str(), nullptr, false);
  if (m.is_discarded() || !m.is_object() || m.value("kind", "") != "run_manifest" ||
      !m.contains("args")) {
    return usage_error(manifest_path + " is not a run manifest");
  }
  for (const auto& input : m["inputs"]) {
    std::string path = input["path"].get<std::string>();
    OwnedStr fp;
    REQUIRE_OK(kdf_fingerprint(path.c_str(), &fp.p));
    if (fp.str() != input["fingerprint"].get<std::string>()) {
      return usage_error("input " + path + " changed since the manifest was written");
    }
  }
  std::vector<std::string> args;
  for (const auto& a : m["args"]) args.push_back(a.get<std::string>());
  if (!new_out.empty()) {
    for (size_t i = 0; i + 1 < args.size(); ++i) {
      if (args[i] == "--out") {
        args[i + 1] = new_out;
        break;
      }
    }
  }
  return run_cli(args);
}

// -------------------------------------------------------------- dispatcher

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"knowledge-distillation toolkit for compact expression classifiers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kdf_version()));

  CommonOpts stats_opts, inspect_opts, train_opts, distill_opts, eval_opts, bench_opts,
      sweep_opts;
  std::string stats_data, stats_format;
  std::string inspect_model;
  std::string train_data;
  std::string distill_data, distill_teacher;
  std::string eval_data, eval_model, eval_split;
  std::vector<std::string> bench_models, bench_presets;
  int64_t bench_height = 0, bench_width = 0;
  std::string sweep_data, sweep_teacher;
  std::string rerun_manifest, rerun_out;

  CLI::App* stats = app.add_subcommand("stats", "per-split class distribution of a corpus");
  stats->add_option("--data", stats_data, "dataset path: a .csv corpus or an image folder tree")
      ->required();
  stats->add_option("--format", stats_format, "require the corpus kind: csv or folder")
      ->check(CLI::IsMember({"csv", "folder"}));
  add_config_options(stats, stats_opts);
  stats->add_option("--out", stats_opts.out_dir, "output directory");

  CLI::App* inspect =
      app.add_subcommand("inspect", "per-layer parameter table and size accounting");
  inspect->add_option("--model", inspect_model, "checkpoint to inspect (otherwise the config)");
  add_config_options(inspect, inspect_opts);
  inspect->add_option("--out", inspect_opts.out_dir, "output directory");

  CLI::App* train = app.add_subcommand("train", "train a model with hard labels only");
  train->add_option("--data", train_data, "dataset path")->required();
  add_config_options(train, train_opts);
  train->add_option("--out", train_opts.out_dir, "output directory (model.ckpt, reports)")
      ->required();

  CLI::App* distill =
      app.add_subcommand("distill", "train a student against labels plus a frozen teacher");
  distill->add_option("--data", distill_data, "dataset path")->required();
  distill->add_option("--teacher", distill_teacher, "teacher checkpoint")->required();
  add_config_options(distill, distill_opts);
  distill->add_option("--out", distill_opts.out_dir, "output directory (model.ckpt, reports)")
      ->required();

  CLI::App* eval = app.add_subcommand("eval", "loss, accuracy and confusion over one split");
  eval->add_option("--data", eval_data, "dataset path")->required();
  eval->add_option("--model", eval_model, "checkpoint to evaluate")->required();
  eval->add_option("--split", eval_split, "train, val or test (default: first non-empty)");
  add_config_options(eval, eval_opts);
  eval->add_option("--out", eval_opts.out_dir, "output directory");

  CLI::App* bench =
      app.add_subcommand("bench", "latency and memory; compares when given several models");
  bench->add_option("--model", bench_models, "checkpoint path (repeatable; first is baseline)");
  bench->add_option("--preset", bench_presets,
                    "fresh preset to bench: teacher, student_a, student_b, student_c");
  bench->add_option("--height", bench_height, "probe input height (default: each model's own)");
  bench->add_option("--width", bench_width, "probe input width (default: each model's own)");
  add_config_options(bench, bench_opts);
  bench->add_option("--out", bench_opts.out_dir, "output directory");

  CLI::App* sweep =
      app.add_subcommand("sweep", "distill one student per (temperature, alpha) grid point");
  sweep->add_option("--data", sweep_data, "dataset path")->required();
  sweep->add_option("--teacher", sweep_teacher, "teacher checkpoint")->required();
  add_config_options(sweep, sweep_opts);
  sweep->add_option("--out", sweep_opts.out_dir, "output directory");

  CLI::App* rerun = app.add_subcommand("rerun", "replay a run from its manifest");
  rerun->add_option("manifest", rerun_manifest, "manifest.json written by a previous run")
      ->required();
  rerun->add_option("--out", rerun_out, "redirect outputs (default: the manifest's directory)");

  // CLI11 consumes argv-style reversed vectors.
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  if (stats->parsed()) return cmd_stats(stats_opts, stats_data, stats_format);
  if (inspect->parsed()) return cmd_inspect(inspect_opts, inspect_model);
  if (train->parsed()) return cmd_train(train_opts, train_data, "", false);
  if (distill->parsed()) return cmd_train(distill_opts, distill_data, distill_teacher, true);
  if (eval->parsed()) return cmd_eval(eval_opts, eval_data, eval_model, eval_split);
  if (bench->parsed()) {
    return cmd_bench(bench_opts, bench_models, bench_presets, bench_height, bench_width);
  }
  if (sweep->parsed()) return cmd_sweep(sweep_opts, sweep_data, sweep_teacher);
  if (rerun->parsed()) return cmd_rerun(rerun_manifest, rerun_out);
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args);
}
