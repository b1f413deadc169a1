// SPDX-License-Identifier: Apache-2.0
#include "kdistill.h"

#include <cstdlib>
#include <cstring>
#include <ctime>
#include <new>
#include <string>
#include <utility>

#include "core/common.hpp"
#include "core/config.hpp"
#include "core/data.hpp"
#include "core/distill.hpp"
#include "core/metrics.hpp"
#include "core/model.hpp"
#include "core/train.hpp"
#include "json.hpp"

struct kdf_config {
  kdf::Config impl;
};
struct kdf_dataset {
  kdf::Dataset impl;
};
struct kdf_model {
  kdf::Model impl;
};

namespace {

thread_local std::string g_last_error;

kdf_status status_of(kdf::ErrorKind kind) {
  switch (kind) {
    case kdf::ErrorKind::InvalidArgument: return KDF_ERR_INVALID_ARGUMENT;
    case kdf::ErrorKind::Io: return KDF_ERR_IO;
    case kdf::ErrorKind::Format: return KDF_ERR_FORMAT;
    case kdf::ErrorKind::Numeric: return KDF_ERR_NUMERIC;
  }
  return KDF_ERR_INVALID_ARGUMENT;
}

// Runs fn inside try/catch, translating exceptions into status codes and the
// thread-local message. fn returns KDF_OK on success.
template <typename Fn>
kdf_status guarded(Fn&& fn) {
  g_last_error.clear();
  try {
    return fn();
  } catch (const kdf::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return KDF_ERR_NUMERIC;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return KDF_ERR_INVALID_ARGUMENT;
  }
}

kdf_status fail_null(const char* what) {
  g_last_error = std::string("null argument: ") + what;
  return KDF_ERR_INVALID_ARGUMENT;
}

char* dup_string(const std::string& s) {
  char* out = (char*)std::malloc(s.size() + 1);
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::string utc_timestamp() {
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

extern "C" {

const char* kdf_version(void) { return kdf::kVersion; }

const char* kdf_last_error(void) { return g_last_error.c_str(); }

void kdf_string_free(char* s) { std::free(s); }

// --------------------------------------------------------------- run config

kdf_status kdf_config_create(kdf_config** out) {
  if (out == nullptr) return fail_null("out");
  return guarded([&] {
    *out = new kdf_config{};
    return KDF_OK;
  });
}

kdf_status kdf_config_parse(const char* text, kdf_config** out) {
  if (text == nullptr) return fail_null("text");
  if (out == nullptr) return fail_null("out");
  return guarded([&] {
    *out = new kdf_config{kdf::Config::parse(text)};
    return KDF_OK;
  });
}

kdf_status kdf_config_load(const char* path, kdf_config** out) {
  if (path == nullptr) return fail_null("path");
  if (out == nullptr) return fail_null("out");
  return guarded([&] {
    *out = new kdf_config{kdf::Config::load_file(path)};
    return KDF_OK;
  });
}

kdf_status kdf_config_set(kdf_config* cfg, const char* key, const char* value) {
  if (cfg == nullptr) return fail_null("cfg");
  if (key == nullptr) return fail_null("key");
  if (value == nullptr) return fail_null("value");
  return guarded([&] {
    cfg->impl.set(key, value);
    return KDF_OK;
  });
}

kdf_status kdf_config_get(const kdf_config* cfg, const char* key, char** out_value) {
  if (cfg == nullptr) return fail_null("cfg");
  if (key == nullptr) return fail_null("key");
  if (out_value == nullptr) return fail_null("out_value");
  return guarded([&]() -> kdf_status {
    auto v = cfg->impl.get(key);
    if (!v.has_value()) {
      kdf::fail(kdf::ErrorKind::InvalidArgument, std::string("config has no key '") + key + "'");
    }
    *out_value = dup_string(*v);
    return KDF_OK;
  });
}

kdf_status kdf_config_render(const kdf_config* cfg, char** out_text) {
  if (cfg == nullptr) return fail_null("cfg");
  if (out_text == nullptr) return fail_null("out_text");
  return guarded([&] {
    *out_text = dup_string(cfg->impl.render());
    return KDF_OK;
  });
}

kdf_status kdf_config_resolve(kdf_config* cfg) {
  if (cfg == nullptr) return fail_null("cfg");
  return guarded([&] {
    for (const kdf::ConfigKeyDoc& doc : kdf::config_schema()) {
      if (!cfg->impl.has(doc.key)) cfg->impl.set(doc.key, doc.default_value);
    }
    return KDF_OK;
  });
}

kdf_status kdf_config_schema_help(char** out_text) {
  if (out_text == nullptr) return fail_null("out_text");
  return guarded([&] {
    std::string text;
    for (const kdf::ConfigKeyDoc& doc : kdf::config_schema()) {
      text += std::string(doc.key) + " (" + doc.default_value + "): " + doc.help + "\n";
    }
    *out_text = dup_string(text);
    return KDF_OK;
  });
}

void kdf_config_free(kdf_config* cfg) { delete cfg; }

// ----------------------------------------------------------------- datasets

kdf_status kdf_dataset_load(const char* path, int64_t height, int64_t width, double val_fraction,
                            uint64_t seed, kdf_dataset** out) {
  if (path == nullptr) return fail_null("path");
  if (out == nullptr) return fail_null("out");
  return guarded([&] {
    *out = new kdf_dataset{kdf::load_dataset(path, height, width, val_fraction, seed)};
    return KDF_OK;
  });
}

kdf_status kdf_dataset_stats_json(const kdf_dataset* ds, char** out_json) {
  if (ds == nullptr) return fail_null("ds");
  if (out_json == nullptr) return fail_null("out_json");
  return guarded([&] {
    *out_json = dup_string(kdf::stats_to_json(kdf::dataset_stats(ds->impl)));
    return KDF_OK;
  });
}

kdf_status kdf_dataset_split_size(const kdf_dataset* ds, const char* split, int64_t* out_size) {
  if (ds == nullptr) return fail_null("ds");
  if (split == nullptr) return fail_null("split");
  if (out_size == nullptr) return fail_null("out_size");
  return guarded([&] {
    *out_size = (int64_t)ds->impl.split(split).size();
    return KDF_OK;
  });
}

void kdf_dataset_free(kdf_dataset* ds) { delete ds; }

// ------------------------------------------------------------------- models

kdf_status kdf_model_create(const kdf_config* cfg, kdf_model** out) {
  if (cfg == nullptr) return fail_null("cfg");
  if (out == nullptr) return fail_null("out");
  return guarded([&] {
    kdf::ModelConfig mc = kdf::ModelConfig::from_config(cfg->impl);
    uint64_t seed = cfg->impl.get_uint("seed", 0);
    *out = new kdf_model{kdf::Model(mc, seed)};
    return KDF_OK;
  });
}

kdf_status kdf_model_load(const char* checkpoint_path, kdf_model** out) {
  if (checkpoint_path == nullptr) return fail_null("checkpoint_path");
  if (out == nullptr) return fail_null("out");
  return guarded([&] {
    *out = new kdf_model{kdf::Model::load_checkpoint(checkpoint_path)};
    return KDF_OK;
  });
}

kdf_status kdf_model_save(const kdf_model* model, const char* checkpoint_path) {
  if (model == nullptr) return fail_null("model");
  if (checkpoint_path == nullptr) return fail_null("checkpoint_path");
  return guarded([&] {
    kdf::Config cfg;
    model->impl.save_checkpoint(checkpoint_path, cfg);
    return KDF_OK;
  });
}

kdf_status kdf_model_name(const kdf_model* model, char** out_name) {
  if (model == nullptr) return fail_null("model");
  if (out_name == nullptr) return fail_null("out_name");
  return guarded([&] {
    *out_name = dup_string(model->impl.config().name);
    return KDF_OK;
  });
}

kdf_status kdf_model_trainable_params(const kdf_model* model, int64_t* out_count) {
  if (model == nullptr) return fail_null("model");
  if (out_count == nullptr) return fail_null("out_count");
  return guarded([&] {
    *out_count = model->impl.trainable_count();
    return KDF_OK;
  });
}

kdf_status kdf_model_input(const kdf_model* model, int64_t* out_channels, int64_t* out_height,
                           int64_t* out_width) {
  if (model == nullptr) return fail_null("model");
  return guarded([&] {
    const kdf::ModelConfig& mc = model->impl.config();
    if (out_channels != nullptr) *out_channels = mc.input_channels;
    if (out_height != nullptr) *out_height = mc.input_height;
    if (out_width != nullptr) *out_width = mc.input_width;
    return KDF_OK;
  });
}

kdf_status kdf_model_summary_json(const kdf_model* model, char** out_json) {
  if (model == nullptr) return fail_null("model");
  if (out_json == nullptr) return fail_null("out_json");
  return guarded([&] {
    *out_json = dup_string(kdf::model_summary_json(model->impl.config()));
    return KDF_OK;
  });
}

kdf_status kdf_config_summary_json(const kdf_config* cfg, char** out_json) {
  if (cfg == nullptr) return fail_null("cfg");
  if (out_json == nullptr) return fail_null("out_json");
  return guarded([&] {
    *out_json = dup_string(kdf::model_summary_json(kdf::ModelConfig::from_config(cfg->impl)));
    return KDF_OK;
  });
}

void kdf_model_free(kdf_model* model) { delete model; }

// ----------------------------------------------------------------- training

kdf_status kdf_train(kdf_model* model, kdf_model* teacher, const kdf_dataset* ds,
                     const kdf_config* run_config, const char* checkpoint_path, int distill,
                     char** out_report_json) {
  if (model == nullptr) return fail_null("model");
  if (ds == nullptr) return fail_null("ds");
  if (run_config == nullptr) return fail_null("run_config");
  if (out_report_json == nullptr) return fail_null("out_report_json");
  return guarded([&] {
    kdf::TrainConfig tc = kdf::TrainConfig::from_config(run_config->impl);
    kdf::DistillConfig dc;
    if (distill != 0) dc = kdf::DistillConfig::from_config(run_config->impl);
    kdf::TrainReport report =
        kdf::fit(model->impl, teacher != nullptr ? &teacher->impl : nullptr, ds->impl, tc,
                 distill != 0 ? &dc : nullptr,
                 checkpoint_path != nullptr ? checkpoint_path : "", run_config->impl);
    *out_report_json = dup_string(report.to_json());
    return KDF_OK;
  });
}

kdf_status kdf_evaluate(kdf_model* model, const kdf_dataset* ds, const char* split,
                        int64_t batch_size, char** out_report_json) {
  if (model == nullptr) return fail_null("model");
  if (ds == nullptr) return fail_null("ds");
  if (split == nullptr) return fail_null("split");
  if (out_report_json == nullptr) return fail_null("out_report_json");
  return guarded([&] {
    kdf::EvalResult result = kdf::evaluate(model->impl, ds->impl.split(split), batch_size);
    *out_report_json = dup_string(kdf::eval_report_json(result, model->impl.config().name, split));
    return KDF_OK;
  });
}

kdf_status kdf_bench(kdf_model* model, int64_t height, int64_t width, int64_t warmup,
                     int64_t runs, int zero_timing, char** out_report_json) {
  if (model == nullptr) return fail_null("model");
  if (out_report_json == nullptr) return fail_null("out_report_json");
  return guarded([&] {
    kdf::LatencyStats lat = kdf::bench_latency(model->impl, height, width, warmup, runs);
    kdf::MemoryReport mem = kdf::memory_report(model->impl);
    *out_report_json = dup_string(kdf::bench_report_json(model->impl.config().name,
                                                         model->impl.config(), lat, mem,
                                                         zero_timing != 0));
    return KDF_OK;
  });
}

kdf_status kdf_compare_benches(const char* const* bench_jsons, size_t count,
                               char** out_report_json) {
  if (bench_jsons == nullptr) return fail_null("bench_jsons");
  if (out_report_json == nullptr) return fail_null("out_report_json");
  return guarded([&]() -> kdf_status {
    std::vector<nlohmann::ordered_json> parsed;
    bool timing_zeroed = false;
    for (size_t i = 0; i < count; ++i) {
      if (bench_jsons[i] == nullptr) {
        kdf::fail(kdf::ErrorKind::InvalidArgument,
                  "null bench report at index " + std::to_string(i));
      }
      auto j = nlohmann::ordered_json::parse(std::string(bench_jsons[i]), nullptr, false);
      if (j.is_discarded() || !j.is_object() || j.value("kind", "") != "bench_report") {
        kdf::fail(kdf::ErrorKind::Format,
                  "entry " + std::to_string(i) + " is not a bench report");
      }
      timing_zeroed = timing_zeroed || j.value("timing_zeroed", false);
      parsed.push_back(std::move(j));
    }
    std::vector<kdf::CompareEntry> entries;
    for (const auto& j : parsed) {
      kdf::CompareEntry e;
      e.name = j["model"].get<std::string>();
      e.metrics.emplace_back("size_mib", (double)j["memory"]["parameter_mib"]);
      e.metrics.emplace_back("activation_mb", (double)j["memory"]["activation_estimate_mb"]);
      // Blanked timings carry no signal, so the column is dropped entirely.
      if (!timing_zeroed) e.metrics.emplace_back("latency_ms", (double)j["latency_ms"]["mean"]);
      entries.push_back(std::move(e));
    }
    *out_report_json = dup_string(kdf::compare_report_json(entries));
    return KDF_OK;
  });
}

kdf_status kdf_sweep(const kdf_config* run_config, kdf_model* teacher, const kdf_dataset* ds,
                     int64_t max_threads, char** out_report_json) {
  if (run_config == nullptr) return fail_null("run_config");
  if (teacher == nullptr) return fail_null("teacher");
  if (ds == nullptr) return fail_null("ds");
  if (out_report_json == nullptr) return fail_null("out_report_json");
  return guarded([&] {
    const kdf::Config& cfg = run_config->impl;
    kdf::ModelConfig student_cfg = kdf::ModelConfig::from_config(cfg);
    kdf::TrainConfig tc = kdf::TrainConfig::from_config(cfg);
    kdf::DistillConfig dc = kdf::DistillConfig::from_config(cfg);
    std::vector<double> temps = cfg.get_double_list("sweep_temperatures", {1, 2, 3, 4, 5});
    std::vector<double> alphas = cfg.get_double_list("sweep_alphas", {0.10, 0.15, 0.20});
    bool parallel = cfg.get_bool("sweep_parallel", false);
    kdf::SweepReport report = kdf::sweep(student_cfg, teacher->impl, ds->impl, tc, dc, temps,
                                         alphas, parallel, max_threads);
    *out_report_json = dup_string(report.to_json());
    return KDF_OK;
  });
}

// ------------------------------------------------------------------ reports

kdf_status kdf_report_render(const char* report_json, const char* format, char** out_text) {
  if (report_json == nullptr) return fail_null("report_json");
  if (format == nullptr) return fail_null("format");
  if (out_text == nullptr) return fail_null("out_text");
  return guarded([&]() -> kdf_status {
    std::string fmt = format;
    if (fmt == "csv") {
      *out_text = dup_string(kdf::report_json_to_csv(report_json));
    } else if (fmt == "text") {
      *out_text = dup_string(kdf::report_json_to_text(report_json));
    } else {
      kdf::fail(kdf::ErrorKind::InvalidArgument,
                "unknown render format '" + fmt + "' (expected csv or text)");
    }
    return KDF_OK;
  });
}

kdf_status kdf_manifest(const char* command, const kdf_config* resolved_config,
                        const char* const* input_paths, size_t count, char** out_json) {
  if (command == nullptr) return fail_null("command");
  if (resolved_config == nullptr) return fail_null("resolved_config");
  if (input_paths == nullptr && count > 0) return fail_null("input_paths");
  if (out_json == nullptr) return fail_null("out_json");
  return guarded([&]() -> kdf_status {
    const kdf::Config& cfg = resolved_config->impl;
    nlohmann::ordered_json j;
    j["kind"] = "run_manifest";
    j["command"] = command;
    j["version"] = kdf::kVersion;
    j["timestamp"] = cfg.get_bool("deterministic", false) ? "" : utc_timestamp();
    j["seed"] = cfg.get_uint("seed", 0);
    j["config"] = cfg.render();
    nlohmann::ordered_json inputs = nlohmann::ordered_json::array();
    for (size_t i = 0; i < count; ++i) {
      if (input_paths[i] == nullptr) {
        kdf::fail(kdf::ErrorKind::InvalidArgument,
                  "null input path at index " + std::to_string(i));
      }
      nlohmann::ordered_json entry;
      entry["path"] = input_paths[i];
      entry["fingerprint"] = kdf::path_fingerprint(input_paths[i]);
      inputs.push_back(std::move(entry));
    }
    j["inputs"] = std::move(inputs);
    *out_json = dup_string(j.dump(2) + "\n");
    return KDF_OK;
  });
}

kdf_status kdf_fingerprint(const char* path, char** out_fingerprint) {
  if (path == nullptr) return fail_null("path");
  if (out_fingerprint == nullptr) return fail_null("out_fingerprint");
  return guarded([&] {
    *out_fingerprint = dup_string(kdf::path_fingerprint(path));
    return KDF_OK;
  });
}

}  // extern "C"
