/* SPDX-License-Identifier: Apache-2.0 */
#ifndef KDISTILL_H
#define KDISTILL_H

/* C interface to the distillation toolkit: run configs, datasets, models,
 * training/distillation, evaluation, benchmarking and report rendering.
 *
 * Conventions:
 *   - Every function returns a kdf_status; kdf_last_error() carries the
 *     thread-local message of the most recent failure on this thread.
 *   - Every char* handed back through an out-parameter is heap-allocated
 *     and must be released with kdf_string_free().
 *   - Handles are opaque; destroy them with the matching *_free().
 *   - Out-parameters are written only on KDF_OK.
 */

#include <stddef.h>
#include <stdint.h>

#ifndef KDF_API
#if defined(_WIN32)
#define KDF_API
#else
#define KDF_API __attribute__((visibility("default")))
#endif
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum kdf_status {
  KDF_OK = 0,
  KDF_ERR_INVALID_ARGUMENT = 1, /* bad values, bad shapes, bad usage */
  KDF_ERR_IO = 2,               /* missing or unreadable/unwritable paths */
  KDF_ERR_FORMAT = 3,           /* malformed CSV, corrupt checkpoint, bad image */
  KDF_ERR_NUMERIC = 4           /* non-finite loss and similar */
} kdf_status;

typedef struct kdf_config kdf_config;
typedef struct kdf_dataset kdf_dataset;
typedef struct kdf_model kdf_model;

/* Library semantic version, static storage. */
KDF_API const char* kdf_version(void);

/* Message of this thread's most recent failure; "" when the last call
 * succeeded. Valid until the next library call on the same thread. */
KDF_API const char* kdf_last_error(void);

KDF_API void kdf_string_free(char* s);

/* ------------------------------------------------------------- run config */

/* Flat key/value config: `key = value` lines, '#' comments. */
KDF_API kdf_status kdf_config_create(kdf_config** out);
KDF_API kdf_status kdf_config_parse(const char* text, kdf_config** out);
KDF_API kdf_status kdf_config_load(const char* path, kdf_config** out);
KDF_API kdf_status kdf_config_set(kdf_config* cfg, const char* key, const char* value);
/* Fails with KDF_ERR_INVALID_ARGUMENT when the key is absent. */
KDF_API kdf_status kdf_config_get(const kdf_config* cfg, const char* key, char** out_value);
/* Canonical text form: documented keys in schema order, then unknown keys. */
KDF_API kdf_status kdf_config_render(const kdf_config* cfg, char** out_text);
/* Writes the documented default for every schema key the config lacks, so a
 * render afterwards materializes the full resolved run configuration. */
KDF_API kdf_status kdf_config_resolve(kdf_config* cfg);
/* One `key (default): help` line per documented key. */
KDF_API kdf_status kdf_config_schema_help(char** out_text);
KDF_API void kdf_config_free(kdf_config* cfg);

/* --------------------------------------------------------------- datasets */

/* Loads a single-CSV corpus (path ends in .csv) or an image folder tree
 * (train/<class>/... plus optional val/, test/). Samples are resized to
 * height x width; when a folder has no val/ split a seeded val_fraction of
 * train/ is held out. */
KDF_API kdf_status kdf_dataset_load(const char* path, int64_t height, int64_t width,
                                    double val_fraction, uint64_t seed, kdf_dataset** out);
KDF_API kdf_status kdf_dataset_stats_json(const kdf_dataset* ds, char** out_json);
/* split is "train", "val" or "test". */
KDF_API kdf_status kdf_dataset_split_size(const kdf_dataset* ds, const char* split,
                                          int64_t* out_size);
KDF_API void kdf_dataset_free(kdf_dataset* ds);

/* ----------------------------------------------------------------- models */

/* Builds a freshly initialized network from the config's architecture keys
 * ("name" selects a preset: teacher, student_a, student_b, student_c) using
 * the config's seed. */
KDF_API kdf_status kdf_model_create(const kdf_config* cfg, kdf_model** out);
KDF_API kdf_status kdf_model_load(const char* checkpoint_path, kdf_model** out);
KDF_API kdf_status kdf_model_save(const kdf_model* model, const char* checkpoint_path);
KDF_API kdf_status kdf_model_name(const kdf_model* model, char** out_name);
KDF_API kdf_status kdf_model_trainable_params(const kdf_model* model, int64_t* out_count);
/* Expected input tensor layout (channels, height, width); any may be NULL. */
KDF_API kdf_status kdf_model_input(const kdf_model* model, int64_t* out_channels,
                                   int64_t* out_height, int64_t* out_width);
/* Per-layer table with cumulative parameter totals, float32 sizes, and the
 * published-count comparison for the known presets. */
KDF_API kdf_status kdf_model_summary_json(const kdf_model* model, char** out_json);
/* Same summary computed from a config alone, without allocating tensors. */
KDF_API kdf_status kdf_config_summary_json(const kdf_config* cfg, char** out_json);
KDF_API void kdf_model_free(kdf_model* model);

/* --------------------------------------------------------------- training */

/* Runs the full training loop driven by the config's training keys. With
 * distill nonzero the loss adds the soft-target term (temperature/alpha/
 * hard_weight keys) from `teacher`, which is evaluated frozen; teacher may
 * be NULL when alpha == 0 or distill is 0. A non-empty checkpoint_path
 * receives the best-validation-epoch snapshot. Returns the run report. */
KDF_API kdf_status kdf_train(kdf_model* model, kdf_model* teacher, const kdf_dataset* ds,
                             const kdf_config* run_config, const char* checkpoint_path,
                             int distill, char** out_report_json);

/* Loss, accuracy and the confusion matrix over one split. */
KDF_API kdf_status kdf_evaluate(kdf_model* model, const kdf_dataset* ds, const char* split,
                                int64_t batch_size, char** out_report_json);

/* Batch-1 single-threaded forward latency (warmup then runs timed passes)
 * plus parameter/activation/RSS memory figures. zero_timing nonzero blanks
 * the wall-clock numbers for byte-reproducible output. */
KDF_API kdf_status kdf_bench(kdf_model* model, int64_t height, int64_t width, int64_t warmup,
                             int64_t runs, int zero_timing, char** out_report_json);

/* Joins two or more kdf_bench reports into a comparison table; the first is
 * the baseline and every other row reports (base - x) / base * 100 per
 * metric, rounded to two decimals. */
KDF_API kdf_status kdf_compare_benches(const char* const* bench_jsons, size_t count,
                                       char** out_report_json);

/* Distills one fresh student per (temperature, alpha) point of the config's
 * sweep grid from the frozen teacher. Points run serially unless the config
 * enables sweep_parallel; max_threads caps the workers. */
KDF_API kdf_status kdf_sweep(const kdf_config* run_config, kdf_model* teacher,
                             const kdf_dataset* ds, int64_t max_threads,
                             char** out_report_json);

/* ---------------------------------------------------------------- reports */

/* Renders any report JSON produced by this library; format is "csv" or
 * "text". */
KDF_API kdf_status kdf_report_render(const char* report_json, const char* format,
                                     char** out_text);

/* Reproducibility record: command word, tool version, timestamp (blank when
 * the config is deterministic), seed, the fully rendered config, and a
 * content fingerprint per input path. */
KDF_API kdf_status kdf_manifest(const char* command, const kdf_config* resolved_config,
                                const char* const* input_paths, size_t count, char** out_json);

/* Content fingerprint of a file, or of a directory tree (every regular file
 * hashed with its relative path, in sorted order). Matches the manifest's
 * input fingerprints. */
KDF_API kdf_status kdf_fingerprint(const char* path, char** out_fingerprint);

#ifdef __cplusplus
}
#endif

#endif /* KDISTILL_H */
