// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace kdf {

inline constexpr int64_t kNumEmotions = 7;

// Canonical label order; every loader and report uses these indices.
const char* emotion_name(int64_t index);
// Accepts names (any case) or digits; returns -1 when unknown.
int64_t emotion_index(const std::string& name);

struct Sample {
  std::vector<float> pixels;  // (channels, height, width), values in [0, 1]
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  int64_t label = 0;
};

struct Dataset {
  std::vector<Sample> train, val, test;
  int64_t num_classes = kNumEmotions;
  std::string source;

  bool has_val() const { return !val.empty(); }
  bool has_test() const { return !test.empty(); }
  const std::vector<Sample>& split(const std::string& name) const;  // train|val|test
};

// Single-file corpus: one sample per line, `emotion,pixels,usage` with
// space-separated 8-bit grayscale pixels. Usage buckets map to train, val
// and test. Malformed rows report their line number.
Dataset read_fer_csv(const std::string& path, int64_t target_h, int64_t target_w);

// Directory corpus: <root>/<split>/<class>/<image>. Splits are train plus
// optional val and test; classes are emotion names or indices. When val is
// absent a seeded fraction of train is held out.
Dataset read_image_folder(const std::string& root, int64_t target_h, int64_t target_w,
                          double val_fraction, uint64_t seed);

// Dispatch on path kind: directory or .csv file.
Dataset load_dataset(const std::string& path, int64_t target_h, int64_t target_w,
                     double val_fraction, uint64_t seed);

struct SplitStats {
  std::string name;
  int64_t total = 0;
  std::vector<int64_t> per_class;
};

struct DatasetStats {
  std::string source;
  int64_t num_classes = kNumEmotions;
  std::vector<SplitStats> splits;
};

DatasetStats dataset_stats(const Dataset& ds);
std::string stats_to_json(const DatasetStats& stats);
std::string stats_to_csv(const DatasetStats& stats);

// Inverse-frequency weights: w_c = N / (C * n_c) over the given counts.
// Every class must be present.
std::vector<double> class_weights(const std::vector<int64_t>& counts);

// Half-pixel-center bilinear resize, per channel.
std::vector<float> resize_bilinear(const float* src, int64_t channels, int64_t h, int64_t w,
                                   int64_t out_h, int64_t out_w);

struct Batch {
  Tensor images;  // (N, channels, H, W)
  std::vector<int64_t> labels;
};

// Stacks samples into one tensor, replicating single-channel sources across
// the requested channel count. With an rng, each sample is mirrored
// horizontally with the given probability (training augmentation).
Batch make_batch(const std::vector<Sample>& samples, const std::vector<size_t>& indices,
                 int64_t channels, double flip_probability, std::mt19937_64* rng);

}  // namespace kdf
