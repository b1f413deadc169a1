// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared test fixtures: synthetic datasets, disk corpora and tiny model
// configurations sized so each test runs in seconds.

#include <unistd.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wdeprecated-enum-enum-conversion"
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#pragma GCC diagnostic pop

#include "core/common.hpp"
#include "core/data.hpp"
#include "core/model.hpp"

namespace fixtures {

namespace fs = std::filesystem;

// Unique scratch directory, removed on destruction.
struct TempDir {
  fs::path path;

  TempDir() {
    static std::atomic<uint64_t> counter{0};
    path = fs::temp_directory_path() /
           ("kdistill_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path.string(); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// ------------------------------------------------------------------ blobs

// 7 separable classes: each class is a bright square patch at a distinct grid
// site on a dim noisy background. Patch location encodes the class, so the
// classes stay separable under any per-pixel noise level used here.
inline kdf::Dataset make_blobs(int per_class, int h, int w, uint64_t seed) {
  kdf::Dataset ds;
  ds.source = "blobs";
  auto rng = kdf::seeded_rng(seed, "blobs", 0);
  for (int split = 0; split < 2; ++split) {
    auto& out = split == 0 ? ds.train : ds.val;
    int count = split == 0 ? per_class : std::max(2, per_class / 4);
    for (int c = 0; c < 7; ++c) {
      for (int i = 0; i < count; ++i) {
        kdf::Sample s;
        s.channels = 1;
        s.height = h;
        s.width = w;
        s.label = c;
        s.pixels.assign((size_t)h * w, 0.0f);
        for (auto& v : s.pixels) v = 0.1f + 0.05f * (float)kdf::uniform01(rng);
        int gy = c / 3, gx = c % 3;  // 3x3 grid of patch sites
        int cy = 2 + gy * (h - 5) / 2, cx = 2 + gx * (w - 5) / 2;
        for (int dy = -2; dy <= 2; ++dy)
          for (int dx = -2; dx <= 2; ++dx) {
            int y = cy + dy, x = cx + dx;
            if (y >= 0 && y < h && x >= 0 && x < w)
              s.pixels[(size_t)y * w + x] = 0.8f + 0.15f * (float)kdf::uniform01(rng);
          }
        out.push_back(std::move(s));
      }
    }
  }
  return ds;
}

// Two-stage model small enough to train to convergence in seconds.
inline kdf::ModelConfig toy_teacher_config() {
  kdf::ModelConfig cfg;
  cfg.name = "toy_teacher";
  cfg.input_channels = 1;
  cfg.input_height = 16;
  cfg.input_width = 16;
  cfg.conv_channels = {8, 16};
  cfg.se_channels = 16;
  cfg.se_reduction = 4;
  cfg.residual_channels = {16};
  cfg.head_widths = {16, 7};
  cfg.dropout_rate = 0.0;
  cfg.validate();
  return cfg;
}

// --------------------------------------------------------------- csv files

struct CsvRow {
  int64_t label;
  std::vector<int> pixels;  // 0..255, perfect-square count
  std::string usage;        // Training / PublicTest / PrivateTest
};

inline void write_fer_csv(const std::string& path, const std::vector<CsvRow>& rows,
                          bool header = true) {
  std::ofstream f(path);
  if (header) f << "emotion,pixels,Usage\n";
  for (const auto& r : rows) {
    f << r.label << ",";
    for (size_t i = 0; i < r.pixels.size(); ++i) f << (i ? " " : "") << r.pixels[i];
    f << "," << r.usage << "\n";
  }
}

// Constant-valued square image row.
inline CsvRow flat_row(int64_t label, int side, int value, const std::string& usage) {
  return {label, std::vector<int>((size_t)(side * side), value), usage};
}

// ------------------------------------------------------------ image folders

// train/<class>/imgN.png layout; each image is a flat gray level distinct per
// class so ingestion results are easy to predict.
inline void write_folder_corpus(const fs::path& root,
                                const std::vector<std::pair<std::string, int>>& split_class_counts,
                                int side = 12) {
  for (const auto& [key, count] : split_class_counts) {
    auto slash = key.find('/');
    fs::path dir = root / key.substr(0, slash) / key.substr(slash + 1);
    fs::create_directories(dir);
    int64_t label = kdf::emotion_index(key.substr(slash + 1));
    for (int i = 0; i < count; ++i) {
      cv::Mat img(side, side, CV_8UC1, cv::Scalar(30 + 25 * (int)label + i));
      cv::imwrite((dir / ("img" + std::to_string(i) + ".png")).string(), img);
    }
  }
}

}  // namespace fixtures
