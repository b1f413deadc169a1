// SPDX-License-Identifier: Apache-2.0
#include "core/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>

#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wdeprecated-enum-enum-conversion"
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#pragma GCC diagnostic pop

#include "core/common.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace kdf {

namespace {

const char* kEmotionNames[kNumEmotions] = {"Angry",    "Disgust", "Fear",   "Happy",
                                           "Sad",      "Surprise", "Neutral"};

bool all_digits(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!std::isdigit((unsigned char)c)) return false;
  return true;
}

}  // namespace

const char* emotion_name(int64_t index) {
  if (index < 0 || index >= kNumEmotions) {
    fail(ErrorKind::InvalidArgument, "emotion index " + std::to_string(index) + " is outside [0, 7)");
  }
  return kEmotionNames[index];
}

int64_t emotion_index(const std::string& name) {
  std::string t = trim(name);
  if (all_digits(t)) {
    int64_t v = std::stoll(t);
    return v >= 0 && v < kNumEmotions ? v : -1;
  }
  for (int64_t i = 0; i < kNumEmotions; ++i)
    if (iequals(t, kEmotionNames[i])) return i;
  return -1;
}

const std::vector<Sample>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  fail(ErrorKind::InvalidArgument, "unknown split '" + name + "' (expected train, val or test)");
}

// ------------------------------------------------------------------- resize

std::vector<float> resize_bilinear(const float* src, int64_t channels, int64_t h, int64_t w,
                                   int64_t out_h, int64_t out_w) {
  if (channels < 1 || h < 1 || w < 1 || out_h < 1 || out_w < 1) {
    fail(ErrorKind::InvalidArgument, "resize: sizes must be positive");
  }
  std::vector<float> dst((size_t)(channels * out_h * out_w));
  if (h == out_h && w == out_w) {
    std::copy(src, src + channels * h * w, dst.begin());
    return dst;
  }
  double sy = (double)h / (double)out_h;
  double sx = (double)w / (double)out_w;
  for (int64_t c = 0; c < channels; ++c) {
    const float* plane = src + c * h * w;
    float* out = dst.data() + c * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      double fy = ((double)oy + 0.5) * sy - 0.5;
      fy = std::min(std::max(fy, 0.0), (double)(h - 1));
      int64_t y0 = (int64_t)fy;
      int64_t y1 = std::min(y0 + 1, h - 1);
      double wy = fy - (double)y0;
      for (int64_t ox = 0; ox < out_w; ++ox) {
        double fx = ((double)ox + 0.5) * sx - 0.5;
        fx = std::min(std::max(fx, 0.0), (double)(w - 1));
        int64_t x0 = (int64_t)fx;
        int64_t x1 = std::min(x0 + 1, w - 1);
        double wx = fx - (double)x0;
        double top = (1.0 - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1];
        double bot = (1.0 - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1];
        out[oy * out_w + ox] = (float)((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return dst;
}

// ------------------------------------------------------------------ csv file

namespace {

Sample make_resized(std::vector<float> pixels, int64_t channels, int64_t h, int64_t w,
                    int64_t target_h, int64_t target_w, int64_t label) {
  Sample s;
  s.pixels = resize_bilinear(pixels.data(), channels, h, w, target_h, target_w);
  s.channels = channels;
  s.height = target_h;
  s.width = target_w;
  s.label = label;
  return s;
}

[[noreturn]] void row_fail(const std::string& path, int64_t line, const std::string& what) {
  fail(ErrorKind::Format, path + ": line " + std::to_string(line) + ": " + what);
}

}  // namespace

Dataset read_fer_csv(const std::string& path, int64_t target_h, int64_t target_w) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::Io, "cannot open dataset: " + path);
  Dataset ds;
  ds.source = path;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (lineno == 1 && line.rfind("emotion", 0) == 0) continue;  // header
    auto fields = split(line, ',');
    if (fields.size() != 3) {
      row_fail(path, lineno, "expected 3 fields (emotion,pixels,usage), got " + std::to_string(fields.size()));
    }
    std::string label_text = trim(fields[0]);
    if (!all_digits(label_text)) row_fail(path, lineno, "emotion '" + label_text + "' is not a number");
    int64_t label = std::stoll(label_text);
    if (label < 0 || label >= kNumEmotions) {
      row_fail(path, lineno, "emotion " + std::to_string(label) + " is outside [0, 7)");
    }
    auto pixel_fields = split(trim(fields[1]), ' ');
    std::vector<float> pixels;
    pixels.reserve(pixel_fields.size());
    for (const auto& p : pixel_fields) {
      if (p.empty()) continue;
      if (!all_digits(p)) row_fail(path, lineno, "pixel value '" + p + "' is not a number");
      int64_t v = std::stoll(p);
      if (v > 255) row_fail(path, lineno, "pixel value " + std::to_string(v) + " exceeds 255");
      pixels.push_back((float)v / 255.0f);
    }
    if (pixels.empty()) row_fail(path, lineno, "empty pixel field");
    int64_t side = (int64_t)std::llround(std::sqrt((double)pixels.size()));
    if (side * side != (int64_t)pixels.size()) {
      row_fail(path, lineno, "pixel count " + std::to_string(pixels.size()) + " is not a perfect square");
    }
    std::string usage = trim(fields[2]);
    std::vector<Sample>* bucket = nullptr;
    if (iequals(usage, "Training")) bucket = &ds.train;
    else if (iequals(usage, "PublicTest")) bucket = &ds.val;
    else if (iequals(usage, "PrivateTest")) bucket = &ds.test;
    else row_fail(path, lineno, "unknown usage '" + usage + "'");
    bucket->push_back(make_resized(std::move(pixels), 1, side, side, target_h, target_w, label));
  }
  if (ds.train.empty() && ds.val.empty() && ds.test.empty()) {
    fail(ErrorKind::Format, path + ": no samples found");
  }
  return ds;
}

// ---------------------------------------------------------------- image dirs

namespace {

bool has_image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  return iequals(ext, ".png") || iequals(ext, ".jpg") || iequals(ext, ".jpeg") ||
         iequals(ext, ".bmp");
}

Sample decode_image(const fs::path& path, int64_t target_h, int64_t target_w, int64_t label) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty()) fail(ErrorKind::Format, "cannot decode image: " + path.string());
  if (img.depth() != CV_8U) fail(ErrorKind::Format, "unsupported bit depth in image: " + path.string());
  int ch = img.channels();
  if (ch != 1 && ch != 3 && ch != 4) {
    fail(ErrorKind::Format, "unsupported channel count " + std::to_string(ch) + " in image: " + path.string());
  }
  int64_t h = img.rows, w = img.cols;
  int64_t out_ch = ch == 1 ? 1 : 3;
  std::vector<float> planes((size_t)(out_ch * h * w));
  for (int64_t y = 0; y < h; ++y) {
    const uint8_t* row = img.ptr<uint8_t>((int)y);
    for (int64_t x = 0; x < w; ++x) {
      if (ch == 1) {
        planes[(size_t)(y * w + x)] = (float)row[x] / 255.0f;
      } else {
        // OpenCV decodes interleaved BGR(A); planes are stored RGB.
        const uint8_t* px = row + x * ch;
        planes[(size_t)(0 * h * w + y * w + x)] = (float)px[2] / 255.0f;
        planes[(size_t)(1 * h * w + y * w + x)] = (float)px[1] / 255.0f;
        planes[(size_t)(2 * h * w + y * w + x)] = (float)px[0] / 255.0f;
      }
    }
  }
  return make_resized(std::move(planes), out_ch, h, w, target_h, target_w, label);
}

std::vector<Sample> load_split_dir(const fs::path& dir, int64_t target_h, int64_t target_w) {
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  std::vector<Sample> out;
  for (const auto& cd : class_dirs) {
    int64_t label = emotion_index(cd.filename().string());
    if (label < 0) {
      fail(ErrorKind::Format, "unknown class directory '" + cd.filename().string() + "' under " +
                                  dir.string());
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cd)) {
      if (e.is_regular_file() && has_image_extension(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) out.push_back(decode_image(file, target_h, target_w, label));
  }
  return out;
}

}  // namespace

Dataset read_image_folder(const std::string& root, int64_t target_h, int64_t target_w,
                          double val_fraction, uint64_t seed) {
  if (val_fraction < 0.0 || val_fraction >= 1.0) {
    fail(ErrorKind::InvalidArgument, "val_fraction must be in [0, 1), got " + format_number(val_fraction));
  }
  fs::path r(root);
  if (!fs::is_directory(r)) fail(ErrorKind::Io, "dataset folder not found: " + root);
  if (!fs::is_directory(r / "train")) {
    fail(ErrorKind::Format, "folder dataset needs a train/ subdirectory: " + root);
  }
  Dataset ds;
  ds.source = root;
  ds.train = load_split_dir(r / "train", target_h, target_w);
  if (ds.train.empty()) fail(ErrorKind::Format, "no images under " + (r / "train").string());
  if (fs::is_directory(r / "val")) {
    ds.val = load_split_dir(r / "val", target_h, target_w);
  } else if (val_fraction > 0.0 && ds.train.size() >= 2) {
    // Seeded hold-out so repeated runs see the same membership.
    auto rng = seeded_rng(seed, "val_split", 0);
    std::vector<size_t> idx = shuffled_indices(ds.train.size(), rng);
    size_t n_val = (size_t)std::llround(val_fraction * (double)idx.size());
    n_val = std::min(n_val, idx.size() - 1);
    if (n_val > 0) {
      std::vector<bool> is_val(idx.size(), false);
      for (size_t i = 0; i < n_val; ++i) is_val[idx[i]] = true;
      std::vector<Sample> train_keep, val_keep;
      for (size_t i = 0; i < ds.train.size(); ++i) {
        (is_val[i] ? val_keep : train_keep).push_back(std::move(ds.train[i]));
      }
      ds.train = std::move(train_keep);
      ds.val = std::move(val_keep);
    }
  }
  if (fs::is_directory(r / "test")) ds.test = load_split_dir(r / "test", target_h, target_w);
  return ds;
}

Dataset load_dataset(const std::string& path, int64_t target_h, int64_t target_w,
                     double val_fraction, uint64_t seed) {
  fs::path p(path);
  if (fs::is_directory(p)) return read_image_folder(path, target_h, target_w, val_fraction, seed);
  if (fs::is_regular_file(p)) {
    if (iequals(p.extension().string(), ".csv")) return read_fer_csv(path, target_h, target_w);
    fail(ErrorKind::InvalidArgument, "unsupported dataset file (expected .csv): " + path);
  }
  fail(ErrorKind::Io, "dataset path does not exist: " + path);
}

// -------------------------------------------------------------------- stats

DatasetStats dataset_stats(const Dataset& ds) {
  DatasetStats st;
  st.source = ds.source;
  st.num_classes = ds.num_classes;
  auto add = [&](const char* name, const std::vector<Sample>& samples) {
    if (samples.empty()) return;
    SplitStats s;
    s.name = name;
    s.total = (int64_t)samples.size();
    s.per_class.assign((size_t)ds.num_classes, 0);
    for (const auto& smp : samples) s.per_class[(size_t)smp.label]++;
    st.splits.push_back(std::move(s));
  };
  add("train", ds.train);
  add("val", ds.val);
  add("test", ds.test);
  return st;
}

std::string stats_to_json(const DatasetStats& stats) {
  nlohmann::ordered_json j;
  j["kind"] = "dataset_stats";
  j["source"] = stats.source;
  j["num_classes"] = stats.num_classes;
  j["splits"] = nlohmann::ordered_json::array();
  for (const auto& s : stats.splits) {
    nlohmann::ordered_json js;
    js["name"] = s.name;
    js["total"] = s.total;
    nlohmann::ordered_json per;
    for (size_t c = 0; c < s.per_class.size(); ++c) per[emotion_name((int64_t)c)] = s.per_class[c];
    js["per_class"] = std::move(per);
    j["splits"].push_back(std::move(js));
  }
  return j.dump(2) + "\n";
}

std::string stats_to_csv(const DatasetStats& stats) {
  std::string out = "split,total";
  for (int64_t c = 0; c < stats.num_classes; ++c) out += std::string(",") + emotion_name(c);
  out += "\n";
  for (const auto& s : stats.splits) {
    out += s.name + "," + std::to_string(s.total);
    for (int64_t v : s.per_class) out += "," + std::to_string(v);
    out += "\n";
  }
  return out;
}

std::vector<double> class_weights(const std::vector<int64_t>& counts) {
  if (counts.empty()) fail(ErrorKind::InvalidArgument, "class_weights: empty counts");
  int64_t total = 0;
  for (int64_t c : counts) total += c;
  std::vector<double> w(counts.size());
  for (size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] <= 0) {
      std::string which = counts.size() == (size_t)kNumEmotions ? emotion_name((int64_t)i)
                                                                : std::to_string(i);
      fail(ErrorKind::InvalidArgument, "class_weights: class '" + which + "' has no samples");
    }
    w[i] = (double)total / ((double)counts.size() * (double)counts[i]);
  }
  return w;
}

// ------------------------------------------------------------------- batches

Batch make_batch(const std::vector<Sample>& samples, const std::vector<size_t>& indices,
                 int64_t channels, double flip_probability, std::mt19937_64* rng) {
  if (indices.empty()) fail(ErrorKind::InvalidArgument, "make_batch: empty index list");
  if (samples.empty()) fail(ErrorKind::InvalidArgument, "make_batch: empty sample list");
  int64_t h = samples.front().height, w = samples.front().width;
  int64_t n = (int64_t)indices.size();
  std::vector<float> data((size_t)(n * channels * h * w));
  Batch batch;
  batch.labels.resize((size_t)n);
  for (int64_t bi = 0; bi < n; ++bi) {
    size_t si = indices[(size_t)bi];
    if (si >= samples.size()) {
      fail(ErrorKind::InvalidArgument, "make_batch: index " + std::to_string(si) + " is outside the split");
    }
    const Sample& s = samples[si];
    if (s.height != h || s.width != w) {
      fail(ErrorKind::InvalidArgument, "make_batch: mixed sample sizes in one batch");
    }
    if (s.channels != channels && s.channels != 1) {
      fail(ErrorKind::InvalidArgument, "make_batch: cannot adapt " + std::to_string(s.channels) +
                                           "-channel sample to " + std::to_string(channels) + " channels");
    }
    bool flip = false;
    if (rng != nullptr && flip_probability > 0.0) flip = uniform01(*rng) < flip_probability;
    batch.labels[(size_t)bi] = s.label;
    for (int64_t c = 0; c < channels; ++c) {
      const float* plane = s.pixels.data() + (s.channels == 1 ? 0 : c * h * w);
      float* out = data.data() + ((bi * channels + c) * h) * w;
      if (!flip) {
        std::copy(plane, plane + h * w, out);
      } else {
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) out[y * w + x] = plane[y * w + (w - 1 - x)];
      }
    }
  }
  batch.images = Tensor::from_values({n, channels, h, w}, std::move(data));
  return batch;
}

}  // namespace kdf
