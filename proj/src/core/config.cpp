// SPDX-License-Identifier: Apache-2.0
#include "core/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "core/common.hpp"

namespace kdf {

const std::vector<ConfigKeyDoc>& config_schema() {
  static const std::vector<ConfigKeyDoc> schema = {
      // model
      {"name", "custom", "model name; presets: teacher, student_a, student_b, student_c"},
      {"input_channels", "3", "input image channels fed to the first conv stage"},
      {"input_height", "64", "input image height after resize"},
      {"input_width", "64", "input image width after resize"},
      {"conv_channels", "64,128,256", "output channels of the conv stages (3x3, BN, ReLU, 2x2 maxpool)"},
      {"se_channels", "256", "channel width of the squeeze-excitation block; must equal last conv width"},
      {"se_reduction", "16", "squeeze bottleneck divisor"},
      {"se_bias", "false", "add biases to the SE squeeze/excite linears"},
      {"residual_channels", "256,512,1024", "input widths of the stride-2 residual blocks; each block maps to the next entry, the last doubles"},
      {"head_widths", "1024,512,256,7", "hidden widths of the classifier head, ending in num_classes"},
      {"dropout_rate", "0.2", "dropout on hidden head layers during training"},
      {"num_classes", "7", "number of emotion classes"},
      {"bn_epsilon", "1e-05", "batch-norm variance epsilon"},
      {"bn_momentum", "0.1", "batch-norm running-stat update fraction"},
      // training
      {"batch_size", "16", "samples per training batch"},
      {"epochs", "80", "training epochs"},
      {"lr", "0.001", "initial learning rate"},
      {"momentum", "0.9", "SGD momentum"},
      {"plateau_factor", "0.1", "learning-rate multiplier applied on stagnation"},
      {"plateau_patience", "5", "epochs without improvement before the rate decays"},
      {"plateau_metric", "val_loss", "metric watched by the scheduler: val_loss or val_accuracy"},
      {"plateau_tolerance", "0.0001", "minimum improvement that resets the patience counter"},
      {"min_lr", "1e-07", "learning-rate floor"},
      {"seed", "0", "master seed for init, shuffling, augmentation and dropout"},
      {"flip_probability", "0.5", "random horizontal flip probability (training batches only)"},
      {"deterministic", "false", "pin batch order and zero timing fields in reports"},
      {"class_weighting", "inverse", "loss class weights: inverse (N/(C*n_c)) or uniform"},
      {"val_fraction", "0.1", "held-out fraction of train/ for folder datasets"},
      // distillation
      {"temperature", "3", "softmax temperature for the soft-target term"},
      {"alpha", "0.2", "weight of the T^2-scaled KL distillation term"},
      {"hard_weight", "", "weight of the cross-entropy term; empty means 1-alpha"},
      // bench
      {"bench_warmup", "20", "warmup forward passes excluded from latency stats"},
      {"bench_runs", "100", "measured forward passes (batch 1)"},
      {"eval_batch", "64", "batch size used for evaluation passes"},
      // sweep
      {"sweep_temperatures", "1,2,3,4,5", "temperature grid for sweep"},
      {"sweep_alphas", "0.10,0.15,0.20", "alpha grid for sweep"},
      {"sweep_parallel", "false", "run sweep grid points on worker threads (capped by KDF_THREADS)"},
  };
  return schema;
}

namespace {
bool is_known_key(const std::string& key) {
  for (const auto& doc : config_schema())
    if (key == doc.key) return true;
  return false;
}
}  // namespace

Config Config::parse(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::Format,
           "config line " + std::to_string(lineno) + ": expected 'key = value', got: " + t);
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      fail(ErrorKind::Format, "config line " + std::to_string(lineno) + ": empty key");
    cfg.set(key, value);
  }
  return cfg;
}

Config Config::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

bool Config::has(const std::string& key) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == key; });
}

void Config::set(const std::string& key, const std::string& value) {
  for (auto& e : entries_) {
    if (e.first == key) {
      e.second = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

std::optional<std::string> Config::get(const std::string& key) const {
  for (const auto& e : entries_)
    if (e.first == key) return e.second;
  return std::nullopt;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  auto v = get(key);
  return v ? *v : fallback;
}

int64_t Config::get_int(const std::string& key, int64_t fallback) const {
  auto v = get(key);
  if (!v || v->empty()) return fallback;
  int64_t out{};
  auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc{} || p != v->data() + v->size())
    fail(ErrorKind::InvalidArgument, "config key '" + key + "': expected integer, got '" + *v + "'");
  return out;
}

uint64_t Config::get_uint(const std::string& key, uint64_t fallback) const {
  auto v = get(key);
  if (!v || v->empty()) return fallback;
  uint64_t out{};
  auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc{} || p != v->data() + v->size())
    fail(ErrorKind::InvalidArgument,
         "config key '" + key + "': expected unsigned integer, got '" + *v + "'");
  return out;
}

double Config::get_double(const std::string& key, double fallback) const {
  auto v = get(key);
  if (!v || v->empty()) return fallback;
  try {
    size_t pos = 0;
    double out = std::stod(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument(*v);
    return out;
  } catch (const std::exception&) {
    fail(ErrorKind::InvalidArgument, "config key '" + key + "': expected number, got '" + *v + "'");
  }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto v = get(key);
  if (!v || v->empty()) return fallback;
  if (iequals(*v, "true") || *v == "1" || iequals(*v, "yes")) return true;
  if (iequals(*v, "false") || *v == "0" || iequals(*v, "no")) return false;
  fail(ErrorKind::InvalidArgument, "config key '" + key + "': expected boolean, got '" + *v + "'");
}

std::vector<int64_t> Config::get_int_list(const std::string& key,
                                          const std::vector<int64_t>& fallback) const {
  auto v = get(key);
  if (!v || v->empty()) return fallback;
  std::vector<int64_t> out;
  for (const auto& part : split(*v, ',')) {
    std::string p = trim(part);
    if (p.empty())
      fail(ErrorKind::InvalidArgument, "config key '" + key + "': empty list entry in '" + *v + "'");
    int64_t x{};
    auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), x);
    if (ec != std::errc{} || ptr != p.data() + p.size())
      fail(ErrorKind::InvalidArgument,
           "config key '" + key + "': expected integer list, got '" + *v + "'");
    out.push_back(x);
  }
  return out;
}

std::vector<double> Config::get_double_list(const std::string& key,
                                            const std::vector<double>& fallback) const {
  auto v = get(key);
  if (!v || v->empty()) return fallback;
  std::vector<double> out;
  for (const auto& part : split(*v, ',')) {
    std::string p = trim(part);
    try {
      size_t pos = 0;
      out.push_back(std::stod(p, &pos));
      if (pos != p.size()) throw std::invalid_argument(p);
    } catch (const std::exception&) {
      fail(ErrorKind::InvalidArgument,
           "config key '" + key + "': expected number list, got '" + *v + "'");
    }
  }
  return out;
}

void Config::set_int(const std::string& key, int64_t v) { set(key, std::to_string(v)); }

void Config::set_double(const std::string& key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  set(key, buf);
}

void Config::set_bool(const std::string& key, bool v) { set(key, v ? "true" : "false"); }

void Config::set_int_list(const std::string& key, const std::vector<int64_t>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  set(key, s);
}

std::string Config::render() const {
  std::ostringstream out;
  std::set<std::string> written;
  for (const auto& doc : config_schema()) {
    auto v = get(doc.key);
    if (v) {
      out << doc.key << " = " << *v << "\n";
      written.insert(doc.key);
    }
  }
  std::map<std::string, std::string> rest;
  for (const auto& e : entries_)
    if (!written.count(e.first)) rest[e.first] = e.second;
  for (const auto& [k, v] : rest) out << k << " = " << v << "\n";
  return out.str();
}

std::vector<std::string> Config::unknown_keys() const {
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (!is_known_key(e.first)) out.push_back(e.first);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace kdf
