// SPDX-License-Identifier: Apache-2.0
#include "core/metrics.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "core/common.hpp"
#include "core/distill.hpp"
#include "json.hpp"

namespace kdf {

using njson = nlohmann::ordered_json;

// ---------------------------------------------------------- ConfusionMatrix

int64_t ConfusionMatrix::total() const {
  int64_t n = 0;
  for (int64_t v : cells) n += v;
  return n;
}

int64_t ConfusionMatrix::diagonal() const {
  int64_t n = 0;
  for (int64_t c = 0; c < num_classes; ++c) n += at(c, c);
  return n;
}

double ConfusionMatrix::accuracy() const {
  int64_t t = total();
  return t == 0 ? 0.0 : (double)diagonal() / (double)t;
}

std::vector<double> ConfusionMatrix::per_class_accuracy() const {
  int64_t t = total();
  std::vector<double> out((size_t)num_classes, 0.0);
  if (t == 0) return out;
  for (int64_t c = 0; c < num_classes; ++c) {
    int64_t row = 0, col = 0;
    for (int64_t j = 0; j < num_classes; ++j) {
      row += at(c, j);
      col += at(j, c);
    }
    int64_t tp = at(c, c);
    int64_t tn = t - row - col + tp;
    out[(size_t)c] = (double)(tp + tn) / (double)t;
  }
  return out;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes != num_classes) {
    fail(ErrorKind::InvalidArgument, "confusion merge: class counts disagree");
  }
  for (size_t i = 0; i < cells.size(); ++i) cells[i] += other.cells[i];
}

// ----------------------------------------------------------------- evaluate

EvalResult evaluate(Model& model, const std::vector<Sample>& samples, int64_t batch_size) {
  if (samples.empty()) fail(ErrorKind::InvalidArgument, "evaluate: empty sample list");
  if (batch_size < 1) fail(ErrorKind::InvalidArgument, "evaluate: batch_size must be positive");
  NoGradGuard ng;
  EvalResult res;
  res.confusion = ConfusionMatrix(model.config().num_classes);
  double loss_sum = 0.0;
  int64_t n = (int64_t)samples.size();
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t count = std::min(batch_size, n - start);
    std::vector<size_t> idx((size_t)count);
    for (int64_t i = 0; i < count; ++i) idx[(size_t)i] = (size_t)(start + i);
    Batch batch = make_batch(samples, idx, model.config().input_channels, 0.0, nullptr);
    Tensor logits = model.forward(batch.images, false);
    Tensor ce = cross_entropy(logits, batch.labels, {});
    loss_sum += (double)ce.item() * (double)count;
    auto preds = argmax_rows(logits);
    for (int64_t i = 0; i < count; ++i) {
      res.confusion.at(batch.labels[(size_t)i], preds[(size_t)i])++;
    }
  }
  res.loss = loss_sum / (double)n;
  res.accuracy = res.confusion.accuracy();
  return res;
}

namespace {

std::string class_label(int64_t num_classes, int64_t i) {
  return num_classes == kNumEmotions ? emotion_name(i) : "class" + std::to_string(i);
}

}  // namespace

std::string eval_report_json(const EvalResult& result, const std::string& model_name,
                             const std::string& split) {
  njson j;
  j["kind"] = "eval_report";
  j["model"] = model_name;
  j["split"] = split;
  j["samples"] = result.confusion.total();
  j["loss"] = result.loss;
  j["accuracy"] = result.accuracy;
  int64_t c = result.confusion.num_classes;
  njson classes = njson::array();
  for (int64_t i = 0; i < c; ++i) classes.push_back(class_label(c, i));
  j["classes"] = std::move(classes);
  auto pca = result.confusion.per_class_accuracy();
  njson per;
  for (int64_t i = 0; i < c; ++i) per[class_label(c, i)] = pca[(size_t)i];
  j["per_class_accuracy"] = std::move(per);
  njson rows = njson::array();
  for (int64_t t = 0; t < c; ++t) {
    njson row = njson::array();
    for (int64_t p = 0; p < c; ++p) row.push_back(result.confusion.at(t, p));
    rows.push_back(std::move(row));
  }
  j["confusion"] = std::move(rows);
  return j.dump(2) + "\n";
}

// -------------------------------------------------------------------- bench

LatencyStats bench_latency(Model& model, int64_t height, int64_t width, int64_t warmup,
                           int64_t runs) {
  if (runs < 1) fail(ErrorKind::InvalidArgument, "bench: runs must be positive");
  if (warmup < 0) fail(ErrorKind::InvalidArgument, "bench: warmup must be non-negative");
  NoGradGuard ng;
  auto rng = seeded_rng(0, "bench_input", 0);
  Tensor x = Tensor::randn({1, model.config().input_channels, height, width}, rng, 1.0f);
  for (int64_t i = 0; i < warmup; ++i) model.forward(x, false);
  std::vector<double> ms((size_t)runs);
  for (int64_t i = 0; i < runs; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    model.forward(x, false);
    auto t1 = std::chrono::steady_clock::now();
    ms[(size_t)i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  std::vector<double> sorted = ms;
  std::sort(sorted.begin(), sorted.end());
  LatencyStats out;
  out.warmup = warmup;
  out.runs = runs;
  out.height = height;
  out.width = width;
  double acc = 0.0;
  for (double v : ms) acc += v;
  out.mean_ms = acc / (double)runs;
  out.median_ms = runs % 2 == 1 ? sorted[(size_t)(runs / 2)]
                                : 0.5 * (sorted[(size_t)(runs / 2 - 1)] + sorted[(size_t)(runs / 2)]);
  int64_t rank = (int64_t)std::ceil(0.95 * (double)runs);  // nearest-rank
  out.p95_ms = sorted[(size_t)std::max<int64_t>(0, rank - 1)];
  out.min_ms = sorted.front();
  out.max_ms = sorted.back();
  return out;
}

MemoryReport memory_report(const Model& model) {
  MemoryReport r;
  r.trainable_params = model.trainable_count();
  r.parameter_bytes = r.trainable_params * 4;
  r.activation_estimate_bytes = activation_estimate_bytes(model.config());
  rusage usage{};
  if (getrusage(RUSAGE_SELF, &usage) == 0) {
    r.peak_rss_bytes = (int64_t)usage.ru_maxrss * 1024;  // ru_maxrss is in KiB here
  }
  return r;
}

int64_t activation_estimate_bytes(const ModelConfig& cfg) {
  int64_t h = cfg.input_height, w = cfg.input_width;
  int64_t elems = cfg.input_channels * h * w;
  for (int64_t c : cfg.conv_channels) {
    elems += c * h * w;  // conv output before pooling
    h /= 2;
    w /= 2;
    elems += c * h * w;  // pooled map
  }
  int64_t se_c = cfg.se_channels;
  elems += 2 * se_c + 2 * (se_c / cfg.se_reduction);  // pooled vector and gate activations
  elems += se_c * h * w;                              // gated output
  for (size_t i = 0; i < cfg.residual_channels.size(); ++i) {
    int64_t out_c = i + 1 < cfg.residual_channels.size() ? cfg.residual_channels[i + 1]
                                                         : cfg.residual_channels.back() * 2;
    h = (h - 1) / 2 + 1;  // 3x3 stride-2 pad-1
    w = (w - 1) / 2 + 1;
    elems += 4 * out_c * h * w;  // two conv outputs, projection, merged sum
  }
  elems += cfg.final_channels();  // pooled feature vector
  for (int64_t width : cfg.head_widths) elems += width;
  return elems * 4;
}

std::string bench_report_json(const std::string& model_name, const ModelConfig& cfg,
                              const LatencyStats& lat, const MemoryReport& mem,
                              bool zero_timing) {
  njson j;
  j["kind"] = "bench_report";
  j["model"] = model_name;
  j["input"] = {1, cfg.input_channels, lat.height, lat.width};
  j["batch"] = 1;
  j["threads"] = 1;
  j["warmup"] = lat.warmup;
  j["runs"] = lat.runs;
  j["timing_zeroed"] = zero_timing;
  auto t = [&](double v) { return zero_timing ? 0.0 : v; };
  njson l;
  l["mean"] = t(lat.mean_ms);
  l["median"] = t(lat.median_ms);
  l["p95"] = t(lat.p95_ms);
  l["min"] = t(lat.min_ms);
  l["max"] = t(lat.max_ms);
  j["latency_ms"] = std::move(l);
  njson m;
  m["trainable_params"] = mem.trainable_params;
  m["parameter_bytes"] = mem.parameter_bytes;
  m["parameter_mb"] = (double)mem.parameter_bytes / 1e6;
  m["parameter_mib"] = (double)mem.parameter_bytes / (double)(1 << 20);
  m["activation_estimate_bytes"] = mem.activation_estimate_bytes;
  m["activation_estimate_mb"] = (double)mem.activation_estimate_bytes / 1e6;
  // Peak RSS is a process-wide, run-varying probe; it is blanked with the
  // timings so deterministic runs stay byte-reproducible.
  m["peak_rss_bytes"] = zero_timing ? (int64_t)0 : mem.peak_rss_bytes;
  m["peak_rss_mb"] = zero_timing ? 0.0 : (double)mem.peak_rss_bytes / 1e6;
  j["memory"] = std::move(m);
  return j.dump(2) + "\n";
}

// ------------------------------------------------------------------ compare

double improvement_pct(double base, double x) {
  if (base == 0.0) fail(ErrorKind::InvalidArgument, "improvement: baseline value is zero");
  double pct = (base - x) / base * 100.0;
  return std::round(pct * 100.0) / 100.0;
}

std::string compare_report_json(const std::vector<CompareEntry>& entries) {
  if (entries.size() < 2) {
    fail(ErrorKind::InvalidArgument, "compare needs at least 2 entries, got " +
                                         std::to_string(entries.size()));
  }
  const CompareEntry& base = entries.front();
  njson j;
  j["kind"] = "compare_report";
  j["baseline"] = base.name;
  njson metrics = njson::array();
  for (const auto& [k, v] : base.metrics) metrics.push_back(k);
  j["metrics"] = std::move(metrics);
  njson rows = njson::array();
  for (size_t i = 0; i < entries.size(); ++i) {
    const CompareEntry& e = entries[i];
    njson row;
    row["name"] = e.name;
    njson vals;
    for (const auto& [k, v] : e.metrics) vals[k] = v;
    row["values"] = std::move(vals);
    if (i > 0) {
      njson imp;
      for (const auto& [k, bv] : base.metrics) {
        const auto it = std::find_if(e.metrics.begin(), e.metrics.end(),
                                     [&](const auto& p) { return p.first == k; });
        if (it == e.metrics.end()) {
          fail(ErrorKind::InvalidArgument, "compare: entry '" + e.name + "' lacks metric '" + k + "'");
        }
        imp[k] = improvement_pct(bv, it->second);
      }
      row["improvement_pct"] = std::move(imp);
    }
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------- renderers

namespace {

njson parse_report(const std::string& text) {
  njson j = njson::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("kind")) {
    fail(ErrorKind::Format, "not a report document (expected JSON with a 'kind' field)");
  }
  return j;
}

std::string num_cell(const njson& v) {
  if (v.is_number_integer()) return std::to_string((int64_t)v);
  if (v.is_number()) return format_number((double)v);
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

std::string csv_dataset_stats(const njson& j) {
  std::string out = "split,total";
  std::vector<std::string> names;
  if (!j["splits"].empty()) {
    for (auto& [k, v] : j["splits"][0]["per_class"].items()) names.push_back(k);
  }
  for (const auto& n : names) out += "," + n;
  out += "\n";
  for (const auto& s : j["splits"]) {
    out += s["name"].get<std::string>() + "," + num_cell(s["total"]);
    for (const auto& n : names) out += "," + num_cell(s["per_class"][n]);
    out += "\n";
  }
  return out;
}

std::string csv_train(const njson& j) {
  bool distilled = j["kind"] == "distill_report";
  std::string out = "epoch,lr,train_loss,train_accuracy,val_loss,val_accuracy";
  if (distilled) out += ",hard_loss,soft_loss";
  out += ",seconds\n";
  for (const auto& e : j["history"]) {
    out += num_cell(e["epoch"]) + "," + num_cell(e["lr"]) + "," + num_cell(e["train_loss"]) + "," +
           num_cell(e["train_accuracy"]) + "," + num_cell(e["val_loss"]) + "," +
           num_cell(e["val_accuracy"]);
    if (distilled) out += "," + num_cell(e["hard_loss"]) + "," + num_cell(e["soft_loss"]);
    out += "," + num_cell(e["seconds"]) + "\n";
  }
  return out;
}

std::string csv_eval(const njson& j) {
  std::vector<std::string> classes;
  for (const auto& c : j["classes"]) classes.push_back(c.get<std::string>());
  std::string out = "truth";
  for (const auto& c : classes) out += ",pred_" + c;
  out += ",support,one_vs_rest_accuracy\n";
  const auto& conf = j["confusion"];
  for (size_t t = 0; t < classes.size(); ++t) {
    out += classes[t];
    int64_t support = 0;
    for (size_t p = 0; p < classes.size(); ++p) {
      int64_t v = conf[t][p];
      support += v;
      out += "," + std::to_string(v);
    }
    out += "," + std::to_string(support) + "," + num_cell(j["per_class_accuracy"][classes[t]]);
    out += "\n";
  }
  out += "overall";
  for (size_t p = 0; p < classes.size(); ++p) out += ",";
  out += "," + num_cell(j["samples"]) + "," + num_cell(j["accuracy"]) + "\n";
  return out;
}

std::string csv_bench(const njson& j) {
  std::string out = "metric,value\n";
  out += "model," + j["model"].get<std::string>() + "\n";
  const auto& in = j["input"];
  out += "input," + std::to_string((int64_t)in[0]) + "x" + std::to_string((int64_t)in[1]) + "x" +
         std::to_string((int64_t)in[2]) + "x" + std::to_string((int64_t)in[3]) + "\n";
  for (const char* k : {"batch", "threads", "warmup", "runs"}) {
    out += std::string(k) + "," + num_cell(j[k]) + "\n";
  }
  for (auto& [k, v] : j["latency_ms"].items()) out += "latency_" + k + "_ms," + num_cell(v) + "\n";
  for (auto& [k, v] : j["memory"].items()) out += k + "," + num_cell(v) + "\n";
  return out;
}

std::string csv_compare(const njson& j) {
  std::vector<std::string> metrics;
  for (const auto& m : j["metrics"]) metrics.push_back(m.get<std::string>());
  std::string out = "name";
  for (const auto& m : metrics) out += "," + m;
  for (const auto& m : metrics) out += "," + m + "_improvement_pct";
  out += "\n";
  for (const auto& row : j["rows"]) {
    out += row["name"].get<std::string>();
    for (const auto& m : metrics) out += "," + num_cell(row["values"][m]);
    for (const auto& m : metrics) {
      out += ",";
      if (row.contains("improvement_pct")) out += num_cell(row["improvement_pct"][m]);
    }
    out += "\n";
  }
  return out;
}

std::string csv_model_summary(const njson& j) {
  std::string out = "layer,kind,output,trainable,buffers,cumulative\n";
  for (const auto& l : j["layers"]) {
    out += l["name"].get<std::string>() + "," + l["kind"].get<std::string>() + "," +
           l["output"].get<std::string>() + "," + num_cell(l["trainable"]) + "," +
           num_cell(l["buffers"]) + "," + num_cell(l["cumulative"]) + "\n";
  }
  out += "total,,," + num_cell(j["trainable_params"]) + "," + num_cell(j["buffer_params"]) + "," +
         num_cell(j["trainable_params"]) + "\n";
  return out;
}

std::string csv_sweep(const njson& j) {
  std::string out = "temperature,alpha,val_loss,val_accuracy,best_epoch,seconds\n";
  for (const auto& p : j["points"]) {
    out += num_cell(p["temperature"]) + "," + num_cell(p["alpha"]) + "," + num_cell(p["val_loss"]) +
           "," + num_cell(p["val_accuracy"]) + "," + num_cell(p["best_epoch"]) + "," +
           num_cell(p["seconds"]) + "\n";
  }
  return out;
}

std::string pad(const std::string& s, size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

// Generic aligned table: rows of cells, first row is the header.
std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<size_t> widths;
  for (const auto& row : rows) {
    if (widths.size() < row.size()) widths.resize(row.size(), 0);
    for (size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
  }
  std::string out;
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      out += i + 1 < row.size() ? pad(row[i], widths[i] + 2) : row[i];
    }
    out += "\n";
  }
  return out;
}

std::vector<std::vector<std::string>> csv_to_rows(const std::string& csv) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& line : split(csv, '\n')) {
    if (line.empty()) continue;
    std::vector<std::string> row;
    for (const auto& cell : split(line, ',')) row.push_back(cell);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string fixed3(double v) { return format_double(v, 3); }

}  // namespace

std::string report_json_to_csv(const std::string& report_json) {
  njson j = parse_report(report_json);
  std::string kind = j["kind"];
  if (kind == "dataset_stats") return csv_dataset_stats(j);
  if (kind == "train_report" || kind == "distill_report") return csv_train(j);
  if (kind == "eval_report") return csv_eval(j);
  if (kind == "bench_report") return csv_bench(j);
  if (kind == "compare_report") return csv_compare(j);
  if (kind == "sweep_report") return csv_sweep(j);
  if (kind == "model_summary") return csv_model_summary(j);
  fail(ErrorKind::InvalidArgument, "unknown report kind '" + kind + "'");
}

std::string report_json_to_text(const std::string& report_json) {
  njson j = parse_report(report_json);
  std::string kind = j["kind"];
  std::string head;
  if (kind == "dataset_stats") {
    head = "dataset: " + j["source"].get<std::string>() + "\n";
  } else if (kind == "train_report" || kind == "distill_report") {
    head = (kind == "train_report" ? std::string("trained ") : std::string("distilled ")) +
           j["model"].get<std::string>();
    if (j.contains("teacher")) head += " from " + j["teacher"].get<std::string>();
    head += " on " + j["dataset"].get<std::string>() + "\n";
    head += "best epoch " + num_cell(j["best_epoch"]) + ": val_loss " +
            fixed3(j["best_val_loss"]) + ", val_accuracy " + fixed3(j["best_val_accuracy"]) + "\n";
  } else if (kind == "eval_report") {
    head = "eval " + j["model"].get<std::string>() + " on " + j["split"].get<std::string>() +
           ": loss " + fixed3(j["loss"]) + ", accuracy " + fixed3(j["accuracy"]) + " over " +
           num_cell(j["samples"]) + " samples\n";
  } else if (kind == "bench_report") {
    head = "bench " + j["model"].get<std::string>() + "\n";
  } else if (kind == "compare_report") {
    head = "baseline: " + j["baseline"].get<std::string>() + "\n";
  } else if (kind == "sweep_report") {
    head = "sweep " + j["student"].get<std::string>() + " from " + j["teacher"].get<std::string>() +
           "; best T=" + num_cell(j["best"]["temperature"]) + " alpha=" +
           num_cell(j["best"]["alpha"]) + " val_accuracy=" + fixed3(j["best"]["val_accuracy"]) + "\n";
  } else if (kind == "model_summary") {
    head = j["model"].get<std::string>() + " (input " + j["input"].get<std::string>() + ")\n";
  }
  std::string tail;
  if (kind == "model_summary") {
    tail = "trainable parameters: " + num_cell(j["trainable_params"]) + " (" +
           format_double(j["size_mb"], 2) + " MB, " + format_double(j["size_mib"], 2) + " MiB)\n";
    if (j.contains("reference_params")) {
      if (j["match"].get<bool>()) {
        tail += "matches the published total " + num_cell(j["reference_params"]) + "\n";
      } else {
        tail += "published total " + num_cell(j["reference_params"]) + ": delta " +
                num_cell(j["delta"]) + " (" + format_double(j["delta_pct"], 3) + "%)\n";
      }
    }
  }
  return head + render_table(csv_to_rows(report_json_to_csv(report_json))) + tail;
}

}  // namespace kdf
