// SPDX-License-Identifier: Apache-2.0
#include "core/model.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "core/common.hpp"
#include "json.hpp"

namespace kdf {

namespace {

int64_t halve_width(int64_t w) { return std::max<int64_t>(1, w / 2); }

std::string join_problems(const std::vector<std::string>& problems) {
  std::string out = "invalid model configuration: ";
  for (size_t i = 0; i < problems.size(); ++i) {
    if (i) out += "; ";
    out += problems[i];
  }
  return out;
}

}  // namespace

// ------------------------------------------------------------- ModelConfig

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig teacher;  // defaults above are the teacher
  teacher.name = "teacher";
  if (name == "teacher") return teacher;
  ModelConfig a = teacher.halved("student_a");
  if (name == "student_a") return a;
  ModelConfig b = a.halved("student_b");
  if (name == "student_b") return b;
  if (name == "student_c") return b.halved("student_c");
  fail(ErrorKind::InvalidArgument,
       "unknown model preset '" + name + "' (expected teacher, student_a, student_b or student_c)");
}

ModelConfig ModelConfig::halved(const std::string& child_name) const {
  ModelConfig c = *this;
  c.name = child_name;
  for (auto& w : c.conv_channels) w = halve_width(w);
  c.se_channels = halve_width(se_channels);
  for (auto& w : c.residual_channels) w = halve_width(w);
  for (size_t i = 0; i + 1 < c.head_widths.size(); ++i) c.head_widths[i] = halve_width(c.head_widths[i]);
  return c;
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (name.empty()) problems.push_back("name must not be empty");
  if (input_channels < 1) problems.push_back("input_channels must be positive");
  int64_t min_side = (int64_t)1 << conv_channels.size();
  if (input_height < min_side || input_width < min_side) {
    problems.push_back("input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                       " is too small for " + std::to_string(conv_channels.size()) + " pooling stages");
  }
  if (conv_channels.empty()) problems.push_back("conv_channels must not be empty");
  for (int64_t c : conv_channels)
    if (c < 1) problems.push_back("conv_channels entries must be positive");
  if (!conv_channels.empty() && se_channels != conv_channels.back()) {
    problems.push_back("se_channels " + std::to_string(se_channels) + " must equal the last conv width " +
                       std::to_string(conv_channels.back()));
  }
  if (se_reduction < 1 || (se_channels > 0 && se_channels % se_reduction != 0)) {
    problems.push_back("se_reduction " + std::to_string(se_reduction) + " must divide se_channels " +
                       std::to_string(se_channels));
  }
  if (residual_channels.empty()) problems.push_back("residual_channels must not be empty");
  for (int64_t c : residual_channels)
    if (c < 1) problems.push_back("residual_channels entries must be positive");
  if (!residual_channels.empty() && !conv_channels.empty() &&
      residual_channels.front() != conv_channels.back()) {
    problems.push_back("residual_channels must start at the last conv width " +
                       std::to_string(conv_channels.back()) + ", got " +
                       std::to_string(residual_channels.front()));
  }
  if (head_widths.empty()) problems.push_back("head_widths must not be empty");
  for (int64_t w : head_widths)
    if (w < 1) problems.push_back("head_widths entries must be positive");
  if (num_classes < 2) problems.push_back("num_classes must be at least 2");
  if (!head_widths.empty() && head_widths.back() != num_classes) {
    problems.push_back("head_widths must end in num_classes " + std::to_string(num_classes) + ", got " +
                       std::to_string(head_widths.back()));
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) problems.push_back("dropout_rate must be in [0, 1)");
  if (!(bn_epsilon > 0.0)) problems.push_back("bn_epsilon must be positive");
  if (!(bn_momentum > 0.0) || bn_momentum > 1.0) problems.push_back("bn_momentum must be in (0, 1]");
  if (!problems.empty()) fail(ErrorKind::InvalidArgument, join_problems(problems));
}

ModelConfig ModelConfig::from_config(const Config& cfg) {
  std::string name = cfg.get_string("name", "custom");
  ModelConfig base;
  if (name == "teacher" || name == "student_a" || name == "student_b" || name == "student_c") {
    base = preset(name);
  } else {
    base.name = name;
  }
  ModelConfig m = base;
  m.input_channels = cfg.get_int("input_channels", base.input_channels);
  m.input_height = cfg.get_int("input_height", base.input_height);
  m.input_width = cfg.get_int("input_width", base.input_width);
  m.conv_channels = cfg.get_int_list("conv_channels", base.conv_channels);
  m.se_channels = cfg.get_int("se_channels", m.conv_channels.empty() ? base.se_channels : m.conv_channels.back());
  m.se_reduction = cfg.get_int("se_reduction", base.se_reduction);
  m.se_bias = cfg.get_bool("se_bias", base.se_bias);
  m.residual_channels = cfg.get_int_list("residual_channels", base.residual_channels);
  m.head_widths = cfg.get_int_list("head_widths", base.head_widths);
  m.dropout_rate = cfg.get_double("dropout_rate", base.dropout_rate);
  m.num_classes = cfg.get_int("num_classes", base.num_classes);
  m.bn_epsilon = cfg.get_double("bn_epsilon", base.bn_epsilon);
  m.bn_momentum = cfg.get_double("bn_momentum", base.bn_momentum);
  m.validate();
  return m;
}

void ModelConfig::apply_to(Config& cfg) const {
  cfg.set("name", name);
  cfg.set_int("input_channels", input_channels);
  cfg.set_int("input_height", input_height);
  cfg.set_int("input_width", input_width);
  cfg.set_int_list("conv_channels", conv_channels);
  cfg.set_int("se_channels", se_channels);
  cfg.set_int("se_reduction", se_reduction);
  cfg.set_bool("se_bias", se_bias);
  cfg.set_int_list("residual_channels", residual_channels);
  cfg.set_int_list("head_widths", head_widths);
  cfg.set_double("dropout_rate", dropout_rate);
  cfg.set_int("num_classes", num_classes);
  cfg.set_double("bn_epsilon", bn_epsilon);
  cfg.set_double("bn_momentum", bn_momentum);
}

// ---------------------------------------------------------------- describe

namespace {

void add_bn(LayerSummary& s, int64_t c) {
  s.trainable += 2 * c;
  s.buffers += 2 * c;
}

}  // namespace

std::vector<LayerSummary> describe(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<LayerSummary> out;
  int64_t in_c = cfg.input_channels;
  int64_t h = cfg.input_height, w = cfg.input_width;
  auto chw = [](int64_t c, int64_t hh, int64_t ww) {
    return std::to_string(c) + "x" + std::to_string(hh) + "x" + std::to_string(ww);
  };
  for (size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    int64_t out_c = cfg.conv_channels[i];
    LayerSummary s;
    s.name = "stage" + std::to_string(i + 1);
    s.kind = "conv_block";
    s.detail = "3x3 conv " + std::to_string(in_c) + "->" + std::to_string(out_c) + ", bn, relu, 2x2 pool";
    h /= 2;
    w /= 2;
    s.output = chw(out_c, h, w);
    s.trainable = out_c * in_c * 9 + out_c;
    add_bn(s, out_c);
    out.push_back(std::move(s));
    in_c = out_c;
  }
  {
    int64_t c = cfg.se_channels;
    int64_t hidden = c / cfg.se_reduction;
    LayerSummary s;
    s.name = "se";
    s.kind = "se_block";
    s.detail = "channel gate " + std::to_string(c) + "->" + std::to_string(hidden) + "->" + std::to_string(c);
    s.output = chw(c, h, w);
    s.trainable = 2 * hidden * c + (cfg.se_bias ? hidden + c : 0);
    out.push_back(std::move(s));
  }
  for (size_t i = 0; i < cfg.residual_channels.size(); ++i) {
    int64_t rin = cfg.residual_channels[i];
    int64_t rout = i + 1 < cfg.residual_channels.size() ? cfg.residual_channels[i + 1]
                                                        : cfg.residual_channels.back() * 2;
    LayerSummary s;
    s.name = "res" + std::to_string(i + 1);
    s.kind = "residual_block";
    s.detail = "stride-2 residual " + std::to_string(rin) + "->" + std::to_string(rout);
    h = (h - 1) / 2 + 1;
    w = (w - 1) / 2 + 1;
    s.output = chw(rout, h, w);
    s.trainable = rout * rin * 9 + rout;  // conv1
    add_bn(s, rout);
    s.trainable += rout * rout * 9 + rout;  // conv2
    add_bn(s, rout);
    s.trainable += rout * rin + rout;  // 1x1 projection
    add_bn(s, rout);
    out.push_back(std::move(s));
  }
  {
    LayerSummary s;
    s.name = "pool";
    s.kind = "avg_pool";
    s.detail = "adaptive average pool to 1x1";
    s.output = std::to_string(cfg.final_channels());
    out.push_back(std::move(s));
  }
  int64_t in_f = cfg.final_channels();
  for (size_t i = 0; i < cfg.head_widths.size(); ++i) {
    int64_t out_f = cfg.head_widths[i];
    LayerSummary s;
    s.name = "head" + std::to_string(i + 1);
    s.kind = "linear";
    s.detail = std::to_string(in_f) + "->" + std::to_string(out_f) +
               (i + 1 < cfg.head_widths.size() ? ", relu, dropout" : " (logits)");
    s.output = std::to_string(out_f);
    s.trainable = out_f * in_f + out_f;
    out.push_back(std::move(s));
    in_f = out_f;
  }
  return out;
}

int64_t described_trainable(const ModelConfig& cfg) {
  int64_t n = 0;
  for (const auto& s : describe(cfg)) n += s.trainable;
  return n;
}

int64_t described_buffers(const ModelConfig& cfg) {
  int64_t n = 0;
  for (const auto& s : describe(cfg)) n += s.buffers;
  return n;
}

int64_t reference_total(const std::string& preset_name) {
  if (preset_name == "teacher") return 80238599;
  if (preset_name == "student_a") return 20069383;
  if (preset_name == "student_b") return 5022215;
  if (preset_name == "student_c") return 1259911;
  return 0;
}

std::string model_summary_json(const ModelConfig& cfg) {
  using njson = nlohmann::ordered_json;
  njson j;
  j["kind"] = "model_summary";
  j["model"] = cfg.name;
  j["input"] = std::to_string(cfg.input_channels) + "x" + std::to_string(cfg.input_height) + "x" +
               std::to_string(cfg.input_width);
  njson layers = njson::array();
  int64_t cumulative = 0;
  for (const LayerSummary& s : describe(cfg)) {
    cumulative += s.trainable;
    njson row;
    row["name"] = s.name;
    row["kind"] = s.kind;
    row["output"] = s.output;
    row["detail"] = s.detail;
    row["trainable"] = s.trainable;
    row["buffers"] = s.buffers;
    row["cumulative"] = cumulative;
    layers.push_back(std::move(row));
  }
  j["layers"] = std::move(layers);
  int64_t trainable = cumulative;
  int64_t buffers = described_buffers(cfg);
  j["trainable_params"] = trainable;
  j["buffer_params"] = buffers;
  j["size_bytes"] = trainable * 4;
  j["size_mb"] = (double)(trainable * 4) / 1e6;
  j["size_mib"] = (double)(trainable * 4) / (double)(1 << 20);
  int64_t ref = reference_total(cfg.name);
  if (ref > 0) {
    j["reference_params"] = ref;
    j["delta"] = trainable - ref;
    j["delta_pct"] = 100.0 * (double)(trainable - ref) / (double)ref;
    j["match"] = trainable == ref;
  }
  return j.dump(2) + "\n";
}

// -------------------------------------------------------------------- Model

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  auto rng = seeded_rng(seed, "init", 0);
  int64_t in_c = cfg_.input_channels;
  for (int64_t out_c : cfg_.conv_channels) {
    stages_.emplace_back(in_c, out_c, /*pool=*/true, (float)cfg_.bn_momentum, (float)cfg_.bn_epsilon, rng);
    in_c = out_c;
  }
  se_ = SEBlock(cfg_.se_channels, cfg_.se_reduction, cfg_.se_bias, rng);
  for (size_t i = 0; i < cfg_.residual_channels.size(); ++i) {
    int64_t rin = cfg_.residual_channels[i];
    int64_t rout = i + 1 < cfg_.residual_channels.size() ? cfg_.residual_channels[i + 1]
                                                         : cfg_.residual_channels.back() * 2;
    residual_.emplace_back(rin, rout, /*stride=*/2, (float)cfg_.bn_momentum, (float)cfg_.bn_epsilon, rng);
  }
  int64_t in_f = cfg_.final_channels();
  for (int64_t out_f : cfg_.head_widths) {
    head_.emplace_back(in_f, out_f, /*with_bias=*/true, rng);
    in_f = out_f;
  }
  collect_params();
}

void Model::collect_params() {
  params_.clear();
  for (size_t i = 0; i < stages_.size(); ++i) stages_[i].collect("stage" + std::to_string(i + 1), params_);
  se_.collect("se", params_);
  for (size_t i = 0; i < residual_.size(); ++i) residual_[i].collect("res" + std::to_string(i + 1), params_);
  for (size_t i = 0; i < head_.size(); ++i) head_[i].collect("head" + std::to_string(i + 1), params_);
}

Tensor Model::forward(const Tensor& x, bool training, std::mt19937_64* dropout_rng) {
  if (x.ndim() != 4 || x.dim(1) != cfg_.input_channels) {
    fail(ErrorKind::InvalidArgument, "forward: expected input (N," + std::to_string(cfg_.input_channels) +
                                         ",H,W), got " + shape_str(x.shape()));
  }
  bool drop = training && cfg_.dropout_rate > 0.0;
  if (drop && dropout_rng == nullptr) {
    fail(ErrorKind::InvalidArgument, "forward: training with dropout requires an rng");
  }
  Tensor y = x;
  for (auto& stage : stages_) y = stage.forward(y, training);
  y = se_.forward(y);
  for (auto& block : residual_) y = block.forward(y, training);
  y = adaptive_avg_pool2d(y, 1, 1);
  y = reshape(y, {y.dim(0), cfg_.final_channels()});
  for (size_t i = 0; i < head_.size(); ++i) {
    y = head_[i].forward(y);
    if (i + 1 < head_.size()) {
      y = relu(y);
      if (drop) y = dropout(y, cfg_.dropout_rate, true, *dropout_rng);
    }
  }
  return y;
}

Tensor Model::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  fail(ErrorKind::InvalidArgument, "unknown tensor '" + name + "' in model '" + cfg_.name + "'");
}

int64_t Model::trainable_count() const { return count_trainable(params_); }

int64_t Model::size_bytes() const { return trainable_count() * 4; }

// ------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'K', 'D', 'F', '1'};
constexpr uint32_t kCkptVersion = 1;

void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ofstream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::ifstream& f, const char* what) {
  uint32_t v = 0;
  if (!f.read(reinterpret_cast<char*>(&v), 4)) {
    fail(ErrorKind::Format, std::string("truncated checkpoint while reading ") + what);
  }
  return v;
}

uint64_t read_u64(std::ifstream& f, const char* what) {
  uint64_t v = 0;
  if (!f.read(reinterpret_cast<char*>(&v), 8)) {
    fail(ErrorKind::Format, std::string("truncated checkpoint while reading ") + what);
  }
  return v;
}

}  // namespace

void Model::save_checkpoint(const std::string& path, const Config& run_config) const {
  Config cfg = run_config;
  cfg_.apply_to(cfg);  // the stored config always matches the stored tensors
  std::string text = cfg.render();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot open checkpoint for writing: " + path);
  f.write(kMagic, 4);
  write_u32(f, kCkptVersion);
  write_u64(f, text.size());
  f.write(text.data(), (std::streamsize)text.size());
  write_u32(f, (uint32_t)params_.size());
  for (const auto& p : params_) {
    write_u32(f, (uint32_t)p.name.size());
    f.write(p.name.data(), (std::streamsize)p.name.size());
    const Shape& s = p.tensor.shape();
    write_u32(f, (uint32_t)s.size());
    for (int64_t d : s) write_u64(f, (uint64_t)d);
    uint64_t bytes = (uint64_t)p.tensor.numel() * 4;
    write_u64(f, bytes);
    f.write(reinterpret_cast<const char*>(p.tensor.data()), (std::streamsize)bytes);
  }
  if (!f) fail(ErrorKind::Io, "write failed for checkpoint: " + path);
}

Model Model::load_checkpoint(const std::string& path, Config* run_config_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Io, "cannot open checkpoint: " + path);
  char magic[4] = {};
  if (!f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    fail(ErrorKind::Format, "not a checkpoint file (bad magic): " + path);
  }
  uint32_t version = read_u32(f, "version");
  if (version != kCkptVersion) {
    fail(ErrorKind::Format, "unsupported checkpoint version " + std::to_string(version));
  }
  uint64_t text_len = read_u64(f, "config length");
  std::string text(text_len, '\0');
  if (!f.read(text.data(), (std::streamsize)text_len)) {
    fail(ErrorKind::Format, "truncated checkpoint while reading config text");
  }
  Config cfg = Config::parse(text);
  Model model(ModelConfig::from_config(cfg), cfg.get_uint("seed", 0));
  std::unordered_map<std::string, Tensor> by_name;
  for (const auto& p : model.params_) by_name.emplace(p.name, p.tensor);
  std::unordered_map<std::string, bool> filled;
  uint32_t count = read_u32(f, "tensor count");
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = read_u32(f, "tensor name length");
    std::string name(name_len, '\0');
    if (!f.read(name.data(), name_len)) fail(ErrorKind::Format, "truncated checkpoint while reading tensor name");
    uint32_t rank = read_u32(f, "tensor rank");
    Shape dims(rank);
    for (uint32_t d = 0; d < rank; ++d) dims[d] = (int64_t)read_u64(f, "tensor dimensions");
    uint64_t bytes = read_u64(f, "tensor payload size");
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      fail(ErrorKind::Format, "checkpoint tensor '" + name + "' is not part of model '" +
                                  model.cfg_.name + "'");
    }
    Tensor t = it->second;
    if (dims != t.shape()) {
      fail(ErrorKind::Format, "checkpoint tensor '" + name + "' has shape " + shape_str(dims) +
                                  ", model expects " + shape_str(t.shape()));
    }
    if (bytes != (uint64_t)t.numel() * 4) {
      fail(ErrorKind::Format, "checkpoint tensor '" + name + "' payload size disagrees with its shape");
    }
    if (!f.read(reinterpret_cast<char*>(t.data()), (std::streamsize)bytes)) {
      fail(ErrorKind::Format, "truncated checkpoint payload for tensor '" + name + "'");
    }
    filled[name] = true;
  }
  for (const auto& p : model.params_) {
    if (!filled.count(p.name)) {
      fail(ErrorKind::Format, "checkpoint is missing tensor '" + p.name + "'");
    }
  }
  if (run_config_out) *run_config_out = cfg;
  return model;
}

}  // namespace kdf
