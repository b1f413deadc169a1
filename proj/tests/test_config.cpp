// SPDX-License-Identifier: Apache-2.0
#include <string>
#include <vector>

#include "core/common.hpp"
#include "core/config.hpp"
#include "core/distill.hpp"
#include "core/model.hpp"
#include "core/train.hpp"
#include "doctest.h"

using namespace kdf;

namespace {

template <class Fn>
void expect_error(ErrorKind kind, const std::string& fragment, Fn fn) {
  try {
    fn();
    FAIL_CHECK("expected an error containing '" << fragment << "', none thrown");
  } catch (const Error& e) {
    CHECK(e.kind() == kind);
    CHECK(std::string(e.what()).find(fragment) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("config parses key = value lines, comments and blanks") {
  Config cfg = Config::parse("# comment\n\n  lr = 0.01  \nname=teacher\r\nepochs = 12\n");
  CHECK(cfg.get_double("lr", 0.0) == doctest::Approx(0.01));
  CHECK(cfg.get_string("name", "") == "teacher");
  CHECK(cfg.get_int("epochs", 0) == 12);
  CHECK(cfg.has("lr"));
  CHECK_FALSE(cfg.has("batch_size"));
}

TEST_CASE("config rejects malformed lines with the line number") {
  expect_error(ErrorKind::Format, "line 2", [] { Config::parse("a = 1\nnonsense\n"); });
  expect_error(ErrorKind::Format, "empty key", [] { Config::parse("= 3\n"); });
}

TEST_CASE("config load_file reports missing paths as io errors") {
  expect_error(ErrorKind::Io, "cannot open config file", [] { Config::load_file("/nonexistent/x.conf"); });
}

TEST_CASE("typed getters fall back when absent and reject junk") {
  Config cfg = Config::parse("i = 5\nf = 2.5\nb = yes\nlist = 1, 2,3\ndlist = 0.1,0.2\nbad = zz\n");
  CHECK(cfg.get_int("i", -1) == 5);
  CHECK(cfg.get_int("missing", -1) == -1);
  CHECK(cfg.get_double("f", 0.0) == doctest::Approx(2.5));
  CHECK(cfg.get_bool("b", false));
  CHECK(cfg.get_bool("missing", true));
  CHECK(cfg.get_int_list("list", {}) == std::vector<int64_t>{1, 2, 3});
  CHECK(cfg.get_double_list("dlist", {}) == std::vector<double>{0.1, 0.2});
  CHECK(cfg.get_int_list("missing", {7}) == std::vector<int64_t>{7});
  expect_error(ErrorKind::InvalidArgument, "expected integer", [&] { cfg.get_int("bad", 0); });
  expect_error(ErrorKind::InvalidArgument, "expected number", [&] { cfg.get_double("bad", 0.0); });
  expect_error(ErrorKind::InvalidArgument, "expected boolean", [&] { cfg.get_bool("bad", false); });
  expect_error(ErrorKind::InvalidArgument, "expected integer list", [&] { cfg.get_int_list("bad", {}); });
}

TEST_CASE("set overwrites in place and render is canonical") {
  Config cfg;
  cfg.set("zeta", "1");       // unknown key
  cfg.set("epochs", "9");     // known key, later in insertion order
  cfg.set("lr", "0.5");       // known key that renders before epochs
  cfg.set("epochs", "10");    // overwrite
  std::string text = cfg.render();
  // Known keys come first in schema order, unknown keys after, alphabetically.
  size_t lr_pos = text.find("lr = 0.5");
  size_t ep_pos = text.find("epochs = 10");
  size_t z_pos = text.find("zeta = 1");
  REQUIRE(lr_pos != std::string::npos);
  REQUIRE(ep_pos != std::string::npos);
  REQUIRE(z_pos != std::string::npos);
  CHECK(ep_pos < lr_pos);  // schema lists epochs before lr
  CHECK(lr_pos < z_pos);
  CHECK(cfg.unknown_keys() == std::vector<std::string>{"zeta"});
  // Rendered text parses back to the same entries.
  Config back = Config::parse(text);
  CHECK(back.get_int("epochs", 0) == 10);
  CHECK(back.get_string("zeta", "") == "1");
}

TEST_CASE("every schema default parses as its own type") {
  Config cfg;
  for (const auto& doc : config_schema()) cfg.set(doc.key, doc.default_value);
  CHECK(ModelConfig::from_config(cfg).name == "custom");
  TrainConfig tc = TrainConfig::from_config(cfg);
  tc.validate();
  CHECK(tc.batch_size == 16);
  CHECK(tc.epochs == 80);
  CHECK(tc.lr == doctest::Approx(1e-3));
  DistillConfig dc = DistillConfig::from_config(cfg);
  CHECK(dc.temperature == doctest::Approx(3.0));
  CHECK(dc.alpha == doctest::Approx(0.2));
  CHECK(dc.effective_hard_weight() == doctest::Approx(0.8));
}

TEST_CASE("model presets halve every width except the class count") {
  ModelConfig t = ModelConfig::preset("teacher");
  CHECK(t.conv_channels == std::vector<int64_t>{64, 128, 256});
  CHECK(t.residual_channels == std::vector<int64_t>{256, 512, 1024});
  CHECK(t.head_widths == std::vector<int64_t>{1024, 512, 256, 7});
  CHECK(t.final_channels() == 2048);

  ModelConfig a = ModelConfig::preset("student_a");
  CHECK(a.conv_channels == std::vector<int64_t>{32, 64, 128});
  CHECK(a.residual_channels == std::vector<int64_t>{128, 256, 512});
  CHECK(a.head_widths == std::vector<int64_t>{512, 256, 128, 7});

  ModelConfig c = ModelConfig::preset("student_c");
  CHECK(c.conv_channels == std::vector<int64_t>{8, 16, 32});
  CHECK(c.se_channels == 32);
  CHECK(c.head_widths == std::vector<int64_t>{128, 64, 32, 7});

  expect_error(ErrorKind::InvalidArgument, "unknown model preset",
               [] { ModelConfig::preset("student_d"); });
}

TEST_CASE("from_config starts at the preset and applies overrides") {
  Config cfg = Config::parse("name = student_b\ninput_height = 48\ninput_width = 48\n");
  ModelConfig m = ModelConfig::from_config(cfg);
  CHECK(m.name == "student_b");
  CHECK(m.input_height == 48);
  CHECK(m.conv_channels == std::vector<int64_t>{16, 32, 64});
}

TEST_CASE("model validation reports every problem at once") {
  Config cfg = Config::parse(
      "name = broken\nconv_channels = 8,16\nse_channels = 99\nse_reduction = 7\n"
      "residual_channels = 16\nhead_widths = 16,5\nnum_classes = 7\n"
      "input_height = 2\ninput_width = 64\n");
  try {
    ModelConfig::from_config(cfg);
    FAIL_CHECK("expected validation to throw");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(e.kind() == ErrorKind::InvalidArgument);
    CHECK(msg.find("se_channels 99 must equal the last conv width 16") != std::string::npos);
    CHECK(msg.find("must divide") != std::string::npos);
    CHECK(msg.find("head_widths must end in num_classes 7") != std::string::npos);
    CHECK(msg.find("too small") != std::string::npos);
  }
}

TEST_CASE("apply_to then from_config round-trips a model config") {
  ModelConfig m = ModelConfig::preset("student_a");
  m.input_height = 48;
  m.input_width = 48;
  Config cfg;
  m.apply_to(cfg);
  ModelConfig back = ModelConfig::from_config(cfg);
  CHECK(back.name == m.name);
  CHECK(back.input_height == 48);
  CHECK(back.conv_channels == m.conv_channels);
  CHECK(back.residual_channels == m.residual_channels);
  CHECK(back.head_widths == m.head_widths);
  CHECK(back.se_reduction == m.se_reduction);
  CHECK(back.dropout_rate == doctest::Approx(m.dropout_rate));
}

TEST_CASE("train config validation lists each violated bound") {
  TrainConfig tc;
  tc.batch_size = 0;
  tc.lr = 0.0;
  tc.momentum = 1.0;
  tc.plateau_metric = "loss";
  tc.flip_probability = 1.5;
  tc.class_weighting = "sqrt";
  try {
    tc.validate();
    FAIL_CHECK("expected validation to throw");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("batch_size must be >= 1") != std::string::npos);
    CHECK(msg.find("lr must be > 0") != std::string::npos);
    CHECK(msg.find("momentum must be in [0, 1)") != std::string::npos);
    CHECK(msg.find("plateau_metric must be val_loss or val_accuracy") != std::string::npos);
    CHECK(msg.find("flip_probability must be in [0, 1]") != std::string::npos);
    CHECK(msg.find("class_weighting must be inverse or uniform") != std::string::npos);
  }
}

TEST_CASE("distillation weights validate and default the hard term to 1-alpha") {
  DistillConfig dc;
  dc.alpha = 0.15;
  CHECK(dc.effective_hard_weight() == doctest::Approx(0.85));
  dc.hard_weight = 1.0;  // explicit override wins
  CHECK(dc.effective_hard_weight() == doctest::Approx(1.0));

  expect_error(ErrorKind::InvalidArgument, "temperature must be positive", [] {
    DistillConfig bad;
    bad.temperature = 0.0;
    bad.validate();
  });
  expect_error(ErrorKind::InvalidArgument, "alpha must be in [0, 1]", [] {
    DistillConfig bad;
    bad.alpha = 1.5;
    bad.validate();
  });
  Config cfg = Config::parse("temperature = 4\nalpha = 0.1\nhard_weight = 0.9\n");
  DistillConfig parsed = DistillConfig::from_config(cfg);
  CHECK(parsed.temperature == doctest::Approx(4.0));
  CHECK(parsed.effective_hard_weight() == doctest::Approx(0.9));
}
