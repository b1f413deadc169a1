// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "core/common.hpp"
#include "core/data.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "json.hpp"

using namespace kdf;
namespace fs = std::filesystem;

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

TEST_CASE("emotion names and indices round-trip") {
  CHECK(std::string(emotion_name(0)) == "Angry");
  CHECK(std::string(emotion_name(3)) == "Happy");
  CHECK(std::string(emotion_name(6)) == "Neutral");
  for (int64_t i = 0; i < kNumEmotions; ++i) CHECK(emotion_index(emotion_name(i)) == i);
  CHECK(emotion_index("happy") == 3);
  CHECK(emotion_index("SURPRISE") == 5);
  CHECK(emotion_index("4") == 4);
  CHECK(emotion_index("boredom") == -1);
  CHECK(emotion_index("9") == -1);
  CHECK_THROWS_AS(emotion_name(7), Error);
}

TEST_CASE("csv rows land in the split their usage names") {
  fixtures::TempDir tmp;
  std::vector<fixtures::CsvRow> rows = {
      fixtures::flat_row(0, 4, 255, "Training"),   fixtures::flat_row(1, 4, 128, "Training"),
      fixtures::flat_row(2, 4, 0, "PublicTest"),   fixtures::flat_row(3, 4, 10, "PrivateTest"),
      fixtures::flat_row(4, 4, 20, "privatetest"),  // usage is case-insensitive
  };
  std::string path = tmp.file("tiny.csv");
  fixtures::write_fer_csv(path, rows);

  Dataset ds = read_fer_csv(path, 4, 4);
  CHECK(ds.train.size() == 2);
  CHECK(ds.val.size() == 1);
  CHECK(ds.test.size() == 2);
  CHECK(ds.train[0].label == 0);
  CHECK(ds.train[0].channels == 1);
  CHECK(ds.train[0].height == 4);
  CHECK(ds.train[0].pixels[0] == doctest::Approx(1.0));        // 255 -> 1
  CHECK(ds.train[1].pixels[0] == doctest::Approx(128.0 / 255.0));
  CHECK(ds.val[0].label == 2);
  CHECK(ds.test[1].label == 4);
}

TEST_CASE("csv ingestion reports malformed rows with their line numbers") {
  fixtures::TempDir tmp;
  auto write_and_load = [&](const std::string& body) {
    std::string path = tmp.file("bad.csv");
    std::ofstream(path) << body;
    return [path] { read_fer_csv(path, 4, 4); };
  };
  std::string good = "3," + std::string("7 ") + "7 7 7,Training\n";  // 2x2 image

  expect_error(ErrorKind::Format, "line 2: expected 3 fields",
               write_and_load(good + "1,2 2 2 2\n"));
  expect_error(ErrorKind::Format, "line 1: emotion 'x' is not a number",
               write_and_load("x,1 1 1 1,Training\n"));
  expect_error(ErrorKind::Format, "line 1: emotion 9 is outside [0, 7)",
               write_and_load("9,1 1 1 1,Training\n"));
  expect_error(ErrorKind::Format, "line 3: pixel value 256 exceeds 255",
               write_and_load(good + good + "1,256 1 1 1,Training\n"));
  expect_error(ErrorKind::Format, "pixel value '1.5' is not a number",
               write_and_load("1,1.5 1 1 1,Training\n"));
  expect_error(ErrorKind::Format, "pixel count 3 is not a perfect square",
               write_and_load("1,1 1 1,Training\n"));
  expect_error(ErrorKind::Format, "unknown usage 'Sometimes'",
               write_and_load("1,1 1 1 1,Sometimes\n"));
  expect_error(ErrorKind::Format, "no samples found", write_and_load("emotion,pixels,Usage\n"));
  expect_error(ErrorKind::Io, "cannot open dataset", [&] { read_fer_csv(tmp.file("none.csv"), 4, 4); });

  // Header, blank lines and CRLF endings are tolerated.
  std::string path = tmp.file("ok.csv");
  std::ofstream(path) << "emotion,pixels,Usage\r\n\r\n" << "2,5 5 5 5,Training\r\n";
  Dataset ds = read_fer_csv(path, 2, 2);
  CHECK(ds.train.size() == 1);
  CHECK(ds.train[0].label == 2);
}

TEST_CASE("bilinear resize uses half-pixel centers") {
  // f(y, x) = 2y + x is reproduced exactly by bilinear interpolation.
  std::vector<float> src = {0, 1, 2, 3};
  std::vector<float> up = resize_bilinear(src.data(), 1, 2, 2, 4, 4);
  std::vector<float> fy = {0.0f, 0.25f, 0.75f, 1.0f};  // clamped half-pixel grid
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x)
      CHECK(up[(size_t)(y * 4 + x)] == doctest::Approx(2.0 * fy[(size_t)y] + fy[(size_t)x]));

  // Downscale averages neighbors symmetrically: rows 0..3 -> centers 0.5, 2.5.
  std::vector<float> rows = {0, 0, 1, 1, 2, 2, 3, 3};  // 4x2, f(y, x) = y
  std::vector<float> down = resize_bilinear(rows.data(), 1, 4, 2, 2, 2);
  CHECK(down[0] == doctest::Approx(0.5));
  CHECK(down[2] == doctest::Approx(2.5));

  // Identity when sizes match, channel planes handled independently.
  std::vector<float> two_planes = {1, 2, 3, 4, 10, 20, 30, 40};
  std::vector<float> same = resize_bilinear(two_planes.data(), 2, 2, 2, 2, 2);
  CHECK(same == two_planes);

  CHECK_THROWS_AS(resize_bilinear(src.data(), 1, 2, 2, 0, 4), Error);
}

TEST_CASE("folder corpus maps directories to splits and classes") {
  fixtures::TempDir tmp;
  fixtures::write_folder_corpus(tmp.path, {{"train/Angry", 3},
                                           {"train/Happy", 4},
                                           {"train/5", 2},  // numeric class directory
                                           {"val/Angry", 1},
                                           {"test/Happy", 2}});
  Dataset ds = read_image_folder(tmp.str(), 12, 12, 0.1, 0);
  CHECK(ds.train.size() == 9);
  CHECK(ds.val.size() == 1);  // explicit val/ wins over the holdout
  CHECK(ds.test.size() == 2);

  DatasetStats st = dataset_stats(ds);
  REQUIRE(st.splits.size() == 3);
  CHECK(st.splits[0].per_class[0] == 3);  // Angry
  CHECK(st.splits[0].per_class[3] == 4);  // Happy
  CHECK(st.splits[0].per_class[5] == 2);  // Surprise via "5"
  CHECK(ds.train[0].channels == 1);       // grayscale png
  CHECK(ds.train[0].height == 12);
}

TEST_CASE("missing val directory triggers a seeded hold-out") {
  fixtures::TempDir tmp;
  fixtures::write_folder_corpus(tmp.path, {{"train/Angry", 8}, {"train/Happy", 8}});

  Dataset a = read_image_folder(tmp.str(), 12, 12, 0.25, 42);
  CHECK(a.train.size() == 12);
  CHECK(a.val.size() == 4);

  // Same seed, same membership; measured by per-class counts and pixels.
  Dataset b = read_image_folder(tmp.str(), 12, 12, 0.25, 42);
  REQUIRE(b.val.size() == a.val.size());
  for (size_t i = 0; i < a.val.size(); ++i) {
    CHECK(a.val[i].label == b.val[i].label);
    CHECK(a.val[i].pixels == b.val[i].pixels);
  }

  Dataset c = read_image_folder(tmp.str(), 12, 12, 0.0, 42);
  CHECK(c.train.size() == 16);
  CHECK(c.val.empty());
}

TEST_CASE("folder corpus failure modes") {
  fixtures::TempDir tmp;
  expect_error(ErrorKind::Io, "dataset folder not found",
               [&] { read_image_folder(tmp.file("nope"), 8, 8, 0.0, 0); });

  fs::create_directories(tmp.path / "empty_root" / "val");
  expect_error(ErrorKind::Format, "needs a train/ subdirectory",
               [&] { read_image_folder(tmp.file("empty_root"), 8, 8, 0.0, 0); });

  fixtures::write_folder_corpus(tmp.path, {{"train/Boredom", 2}});
  expect_error(ErrorKind::Format, "unknown class directory 'Boredom'",
               [&] { read_image_folder(tmp.str(), 8, 8, 0.0, 0); });

  expect_error(ErrorKind::InvalidArgument, "val_fraction",
               [&] { read_image_folder(tmp.str(), 8, 8, 1.0, 0); });
}

TEST_CASE("load_dataset dispatches on the path kind") {
  fixtures::TempDir tmp;
  fixtures::write_fer_csv(tmp.file("d.csv"), {fixtures::flat_row(0, 4, 9, "Training")});
  CHECK(load_dataset(tmp.file("d.csv"), 4, 4, 0.0, 0).train.size() == 1);

  fixtures::write_folder_corpus(tmp.path / "corpus", {{"train/Sad", 2}});
  CHECK(load_dataset((tmp.path / "corpus").string(), 8, 8, 0.0, 0).train.size() == 2);

  std::ofstream(tmp.file("d.txt")) << "not a dataset";
  expect_error(ErrorKind::InvalidArgument, "expected .csv",
               [&] { load_dataset(tmp.file("d.txt"), 4, 4, 0.0, 0); });
  expect_error(ErrorKind::Io, "does not exist", [&] { load_dataset(tmp.file("gone"), 4, 4, 0.0, 0); });
}

TEST_CASE("stats render to json and csv") {
  fixtures::TempDir tmp;
  fixtures::write_fer_csv(tmp.file("d.csv"), {
                                                 fixtures::flat_row(3, 4, 1, "Training"),
                                                 fixtures::flat_row(3, 4, 2, "Training"),
                                                 fixtures::flat_row(0, 4, 3, "PublicTest"),
                                             });
  Dataset ds = read_fer_csv(tmp.file("d.csv"), 4, 4);
  DatasetStats st = dataset_stats(ds);

  auto j = nlohmann::json::parse(stats_to_json(st));
  CHECK(j["kind"] == "dataset_stats");
  CHECK(j["num_classes"] == 7);
  REQUIRE(j["splits"].size() == 2);
  CHECK(j["splits"][0]["name"] == "train");
  CHECK(j["splits"][0]["total"] == 2);
  CHECK(j["splits"][0]["per_class"]["Happy"] == 2);
  CHECK(j["splits"][1]["per_class"]["Angry"] == 1);

  std::string csv = stats_to_csv(st);
  CHECK(csv.find("split,total,Angry,Disgust,Fear,Happy,Sad,Surprise,Neutral") == 0);
  CHECK(csv.find("train,2,0,0,0,2,0,0,0") != std::string::npos);
}

TEST_CASE("inverse-frequency weights match the published class distribution") {
  // Training-split class counts of the standard 35,887-row corpus.
  std::vector<int64_t> counts = {3995, 436, 4097, 7215, 4830, 3171, 4965};
  std::vector<double> w = class_weights(counts);
  CHECK(w[3] == doctest::Approx(28709.0 / (7.0 * 7215.0)).epsilon(1e-9));
  CHECK(w[3] == doctest::Approx(0.5684).epsilon(1e-3));  // Happy is downweighted
  CHECK(w[1] == doctest::Approx(9.4062).epsilon(1e-3));  // Disgust is upweighted
  double mean = 0.0;
  for (double v : w) mean += v / 7.0;
  CHECK(mean > 0.9);  // weights hover around 1

  expect_error(ErrorKind::InvalidArgument, "class 'Disgust' has no samples",
               [] { class_weights({5, 0, 5, 5, 5, 5, 5}); });
  CHECK_THROWS_AS(class_weights({}), Error);
}

TEST_CASE("batches stack, replicate channels and mirror deterministically") {
  std::vector<Sample> samples(2);
  samples[0].pixels = {1, 2, 3, 4};  // 2x2, single channel
  samples[0].channels = 1;
  samples[0].height = 2;
  samples[0].width = 2;
  samples[0].label = 4;
  samples[1] = samples[0];
  samples[1].pixels = {5, 6, 7, 8};
  samples[1].label = 6;

  Batch plain = make_batch(samples, {1, 0}, 3, 0.0, nullptr);
  CHECK(plain.images.shape() == Shape{2, 3, 2, 2});
  CHECK(plain.labels == std::vector<int64_t>{6, 4});
  // Single-channel pixels are replicated across all three planes.
  for (int64_t c = 0; c < 3; ++c) {
    CHECK(plain.images.values()[(size_t)(c * 4)] == 5.0f);
    CHECK(plain.images.values()[(size_t)(12 + c * 4)] == 1.0f);
  }

  auto rng = seeded_rng(0, "flip", 0);
  Batch flipped = make_batch(samples, {0}, 1, 1.0, &rng);
  CHECK(flipped.images.values() == std::vector<float>{2, 1, 4, 3});

  // Mirroring twice restores the original pixels.
  Sample round = samples[0];
  round.pixels = flipped.images.values();
  auto rng2 = seeded_rng(0, "flip", 1);
  Batch twice = make_batch({round}, {0}, 1, 1.0, &rng2);
  CHECK(twice.images.values() == samples[0].pixels);

  CHECK_THROWS_AS(make_batch(samples, {}, 1, 0.0, nullptr), Error);
  CHECK_THROWS_AS(make_batch(samples, {5}, 1, 0.0, nullptr), Error);
  std::vector<Sample> mixed = samples;
  mixed[1].height = 4;
  mixed[1].pixels.resize(8);
  CHECK_THROWS_AS(make_batch(mixed, {0, 1}, 1, 0.0, nullptr), Error);
  std::vector<Sample> rgb(1);
  rgb[0].pixels.assign(12, 0.0f);
  rgb[0].channels = 3;
  rgb[0].height = 2;
  rgb[0].width = 2;
  CHECK_THROWS_AS(make_batch(rgb, {0}, 1, 0.0, nullptr), Error);
}
