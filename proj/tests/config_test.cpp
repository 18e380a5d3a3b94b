#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "mklab/config.hpp"

namespace {

using mklab::ConfigError;
using mklab::KeyKind;
using mklab::RunConfig;
namespace fs = std::filesystem;

RunConfig parse(const std::string& text) { return mklab::parse_run_config(text); }

TEST(Config, EmptyObjectYieldsValidatedDefaults) {
  auto r = parse("{}");
  EXPECT_EQ(r.model.dim, 384u);
  EXPECT_EQ(r.train.batch_size, 128u);
  EXPECT_EQ(r.dataset.source, "synthetic");
  EXPECT_EQ(r.output_dir, "out");
}

TEST(Config, UnknownFieldsAreRejectedWithDottedPath) {
  try {
    parse(R"({"model": {"headz": 6}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.headz"), std::string::npos) << e.what();
  }
  try {
    parse(R"({"model": {"variant": {"kind": "kua", "chartz": 8}}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.variant.chartz"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse(R"({"outputdir": "x"})"), ConfigError);
  EXPECT_THROW(parse(R"({"train": {"lr": 0.1}})"), ConfigError);
}

TEST(Config, MalformedJsonReportsParserDiagnostic) {
  try {
    parse("{\"model\": ");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("not valid JSON"), std::string::npos);
  }
}

TEST(Config, PresetResolvesThenOverridesApply) {
  auto r = parse(R"({"model": {"preset": "vit-s16",
                               "variant": {"kind": "spatialk", "charts": 8},
                               "num_classes": 10}})");
  EXPECT_EQ(r.model.dim, 384u);
  EXPECT_EQ(r.model.depth, 12u);
  EXPECT_EQ(r.model.heads, 6u);
  EXPECT_EQ(r.model.num_classes, 10u);  // override wins
  EXPECT_EQ(r.model.variant.kind, KeyKind::SpatialK);
  EXPECT_EQ(r.model.variant.charts, 8u);

  auto t = parse(R"({"model": {"preset": "tiny"}})");
  EXPECT_EQ(t.model.dim, 64u);
  EXPECT_EQ(t.model.image_size, 16u);

  EXPECT_THROW(parse(R"({"model": {"preset": "vit-l16"}})"), ConfigError);
}

TEST(Config, TypeAndValueErrorsNameTheField) {
  try {
    parse(R"({"model": {"dim": -4}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.dim"), std::string::npos);
  }
  EXPECT_THROW(parse(R"({"train": {"lr_max": "fast"}})"), ConfigError);
  EXPECT_THROW(parse(R"({"train": {"lr_max": 1e-6, "lr_min": 1e-4}})"), ConfigError);
  EXPECT_THROW(parse(R"({"train": {"precision": "f16"}})"), ConfigError);
  EXPECT_THROW(parse(R"({"model": {"dim": 10, "heads": 3}})"), ConfigError);  // divisibility
  EXPECT_THROW(parse(R"({"model": {"variant": {"kind": "mystery"}}})"), ConfigError);
  EXPECT_THROW(parse(R"({"model": {"gamma_init": "zeros"}})"), ConfigError);
}

TEST(Config, SerializationRoundTripIsAFixedPoint) {
  auto r = parse(R"({"model": {"preset": "tiny", "variant": {"kind": "vanillak", "charts": 4, "cb": true},
                               "gamma_init": "small", "gamma_init_value": 0.001},
                     "train": {"total_epochs": 7, "batch_size": 16, "seed": 3, "warmup_steps": 2,
                               "target_top1": 0.95},
                     "dataset": {"samples_per_class": 32, "seed": 5},
                     "output_dir": "runs/demo"})");
  const std::string text1 = mklab::run_config_to_text(r);
  auto r2 = mklab::parse_run_config(text1);
  const std::string text2 = mklab::run_config_to_text(r2);
  EXPECT_EQ(text1, text2);

  EXPECT_EQ(r2.model.variant.kind, KeyKind::VanillaK);
  EXPECT_EQ(r2.model.variant.charts, 4u);
  EXPECT_TRUE(r2.model.variant.cb);
  EXPECT_EQ(r2.model.gamma_init, mklab::GammaInit::Small);
  EXPECT_DOUBLE_EQ(r2.model.gamma_init_value, 0.001);
  EXPECT_EQ(r2.train.total_epochs, 7u);
  EXPECT_EQ(r2.train.seed, 3u);
  EXPECT_DOUBLE_EQ(r2.train.target_top1, 0.95);
  EXPECT_EQ(r2.dataset.samples_per_class, 32u);
  EXPECT_EQ(r2.output_dir, "runs/demo");
}

TEST(Config, SerializedFormNeverContainsPresets) {
  auto r = parse(R"({"model": {"preset": "vit-b16"}})");
  EXPECT_EQ(mklab::run_config_to_text(r).find("preset"), std::string::npos);
}

TEST(Config, IdxSourceRequiresExistingPaths) {
  EXPECT_THROW(parse(R"({"dataset": {"source": "idx"}})"), ConfigError);
  EXPECT_THROW(parse(R"({"dataset": {"source": "idx", "images": "/nope/i.idx", "labels": "/nope/l.idx"}})"),
               ConfigError);
  EXPECT_THROW(parse(R"({"dataset": {"source": "csv"}})"), ConfigError);
}

TEST(Config, LoadFromFileAndMissingFileDiagnostics) {
  const std::string path =
      (fs::temp_directory_path() / ("mklab_cfg_" + std::to_string(::getpid()) + ".json")).string();
  std::ofstream(path) << R"({"model": {"preset": "tiny"}, "output_dir": "x"})";
  auto r = mklab::load_run_config(path);
  EXPECT_EQ(r.model.dim, 64u);
  EXPECT_EQ(r.output_dir, "x");
  fs::remove(path);
  EXPECT_THROW(mklab::load_run_config(path), ConfigError);
}

TEST(Config, BuildDatasetAdoptsModelGeometry) {
  auto r = parse(R"({"model": {"preset": "tiny"}, "dataset": {"samples_per_class": 3, "seed": 1}})");
  auto ds = mklab::build_dataset<float>(r.dataset, r.model);
  EXPECT_EQ(ds.images.shape(), (mklab::Shape{12, 1, 16, 16}));  // 4 classes x 3 each
  EXPECT_EQ(ds.num_classes, 4u);
}

}  // namespace
