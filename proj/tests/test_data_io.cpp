#include "lifeiqa/data_io.hpp"
#include "lifeiqa/errors.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

using namespace lifeiqa;
namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("lifeiqa_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

Tensor float32_tensor(Shape shape, std::mt19937_64& rng) {
  Tensor t = test::random_tensor(std::move(shape), rng);
  for (double& v : t.values()) v = static_cast<float>(v);
  return t;
}

FeatureRecord sample_record(std::mt19937_64& rng, std::size_t h3, std::size_t h4, std::string id) {
  std::uniform_int_distribution<std::size_t> ch(1, 6);
  FeatureRecord r;
  r.id = std::move(id);
  r.stage3 = float32_tensor({h3, h3 + 1, ch(rng)}, rng);
  r.stage4 = float32_tensor({h4, h4, ch(rng)}, rng);
  r.mos = std::uniform_real_distribution<double>(0, 100)(rng);
  return r;
}

Manifest small_manifest(std::size_t n) {
  Manifest m;
  for (std::size_t i = 0; i < n; ++i) m.records.push_back({"img" + std::to_string(i), "x.lifq", double(i)});
  return m;
}

// ---- LIFQ ------------------------------------------------------------------

TEST_F(TempDir, FeatureFileRoundTripIsExact) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    // include degenerate 1×1 maps
    const FeatureRecord r = sample_record(rng, 1 + i % 4, 1 + i % 2, "rec_" + std::to_string(i));
    const fs::path p = dir_ / (r.id + ".lifq");
    write_feature_file(r, p);
    const FeatureRecord back = read_feature_file(p);
    EXPECT_EQ(back.id, r.id);
    EXPECT_EQ(back.mos, r.mos);
    EXPECT_EQ(back.stage3, r.stage3);
    EXPECT_EQ(back.stage4, r.stage4);
  }
}

TEST_F(TempDir, FeatureFileSizeMatchesLayout) {
  FeatureRecord r;
  r.id = "abc";
  r.stage3 = Tensor({2, 2, 3}, 1.0);
  r.stage4 = Tensor({1, 1, 5}, 2.0);
  const fs::path p = dir_ / "r.lifq";
  write_feature_file(r, p);
  const std::size_t expected = 4 + 2 + 1 + (1 + 1 + 12 + 4 * 12) + (1 + 1 + 12 + 4 * 5) + 8 + 2 + 3;
  EXPECT_EQ(fs::file_size(p), expected);
  EXPECT_EQ(feature_file_size({2, 2, 3}, {1, 1, 5}, 3), expected);
}

TEST_F(TempDir, FeatureFileNarrowsToFloat32) {
  FeatureRecord r;
  r.id = "n";
  r.stage3 = Tensor::vector({0.1}).reshaped({1, 1, 1});
  r.stage4 = Tensor({1, 1, 1});
  write_feature_file(r, dir_ / "n.lifq");
  EXPECT_EQ(read_feature_file(dir_ / "n.lifq").stage3[0], static_cast<double>(0.1f));
}

TEST_F(TempDir, CorruptFeatureFilesAreFormatErrors) {
  std::mt19937_64 rng(2);
  const fs::path p = dir_ / "good.lifq";
  write_feature_file(sample_record(rng, 2, 1, "good"), p);
  const std::string good = slurp(p);

  auto expect_error = [&](std::string bytes, const std::string& needle) {
    spit(dir_ / "bad.lifq", bytes);
    try {
      read_feature_file(dir_ / "bad.lifq");
      ADD_FAILURE() << "no error for " << needle;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };

  std::string bad = good;
  bad[0] = 'X';
  expect_error(bad, "magic");
  bad = good;
  bad[4] = 2;
  expect_error(bad, "version");
  bad = good;
  bad[7] = 2;  // dtype of the first tensor
  expect_error(bad, "dtype");
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, good.size() / 2, good.size() - 1})
    EXPECT_THROW(
        {
          spit(dir_ / "cut.lifq", good.substr(0, cut));
          read_feature_file(dir_ / "cut.lifq");
        },
        FormatError);
  spit(dir_ / "long.lifq", good + "z");
  EXPECT_THROW(read_feature_file(dir_ / "long.lifq"), FormatError);
  EXPECT_THROW(read_feature_file(dir_ / "missing.lifq"), std::runtime_error);
}

// ---- manifest --------------------------------------------------------------

TEST_F(TempDir, ManifestRoundTrip) {
  std::mt19937_64 rng(3);
  Manifest m;
  m.metadata = {{"source", "unit"}};
  for (int i = 0; i < 3; ++i) {
    const FeatureRecord r = sample_record(rng, 2, 1, "m" + std::to_string(i));
    write_feature_file(r, dir_ / (r.id + ".lifq"));
    m.records.push_back({r.id, r.id + ".lifq", r.mos});
  }
  write_manifest(m, dir_ / "manifest.json");
  const Manifest back = read_manifest(dir_ / "manifest.json");
  ASSERT_EQ(back.records.size(), 3u);
  EXPECT_EQ(back.metadata, m.metadata);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.records[i].id, m.records[i].id);
    EXPECT_EQ(back.records[i].mos, m.records[i].mos);
    EXPECT_EQ(back.load(back.records[i]).mos, m.records[i].mos);
  }
  EXPECT_EQ(back.find("m1").path, "m1.lifq");
}

TEST_F(TempDir, ManifestValidation) {
  Manifest m = small_manifest(2);
  spit(dir_ / "x.lifq", "");
  m.records[1].id = m.records[0].id;
  write_manifest(m, dir_ / "dup.json");
  EXPECT_THROW(read_manifest(dir_ / "dup.json"), FormatError);

  Manifest missing = small_manifest(1);
  missing.records[0].path = "nope.lifq";
  write_manifest(missing, dir_ / "missing.json");
  EXPECT_THROW(read_manifest(dir_ / "missing.json"), FormatError);

  spit(dir_ / "broken.json", "{\"records\": [");
  EXPECT_THROW(read_manifest(dir_ / "broken.json"), FormatError);
}

// ---- split -----------------------------------------------------------------

TEST(Split, DeterministicSizes) {
  const Manifest m = small_manifest(10);
  const Split a = split(m, {42, 0.8, 0});
  EXPECT_EQ(a.train.size(), 8u);
  EXPECT_EQ(a.test.size(), 2u);
  const Split b = split(m, {42, 0.8, 0});
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
}

TEST(Split, RunIndexChangesPartition) {
  const Manifest m = small_manifest(50);
  EXPECT_NE(split(m, {42, 0.8, 0}).train, split(m, {42, 0.8, 1}).train);
}

TEST(Split, IsAPartitionForAnyFraction) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng() % 40;
    const double frac = std::uniform_real_distribution<double>(0.01, 0.99)(rng);
    const Split s = split(small_manifest(n), {rng(), frac, static_cast<std::uint32_t>(trial % 10)});
    EXPECT_EQ(s.train.size(), static_cast<std::size_t>(std::floor(frac * n)));
    std::set<std::string> all(s.train.begin(), s.train.end());
    for (const auto& id : s.test) EXPECT_TRUE(all.insert(id).second);
    EXPECT_EQ(all.size(), n);
  }
}

TEST(Split, RejectsDegenerateInput) {
  EXPECT_THROW(split(small_manifest(1), {1, 0.8, 0}), ConfigError);
  EXPECT_THROW(split(small_manifest(10), {1, 0.0, 0}), ConfigError);
  EXPECT_THROW(split(small_manifest(10), {1, 1.0, 0}), ConfigError);
}

// ---- synthetic data --------------------------------------------------------

TEST(PlantedMos, ClosedForms) {
  EXPECT_EQ(planted_mos(0.0, 0.0), 50.0);
  EXPECT_NEAR(planted_mos(1.0, 0.0), 50 + 25 * std::tanh(4.0), 1e-12);
  EXPECT_NEAR(planted_mos(1.0, 0.0), 74.98323, 1e-5);
  EXPECT_NEAR(planted_mos(-1.0, 0.0), 50 + 25 * std::tanh(-2.0), 1e-12);
}

TEST(PlantedMos, BoundedByRecordedRange) {
  for (double m4 = -5; m4 <= 5; m4 += 0.25)
    for (double m3 = -5; m3 <= 5; m3 += 0.25) {
      const double y = planted_mos(m4, m3);
      EXPECT_GE(y, kPlantedMosMin);
      EXPECT_LE(y, kPlantedMosMax);
    }
}

TEST_F(TempDir, SynthIsDeterministicAndLabelsAreRecomputable) {
  const SynthDims dims = parse_synth_dims("3,3,2,2,2,4");
  const Manifest a = synth_generate(12, 9, dims, dir_ / "a");
  synth_generate(12, 9, dims, dir_ / "b");
  EXPECT_EQ(slurp(dir_ / "a" / "manifest.json"), slurp(dir_ / "b" / "manifest.json"));
  for (const auto& e : a.records) {
    EXPECT_EQ(slurp(dir_ / "a" / e.path), slurp(dir_ / "b" / e.path));
    const FeatureRecord r = a.load(e);
    EXPECT_EQ(r.stage3.shape(), (Shape{3, 3, 2}));
    EXPECT_EQ(r.stage4.shape(), (Shape{2, 2, 4}));
    EXPECT_NEAR(planted_mos(r.stage3, r.stage4), e.mos, 1e-9);
    EXPECT_NEAR(r.mos, e.mos, 1e-9);
  }
  const Manifest c = synth_generate(12, 10, dims, dir_ / "c");
  EXPECT_NE(slurp(dir_ / "a" / a.records[0].path), slurp(dir_ / "c" / c.records[0].path));
  EXPECT_EQ(read_manifest(dir_ / "a" / "manifest.json").records.size(), 12u);
}

TEST(SynthDims, ParseErrors) {
  EXPECT_THROW(parse_synth_dims("1,2,3"), ConfigError);
  EXPECT_THROW(parse_synth_dims("1,2,3,4,5,x"), ConfigError);
  EXPECT_THROW(parse_synth_dims("1,2,0,4,5,6"), ConfigError);
}

// ---- median ----------------------------------------------------------------

TEST(Median, Examples) {
  EXPECT_EQ(median_of_runs(std::vector<double>{0.9, 0.8, 0.95}), 0.9);
  EXPECT_EQ(median_of_runs(std::vector<double>{0.5}), 0.5);
  EXPECT_EQ(median_of_runs(std::vector<double>{0.4, 0.6}), 0.5);
  EXPECT_THROW(median_of_runs(std::vector<double>{}), std::invalid_argument);
}

// ---- checkpoint ------------------------------------------------------------

TEST_F(TempDir, CheckpointRoundTripIsBitExact) {
  std::mt19937_64 rng(5);
  Checkpoint c;
  c.tensors.emplace_back("a.weight", test::random_tensor({3, 4}, rng));
  c.tensors.emplace_back("b", test::random_tensor({7}, rng));
  c.tensors.emplace_back("scalar", Tensor::vector({1.0 / 3.0}));
  c.metadata = {{"step", 12}};
  write_checkpoint(c, dir_ / "c.lifc");
  const Checkpoint back = read_checkpoint(dir_ / "c.lifc");
  ASSERT_EQ(back.tensors.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.tensors[i].first, c.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second, c.tensors[i].second);
  }
  EXPECT_EQ(back.metadata, c.metadata);

  std::string bytes = slurp(dir_ / "c.lifc");
  bytes[0] = 'Q';
  spit(dir_ / "bad.lifc", bytes);
  EXPECT_THROW(read_checkpoint(dir_ / "bad.lifc"), FormatError);
}

TEST_F(TempDir, AtomicWriteReplacesContent) {
  write_file_atomic(dir_ / "f.txt", std::string("one"));
  write_file_atomic(dir_ / "f.txt", std::string("two"));
  EXPECT_EQ(slurp(dir_ / "f.txt"), "two");
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir_)) ++entries;
  EXPECT_EQ(entries, 1u);
}

}  // namespace
