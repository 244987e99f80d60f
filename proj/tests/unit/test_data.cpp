#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ecgmamba/data.hpp"
#include "ecgmamba/error.hpp"
#include "oracles.hpp"

using namespace ecgmamba;
namespace fs = std::filesystem;

namespace {

std::string u32_bytes(std::uint32_t v) {
  std::string s(4, '\0');
  for (int i = 0; i < 4; ++i) s[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace

TEST(Ecgb, HandBuiltFile) {
  std::string bytes = "ECGB" + u32_bytes(1) + u32_bytes(2) + u32_bytes(3) + u32_bytes(100);
  for (float v : {1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f}) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    bytes += u32_bytes(bits);
  }
  std::istringstream in(bytes);
  const EcgRecord rec = read_record(in);
  EXPECT_TRUE(identical(rec.signal, Tensor({2, 3}, {1, 2, 3, 4, 5, 6})));
  EXPECT_EQ(rec.sample_rate_hz, 100u);

  std::ostringstream out;
  write_record(out, rec);
  EXPECT_EQ(out.str(), bytes);
}

TEST(Ecgb, RoundTripAndErrors) {
  oracle::TempDir dir("ecgb");
  EcgRecord rec;
  rec.signal = oracle::random_normal({12, 50}, 1).as(DType::f32);
  rec.sample_rate_hz = 500;
  save_record(dir / "r1.ecgb", rec);
  const EcgRecord back = load_record(dir / "r1.ecgb");
  EXPECT_TRUE(identical(back.signal, rec.signal));
  EXPECT_EQ(back.id, "r1");
  EXPECT_EQ(back.sample_rate_hz, 500u);

  std::istringstream bad("XXXX" + u32_bytes(1) + u32_bytes(1) + u32_bytes(1) + u32_bytes(100));
  EXPECT_THROW(read_record(bad), FormatError);
  std::istringstream cut("ECGB" + u32_bytes(1) + u32_bytes(1) + u32_bytes(4) + u32_bytes(100) + "abc");
  EXPECT_THROW(read_record(cut), LengthError);
  EXPECT_THROW(load_record(dir / "absent.ecgb"), IoError);
}

TEST(Preprocess, DecimateCropPad) {
  const Tensor long500({2, 15000}, 0.5);
  const Tensor a = preprocess(long500, 500);
  EXPECT_EQ(a.shape(), Shape({2, 1000}));
  for (double v : a.values()) EXPECT_DOUBLE_EQ(v, 0.5);

  Tensor ramp({1, 600});
  std::iota(ramp.values().begin(), ramp.values().end(), 1.0);
  const Tensor b = preprocess(ramp, 100);
  ASSERT_EQ(b.shape(), Shape({1, 1000}));
  EXPECT_EQ(b[599], 600.0);
  EXPECT_EQ(b[600], 0.0);
  EXPECT_EQ(b[999], 0.0);

  Tensor mixed({1, 12}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  const Tensor c = preprocess(mixed, 500, 100, 1);
  EXPECT_EQ(c[0], 3.0);
  EXPECT_EQ(c[1], 8.0);
  EXPECT_EQ(c[2], 0.0);  // trailing partial window dropped, then padded

  for (std::size_t len : {1u, 999u, 1000u, 1001u, 7777u}) EXPECT_EQ(preprocess(Tensor({3, len}), 100).dim(1), 1000u);
  EXPECT_THROW(preprocess(Tensor({1, 10}), 250), UnsupportedRateError);
}

TEST(Manifest, ReadWriteAndErrors) {
  oracle::TempDir dir("manifest");
  Manifest m;
  m.entries = {{"a", "records/a.ecgb", {"X", "Y"}, 3}, {"b", "records/b.ecgb", {"Y"}, 1}};
  m.has_split = true;
  write_manifest(dir / "m.csv", m);
  EXPECT_EQ(oracle::read_file(dir / "m.csv"), "id,path,labels,split\na,records/a.ecgb,X;Y,3\nb,records/b.ecgb,Y,1\n");
  const Manifest back = read_manifest(dir / "m.csv");
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(back.entries[0].labels, (std::vector<std::string>{"X", "Y"}));
  EXPECT_TRUE(back.has_split);
  EXPECT_EQ(back.base_dir, dir.path());

  write_text(dir / "reordered.csv", "labels,id,path\nY,c,c.ecgb\n");
  const Manifest r = read_manifest(dir / "reordered.csv");
  EXPECT_EQ(r.entries[0].id, "c");
  EXPECT_FALSE(r.has_split);

  write_text(dir / "no_path.csv", "id,labels\na,X\n");
  EXPECT_THROW(read_manifest(dir / "no_path.csv"), FormatError);
  write_text(dir / "extra.csv", "id,path,labels\na,\"p,q\",X\n");
  EXPECT_THROW(read_manifest(dir / "extra.csv"), FormatError);

  Manifest comma;
  comma.entries = {{"a,b", "p", {"X"}, 0}};
  EXPECT_THROW(write_manifest(dir / "comma.csv", comma), FormatError);
}

TEST(Labels, EncodingAndTaxonomy) {
  oracle::TempDir dir("tax");
  write_taxonomy(dir / "t.txt", {"NORM", "MI"});
  write_text(dir / "t2.txt", "NORM\n\nMI\n");
  EXPECT_EQ(read_taxonomy(dir / "t2.txt"), (std::vector<std::string>{"NORM", "MI"}));
  EXPECT_EQ(read_taxonomy(dir / "t.txt"), read_taxonomy(dir / "t2.txt"));

  Manifest m;
  m.entries = {{"a", "a", {"MI"}, 0}, {"b", "b", {"NORM", "MI"}, 0}};
  const auto enc = encode_labels(m, {"NORM", "MI"});
  EXPECT_EQ(enc[0], (std::vector<std::uint8_t>{0, 1}));
  EXPECT_EQ(enc[1], (std::vector<std::uint8_t>{1, 1}));
  m.entries.push_back({"c", "c", {"STTC"}, 0});
  EXPECT_THROW(encode_labels(m, {"NORM", "MI"}), FormatError);
}

TEST(StratifiedSplit, BalancedAndDeterministic) {
  std::vector<std::vector<std::uint8_t>> labels(100, {0});
  for (std::size_t i = 0; i < 50; ++i) labels[2 * i][0] = 1;
  const SplitResult a = stratified_split(labels, 10, 5);
  std::vector<int> positives(11, 0), sizes(11, 0);
  for (std::size_t i = 0; i < 100; ++i) {
    ASSERT_GE(a.folds[i], 1);
    ASSERT_LE(a.folds[i], 10);
    positives[a.folds[i]] += labels[i][0];
    sizes[a.folds[i]]++;
  }
  for (int f = 1; f <= 10; ++f) {
    EXPECT_GE(positives[f], 4);
    EXPECT_LE(positives[f], 6);
    EXPECT_GE(sizes[f], 9);
    EXPECT_LE(sizes[f], 11);
  }
  EXPECT_EQ(stratified_split(labels, 10, 5).folds, a.folds);
}

TEST(StratifiedSplit, ManifestColumnWins) {
  Manifest m;
  for (int i = 0; i < 6; ++i) m.entries.push_back({"r" + std::to_string(i), "p", {"X"}, 6 - i});
  m.has_split = true;
  EXPECT_EQ(stratified_split(m, {"X"}, 10, 0).folds, (std::vector<int>{6, 5, 4, 3, 2, 1}));
}

TEST(Synth, DeterministicAndOneHot) {
  SynthOptions opt;
  opt.n_records = 12;
  opt.n_classes = 2;
  opt.samples = 300;
  opt.cooccurrence = 0.0;
  opt.seed = 9;
  const auto a = synth_records(opt), b = synth_records(opt);
  ASSERT_EQ(a.size(), 12u);
  std::size_t per_class[2] = {0, 0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(identical(a[i].signal, b[i].signal));
    EXPECT_EQ(a[i].labels[0] + a[i].labels[1], 1);
    per_class[a[i].labels[1]]++;
  }
  EXPECT_EQ(per_class[0], 6u);

  oracle::TempDir d1("synth1"), d2("synth2");
  const fs::path m1 = write_synth_dataset(d1.path(), opt, 3), m2 = write_synth_dataset(d2.path(), opt, 3);
  EXPECT_EQ(oracle::read_file(m1), oracle::read_file(m2));
  EXPECT_EQ(oracle::read_file(d1 / "taxonomy.txt"), oracle::read_file(d2 / "taxonomy.txt"));
  for (const auto& entry : fs::directory_iterator(d1 / "records")) {
    EXPECT_EQ(oracle::read_file(entry.path()), oracle::read_file(d2 / "records" / entry.path().filename()));
  }
}

TEST(Splits, LoadFromManifest) {
  oracle::TempDir dir("splits");
  SynthOptions opt;
  opt.n_records = 20;
  opt.n_classes = 2;
  opt.samples = 100;
  const fs::path manifest = write_synth_dataset(dir.path(), opt, 5);
  DataConfig cfg;
  cfg.manifest = manifest.string();
  cfg.n_folds = 5;
  cfg.target_seconds = 1;
  cfg.train_folds = {1, 2, 3};
  cfg.val_folds = {4};
  cfg.test_folds = {5};
  const DatasetSplits s = load_splits(cfg);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), 20u);
  EXPECT_EQ(s.train.signals.shape(), Shape({s.train.size(), 12, 100}));
  EXPECT_EQ(s.train.class_names, synth_class_names(2));

  const std::vector<std::size_t> pick{1, 0};
  const Batch b = s.train.batch(pick);
  EXPECT_EQ(b.ids[0], s.train.ids[1]);
  EXPECT_EQ(b.labels.shape(), Shape({2, 2}));
}
