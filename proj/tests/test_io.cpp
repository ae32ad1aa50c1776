#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "mrfnet/io.hpp"

using namespace mrfnet;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("mrfnet_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                       "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  fs::path dir;
};

std::string slurp(const fs::path& p) { return detail::read_file(p); }
void dump(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

MrfModel random_model(Variant v, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.classes = 3;
  cfg.features = 5;
  cfg.hidden_layers = 2;
  cfg.variant = v;
  cfg.mode = Mode::postprocess;
  MrfModel m = MrfModel::zeros(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& g : m.parameters())
    for (double& x : g.values) x = n(rng);
  if (m.is_linear())
    for (double& b : m.linear().bias) b = n(rng);
  m.project_center();
  return m;
}

}  // namespace

using TensorFile = TempDir;
using ModelFile = TempDir;
using Manifest = TempDir;
using Pgm = TempDir;
using TextFormats = TempDir;

TEST_F(TensorFile, RoundTripIsBitwise) {
  Grid2D g(2, 3, 4);
  for (std::size_t j = 0; j < g.size(); ++j) g.data()[j] = static_cast<float>(0.1 * static_cast<double>(j) - 1.0);
  write_grid(dir / "a.mrft", g);
  EXPECT_EQ(read_grid(dir / "a.mrft"), g);
  EXPECT_EQ(slurp(dir / "a.mrft").size(), 4u + 4 + 1 + 1 + 3 * 8 + 24 * 4);

  Grid2D d(1, 2, 1, std::vector<double>{0.1, 1.0 / 3.0});
  write_grid(dir / "d.mrft", d, DType::f64);
  EXPECT_EQ(read_grid(dir / "d.mrft"), d);
  EXPECT_FALSE(fs::exists(dir / "d.mrft.tmp"));
}

TEST_F(TensorFile, HeaderLayout) {
  write_grid(dir / "h.mrft", Grid2D(1, 1, 1, std::vector<double>{1.0}));
  const std::string b = slurp(dir / "h.mrft");
  const unsigned char expected[] = {'M', 'R', 'F', 'T', 1, 0, 0, 0, 0, 3, 1, 0, 0, 0, 0, 0, 0, 0,
                                    1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0x80, 0x3f};
  ASSERT_EQ(b.size(), sizeof expected);
  EXPECT_EQ(std::memcmp(b.data(), expected, sizeof expected), 0);
}

TEST_F(TensorFile, TruncationNamesExpectedAndActualSizes) {
  write_grid(dir / "t.mrft", Grid2D(2, 3, 4, 0.5));
  std::string b = slurp(dir / "t.mrft");
  b.pop_back();
  dump(dir / "t.mrft", b);
  try {
    read_grid(dir / "t.mrft");
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 96 bytes, found 95"), std::string::npos) << e.what();
    EXPECT_EQ(e.offset(), 34u);
  }
}

TEST_F(TensorFile, RejectsBadMagicVersionAndTrailingBytes) {
  write_grid(dir / "x.mrft", Grid2D(1, 1, 1));
  std::string b = slurp(dir / "x.mrft");
  std::string bad = b;
  bad[0] = 'X';
  dump(dir / "m.mrft", bad);
  EXPECT_THROW(read_grid(dir / "m.mrft"), FormatError);
  bad = b;
  bad[4] = 2;
  dump(dir / "v.mrft", bad);
  try {
    read_grid(dir / "v.mrft");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  dump(dir / "e.mrft", b + "x");
  EXPECT_THROW(read_grid(dir / "e.mrft"), FormatError);
  EXPECT_THROW(read_grid(dir / "missing.mrft"), IoError);
  EXPECT_THROW(read_labels(dir / "x.mrft"), ContractError);  // 3-d tensor where labels are expected
}

TEST_F(TensorFile, LabelsRoundTrip) {
  LabelField l(2, 3, std::vector<int>{0, 1, 2, 2, 1, 0});
  write_labels(dir / "l.mrft", l);
  EXPECT_EQ(read_labels(dir / "l.mrft"), l);
  write_tensor(dir / "f.mrft", RawTensor{{1, 2}, {0.0, 1.5}, DType::f32});
  EXPECT_THROW(read_labels(dir / "f.mrft"), ContractError);
}

TEST_F(ModelFile, DoublePrecisionRoundTripIsBitwise) {
  for (Variant v : {Variant::linear, Variant::nonlinear}) {
    const MrfModel m = random_model(v, 1);
    save_model(dir / "m.mrf", m, DType::f64);
    EXPECT_EQ(load_model(dir / "m.mrf"), m);
  }
}

TEST_F(ModelFile, SinglePrecisionStoresRoundedParameters) {
  const MrfModel m = random_model(Variant::nonlinear, 2);
  save_model(dir / "m.mrf", m);
  const MrfModel back = load_model(dir / "m.mrf");
  EXPECT_EQ(back.config(), m.config());
  MrfModel rounded = m;
  for (auto& g : rounded.parameters())
    for (double& x : g.values) x = static_cast<double>(static_cast<float>(x));
  EXPECT_EQ(back, rounded);
  save_model(dir / "m2.mrf", back);
  EXPECT_EQ(slurp(dir / "m.mrf"), slurp(dir / "m2.mrf"));
}

TEST_F(ModelFile, NonzeroCentreTapIsRejected) {
  const MrfModel m = random_model(Variant::linear, 3);
  std::string b = encode_model(m, DType::f64);
  // Header is 40 bytes; the first block's tensor header is 10 + 4 * 8 bytes.
  const std::size_t payload = 40 + 42;
  const std::size_t centre = (0 * 3 + 0) * 9 + 4;  // filter (0, 0) centre tap
  const double one = 1.0;
  std::memcpy(b.data() + payload + centre * 8, &one, 8);
  dump(dir / "bad.mrf", b);
  try {
    load_model(dir / "bad.mrf");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("centre"), std::string::npos);
  }
}

TEST_F(ModelFile, RejectsCorruptHeaders) {
  std::string b = encode_model(random_model(Variant::linear, 4));
  std::string bad = b;
  bad[32] = 7;  // mode flag
  dump(dir / "a.mrf", bad);
  EXPECT_THROW(load_model(dir / "a.mrf"), FormatError);
  dump(dir / "b.mrf", b.substr(0, 60));
  EXPECT_THROW(load_model(dir / "b.mrf"), FormatError);
  dump(dir / "c.mrf", "MRFT");
  EXPECT_THROW(load_model(dir / "c.mrf"), FormatError);
}

TEST_F(Manifest, RoundTripAndSampleLoading) {
  DatasetManifest m;
  m.classes = 2;
  m.height = 2;
  m.width = 2;
  ManifestEntry e{"s0", "test", "r.mrft", std::string("c.mrft"), std::nullopt, "t.mrft"};
  m.samples.push_back(e);
  m.provenance["seed"] = 7;
  write_grid(dir / "r.mrft", Grid2D(2, 2, 2, 0.5));
  write_grid(dir / "c.mrft", Grid2D(2, 2, 2, -1.0));
  write_labels(dir / "t.mrft", LabelField(2, 2, std::vector<int>{0, 1, 1, 0}));
  write_manifest(dir / "manifest.json", m);

  const DatasetManifest back = read_manifest(dir / "manifest.json");
  EXPECT_EQ(back.classes, 2u);
  EXPECT_EQ(back.provenance["seed"], 7);
  ASSERT_EQ(back.split("test").size(), 1u);
  EXPECT_TRUE(back.split("train").empty());
  const Sample s = load_sample(back, *back.split("test")[0]);
  EXPECT_EQ(s.r, Grid2D(2, 2, 2, 0.5));
  const Sample oh = load_sample(back, *back.split("test")[0], InputKind::onehot);
  EXPECT_EQ(oh.r, one_hot(s.target, 2));
}

TEST_F(Manifest, MissingFilesAndShapeMismatches) {
  DatasetManifest m;
  m.classes = 2;
  m.height = m.width = 2;
  m.samples.push_back({"s0", "train", "r.mrft", std::nullopt, std::nullopt, "t.mrft"});
  write_manifest(dir / "manifest.json", m);
  EXPECT_THROW(read_manifest(dir / "manifest.json"), IoError);
  write_grid(dir / "r.mrft", Grid2D(3, 2, 2, 0.5));
  write_labels(dir / "t.mrft", LabelField(2, 2));
  const DatasetManifest back = read_manifest(dir / "manifest.json");
  EXPECT_THROW(load_sample(back, back.samples[0]), ContractError);
  dump(dir / "broken.json", "{\"format\": ");
  EXPECT_THROW(read_manifest(dir / "broken.json"), FormatError);
}

TEST_F(Pgm, LabelBytesAreExact) {
  export_pgm(LabelField(2, 2, std::vector<int>{0, 1, 1, 0}), 2, dir / "l.pgm");
  const std::string b = slurp(dir / "l.pgm");
  EXPECT_EQ(b, std::string("P5\n2 2\n255\n") + std::string("\x00\xff\xff\x00", 4));
}

TEST_F(Pgm, RealFieldsUseMinMaxWithConstantMidpoint) {
  export_pgm(Grid2D(2, 3, 2, 0.7), 1, dir / "c.pgm");
  const std::string b = slurp(dir / "c.pgm");
  EXPECT_EQ(b.substr(0, 11), "P5\n3 2\n255\n");
  for (char ch : b.substr(11)) EXPECT_EQ(static_cast<unsigned char>(ch), 128);
  export_pgm(Grid2D(1, 3, 1, std::vector<double>{-1.0, 0.0, 3.0}), 0, dir / "r.pgm");
  EXPECT_EQ(slurp(dir / "r.pgm").substr(11), std::string("\x00\x40\xff", 3));
  EXPECT_THROW(export_pgm(Grid2D(1, 1, 1), 1, dir / "x.pgm"), ContractError);
}

TEST_F(TextFormats, CsvGrids) {
  const Grid2D g = grid_from_csv("1,2,3,4\n5,6,7,8\n", 2);
  EXPECT_EQ(g.height(), 2u);
  EXPECT_EQ(g.width(), 2u);
  EXPECT_EQ(g(1, 0, 1), 6.0);
  EXPECT_THROW(grid_from_csv("1,2\n3\n", 1), FormatError);
  EXPECT_THROW(grid_from_csv("1,x\n", 1), FormatError);
  EXPECT_THROW(grid_from_csv("1,2,3\n", 2), FormatError);
}

TEST_F(TextFormats, KeyValueConfig) {
  dump(dir / "run.cfg", "# comment\n epochs = 5 \n\ntrain.lr=0.01 # trailing\n");
  const auto kv = read_kv_config(dir / "run.cfg");
  EXPECT_EQ(kv.at("epochs"), "5");
  EXPECT_EQ(kv.at("train.lr"), "0.01");
  EXPECT_EQ(kv.size(), 2u);
  dump(dir / "bad.cfg", "novalue\n");
  EXPECT_THROW(read_kv_config(dir / "bad.cfg"), ConfigError);
}
