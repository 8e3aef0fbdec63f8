#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "cora/model_io.hpp"
#include "helpers.hpp"
#include "json.hpp"

using namespace cora;

namespace {

nlohmann::json probe() {
  std::ifstream in(testing_util::fixture("probe.json"));
  return nlohmann::json::parse(in);
}

}  // namespace

TEST(Fixture, ArchitectureSpansRanks) {
  const Model m = io::load_model(testing_util::fixture("float.cora-model"));
  EXPECT_EQ(m.input_shape, (Shape{1, 28, 28}));
  EXPECT_EQ(m.num_classes, 10u);
  EXPECT_GE(m.conv_layer_indices().size(), 6u);
  std::vector<std::size_t> ranks;
  for (std::size_t i : m.conv_layer_indices()) {
    const auto& c = std::get<ConvLayer>(m.layers[i]);
    ranks.push_back(std::min(c.out_channels, c.in_channels * c.kernel_h * c.kernel_w));
  }
  EXPECT_EQ(*std::min_element(ranks.begin(), ranks.end()), 8u);
  EXPECT_EQ(*std::max_element(ranks.begin(), ranks.end()), 128u);
}

TEST(Fixture, ProbeLogitsMatchExporter) {
  const Model m = io::load_model(testing_util::fixture("float.cora-model"));
  const io::Dataset val = io::load_dataset(testing_util::fixture("val.cora-data"));
  const auto p = probe();
  const std::size_t count = p["count"];
  std::vector<std::size_t> first(count);
  for (std::size_t i = 0; i < count; ++i) first[i] = i;
  const DenseTensor logits = forward(m, select(val.batch, first).images);
  for (std::size_t s = 0; s < count; ++s)
    for (std::size_t c = 0; c < 10; ++c) EXPECT_NEAR(logits[s * 10 + c], p["logits"][s][c].get<double>(), 1e-4);
}

TEST(Fixture, AccuracyMatchesExporter) {
  const Model m = io::load_model(testing_util::fixture("float.cora-model"));
  const io::Dataset val = io::load_dataset(testing_util::fixture("val.cora-data"));
  const double acc = top1_accuracy(m, val.batch);
  EXPECT_NEAR(acc, probe()["validation_accuracy"].get<double>(), 0.005);
  EXPECT_GE(acc, 0.97);
}

TEST(Fixture, SplitsAreDisjoint) {
  const io::Dataset calib = io::load_dataset(testing_util::fixture("calib.cora-data"));
  const io::Dataset val = io::load_dataset(testing_util::fixture("val.cora-data"));
  EXPECT_EQ(calib.split, "calibration");
  EXPECT_EQ(val.split, "validation");
  EXPECT_EQ(calib.batch.size(), 1600u);
  const auto p = probe();
  std::set<std::size_t> ci = p["calibration_indices"], vi = p["validation_indices"];
  for (std::size_t i : ci) EXPECT_FALSE(vi.count(i)) << i;
  // Independent of the recorded indices: no image appears in both files.
  const std::size_t pixels = 28 * 28;
  std::set<std::vector<double>> seen;
  for (std::size_t s = 0; s < calib.batch.size(); ++s) {
    const auto d = calib.batch.images.data().subspan(s * pixels, pixels);
    seen.emplace(d.begin(), d.end());
  }
  for (std::size_t s = 0; s < val.batch.size(); ++s) {
    const auto d = val.batch.images.data().subspan(s * pixels, pixels);
    EXPECT_FALSE(seen.count(std::vector<double>(d.begin(), d.end()))) << s;
  }
}

TEST(Fixture, FilesAreByteIdenticalToOurWriter) {
  testing_util::TempDir dir;
  const std::string model = testing_util::fixture("float.cora-model");
  io::save_model(dir.file("m"), io::load_model(model));
  EXPECT_EQ(io::read_bytes(dir.file("m")), io::read_bytes(model));
  for (const char* name : {"calib.cora-data", "val.cora-data"}) {
    const std::string path = testing_util::fixture(name);
    io::save_dataset(dir.file("d"), io::load_dataset(path));
    EXPECT_EQ(io::read_bytes(dir.file("d")), io::read_bytes(path)) << name;
  }
}

TEST(Fixture, FullRankLossBelowRankOneLoss) {
  const Model m = io::load_model(testing_util::fixture("float.cora-model"));
  const io::Dataset calib = io::load_dataset(testing_util::fixture("calib.cora-data"));
  AdaptedQuantModel q = quantize_model(m, {4, ClipScheme::normal(4), QuantMode::asymmetric});
  const auto bounds = q.max_ranks();
  q.ranks.assign(bounds.begin(), bounds.end());
  const double full = cross_entropy(forward(q, calib.batch.images), calib.batch.labels);
  q.ranks.assign(bounds.size(), 1.0);
  const double one = cross_entropy(forward(q, calib.batch.images), calib.batch.labels);
  EXPECT_LE(full, one);
}
