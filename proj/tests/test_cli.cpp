#include <gtest/gtest.h>

#include <fstream>
#include "json.hpp"
#include <sstream>

#include "cora/cli.hpp"
#include "cora/model_io.hpp"
#include "helpers.hpp"

using namespace cora;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cora");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(101);
    model_ = testing_util::toy_model(rng);
    io::save_model(path("m.cora-model"), model_);
    // Labels from the float model itself: float accuracy is exactly 1.
    io::Dataset val{testing_util::random_batch(model_, 40, rng), 5, "validation"};
    for (double& v : val.batch.images.data()) v = static_cast<float>(v);
    val.batch.labels = predict(forward(io::load_model(path("m.cora-model")), val.batch.images));
    io::save_dataset(path("val.cora-data"), val);
    io::Dataset calib{testing_util::random_batch(model_, 24, rng), 5, "calibration"};
    calib.batch.labels = predict(forward(model_, calib.batch.images));
    io::save_dataset(path("calib.cora-data"), calib);
  }

  std::string path(const std::string& name) const { return dir_.file(name); }

  testing_util::TempDir dir_;
  Model model_;
};

}  // namespace

TEST_F(CliTest, EvalFloatModel) {
  const Result r = run_cli({"eval", "--model", path("m.cora-model"), "--data", path("val.cora-data")});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("top1: 1\n"), std::string::npos) << r.out;

  const Result j = run_cli({"eval", "--model", path("m.cora-model"), "--data", path("val.cora-data"), "--json"});
  const auto doc = nlohmann::json::parse(j.out);
  EXPECT_EQ(doc["model"], "float");
  EXPECT_EQ(doc["top1"].get<double>(), 1.0);
}

TEST_F(CliTest, QuantizeThenEval) {
  const auto eval_top1 = [&](const std::string& q) {
    const Result r = run_cli({"eval", "--model", q, "--data", path("val.cora-data"), "--json"});
    EXPECT_EQ(r.code, 0) << r.err;
    return nlohmann::json::parse(r.out);
  };
  Result r = run_cli({"quantize", "--model", path("m.cora-model"), "--out", path("none.cora-qmodel"), "--bits",
                      "3", "--clip", "minmax", "--mode", "none"});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run_cli({"quantize", "--model", path("m.cora-model"), "--out", path("full.cora-qmodel"), "--bits", "3",
               "--clip", "minmax", "--budget", "1", "--adapter-bits", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto none = eval_top1(path("none.cora-qmodel"));
  const auto full = eval_top1(path("full.cora-qmodel"));
  EXPECT_EQ(none["equivalent_bits"].get<double>(), 3.0);
  EXPECT_EQ(full["equivalent_bits"].get<double>(), 35.0);
  EXPECT_LE(none["top1"].get<double>(), full["top1"].get<double>());
  EXPECT_EQ(full["top1"].get<double>(), 1.0);

  r = run_cli({"quantize", "--model", path("m.cora-model"), "--out", path("h.cora-qmodel"), "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = nlohmann::json::parse(r.out);
  EXPECT_EQ(doc["ranks"], nlohmann::json::array({1, 1, 1}));
  EXPECT_NEAR(doc["equivalent_bits"].get<double>(), 4.4, 1e-12);
}

TEST_F(CliTest, SearchWritesArtifacts) {
  const Result r = run_cli({"search", "--model", path("m.cora-model"), "--data", path("calib.cora-data"), "--out",
                            path("run"), "--iters", "12", "--batch", "8", "--budget", "0.3", "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("iter 12"), std::string::npos);
  EXPECT_EQ(io::peek_format(path("run.cora-qmodel")), "cora-qmodel");
  std::ifstream sol(path("run.solution.json"));
  const auto j = nlohmann::json::parse(sol);
  EXPECT_EQ(j["layers"].size(), 3u);
  std::ifstream trace(path("run.trace.csv"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(trace, line)) ++lines;
  EXPECT_EQ(lines, 13u);

  // Same seed, same solution.
  const Result again = run_cli({"search", "--model", path("m.cora-model"), "--data", path("calib.cora-data"),
                                "--out", path("run2"), "--iters", "12", "--batch", "8", "--budget", "0.3",
                                "--seed", "3", "--threads", "1", "--quiet"});
  ASSERT_EQ(again.code, 0);
  EXPECT_TRUE(again.err.empty());
  std::ifstream sol2(path("run2.solution.json"));
  EXPECT_EQ(nlohmann::json::parse(sol2), j);
}

TEST_F(CliTest, ReportAssemblesAccuracies) {
  const Result r = run_cli({"report", "--model", path("m.cora-model"), "--calib", path("calib.cora-data"), "--data",
                            path("val.cora-data"), "--out", path("report.json"), "--iters", "5", "--batch", "8",
                            "--quiet"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("report.json"));
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["accuracy"]["float"].get<double>(), 1.0);
  EXPECT_EQ(j["iterations"], 5);
  EXPECT_NEAR(j["equivalent_bits"].get<double>(), 4.4, 1e-12);
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
  EXPECT_EQ(run_cli({"eval", "--model", path("m.cora-model")}).code, 1);
  EXPECT_EQ(run_cli({"quantize", "--model", path("m.cora-model"), "--out", path("x"), "--bits", "9"}).code, 1);
  EXPECT_EQ(run_cli({"quantize", "--model", path("m.cora-model"), "--out", path("x"), "--clip", "normal:"}).code, 1);
  EXPECT_EQ(run_cli({"search", "--model", path("m.cora-model"), "--data", path("calib.cora-data"), "--out",
                     path("x"), "--budget", "1.5"})
                .code,
            1);

  // Missing and corrupt inputs are data errors.
  EXPECT_EQ(run_cli({"eval", "--model", path("nope.cora-model"), "--data", path("val.cora-data")}).code, 2);
  auto bytes = io::read_bytes(path("m.cora-model"));
  bytes[bytes.size() / 2] ^= 1;
  io::write_bytes(path("bad.cora-model"), bytes);
  const Result bad = run_cli({"eval", "--model", path("bad.cora-model"), "--data", path("val.cora-data"), "--json"});
  EXPECT_EQ(bad.code, 2);
  EXPECT_EQ(nlohmann::json::parse(bad.out)["error"], to_string(Errc::integrity));
  EXPECT_EQ(run_cli({"eval", "--model", path("val.cora-data"), "--data", path("val.cora-data")}).code, 2);
}

TEST_F(CliTest, NonFiniteSearchIsNumericError) {
  io::Dataset calib = io::load_dataset(path("calib.cora-data"));
  for (double& v : calib.batch.images.data()) v = std::numeric_limits<double>::infinity();
  io::save_dataset(path("inf.cora-data"), calib);
  const Result r = run_cli({"search", "--model", path("m.cora-model"), "--data", path("inf.cora-data"), "--out",
                            path("inf"), "--iters", "5", "--quiet"});
  EXPECT_EQ(r.code, 3) << r.err;
}
