#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>

#include "shardpipe/checkpoint.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

// Runs the CLI with `args`, capturing stdout and stderr separately.
CliRun cli(const std::string& args) {
  const fs::path err_file = fs::temp_directory_path() / "shardpipe_test_cli.stderr";
  const std::string cmd = std::string(SHARDPIPE_CLI) + " " + args + " 2>" + err_file.string();
  CliRun r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err_file);
  r.err.assign(std::istreambuf_iterator<char>(in), {});
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("shardpipe_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    std::ofstream line(path("line.csv"));
    line << "x,y\n";
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> d(-2.0, 2.0);
    for (int i = 0; i < 200; ++i) {
      const double x = d(rng);
      line << x << "," << 2.0 * x << "\n";
    }
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, TrainLearnsALine) {
  const CliRun r = cli("train --data " + path("line.csv") + " --label y --arch 1-1:id --epochs 40 --batch-size 16 " +
                    "--lr 0.05 --workers 2 --out " + path("m.spnn"));
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_EQ(j["workers"], 2);
  EXPECT_EQ(j["epochs"].size(), 40u);
  const auto ck = shardpipe::load_checkpoint(path("m.spnn"));
  EXPECT_NEAR(ck.params.layers[0].weight(0, 0), 2.0f, 0.01f);
  EXPECT_NEAR(ck.params.layers[0].bias(0, 0), 0.0f, 0.01f);
}

TEST_F(Cli, BadArchitectureExitsOneAndNamesTheToken) {
  const CliRun r = cli("train --data " + path("line.csv") + " --label y --arch 1-foo-1:relu,id");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("foo"), std::string::npos) << r.err;
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("train --data x.csv").code, 1);
  EXPECT_EQ(cli("frobnicate").code, 1);
  EXPECT_EQ(cli("--help").code, 0);
}

TEST_F(Cli, MissingFilesExitTwo) {
  EXPECT_EQ(cli("train --data " + path("none.csv") + " --label y --arch 1-1:id").code, 2);
  ASSERT_EQ(cli("train --data " + path("line.csv") + " --label y --arch 1-1:id --epochs 1 --out " +
                path("m.spnn"))
                .code,
            0);
  const CliRun q = cli("quantize --model " + path("m.spnn") + " --calib " + path("none.csv"));
  EXPECT_EQ(q.code, 2);
  EXPECT_NE(q.err.find("none.csv"), std::string::npos) << q.err;
}

TEST_F(Cli, QuantizeThenBench) {
  ASSERT_EQ(cli("train --data " + path("line.csv") + " --label y --arch 1-4-1:relu,id --epochs 2 --out " +
                path("m.spnn"))
                .code,
            0);
  const CliRun q = cli("quantize --model " + path("m.spnn") + " --calib " + path("line.csv") +
                    " --label y --out " + path("m.spq8"));
  ASSERT_EQ(q.code, 0) << q.err;
  EXPECT_EQ(json::parse(q.out)["calibration_rows"], 200);

  const CliRun b = cli("bench --model " + path("m.spnn") + " --quantized " + path("m.spq8") +
                    " --batch 64 --repeats 3 --max-threads 2");
  ASSERT_EQ(b.code, 0) << b.err;
  const json j = json::parse(b.out);
  ASSERT_EQ(j["plans"].size(), 4u);
  EXPECT_EQ(j["plans"][0]["threads"], 1);
  EXPECT_EQ(j["plans"][0]["precision"], "fp32");
  EXPECT_EQ(j["plans"][0]["speedup"], 1.0);
  EXPECT_EQ(j["plans"][2]["precision"], "int8");
}

TEST_F(Cli, TuneWritesStudyAndCheckpoint) {
  std::ofstream(path("space.json")) << R"({"lr": {"kind": "categorical", "choices": [1.0, 0.05]}})";
  const CliRun r = cli("tune --data " + path("line.csv") + " --label y --arch 1-1:id --lr '$lr' --space " +
                    path("space.json") + " --sampler grid --budget 5 --epochs 10 --batch-size 16 --study-out " +
                    path("study.json") + " --out " + path("best.spnn"));
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("study.json"));
  const json study = json::parse(in);
  EXPECT_EQ(study["trials"].size(), 2u);
  EXPECT_EQ(study["best"], 1);
  EXPECT_TRUE(fs::exists(path("best.spnn")));
}

TEST_F(Cli, InvalidSpaceExitsOne) {
  std::ofstream(path("space.json")) << R"({"h": {"kind": "int", "lo": 9, "hi": 2}})";
  const CliRun r = cli("tune --data " + path("line.csv") + " --label y --arch '1-$h-1:relu,id' --space " +
                    path("space.json"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("'h'"), std::string::npos) << r.err;
  EXPECT_EQ(cli("tune --data " + path("line.csv") + " --label y --arch '1-$h-1:relu,id'").code, 1);
}

TEST_F(Cli, ClusterCheck) {
  const CliRun r = cli("cluster check --workers 3");
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_EQ(j["echo"], json({0, 1, 2}));
  EXPECT_EQ(j["state"], "Down");
}
