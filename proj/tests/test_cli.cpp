#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr together
};

Run run(const std::string& args) {
  const std::string cmd = std::string(MSGT_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

bool contains(const std::string& s, const std::string& needle) { return s.find(needle) != std::string::npos; }

}  // namespace

TEST(Cli, NoArgumentsPrintsUsage) {
  auto r = run("");
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.output, "train")) << r.output;
  EXPECT_TRUE(contains(r.output, "analyze-comm")) << r.output;
}

TEST(Cli, UnknownSubcommandFails) {
  EXPECT_EQ(run("fly").code, 1);
  EXPECT_EQ(run("flops --window").code, 1);
}

TEST(Cli, FlopsPrintsExactRatio) {
  auto r = run("flops");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(contains(r.output, "2354/115297")) << r.output;
  EXPECT_TRUE(contains(r.output, "2.0417%")) << r.output;
  EXPECT_TRUE(contains(run("flops --window 7 --dim 96").output, "626/30625"));
}

TEST(Cli, AnalyzeCommPrintsReceptiveFields) {
  auto r = run("analyze-comm --window 7 --shuffle 4");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(contains(r.output, "110.25")) << r.output;
  EXPECT_TRUE(contains(r.output, "784")) << r.output;
}

TEST(Cli, BadConfigExitsWithOne) {
  const auto dir = fs::temp_directory_path() / "msgt_test_cli";
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << R"({"arch": "micro", "learning_rate": 0.1})";
  auto r = run("train --config " + (dir / "bad.json").string() + " --out " + (dir / "run").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.output, "learning_rate")) << r.output;
  EXPECT_EQ(run("train --config " + (dir / "missing.json").string()).code, 1);
  EXPECT_EQ(run("ablate --mode sideways").code, 1);
}

TEST(Cli, TinyTrainEvalRoundTrip) {
  const auto dir = fs::temp_directory_path() / "msgt_test_cli_train";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "tiny.json") << R"({"arch": "micro", "input_size": 32,
    "schedule": {"total_steps": 2, "warmup_steps": 1, "batch_size": 4, "eval_every": 2, "eval_batch_size": 8},
    "data": {"train_size": 16, "val_size": 8}, "record_time": false})";
  const auto out = (dir / "run").string();
  auto r = run("train --config " + (dir / "tiny.json").string() + " --out " + out);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(fs::path(out) / "metrics.csv"));
  EXPECT_TRUE(fs::exists(fs::path(out) / "checkpoint.bin"));
  auto e = run("eval --config " + (dir / "tiny.json").string() + " --checkpoint " + out + "/checkpoint.bin");
  EXPECT_EQ(e.code, 0) << e.output;
  EXPECT_TRUE(contains(e.output, "top1")) << e.output;
}
