#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult run(const std::string& args) {
  const fs::path out_file = fs::temp_directory_path() / "dptab_cli_stdout.txt";
  const std::string cmd = std::string(DPTAB_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out_file);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

class CliFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("dptab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p.string();
  }

  std::string tiny_config() {
    return write("tiny.toml", R"(seeds = [0]
[model]
embed_dim = 8
n_blocks = 1
n_heads = 2
ffn_hidden = 8
mlp_layers = 1
mlp_units = 8
[pretrain]
epsilon = 4
batch_size = 32
epochs = 1
learning_rate = 0.2
[finetune]
epsilon = 4
batch_size = 32
epochs = 1
learning_rate = 0.2
[data]
synth_pretrain_rows = 256
synth_finetune_rows = 200
[grid]
methods = ["full", "zero_shot"]
eps_p = [4]
eps_f = [4, inf]
)");
  }

  fs::path dir_;
};

}  // namespace

TEST(Cli, CalibrateWritesCsv) {
  const CliResult r = run("calibrate -e 1,8 --rows 6400 --batch 64 --epochs 2");
  ASSERT_EQ(r.code, 0);
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "target_epsilon,q,steps,sigma,achieved_epsilon,best_order");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_NE(line.find(",0.01,200,"), std::string::npos) << line;
  }
  EXPECT_EQ(rows, 2);
}

TEST(Cli, CountParamsMatchesReferenceModel) {
  const CliResult r = run("count-params");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("method,trainable,total,reduction_pct\n"), std::string::npos);
  EXPECT_NE(r.out.find("full,117157,117157,0\n"), std::string::npos);
  EXPECT_NE(r.out.find("lora,1280,"), std::string::npos);
  EXPECT_NE(r.out.find("adapter,1424,"), std::string::npos);
  EXPECT_NE(r.out.find("deep,4408,"), std::string::npos);
  EXPECT_NE(r.out.find("shallow,2072,"), std::string::npos);
  EXPECT_NE(r.out.find("zero_shot,0,"), std::string::npos);
}

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("calibrate --bogus").code, 2);
  EXPECT_EQ(run("calibrate --q 0.01").code, 2);
  EXPECT_EQ(run("count-params --vocab nope").code, 2);
  EXPECT_EQ(run("synth --shift 3").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, InfeasibleBudgetExitsWithFour) { EXPECT_EQ(run("calibrate -e 0.0001 --q 1 --steps 100000").code, 4); }

TEST_F(CliFixture, BadConfigExitsWithTwo) {
  EXPECT_EQ(run("pretrain -c " + write("bad.toml", "[model]\nembed_dim = \n")).code, 2);
  EXPECT_EQ(run("pretrain -c " + write("unknown.toml", "[model]\nwidth = 3\n")).code, 2);
}

TEST_F(CliFixture, DataAndCheckpointErrorsExitWithThree) {
  const std::string cfg = write("csv.toml",
                                "[data]\nsource = \"csv\"\npretrain_csv = \"" + (dir_ / "missing.csv").string() +
                                    "\"\nfinetune_csv = \"" + (dir_ / "missing.csv").string() + "\"\n");
  EXPECT_EQ(run("pretrain -c " + cfg).code, 3);
  const std::string junk = write("junk.dptt", "not a checkpoint");
  EXPECT_EQ(run("evaluate -k " + junk + " -c " + tiny_config()).code, 3);
}

TEST_F(CliFixture, SynthCsvRoundTripsThroughEvaluate) {
  const fs::path csv = dir_ / "s.csv";
  ASSERT_EQ(run("synth -n 50 --shift 0.5 -s 3 -o " + csv.string()).code, 0);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header.substr(header.rfind(',') + 1), "PINCP");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 50);

  const std::string cfg = tiny_config();
  const CliResult pre = run("pretrain -c " + cfg + " -o " + (dir_ / "runs").string());
  ASSERT_EQ(pre.code, 0);
  const auto j = nlohmann::json::parse(pre.out);
  const std::string ckpt = j["checkpoint"];
  EXPECT_LE(j["privacy"]["epsilon"].get<double>(), 4.0);

  const CliResult ev = run("evaluate -k " + ckpt + " --csv " + csv.string());
  ASSERT_EQ(ev.code, 0);
  EXPECT_EQ(nlohmann::json::parse(ev.out)["rows"], 50);
}

TEST_F(CliFixture, GridIsResumable) {
  const std::string cfg = tiny_config();
  const std::string out = (dir_ / "runs").string();
  const CliResult first = run("grid -c " + cfg + " -o " + out);
  ASSERT_EQ(first.code, 0);
  const auto a = nlohmann::json::parse(first.out);
  EXPECT_EQ(a["cells"], 3);
  EXPECT_EQ(a["ran"], 3);
  const CliResult second = run("grid -c " + cfg + " -o " + out);
  ASSERT_EQ(second.code, 0);
  const auto b = nlohmann::json::parse(second.out);
  EXPECT_EQ(b["ran"], 0);
  EXPECT_EQ(b["already_complete"], 3);
  EXPECT_TRUE(fs::exists(fs::path(out) / "pivot_full.csv"));
  EXPECT_TRUE(fs::exists(fs::path(out) / "counts.csv"));
}
