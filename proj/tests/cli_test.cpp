#include <cstdlib>
#include <filesystem>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "lpf/lpf.hpp"

namespace fs = std::filesystem;

namespace lpf {
namespace {

const std::string kSmall = " --seed 4 --num-qtypes 3 --answers-per-qtype 4 --v-in-dim 8 --n-train 240 --n-test 120";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("lpf_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) const {
    const std::string cmd = std::string(LPF_CLI_PATH) + " " + args + " > " + (dir_ / "stdout.txt").string() +
                            " 2> " + (dir_ / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

TEST_F(CliTest, FullPipeline) {
  ASSERT_EQ(run("gen --out " + path("data") + kSmall), 0);
  for (const char* f : {"train.split", "id_test.split", "ood_test.split"}) {
    EXPECT_TRUE(fs::exists(path("data/") + f)) << f;
  }
  ASSERT_EQ(run("train --split " + path("data/train.split") + " --out " + path("model.ckpt") +
                " --epochs 2 --batch-size 32 --variant lpf --gamma 5 --seed 4"),
            0);
  EXPECT_TRUE(fs::exists(path("model.ckpt")));
  const std::string log = read_file(path("model.ckpt.log.csv"));
  EXPECT_EQ(log.substr(0, log.find('\n')), kRunLogCsvHeader);

  ASSERT_EQ(run("eval --checkpoint " + path("model.ckpt") + " --split " + path("data/ood_test.split") +
                " --train-split " + path("data/train.split") + " --variant lpf --gamma 5 --out " +
                path("ood.json")),
            0);
  const auto reps = read_reports(path("ood.json"));
  ASSERT_EQ(reps.size(), 1u);
  EXPECT_EQ(reps[0].label, "ood_test");
  EXPECT_EQ(reps[0].variant, "lpf");
  EXPECT_EQ(reps[0].gamma, 5.0);
  EXPECT_EQ(reps[0].num_samples, 120u);
  EXPECT_TRUE(reps[0].mean_kl_to_train.has_value());

  // the CLI result equals the library result
  const auto params = read_checkpoint(path("model.ckpt"));
  const Split ood = read_split(path("data/ood_test.split"));
  EXPECT_EQ(evaluate(params, ood).accuracy, reps[0].accuracy);

  ASSERT_EQ(run("report " + path("ood.json") + " --format csv --out " + path("ood.csv")), 0);
  const std::string csv = read_file(path("ood.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kReportCsvHeader);
}

TEST_F(CliTest, ConfigFileAndOverride) {
  write_file(path("run.toml"),
             "seed = 4\nnum-qtypes = 3\nanswers-per-qtype = 4\nv-in-dim = 8\nn-train = 240\nn-test = 120\n"
             "epochs = 1\nbatch-size = 64\nvariant = \"ce\"\n");
  ASSERT_EQ(run("--config " + path("run.toml") + " gen --out " + path("a")), 0);
  ASSERT_EQ(run("gen --out " + path("b") + kSmall), 0);
  EXPECT_EQ(read_file(path("a/train.split")), read_file(path("b/train.split")));

  // flags override the file
  ASSERT_EQ(run("--config " + path("run.toml") + " gen --out " + path("c") + " --seed 5"), 0);
  EXPECT_NE(read_file(path("a/train.split")), read_file(path("c/train.split")));
  EXPECT_EQ(read_split(path("c/train.split")).config.seed, 5u);

  // train with the file's variant vs explicit flags gives the same checkpoint
  ASSERT_EQ(run("--config " + path("run.toml") + " train --split " + path("a/train.split") + " --out " +
                path("m1.ckpt")),
            0);
  ASSERT_EQ(run("train --split " + path("a/train.split") + " --out " + path("m2.ckpt") +
                " --seed 4 --epochs 1 --batch-size 64 --variant ce"),
            0);
  EXPECT_EQ(read_file(path("m1.ckpt")), read_file(path("m2.ckpt")));
}

TEST_F(CliTest, SweepWritesOneRowPairPerGamma) {
  ASSERT_EQ(run("gen --out " + path("data") + kSmall), 0);
  ASSERT_EQ(run("sweep --data " + path("data") + " --gammas 0,2 --epochs 1 --batch-size 64 --seed 4 --out " +
                path("sweep.json")),
            0);
  const auto reps = read_reports(path("sweep.json"));
  ASSERT_EQ(reps.size(), 4u);
  EXPECT_EQ(reps[0].label, "id");
  EXPECT_EQ(reps[1].label, "ood");
  EXPECT_EQ(reps[2].gamma, 2.0);
}

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("gen"), 1);  // --out missing
  EXPECT_EQ(run("gen --out " + path("d") + " --variant nope"), 1);
  EXPECT_EQ(run("gen --out " + path("d") + " --lr -1"), 1);
  EXPECT_EQ(run("gen --out " + path("d") + " --noise-std 5"), 1);  // invalid benchmark config
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(CliTest, DataErrorsExitTwo) {
  ASSERT_EQ(run("gen --out " + path("data") + kSmall), 0);
  const std::string text = read_file(path("data/train.split"));
  write_file(path("cut.split"), text.substr(0, text.size() / 2));
  EXPECT_EQ(run("train --split " + path("cut.split") + " --out " + path("m.ckpt") + " --epochs 1"), 2);
  EXPECT_NE(read_file(path("stderr.txt")).find("line "), std::string::npos);

  write_file(path("bad.ckpt"), "not a checkpoint\n");
  EXPECT_EQ(run("eval --checkpoint " + path("bad.ckpt") + " --split " + path("data/train.split")), 2);
  write_file(path("bad.json"), "{");
  EXPECT_EQ(run("report " + path("bad.json")), 2);
}

TEST_F(CliTest, NonFiniteLossExitsThree) {
  ASSERT_EQ(run("gen --out " + path("data") + kSmall), 0);
  // a huge learning rate drives the logits to overflow
  EXPECT_EQ(run("train --split " + path("data/train.split") + " --out " + path("m.ckpt") +
                " --lr 1e300 --epochs 3 --batch-size 16 --variant ce"),
            3);
  EXPECT_NE(read_file(path("stderr.txt")).find("numerical"), std::string::npos);
}

}  // namespace
}  // namespace lpf
