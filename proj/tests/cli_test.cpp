#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "qaa/io.hpp"

namespace qaa {
namespace {

namespace fs = std::filesystem;

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "qaa_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int qaa(const std::string& args) {
  const std::string cmd = std::string(QAA_CLI) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string put(const std::string& name, const std::string& text) {
  const auto p = (work() / name).string();
  write_text(p, text);
  return p;
}

std::string at(const std::string& name) { return (work() / name).string(); }

const char* kData = R"("data": {"kind": "synthetic", "classes": 3, "count": 150, "image_size": 8, "pattern_seed": 1})";

TEST(Cli, TrainQatAttackEvaluatePipeline) {
  const auto train = put("train.json", std::string("{") + kData +
                                           R"(, "architecture": "mlp-3", "train": {"epochs": 1, "batch_size": 32}})");
  ASSERT_EQ(qaa("train --config " + train + " --out " + at("m32.qaam")), 0);
  ASSERT_EQ(qaa("qat --config " + train + " --bitwidth 2 --init " + at("m32.qaam") + " --out " + at("m2.qaam")), 0);
  EXPECT_EQ(load_model(at("m2.qaam")).nominal_bitwidth(), 2);

  const auto attack = put("attack.json", std::string("{") + kData +
                                             R"(, "examples": 30, "attack": {"family": "mim", "iterations": 3}})");
  ASSERT_EQ(qaa("attack --config " + attack + " --model " + at("m32.qaam") + " --out " + at("adv.qaad")), 0);
  EXPECT_EQ(load_adversarial(at("adv.qaad")).size(), 30);

  const auto eval = put("eval.json", R"({"targets": [{"id": "fp", "model": ")" + at("m32.qaam") +
                                         R"("}, {"id": "q2", "model": ")" + at("m2.qaam") + R"("}]})");
  ASSERT_EQ(qaa("evaluate --config " + eval + " --adversarial " + at("adv.qaad") + " --out " + at("eval")), 0);
  const auto csv = read_text(at("eval/report.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "substitute,attack,bitwidth,fp,q2,Avg,white_box");
}

TEST(Cli, UsageAndInputErrorsExitOne) {
  EXPECT_EQ(qaa("--help"), 0);
  EXPECT_EQ(qaa("frobnicate"), 1);
  EXPECT_EQ(qaa("train --bogus-flag"), 1);
  EXPECT_EQ(qaa("train --config " + at("absent.json") + " --out " + at("x.qaam")), 1);
  EXPECT_EQ(qaa("train --config " + put("broken.json", "{\"data\": ") + " --out " + at("x.qaam")), 1);
  EXPECT_EQ(qaa("train --config " + put("nodata.json", "{}") + " --out " + at("x.qaam")), 1);
  const auto corrupt = put("corrupt.qaam", "QAAM garbage");
  EXPECT_EQ(qaa("ptq --config " + put("ptq.json", std::string("{") + kData + "}") + " --model " + corrupt +
                " --bitwidth 4 --out " + at("y.qaam")),
            1);
  EXPECT_FALSE(fs::exists(at("y.qaam")));
}

TEST(Cli, NumericFailureExitsTwo) {
  const auto diverge = put("diverge.json", std::string("{") + kData +
                                               R"(, "train": {"epochs": 1, "batch_size": 32, "learning_rate": 1e30}})");
  EXPECT_EQ(qaa("train --config " + diverge + " --arch mlp-3 --out " + at("d.qaam")), 2);
  EXPECT_FALSE(fs::exists(at("d.qaam")));
}

}  // namespace
}  // namespace qaa
