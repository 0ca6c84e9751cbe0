#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(ENCDOT_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {-1, ""};
  std::string out;
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) out += buf.data();
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("encdot_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void write(const std::string& name, const std::string& text) const { std::ofstream(path(name)) << text; }

  std::string slurp(const std::string& name) const {
    std::ifstream in(path(name));
    return {std::istreambuf_iterator<char>(in), {}};
  }

  // Small corpus plus a tiny model trained for a few steps.
  void gen_and_train(long steps) {
    write("synth.json", R"({"utterances": 30, "lexicon_size": 10, "iv_terms": 8, "oov_terms": 4})");
    ASSERT_EQ(run("gen -c " + path("synth.json") + " -o " + path("data")).code, 0);
    write("train.json", R"({
      "inventory": "data/inventory.json",
      "corpora": ["data/train.jsonl"],
      "batch_size": 4,
      "schedule": {"warmup_steps": 10, "total_steps": 100, "peak_lr": 0.003},
      "encoder": {"layers": 1, "heads": 2, "d_model": 16, "d_ff": 32, "N": 32}
    })");
    const auto r = run("train -c " + path("train.json") + " -o " + path("ckpt") + " --steps " + std::to_string(steps));
    ASSERT_EQ(r.code, 0) << r.out;
  }

  fs::path dir_;
};

TEST_F(CliTest, ParamsReportsSharingSaving) {
  const auto r = run("params");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("separated - shared"), std::string::npos);
  EXPECT_NE(r.out.find("3159040"), std::string::npos) << r.out;
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("search -m").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(CliTest, DataErrors) {
  write("bad.json", "{not json");
  const auto r = run("gen -c " + path("bad.json") + " -o " + path("out"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("bad.json"), std::string::npos);
  write("inconsistent.json", R"({"dev_fraction": 0.7, "test_fraction": 0.6})");
  EXPECT_EQ(run("gen -c " + path("inconsistent.json") + " -o " + path("out")).code, 2);
  write("noinv.json", R"({"corpora": ["x.jsonl"]})");
  EXPECT_EQ(run("train -c " + path("noinv.json") + " -o " + path("ck")).code, 2);
}

TEST_F(CliTest, CheckpointVersionMismatchIsDataError) {
  gen_and_train(0);
  auto bytes = [&] {
    std::ifstream in(path("ckpt/step-0.ckpt"), std::ios::binary);
    return std::string{std::istreambuf_iterator<char>(in), {}};
  }();
  bytes[8] = static_cast<char>(bytes[8] + 1);
  std::ofstream(path("old.ckpt"), std::ios::binary) << bytes;
  const auto r = run("search -m " + path("old.ckpt") + " --corpus " + path("data/test.jsonl") + " -q " +
                     path("data/test_iv_queries.jsonl") + " -o " + path("hits.jsonl"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("version"), std::string::npos) << r.out;
}

TEST_F(CliTest, EmptyQueryListGivesEmptyHitFile) {
  gen_and_train(0);
  write("none.jsonl", "");
  const auto r = run("search -m " + path("ckpt/step-0.ckpt") + " --corpus " + path("data/test.jsonl") + " -q " +
                     path("none.jsonl") + " -o " + path("hits.jsonl"));
  EXPECT_EQ(r.code, 0) << r.out;
  ASSERT_TRUE(fs::exists(path("hits.jsonl")));
  EXPECT_EQ(fs::file_size(path("hits.jsonl")), 0u);
}

TEST_F(CliTest, PipelineIsDeterministicAndReportsTwv) {
  gen_and_train(60);
  EXPECT_TRUE(fs::exists(path("ckpt/train_config.resolved.json")));
  EXPECT_TRUE(fs::exists(path("data/synth_config.resolved.json")));
  EXPECT_TRUE(fs::exists(path("ckpt/step-60.ckpt")));
  const std::string search = "search -m " + path("ckpt/step-60.ckpt") + " --corpus " + path("data/test.jsonl") +
                             " -q " + path("data/test_iv_queries.jsonl") + " -t 0.3 -o ";
  ASSERT_EQ(run(search + path("hits.jsonl")).code, 0);
  const auto r = run("eval --hits " + path("hits.jsonl") + " --refs " + path("data/test_iv_refs.jsonl") +
                     " --corpus " + path("data/test.jsonl") + " --inventory " + path("data/inventory.json") + " -o " +
                     path("report.json") + " --det " + path("det.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto report = json::parse(slurp("report.json"));
  EXPECT_TRUE(report.contains("mtwv"));
  EXPECT_TRUE(report.contains("atwv"));
  EXPECT_GE(report["mtwv"].get<double>(), report["atwv"].get<double>() - 1e-12);
  EXPECT_NE(slurp("det.csv").find("threshold,p_miss,p_fa"), std::string::npos);

  // Same seed, same checkpoint bytes and same hits.
  const auto first = slurp("hits.jsonl");
  fs::rename(path("ckpt"), path("ckpt_a"));
  gen_and_train(60);
  ASSERT_EQ(run(search + path("hits_b.jsonl")).code, 0);
  EXPECT_EQ(first, slurp("hits_b.jsonl"));
  std::ifstream a(path("ckpt_a/step-60.ckpt"), std::ios::binary), b(path("ckpt/step-60.ckpt"), std::ios::binary);
  EXPECT_TRUE(std::equal(std::istreambuf_iterator<char>(a), {}, std::istreambuf_iterator<char>(b), {}));
}

TEST_F(CliTest, EvalNeedsSpeechDuration) {
  write("h.jsonl", "");
  write("r.jsonl", "");
  EXPECT_EQ(run("eval --hits " + path("h.jsonl") + " --refs " + path("r.jsonl")).code, 1);
}

}  // namespace
