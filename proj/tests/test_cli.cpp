#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("cast_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(CAST_BINARY) + " " + args + " > " + (workdir() / "stdout.txt").string() + " 2> " +
                          (workdir() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string data() { return "--data " + (workdir() / "corpus" / "data.json").string(); }

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ASSERT_EQ(run("synth --out " + (workdir() / "corpus").string() +
                  " --train-per-event 16 --dev-per-event 4 --test-per-event 8 --seed 3"),
              0)
        << slurp(workdir() / "stderr.txt");
  }
};

}  // namespace

TEST_F(Cli, SynthWritesCorpusFiles) {
  for (const char* f : {"train.tsv", "dev.tsv", "test.tsv", "registry.json", "data.json"}) {
    EXPECT_TRUE(fs::exists(workdir() / "corpus" / f)) << f;
  }
  EXPECT_EQ(slurp(workdir() / "corpus" / "train.tsv").substr(0, 23), "id\ttext\tlabel\tevent_id\n");
}

TEST_F(Cli, TrainThenEvaluate) {
  const auto dir = workdir() / "run_ab";
  ASSERT_EQ(run("train " + data() + " --source A --target B --epochs 2 --out " + dir.string()), 0)
      << slurp(workdir() / "stderr.txt");
  for (const char* f : {"checkpoint.castckpt", "vocab.txt", "history.csv", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_TRUE(manifest.contains("run_id"));
  ASSERT_EQ(run("evaluate --run " + dir.string()), 0) << slurp(workdir() / "stderr.txt");
  const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(report.at("n").get<int>(), 8);
  EXPECT_TRUE(fs::exists(dir / "confusion.csv"));
}

TEST_F(Cli, TargetInsideSourceIsAPlanError) {
  EXPECT_EQ(run("many-to-one " + data() + " --sets \"A+B\" --target B --epochs 2 --out " +
                (workdir() / "m2o").string()),
            2);
  EXPECT_NE(slurp(workdir() / "stderr.txt").find("B"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("train --source A"), 2);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run("train " + data() + " --source A --target ZZ --epochs 2 --out " + (workdir() / "zz").string()), 2);
}

TEST_F(Cli, MatrixWritesSquareCsv) {
  const auto out = workdir() / "matrix";
  ASSERT_EQ(run("matrix " + data() + " --epochs 2 --out " + out.string()), 0) << slurp(workdir() / "stderr.txt");
  const std::string csv = slurp(out / "matrix.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "source,A,B,C");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_TRUE(fs::exists(out / "correlation.csv"));
  EXPECT_TRUE(nlohmann::json::parse(slurp(out / "matrix.json")).at("complete").get<bool>());
}
