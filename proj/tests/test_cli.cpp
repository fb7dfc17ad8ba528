#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "epee/evaluation.hpp"
#include "epee/verify.hpp"

namespace epee {
namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("epee_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override {
    if (!HasFailure()) fs::remove_all(dir_);
  }

  // Runs the CLI with `args` from inside the scratch directory.
  RunResult run(const std::string& args) {
    const auto out = dir_ / "stdout.txt";
    const auto err = dir_ / "stderr.txt";
    const std::string cmd = "cd '" + dir_.string() + "' && '" + EPEE_CLI_PATH + "' " + args + " > '" + out.string() +
                            "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string save_traces(const std::string& name, const std::vector<PredictionTrace>& traces) {
    const auto path = (dir_ / name).string();
    write_traces_file(path, traces);
    return path;
  }

  fs::path dir_;
};

TEST_F(Cli, VerifyRandomTracesPassesEverySuite) {
  const auto r = run("verify --random-traces 10000");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  for (const char* suite :
       {"degeneracy-entropy", "degeneracy-patience", "oracle-equivalence", "monotone-tau", "monotone-patience"}) {
    EXPECT_NE(r.out.find(suite), std::string::npos) << suite;
  }
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST_F(Cli, VerifySingleLayerTracesPassVacuously) {
  std::vector<PredictionTrace> traces;
  for (int i = 0; i < 20; ++i) traces.push_back(make_trace(std::to_string(i), 0, Matrix::from_rows({{0.3, 0.7}})));
  const auto path = save_traces("m1.jsonl", traces);
  const auto r = run("verify --traces " + path);
  EXPECT_EQ(r.code, 0) << r.out << r.err;
}

TEST_F(Cli, CorruptTraceIsRejectedWithItsLineNumber) {
  const auto traces = random_traces(3, 1, RandomTraceOptions{4, 4, 3, 3});
  std::ostringstream text;
  write_traces(text, traces);
  std::string body = text.str();
  // Break the second line: its first row no longer sums to 1.
  auto lines_begin = body.find('\n') + 1;
  auto line_end = body.find('\n', lines_begin);
  auto j = nlohmann::json::parse(body.substr(lines_begin, line_end - lines_begin));
  j["probs"][0][0] = j["probs"][0][0].get<double>() + 0.25;
  body = body.substr(0, lines_begin) + j.dump() + body.substr(line_end);
  std::ofstream(dir_ / "bad.jsonl") << body;

  const auto r = run("verify --traces bad.jsonl");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.jsonl:2:"), std::string::npos) << r.err;
  EXPECT_EQ(run("eval --traces bad.jsonl --strategy budgeted").code, 2);
}

TEST_F(Cli, EvalReproducesGridRow) {
  const auto traces = random_traces(300, 3, RandomTraceOptions{6, 6, 4, 4});
  save_traces("t.jsonl", traces);
  ASSERT_EQ(run("grid --traces t.jsonl --tau-list 0.1,0.35,0.6 --patience-list 1..M --out grid.csv").code, 0);
  std::istringstream csv(slurp(dir_ / "grid.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, kGridCsvHeader);
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    std::istringstream fields(line);
    std::string tau, patience;
    std::getline(fields, tau, ',');
    std::getline(fields, patience, ',');
    const auto r = run("eval --traces t.jsonl --strategy epee --tau " + tau + " --patience " + patience);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EvalResult e;
    e.config = policy_from_json(j.at("config"));
    e.accuracy = j.at("accuracy");
    e.macro_f1 = j.at("macro_f1");
    e.speedup = j.at("speedup");
    e.n_samples = j.at("n_samples");
    EXPECT_EQ(grid_csv_row(e), line);
  }
  EXPECT_EQ(rows, 18);
  const auto frontier = nlohmann::json::parse(slurp(dir_ / "frontier.json"));
  EXPECT_FALSE(frontier.empty());
}

TEST_F(Cli, EvalWritesHistogramForExplicitOutDir) {
  save_traces("t.jsonl", random_traces(50, 4, RandomTraceOptions{5, 5, 3, 3}));
  ASSERT_EQ(run("eval --traces t.jsonl --strategy budgeted --budget-layer 2 --out-dir hist").code, 0);
  EXPECT_EQ(slurp(dir_ / "hist" / "exit_histogram.csv"), "layer,count\n1,0\n2,50\n3,0\n4,0\n5,0\n");
  EXPECT_TRUE(fs::exists(dir_ / "hist" / "manifest-eval.json"));
}

TEST_F(Cli, OutputsAreByteIdenticalAcrossRuns) {
  save_traces("t.jsonl", random_traces(200, 5, RandomTraceOptions{6, 6, 3, 3}));
  for (const char* d : {"a", "b"}) {
    ASSERT_EQ(run(std::string("grid --traces t.jsonl --threads 2 --out-dir ") + d).code, 0);
    ASSERT_EQ(run(std::string("curve --traces t.jsonl --out-dir ") + d).code, 0);
  }
  for (const char* f : {"grid.csv", "frontier.json", "curve.csv"}) {
    const auto a = slurp(dir_ / "a" / f);
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, slurp(dir_ / "b" / f)) << f;
  }
  const auto manifest = nlohmann::json::parse(slurp(dir_ / "a" / "manifest-grid.json"));
  for (const char* key : {"versions", "config", "inputs", "outputs", "created_at"}) {
    EXPECT_TRUE(manifest.contains(key)) << key;
  }
  EXPECT_EQ(manifest.at("inputs").at("traces").at("sha256").get<std::string>().size(), 64u);
}

TEST_F(Cli, TrainTraceRoundTripOnSyntheticData) {
  const std::string data = "synthetic:classes=2,per_class=40,vocab=24,signal=4,length=6";
  const auto train =
      run("train --data " + data + " --epochs 2 --quiet --out-dir run --dataset-cache run/cache.json");
  ASSERT_EQ(train.code, 0) << train.err;
  for (const char* f : {"model.bin", "train_report.json", "cache.json", "manifest-train.json"}) {
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  }
  const auto report = nlohmann::json::parse(slurp(dir_ / "run" / "train_report.json"));
  EXPECT_EQ(report.at("epoch_loss").size(), 2u);
  const auto trace = run("trace --model run/model.bin --data " + data + " --split dev --out-dir run");
  ASSERT_EQ(trace.code, 0) << trace.err;
  const auto traces = read_traces_file((dir_ / "run" / "traces.jsonl").string());
  EXPECT_EQ(traces.size(), 12u);
  EXPECT_EQ(traces.front().num_layers(), 6u);
  // Other data means another vocabulary size: a data error, not a crash.
  const auto other = run("trace --model run/model.bin --data synthetic:classes=2,per_class=40,vocab=200,signal=4 "
                         "--out-dir run2");
  EXPECT_EQ(other.code, 2);
}

TEST_F(Cli, ConfigFileSuppliesFlagsAndCommandLineWins) {
  save_traces("t.jsonl", random_traces(40, 6, RandomTraceOptions{4, 4, 3, 3}));
  std::ofstream(dir_ / "cfg.json") << R"({"traces": "t.jsonl", "strategy": "budgeted", "budget_layer": 2})";
  const auto from_file = run("eval --config cfg.json");
  ASSERT_EQ(from_file.code, 0) << from_file.err;
  EXPECT_EQ(nlohmann::json::parse(from_file.out).at("config").at("budget_layer"), 2);
  const auto overridden = run("eval --config cfg.json --budget-layer 3");
  ASSERT_EQ(overridden.code, 0) << overridden.err;
  EXPECT_EQ(nlohmann::json::parse(overridden.out).at("config").at("budget_layer"), 3);

  std::ofstream(dir_ / "bad_cfg.json") << R"({"traces": "t.jsonl", "colour": "red"})";
  EXPECT_EQ(run("eval --config bad_cfg.json").code, 1);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("eval").code, 1);
  EXPECT_EQ(run("verify").code, 1);
  EXPECT_EQ(run("eval --traces missing.jsonl").code, 2);
  EXPECT_EQ(run("--help").code, 0);
  save_traces("t.jsonl", random_traces(10, 7, RandomTraceOptions{4, 4, 3, 3}));
  EXPECT_EQ(run("eval --traces t.jsonl --strategy epee --tau 0.2 --patience 9").code, 2);
  EXPECT_EQ(run("grid --traces t.jsonl --tau-list 0.1,abc").code, 1);
  EXPECT_EQ(run("train --data synthetic:classes=2,per_class=20 --epochs 2 --learning-rate 1e300 --quiet").code, 4);
}

}  // namespace
}  // namespace epee
