// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include <gtest/gtest.h>
#include <json.hpp>

#include "ilcp/model.hpp"
#include "ilcp/trace.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void put(const fs::path &p, const std::string &text) { std::ofstream(p, std::ios::binary) << text; }

struct Result {
  int code = -1;
  std::string out;
};

Result run(const fs::path &dir, const std::string &args, const std::string &env = "") {
  const auto log = dir / "stdout.txt";
  const std::string cmd =
      "cd '" + dir.string() + "' && " + env + " '" + ILCP_BIN + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

class Cli : public ::testing::Test {
protected:
  static fs::path dir;

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / ("ilcp_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    put(dir / "scenario.json", R"({"n_ues": 12, "duration_steps": 6000, "seed": 8})");
    put(dir / "train.json", R"({"model": {"d": 16, "heads": 2, "layers": 1, "candidates": 4, "cell_rows": 16},
      "train": {"streams": 8, "chunks_per_epoch": 3, "max_epochs": 3, "lr": 0.003},
      "split": {"segment_steps": 1000}})");
    put(dir / "eval.json", R"({"split": {"segment_steps": 1000}, "eval": {"bootstrap": 100}})");
    ASSERT_EQ(run(dir, "gen --config scenario.json --out scen").code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }
};

fs::path Cli::dir;

} // namespace

TEST_F(Cli, GenIsReproducibleAndEveryUeHandsOver) {
  ASSERT_EQ(run(dir, "gen --config scenario.json --out scen2").code, 0);
  EXPECT_EQ(slurp(dir / "scen/trace.csv"), slurp(dir / "scen2/trace.csv"));
  EXPECT_EQ(slurp(dir / "scen/topology.json"), slurp(dir / "scen2/topology.json"));
  ASSERT_EQ(run(dir, "gen --config scen/manifest.json --out scen3").code, 0);
  EXPECT_EQ(slurp(dir / "scen/trace.csv"), slurp(dir / "scen3/trace.csv"));

  const auto trace = ilcp::load_scenario(dir / "scen");
  const auto events = ilcp::extract_handover_events(trace);
  std::set<std::uint32_t> ues;
  for (const auto &e : events)
    ues.insert(e.ue.value);
  EXPECT_EQ(ues.size(), 12u);
}

TEST_F(Cli, DefaultScenarioHandsOverForEveryUe) {
  put(dir / "empty.json", "{}");
  ASSERT_EQ(run(dir, "gen --config empty.json --out scen_default").code, 0);
  const auto trace = ilcp::load_scenario(dir / "scen_default");
  std::set<std::uint32_t> ues;
  for (const auto &e : ilcp::extract_handover_events(trace))
    ues.insert(e.ue.value);
  EXPECT_EQ(ues.size(), 48u);
}

TEST_F(Cli, SeedEnvironmentOverridesConfig) {
  ASSERT_EQ(run(dir, "gen --config scenario.json --out scen_env", "ILCP_SEED=99").code, 0);
  EXPECT_NE(slurp(dir / "scen/trace.csv"), slurp(dir / "scen_env/trace.csv"));
  EXPECT_EQ(json::parse(slurp(dir / "scen_env/manifest.json")).at("seed"), 99);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_NE(run(dir, "gen --out nowhere").code, 0);
  EXPECT_NE(run(dir, "gen --config missing.json --out nowhere").code, 0);
  put(dir / "bad.json", "{\"n_ues\": -3}");
  EXPECT_NE(run(dir, "gen --config bad.json --out nowhere").code, 0);
  const auto r = run(dir, "eval --trace scen --modes cold,hot");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("hot"), std::string::npos);
  EXPECT_NE(run(dir, "train --trace scen --mode fast --out x.ckpt").code, 0);
}

TEST_F(Cli, HelpEmbedsDefaults) {
  const auto r = run(dir, "train --help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("\"patience\": 8"), std::string::npos);
  EXPECT_NE(run(dir, "gen --help").out.find("\"spacing_m\""), std::string::npos);
}

TEST_F(Cli, TrainTagsModeAndIsReproducible) {
  ASSERT_EQ(run(dir, "train --config train.json --trace scen --mode zk --out zk/zk.ckpt --quiet").code, 0);
  EXPECT_EQ(ilcp::model::load_checkpoint(dir / "zk/zk.ckpt").info.mode, "zero_knowledge");
  EXPECT_EQ(json::parse(slurp(dir / "zk/manifest.json")).at("checkpoint_mode"), "zero_knowledge");

  ASSERT_EQ(run(dir, "train --config zk/manifest.json --trace scen --out zk2/zk.ckpt --quiet").code, 0);
  EXPECT_EQ(slurp(dir / "zk/zk.ckpt"), slurp(dir / "zk2/zk.ckpt"));
  EXPECT_EQ(slurp(dir / "zk/training_log.csv"), slurp(dir / "zk2/training_log.csv"));
  for (const auto &e : fs::directory_iterator(dir / "zk"))
    EXPECT_EQ(e.path().filename().string().find(".tmp"), std::string::npos);
}

TEST_F(Cli, RobustManifestRecordsMixture) {
  ASSERT_EQ(run(dir, "train --config train.json --trace scen --robust --epochs 1 --out rob/r.ckpt --quiet").code, 0);
  const auto m = json::parse(slurp(dir / "rob/manifest.json"));
  EXPECT_EQ(m.at("mixture").at("ratio"), "0.5:0.5");
  EXPECT_EQ(m.at("mixture").at("clean_weight"), 0.5);
  EXPECT_TRUE(ilcp::model::load_checkpoint(dir / "rob/r.ckpt").info.robust);
}

TEST_F(Cli, EvalWritesReproducibleTables) {
  ASSERT_EQ(run(dir, "train --config train.json --trace scen --mode ilcp --out il/il.ckpt --quiet").code, 0);
  const std::string args = "eval --config eval.json --trace scen --ckpt il/il.ckpt --modes ilcp,cold,rule "
                           "--perturb noise --latency-runs 20 --emit-payload ";
  ASSERT_EQ(run(dir, args + "ev1/p.bin --out ev1").code, 0);
  ASSERT_EQ(run(dir, args + "ev2/p.bin --out ev2").code, 0);
  for (const char *f : {"report.json", "postho_curve.csv", "perturb_sweep.csv", "p.bin"})
    EXPECT_EQ(slurp(dir / "ev1" / f), slurp(dir / "ev2" / f)) << f;
  ASSERT_EQ(run(dir, "eval --config ev1/manifest.json --trace scen --ckpt il/il.ckpt --latency-runs 0 --out ev3").code,
            0);
  EXPECT_EQ(slurp(dir / "ev1/report.json"), slurp(dir / "ev3/report.json"));

  std::istringstream curve(slurp(dir / "ev1/postho_curve.csv"));
  std::string line;
  std::getline(curve, line);
  EXPECT_EQ(line, "delta,mode,acc,lo,hi");
  std::set<int> deltas;
  while (std::getline(curve, line))
    deltas.insert(std::stoi(line.substr(0, line.find(','))));
  EXPECT_EQ(deltas.size(), 31u);
  EXPECT_EQ(*deltas.rbegin(), 30);

  std::istringstream sweep(slurp(dir / "ev1/perturb_sweep.csv"));
  std::set<std::string> levels;
  std::getline(sweep, line);
  while (std::getline(sweep, line)) {
    const auto a = line.find(',') + 1;
    levels.insert(line.substr(a, line.find(',', a) - a));
  }
  EXPECT_EQ(levels, (std::set<std::string>{"0", "3", "6", "9", "12"}));

  const auto lat = json::parse(slurp(dir / "ev1/latency.json"));
  EXPECT_TRUE(lat.contains("p99_ms"));
  const auto rep = json::parse(slurp(dir / "ev1/report.json"));
  EXPECT_EQ(rep.at("payload_size_violations"), 0);
}

TEST_F(Cli, InspectMatchesEmittedPayload) {
  ASSERT_EQ(run(dir, "train --config train.json --trace scen --epochs 1 --out pl/il.ckpt --quiet").code, 0);
  ASSERT_EQ(run(dir, "eval --config eval.json --trace scen --ckpt pl/il.ckpt --modes ilcp --latency-runs 0 "
                     "--emit-payload pl/p.bin --out pl")
                .code,
            0);
  EXPECT_EQ(fs::file_size(dir / "pl/p.bin"), 128u);
  const auto r = run(dir, "xn-inspect pl/p.bin");
  ASSERT_EQ(r.code, 0);
  const auto side = json::parse(slurp(dir / "pl/p.bin.json")).at("values");
  std::istringstream in(r.out);
  for (std::size_t i = 0; i < 32; ++i) {
    std::size_t idx = 0;
    float v = 0.0F;
    in >> idx >> v;
    EXPECT_EQ(idx, i);
    EXPECT_EQ(v, side.at(i).get<float>()) << i;
  }
  std::string verdict;
  in >> verdict;
  EXPECT_EQ(verdict, "valid");
}

TEST_F(Cli, InspectZeroTruncatedAndNaN) {
  put(dir / "zero.bin", std::string(128, '\0'));
  const auto z = run(dir, "xn-inspect zero.bin");
  ASSERT_EQ(z.code, 0);
  std::istringstream in(z.out);
  for (int i = 0; i < 32; ++i) {
    int idx = 0;
    double v = 1.0;
    in >> idx >> v;
    EXPECT_EQ(v, 0.0);
  }
  put(dir / "short.bin", std::string(100, '\0'));
  const auto s = run(dir, "xn-inspect short.bin");
  EXPECT_NE(s.code, 0);
  EXPECT_NE(s.out.find("128 bytes"), std::string::npos);
  std::string nan_payload(128, '\0');
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan_payload.data() + 4 * 5, &q, 4);
  put(dir / "nan.bin", nan_payload);
  EXPECT_NE(run(dir, "xn-inspect nan.bin").code, 0);
}
