#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "fusionbench/analysis.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kTinyConfig = R"({
  "train_data": {"count": 10}, "test_data": {"count": 4}, "patch_data": {"count": 3},
  "detector": {"train": {"epochs": 1}, "detection_threshold": 0.3},
  "attack": {"max_outer_iterations": 2, "inner_steps": 3, "search_iterations": 1, "patch_sweeps": 1},
  "defense_scenes": 2, "swap_scenes": 3,
  "defenses": [{"kind": "baseline"}, {"kind": "maxssn_lel"}]
})";

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fusionbench");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = fusionbench::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "fusionbench_cli"; }
  static fs::path config() { return root() / "tiny.json"; }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    std::ofstream(config()) << kTinyConfig;
  }

  // Runs the whole pipeline into `dir`; returns the first failing result.
  static Result pipeline(const fs::path& dir, const std::vector<std::string>& extra = {}) {
    const std::vector<std::vector<std::string>> steps{
        {"gen"},
        {"train"},
        {"attack", "--kind", "disappearance"},
        {"attack", "--kind", "spoof"},
        {"attack", "--kind", "patch"},
        {"attack", "--kind", "random_patch"},
        {"swap"},
        {"defend", "--train-missing"},
        {"analyze"}};
    for (const auto& step : steps) {
      std::vector<std::string> args{"--config", config().string(), "--out", dir.string()};
      args.insert(args.end(), extra.begin(), extra.end());
      args.insert(args.end(), step.begin(), step.end());
      const Result r = cli(args);
      if (r.code != 0) return r;
    }
    return {0, "", ""};
  }
};

TEST_F(CliTest, PipelineIsByteReproducible) {
  const Result a = pipeline(root() / "a");
  ASSERT_EQ(a.code, 0) << a.err;
  const Result b = pipeline(root() / "b", {"--workers", "2"});
  ASSERT_EQ(b.code, 0) << b.err;
  int compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(root() / "a")) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), root() / "a");
    if (rel == "config.json") continue;  // names its own output directory
    ASSERT_TRUE(fs::exists(root() / "b" / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(root() / "b" / rel)) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 20);

  // Re-running one command in place with --overwrite reproduces the same bytes.
  const std::string before = slurp(root() / "a" / "records" / "baseline.spoof.jsonl");
  const Result again = cli({"--config", config().string(), "--out", (root() / "a").string(),
                            "--overwrite", "attack", "--kind", "spoof"});
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(slurp(root() / "a" / "records" / "baseline.spoof.jsonl"), before);
}

TEST_F(CliTest, ArtifactsCarryProvenance) {
  const fs::path dir = root() / "prov";
  ASSERT_EQ(pipeline(dir).code, 0);
  const json manifest = json::parse(slurp(dir / "data" / "manifest.json"));
  const std::string hash = manifest.at("config_hash");
  EXPECT_EQ(hash.size(), 16u);
  EXPECT_EQ(manifest.at("seed"), 7);
  EXPECT_EQ(manifest.at("splits").at("test").at("scenes"), 4);
  const json model = json::parse(slurp(dir / "models" / "baseline.json"));
  EXPECT_EQ(model.at("config_hash"), hash);
  EXPECT_TRUE(model.at("benign").contains("average_precision"));
  fusionbench::Provenance p;
  fusionbench::load_dataset(dir / "data" / "test.fbds", &p);
  EXPECT_EQ(p.config_hash, hash);
  fusionbench::load_checkpoint(dir / "models" / "baseline.fbck", &p);
  EXPECT_EQ(p.config_hash, hash);
  for (const auto& e : fs::directory_iterator(dir / "records"))
    for (const auto& r : fusionbench::read_records(e.path())) {
      EXPECT_EQ(r.config_hash, hash);
      EXPECT_EQ(r.seed, 7u);
    }
}

TEST_F(CliTest, AnalyzeAggregatesEqualRecount) {
  const fs::path dir = root() / "agg";
  ASSERT_EQ(pipeline(dir).code, 0);
  const json report = json::parse(slurp(dir / "reports" / "analysis.json"));
  for (const char* stem : {"baseline.disappearance", "baseline.spoof", "baseline.patch"}) {
    const auto records = fusionbench::read_records(dir / "records" / (std::string(stem) + ".jsonl"));
    int ok = 0;
    std::vector<double> dist;
    for (const auto& r : records) {
      ok += r.success;
      if (r.success) dist.push_back(r.distortion);
    }
    const json& s = report.at("suites").at(stem);
    EXPECT_EQ(s.at("runs"), records.size());
    EXPECT_EQ(s.at("successes"), ok);
    const double rate = records.empty() ? 0.0 : static_cast<double>(ok) / records.size();
    EXPECT_EQ(s.at("success_rate").get<double>(), rate);
    EXPECT_EQ(s.at("distortion_median").get<double>(),
              fusionbench::summarize_distortion(dist).median);
    EXPECT_TRUE(fs::exists(dir / "plots" / (std::string(stem) + ".distortion.svg")));
    const json per_suite = json::parse(slurp(dir / "reports" / (std::string(stem) + ".json")));
    EXPECT_EQ(per_suite.at("summary"), s);
  }
  EXPECT_TRUE(fs::exists(dir / "plots" / "success_rates.svg"));
  EXPECT_NE(slurp(dir / "reports" / "defense_table.txt").find("MaxSSN + LEL"), std::string::npos);
}

TEST_F(CliTest, ExitCodesAndOverwriteRefusal) {
  const fs::path dir = root() / "codes";
  const std::string cfg = config().string();
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
  EXPECT_EQ(cli({"--config", (root() / "missing.json").string(), "gen"}).code, 1);
  {
    std::ofstream(root() / "bad.json") << R"({"tarin_data": {}})";
    const Result r = cli({"--config", (root() / "bad.json").string(), "gen"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("tarin_data"), std::string::npos);
  }
  // Commands needing inputs fail cleanly before gen.
  const Result early = cli({"--config", cfg, "--out", dir.string(), "train"});
  EXPECT_EQ(early.code, 1);
  EXPECT_NE(early.err.find("gen"), std::string::npos);

  ASSERT_EQ(cli({"--config", cfg, "--out", dir.string(), "gen"}).code, 0);
  const Result refused = cli({"--config", cfg, "--out", dir.string(), "gen"});
  EXPECT_EQ(refused.code, 1);
  EXPECT_NE(refused.err.find("--overwrite"), std::string::npos);
  EXPECT_EQ(cli({"--config", cfg, "--out", dir.string(), "--overwrite", "gen"}).code, 0);

  ASSERT_EQ(cli({"--config", cfg, "--out", dir.string(), "train"}).code, 0);
  EXPECT_EQ(cli({"--config", cfg, "--out", dir.string(), "train"}).code, 1);
  const Result unknown = cli({"--config", cfg, "--out", dir.string(), "train", "--defense", "x"});
  EXPECT_EQ(unknown.code, 1);

  // The defense table refuses to run with a missing row unless asked to train it.
  const Result missing = cli({"--config", cfg, "--out", dir.string(), "defend"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("maxssn_lel"), std::string::npos);

  // An attack suite exits 0 whatever its success rate.
  EXPECT_EQ(cli({"--config", cfg, "--out", dir.string(), "attack", "--kind", "spoof", "--limit", "2"}).code, 0);
}

}  // namespace
