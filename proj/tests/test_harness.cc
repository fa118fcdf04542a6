#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "ranktuner/error.h"
#include "ranktuner/harness.h"

using namespace ranktuner;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string config_error(const json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

json tiny_config(const fs::path& out) {
  json j = json::parse(R"({
    "name": "tiny",
    "seed": 5,
    "model": {"vocab_size": 16, "d_model": 8, "n_blocks": 4, "n_heads": 2, "d_ff": 8},
    "tasks": {"target": ["sorted", "majority"], "offline": ["parity"]},
    "data": {"train": 64, "validation": 32, "test": 32, "seq_len": 5},
    "pruning": {"rates": [0.2, 0.3], "n_calibration": 8},
    "pretrain": {"epochs": 2, "learning_rate": 0.01},
    "recovery": {"epochs": 1, "learning_rate": 0.003},
    "search": {"n_init": 2, "max_iters": 2, "m_candidates": 16, "pool_size": 32, "top_t": 2,
               "meta_steps": 50, "online_steps": 20}
  })");
  j["output_dir"] = out.string();
  return j;
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) { setenv(name, value, 1); }
  ~ScopedEnv() { unsetenv(name_); }

 private:
  const char* name_;
};

}  // namespace

TEST(LoadConfig, MinimalConfigGetsDefaults) {
  const auto cfg = parse_config(json::parse(R"({"tasks": {"target": ["parity"]},
                                                "pruning": {"rates": [0.2]}})"));
  EXPECT_EQ(cfg.ranks.candidates, (std::vector<int>{2, 4, 6, 8, 10, 12}));
  EXPECT_EQ(cfg.ranks.default_rank, 8);
  EXPECT_EQ(cfg.target_tasks, (std::vector<std::string>{"parity-of-marked"}));
  EXPECT_EQ(cfg.search, SearchParams{});
  EXPECT_EQ(cfg.methods.size(), 4u);
  EXPECT_EQ(cfg.protected_set(), (std::set<std::size_t>{0, 5}));
}

TEST(LoadConfig, RejectsBadValuesWithFieldPath) {
  EXPECT_NE(config_error(json::parse(R"({"tasks": {"target": ["parity"]},
                                         "pruning": {"rates": [1.2]}})")).find("pruning.rates[0]"),
            std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"tasks": {"target": ["parity"]},
                                         "pruning": {"rates": [0.2]}, "ranks_max": 12})")).find("ranks_max"),
            std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"tasks": {"target": ["parity"]},
                                         "pruning": {"rates": [0.2]},
                                         "search": {"top_k": 3}})")).find("search.top_k"),
            std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"tasks": {"target": ["parity"]},
                                         "pruning": {"rates": [0.2]},
                                         "recovery": {"epochs": -1}})")).find("recovery.epochs"),
            std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"tasks": {"target": []},
                                         "pruning": {"rates": [0.2]}})")).find("tasks.target"),
            std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"tasks": {"target": ["copy3"]},
                                         "pruning": {"rates": [0.2]}})")), "");
  EXPECT_NE(config_error(json::parse(R"({"tasks": {"target": ["parity"]},
                                         "pruning": {"rates": [0.2]},
                                         "methods": ["uniform8", "bogus"]})")).find("bogus"),
            std::string::npos);
}

TEST(LoadConfig, FileErrors) {
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
  const fs::path p = fs::temp_directory_path() / "ranktuner_bad_config.json";
  std::ofstream(p) << "{not json";
  EXPECT_THROW(load_config(p), ConfigError);
  fs::remove(p);
}

TEST(LoadConfig, EnvironmentSeedOverrides) {
  const json j = json::parse(R"({"seed": 3, "tasks": {"target": ["parity"]},
                                 "pruning": {"rates": [0.2]}})");
  EXPECT_EQ(parse_config(j).seed, 3u);
  {
    ScopedEnv env("RANKTUNER_SEED", "42");
    EXPECT_EQ(parse_config(j).seed, 42u);
  }
  {
    ScopedEnv env("RANKTUNER_SEED", "4x");
    EXPECT_THROW(parse_config(j), ConfigError);
  }
}

TEST(LoadConfig, JsonRoundTrip) {
  const auto cfg = parse_config(tiny_config("/tmp/x"));
  const auto again = parse_config(config_to_json(cfg));
  EXPECT_EQ(config_to_json(again), config_to_json(cfg));
}

TEST(Report, PercentFormatting) {
  EXPECT_EQ(format_percent(0.6038), "60.38");
  EXPECT_EQ(format_percent(1.0), "100.00");
  EXPECT_EQ(format_percent(0.0), "0.00");
  EXPECT_EQ(format_rate(0.2), "0.2");
}

TEST(Report, AverageIsMeanOfColumns) {
  ReportTable t;
  t.tasks = {"a", "b", "c"};
  t.add_row("uniform8", 0.2, {0.6038, 0.75, 0.5});
  EXPECT_EQ(t.rows[0].values, (std::vector<double>{60.38, 75.0, 50.0}));
  EXPECT_DOUBLE_EQ(t.rows[0].average, std::round((60.38 + 75.0 + 50.0) / 3.0 * 100) / 100);
  EXPECT_THROW(t.add_row("ramp", 0.2, {0.5}), InputError);
}

TEST(Report, CsvRoundTripAndEmptyTable) {
  ReportTable t;
  t.tasks = {"sorted-order", "majority-token"};
  t.add_row("uniform8", 0.2, {0.81234, 0.99});
  t.add_row("rankadaptor", 0.3, {0.8251953125, 1.0});
  const std::string csv = report_csv(t);
  EXPECT_EQ(csv,
            "method,rate,sorted-order,majority-token,avg\n"
            "uniform8,0.2,81.23,99.00,90.12\n"
            "rankadaptor,0.3,82.52,100.00,91.26\n");
  EXPECT_EQ(parse_report_csv(csv), t);
  EXPECT_EQ(report_csv(parse_report_csv(csv)), csv);
  EXPECT_NE(report_markdown(t).find("| rankadaptor | 0.3 | 82.52 | 100.00 | 91.26 |"),
            std::string::npos);
  EXPECT_THROW(emit_report(ReportTable{}, {ReportFormat::kCsv}, "/tmp/never"), InputError);
  EXPECT_THROW(emit_report(t, {ReportFormat::kCsv}, "/nonexistent/dir/report"), std::runtime_error);
}

TEST(Experiment, RowsArtifactsAndWarmRerun) {
  const fs::path out = fs::temp_directory_path() / "ranktuner_harness_test";
  fs::remove_all(out);
  const ExperimentConfig cfg = parse_config(tiny_config(out));
  const ExperimentOutcome first = run_experiment(cfg);
  EXPECT_EQ(first.table.rows.size(), 8u);
  EXPECT_GT(first.recovery_runs, 0u);
  const fs::path dir = out / "tiny";
  for (const char* f : {"cache.jsonl", "results.json", "report.csv", "report.md",
                        "checkpoints/dense.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  for (const auto& row : first.table.rows) {
    double sum = 0.0;
    for (double v : row.values) sum += v;
    EXPECT_NEAR(row.average, sum / 2.0, 0.005 + 1e-12);
  }
  const std::string csv = read_file(dir / "report.csv");
  EXPECT_EQ(parse_report_csv(csv), first.table);

  const ExperimentOutcome second = run_experiment(cfg);
  EXPECT_EQ(second.recovery_runs, 0u);
  EXPECT_EQ(read_file(dir / "report.csv"), csv);
  EXPECT_EQ(second.table, first.table);

  // losing the tail of the cache only re-runs the missing measurements
  std::string cache = read_file(dir / "cache.jsonl");
  const std::size_t lines = static_cast<std::size_t>(std::count(cache.begin(), cache.end(), '\n'));
  std::size_t cut = cache.size() - 1;
  for (int i = 0; i < 3; ++i) cut = cache.rfind('\n', cut - 1);
  std::ofstream(dir / "cache.jsonl", std::ios::trunc) << cache.substr(0, cut + 1) << "{\"key\": \"trunc";
  const ExperimentOutcome third = run_experiment(cfg);
  EXPECT_EQ(third.recovery_runs, 3u);
  EXPECT_EQ(read_file(dir / "report.csv"), csv);
  (void)lines;
  fs::remove_all(out);
}
