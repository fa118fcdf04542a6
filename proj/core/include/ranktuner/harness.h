#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ranktuner/adapter.h"
#include "ranktuner/model.h"
#include "ranktuner/pruner.h"
#include "ranktuner/search.h"
#include "ranktuner/task.h"
#include "ranktuner/train.h"

namespace ranktuner {

struct ExperimentConfig {
  std::string name = "experiment";
  std::filesystem::path output_dir = "out";
  std::uint64_t seed = 0;

  ModelSpec model = {32, 32, 6, 4, 64, 2};
  std::uint64_t model_seed = 7;

  std::vector<std::string> target_tasks;
  std::vector<std::string> offline_tasks;
  // Tasks the dense model is pretrained on; default is every task kind.
  std::vector<std::string> pretrain_tasks = {"parity-of-marked", "majority-token",
                                             "duplicate-detect", "sorted-order"};
  std::string calibration_task;  // empty: first target task

  std::uint64_t data_seed = 3;
  TaskSizes sizes = {1024, 2048, 2048, 6};

  std::vector<double> rates;
  ImportanceOrder order = ImportanceOrder::kElement1;
  std::size_t n_calibration = 10;
  std::vector<std::size_t> protected_blocks;  // empty: first and last

  RankSpace ranks;
  TrainConfig pretrain = {30, 16, 3e-3, OptimizerKind::kAdam, 7};
  // Shared dense checkpoint; empty: <output_dir>/<name>/checkpoints/dense.json.
  std::filesystem::path dense_checkpoint;
  TrainConfig recovery = {8, 16, 3e-3, OptimizerKind::kAdam, 0};
  SearchParams search;
  std::vector<std::string> methods = {"uniform8", "ramp", "random_search", "rankadaptor"};

  std::filesystem::path experiment_dir() const { return output_dir / name; }
  std::set<std::size_t> protected_set() const;
  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Strict: unknown keys and wrongly typed values throw ConfigError with the
// field path. RANKTUNER_SEED, when set, replaces "seed".
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

struct ReportRow {
  std::string method;
  double rate = 0.0;
  std::vector<double> values;  // percent, 2 decimals, one per task
  double average = 0.0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct ReportTable {
  std::vector<std::string> tasks;
  std::vector<ReportRow> rows;

  // Accuracies in [0, 1]; stored as rounded percentages.
  void add_row(const std::string& method, double rate, const std::vector<double>& accuracies);
  const ReportRow* find(const std::string& method, double rate) const;
  friend bool operator==(const ReportTable&, const ReportTable&) = default;
};

// 0.6038 -> "60.38"
std::string format_percent(double accuracy);
std::string format_rate(double rate);

std::string report_csv(const ReportTable& table);
std::string report_markdown(const ReportTable& table);
ReportTable parse_report_csv(const std::string& text);

enum class ReportFormat { kCsv, kMarkdown };
// Writes <stem>.csv and/or <stem>.md. Throws InputError on an empty table and
// std::runtime_error on unwritable paths.
std::vector<std::filesystem::path> emit_report(const ReportTable& table,
                                               const std::vector<ReportFormat>& formats,
                                               const std::filesystem::path& stem);

struct RateOutcome {
  double rate = 0.0;
  PrunePlan plan;
  std::map<std::string, Measurement> pruned_accuracy;  // per target task, no adapters
  std::map<std::string, std::map<std::string, SearchResult>> results;  // task -> method
};

struct ExperimentOutcome {
  ReportTable table;
  std::vector<RateOutcome> rates;
  std::size_t recovery_runs = 0;  // cache misses during this run
  std::filesystem::path directory;
};

struct RunOptions {
  bool verbose = false;
};

// Layout: <output_dir>/<name>/{checkpoints/, cache.jsonl, results.json,
// report.csv, report.md}. Every measurement is appended to cache.jsonl as it
// happens, so an interrupted run resumes where it stopped.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

// Dense model for cfg: loaded from the checkpoint when present, otherwise
// pretrained and saved there.
ModelGraph dense_model(const ExperimentConfig& cfg, const RunOptions& options = {});
std::vector<Task> make_tasks(const ExperimentConfig& cfg, const std::vector<std::string>& names);

// Pruned model plus the plan that produced it, as one JSON file. load_pruned
// also accepts a bare checkpoint (plan left empty).
void save_pruned(const std::filesystem::path& path, const ModelGraph& model, const PrunePlan& plan);
std::pair<ModelGraph, PrunePlan> load_pruned(const std::filesystem::path& path);

// Cache persistence: one JSON object per line {"key", "validation", "test"}.
void load_cache(EvalCache& cache, const std::filesystem::path& path);

}  // namespace ranktuner
