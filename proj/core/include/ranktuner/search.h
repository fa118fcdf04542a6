#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ranktuner/adapter.h"
#include "ranktuner/model.h"
#include "ranktuner/random.h"
#include "ranktuner/surrogate.h"
#include "ranktuner/task.h"
#include "ranktuner/train.h"

namespace ranktuner {

struct Measurement {
  double validation = 0.0;
  double test = 0.0;
  friend bool operator==(const Measurement&, const Measurement&) = default;
};

// Measured accuracy per (context, task, rank sequence). Insertions can be
// mirrored to disk through on_insert.
class EvalCache {
 public:
  static std::string key(const std::string& context, const std::string& task_id,
                         const RankConfig& config);

  std::optional<Measurement> find(const std::string& key) const;
  void insert(const std::string& key, const Measurement& m);
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Measurement>& entries() const { return entries_; }

  std::function<void(const std::string&, const Measurement&)> on_insert;

 private:
  std::map<std::string, Measurement> entries_;
};

// Replaces real recovery, e.g. with a planted function in tests.
using Evaluator = std::function<Measurement(const RankConfig&, const Task&)>;

struct SearchEnv {
  ModelGraph pruned;
  Task target;
  RankSpace space;
  std::vector<bool> tunable;
  TrainConfig recovery;
  std::uint64_t seed = 0;
  std::string context;  // separates cache entries of different pruned models
  std::shared_ptr<EvalCache> cache = std::make_shared<EvalCache>();
  Evaluator evaluator;  // empty: attach adapters and recover
  std::size_t recovery_runs = 0;
};

SearchEnv make_env(ModelGraph pruned, Task target, const RankSpace& space,
                   const std::set<std::size_t>& protected_blocks, const TrainConfig& recovery,
                   std::uint64_t seed);

// Cached recovery + evaluation of `config` on `task`. A miss increments
// env.recovery_runs.
Measurement measure(SearchEnv& env, const RankConfig& config, const Task& task);

struct SearchParams {
  std::size_t n_init = 8;  // per offline task
  std::size_t m_candidates = 512;
  double epsilon = 0.01;
  std::size_t k = 2;
  std::size_t max_iters = 12;
  std::size_t pool_size = 4096;
  std::size_t top_t = 3;
  std::vector<std::size_t> surrogate_dims = {32, 32, 32, 1};
  FitOptions meta_fit = {1000, 1e-2};
  FitOptions online_fit = {200, 1e-2};

  void validate() const;
  friend bool operator==(const SearchParams&, const SearchParams&) = default;
};

struct HistoryEntry {
  std::size_t iteration = 0;
  RankConfig config;
  double predicted = 0.0;        // Q before the online update
  double measured = 0.0;         // P, validation accuracy
  double predicted_after = 0.0;  // Q after the online update
};

struct SearchState {
  Surrogate surrogate;
  std::vector<EvalRecord> records;  // offline then online
  std::size_t iteration = 0;
  std::vector<HistoryEntry> history;
  bool converged = false;

  std::vector<EvalRecord> online_records() const;
};

// Number of configurations in the solution space (exact up to 2^53).
double solution_space_size(const SearchEnv& env);
// Every configuration in lexicographic order. Throws InputError above `limit`.
std::vector<RankConfig> enumerate_space(const SearchEnv& env, std::size_t limit = 1 << 20);
std::vector<RankConfig> sample_configs(const SearchEnv& env, std::size_t m, Rng& rng);

SearchState initialization_phase(SearchEnv& env, std::size_t n_init,
                                 const std::vector<Task>& offline_tasks,
                                 const SearchParams& params);
// Index of the best score; ties go to the lexicographically smallest ranks.
std::size_t argmax_config(const std::vector<RankConfig>& configs,
                          const std::vector<double>& scores);
void iteration_step(SearchEnv& env, SearchState& state, std::size_t m_candidates,
                    const SearchParams& params);
bool has_converged(const SearchState& state, double epsilon, std::size_t k);

struct Candidate {
  RankConfig config;
  double predicted = 0.0;
  Measurement measured;
};

struct Selection {
  Candidate best;
  std::vector<Candidate> measured;  // top_t by Q, in that order
};
Selection final_selection(SearchEnv& env, const SearchState& state, std::size_t pool_size,
                          std::size_t top_t);

struct SearchResult {
  std::string method;
  RankConfig config;
  double validation_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::optional<double> predicted;
  std::size_t iterations = 0;
  std::size_t recovery_runs = 0;
  std::size_t evaluations = 0;  // target-task configs measured, hits included
  bool converged = true;
  std::vector<HistoryEntry> history;
  std::vector<Candidate> final_candidates;
};

// Initialization, iterations until has_converged or max_iters, final
// selection. R_H* is the best measured target configuration.
SearchResult run_rankadaptor(SearchEnv& env, const std::vector<Task>& offline_tasks,
                             const SearchParams& params);

enum class BaselineKind { kUniform8, kRamp, kRandomSearch };
std::string_view baseline_name(BaselineKind kind);
BaselineKind parse_baseline(std::string_view name);

// uniform8 and ramp are single recoveries; random_search measures `budget`
// uniform draws and keeps the best by validation accuracy.
SearchResult run_baseline(SearchEnv& env, BaselineKind kind, std::size_t budget = 1);

void to_json(nlohmann::json& j, const SearchParams& p);
void from_json(const nlohmann::json& j, SearchParams& p);
void to_json(nlohmann::json& j, const SearchResult& r);
// iteration,ranks,predicted,measured
std::string history_csv(const SearchResult& r);

}  // namespace ranktuner
