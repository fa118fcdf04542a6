#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ranktuner/model.h"
#include "ranktuner/task.h"

namespace ranktuner {

enum class GroupKind { kAttentionHead, kFfnChannel };
std::string_view group_kind_name(GroupKind kind);

enum class ImportanceOrder { kElement1, kElement2 };
std::string_view importance_order_name(ImportanceOrder order);
ImportanceOrder parse_importance_order(std::string_view name);

// A contiguous slice [begin, end) along `axis` (0 = rows, 1 = cols) of one
// parameter. `entries` is the number of scalars inside the slice.
struct ParamSlice {
  std::string param;
  int axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t entries = 0;

  friend bool operator==(const ParamSlice&, const ParamSlice&) = default;
};

// Parameter slices that must disappear together when one head or one FFN
// channel is removed: for head h the Q/K/V output columns and the O input rows
// of that head; for channel c the FFN-up column, its bias and the FFN-down row.
struct DependencyGroup {
  std::size_t id = 0;
  std::size_t block = 0;
  GroupKind kind = GroupKind::kFfnChannel;
  std::size_t index = 0;  // head or channel index inside the block
  std::vector<ParamSlice> slices;

  std::size_t mass() const;
  friend bool operator==(const DependencyGroup&, const DependencyGroup&) = default;
};

// Groups are ordered by block, then heads before channels, then index; ids are
// positions in that order.
std::vector<DependencyGroup> build_dependency_groups(const ModelGraph& model);

std::size_t total_group_mass(const std::vector<DependencyGroup>& groups);

struct ImportanceReport {
  std::vector<double> scores;  // indexed by group id
  ImportanceOrder order = ImportanceOrder::kElement1;
  std::size_t n_calibration = 0;
};

// Taylor importance of each group, summed over its entries w_k:
//   element1: |g_k w_k|
//   element2: |g_k w_k - 1/2 sum_j (g_jk w_k)^2|
// with g the gradient of the mean calibration loss and g_j the gradient of the
// loss on calibration example j alone. Calibration examples are the first
// n_calibration of a seeded permutation of the train split.
ImportanceReport estimate_importance(const ModelGraph& model,
                                     const std::vector<DependencyGroup>& groups,
                                     const Task& task, std::size_t n_calibration,
                                     ImportanceOrder order, std::uint64_t seed);

// Same scores from explicit gradients; exposed so the scoring rule can be
// checked independently of calibration sampling.
ImportanceReport score_groups(const ModelGraph& model,
                              const std::vector<DependencyGroup>& groups,
                              const ParamTable& mean_grad,
                              const std::vector<ParamTable>& per_example_grads,
                              ImportanceOrder order);

struct PruneTargets {
  double global_rate = 0.2;
  std::set<std::size_t> protected_blocks;
};

// Default protection: first and last block.
std::set<std::size_t> default_protected_blocks(std::size_t n_blocks);

// Rate to apply to the unprotected blocks so that global_rate of all
// prunable-structure mass is removed. Throws InfeasibleError when >= 1.
double middle_rate_for_global(double global_rate, const std::vector<DependencyGroup>& groups,
                              const std::set<std::size_t>& protected_blocks);
double middle_rate_for_global(double global_rate, const ModelGraph& model,
                              const std::set<std::size_t>& protected_blocks);

struct PrunePlan {
  double global_rate = 0.0;
  double middle_rate = 0.0;
  std::set<std::size_t> protected_blocks;
  std::vector<std::size_t> groups_to_remove;  // ascending ids
  std::size_t n_groups = 0;                   // group count of the source model
  double target_mass = 0.0;
  std::size_t removed_mass = 0;
};

// Greedy: walk unprotected groups by ascending (score, block, id), skipping any
// group whose removal would leave its block without a head or a channel, until
// the removed mass reaches global_rate of the total group mass.
PrunePlan select_prune_set(const std::vector<DependencyGroup>& groups,
                           const ImportanceReport& report, const PruneTargets& targets);

// Returns a new model with the planned groups removed. An empty plan returns a
// bit-identical copy. Throws InputError when the plan was built for a different
// model.
ModelGraph apply_pruning(const ModelGraph& model, const PrunePlan& plan);

// Number of scalars inside prunable structures (sum of group masses).
std::size_t prunable_param_count(const ModelGraph& model);

struct PruneOutcome {
  ModelGraph model;
  PrunePlan plan;
  ImportanceReport report;
};

struct PruneOptions {
  double global_rate = 0.2;
  ImportanceOrder order = ImportanceOrder::kElement1;
  std::size_t n_calibration = 10;
  std::set<std::size_t> protected_blocks;  // empty: first and last block
  std::uint64_t seed = 0;
};

PruneOutcome prune(const ModelGraph& model, const Task& calibration_task,
                   const PruneOptions& options);

void to_json(nlohmann::json& j, const ImportanceReport& r);
void from_json(const nlohmann::json& j, ImportanceReport& r);
void to_json(nlohmann::json& j, const PrunePlan& p);
void from_json(const nlohmann::json& j, PrunePlan& p);

}  // namespace ranktuner
