#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace ranktuner {

enum class TaskKind { kParityOfMarked, kMajorityToken, kDuplicateDetect, kSortedOrder };

inline constexpr std::size_t kNumTaskKinds = 4;

// Canonical names: "parity-of-marked", "majority-token", "duplicate-detect",
// "sorted-order". Short aliases ("parity", "majority", "duplicate",
// "sorted") are accepted by the parser.
std::string_view task_kind_name(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

struct Example {
  std::vector<int> tokens;
  int label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

enum class Split { kTrain, kValidation, kTest };
std::string_view split_name(Split split);

struct TaskSizes {
  std::size_t train = 512;
  std::size_t validation = 512;
  std::size_t test = 512;
  // Total sequence length including the leading task-marker token.
  std::size_t seq_len = 8;
};

// Token layout shared by every task: ids [0, kNumTaskKinds) are task markers
// placed at position 0, the rest of the vocabulary is the data alphabet.
struct Task {
  TaskKind kind = TaskKind::kParityOfMarked;
  std::uint64_t seed = 0;
  std::size_t vocab_size = 0;
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;

  std::string id() const { return std::string(task_kind_name(kind)); }
  const std::vector<Example>& split(Split s) const;
};

// Ground-truth labelling rule applied to a full sequence (marker included).
//  parity-of-marked  odd number of marked data tokens (upper alphabet half)
//  majority-token    more marked than unmarked data tokens
//  duplicate-detect  some data token occurs twice
//  sorted-order      data tokens are nondecreasing
int label_for(TaskKind kind, std::span<const int> tokens, std::size_t vocab_size);

// Splits are class-balanced (labels alternate, then shuffle) and pairwise
// disjoint as sequences.
Task make_task(TaskKind kind, std::uint64_t seed, const TaskSizes& sizes,
               std::size_t vocab_size);
Task make_task(std::string_view kind, std::uint64_t seed, const TaskSizes& sizes,
               std::size_t vocab_size);

void to_json(nlohmann::json& j, const Example& e);
void from_json(const nlohmann::json& j, Example& e);
void to_json(nlohmann::json& j, const Task& t);
void from_json(const nlohmann::json& j, Task& t);

}  // namespace ranktuner
