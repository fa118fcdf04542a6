#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ranktuner/model.h"
#include "ranktuner/task.h"
#include "ranktuner/train.h"

namespace ranktuner {

// Candidate ranks for tunable blocks and the fixed rank of protected blocks.
struct RankSpace {
  std::vector<int> candidates = {2, 4, 6, 8, 10, 12};
  int default_rank = 8;

  int max_candidate() const;
  bool contains(int rank) const;
  void validate() const;

  friend bool operator==(const RankSpace&, const RankSpace&) = default;
};

// One adapter rank per block. Protected (non-tunable) blocks sit at the
// default rank; tunable blocks take a value from the candidate set.
struct RankConfig {
  std::vector<int> ranks;
  std::vector<bool> tunable;

  std::size_t size() const { return ranks.size(); }
  std::size_t tunable_count() const;
  std::vector<int> tunable_ranks() const;
  // "8,8,4,6"
  std::string to_string() const;

  // Throws ConfigError on length mismatch or a rank outside its allowed set.
  void validate(std::size_t n_blocks, const RankSpace& space) const;

  friend bool operator==(const RankConfig&, const RankConfig&) = default;
  friend auto operator<=>(const RankConfig& a, const RankConfig& b) {
    return a.ranks <=> b.ranks;
  }
};

std::vector<bool> tunable_mask(std::size_t n_blocks, const std::set<std::size_t>& protected_blocks);

// Every tunable block at `rank`, protected blocks at `default_rank`.
RankConfig uniform_config(const std::vector<bool>& tunable, int rank, int default_rank);
// Tunable blocks split into quartiles from first to last, ranked 4, 6, 10, 12.
RankConfig ramp_config(const std::vector<bool>& tunable, int default_rank);
// Parses "8,8,4,6" into ranks; tunability is supplied by the caller.
std::vector<int> parse_rank_list(std::string_view text);
RankConfig make_config(std::vector<int> ranks, const std::vector<bool>& tunable);

struct AdaptedModel {
  ModelGraph base;
  AdapterTable adapters;
  RankConfig config;
};

// Adapters on the six projections of every block with that block's rank. A is
// scaled-uniform, B is zero, so outputs are unchanged until training.
AdaptedModel attach_adapters(const ModelGraph& pruned, const RankConfig& config,
                             const RankSpace& space, std::uint64_t seed);

// sum over adapted matrices of r * (d_in + d_out)
std::size_t trainable_param_count(const AdaptedModel& adapted);

ForwardResult forward(const AdaptedModel& adapted, std::span<const Example> batch);

struct RecoveryResult {
  AdaptedModel adapted;
  double validation_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> loss_history;
};

// Trains only the adapter matrices on the task's train split; base weights are
// never touched.
RecoveryResult recover(const AdaptedModel& adapted, const Task& task, const TrainConfig& cfg);

// W' = W + A B for every adapted projection.
ModelGraph merge_adapters(const AdaptedModel& adapted);

void to_json(nlohmann::json& j, const RankConfig& c);
void to_json(nlohmann::json& j, const RankSpace& s);
void from_json(const nlohmann::json& j, RankSpace& s);

}  // namespace ranktuner
