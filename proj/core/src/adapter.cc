#include "ranktuner/adapter.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ranktuner/error.h"
#include "ranktuner/random.h"

namespace ranktuner {

int RankSpace::max_candidate() const {
  return *std::max_element(candidates.begin(), candidates.end());
}

bool RankSpace::contains(int rank) const {
  return std::find(candidates.begin(), candidates.end(), rank) != candidates.end();
}

void RankSpace::validate() const {
  if (candidates.empty()) throw ConfigError("rank space: candidate set is empty");
  for (int r : candidates) {
    if (r < 1) throw ConfigError("rank space: candidate ranks must be >= 1");
  }
  if (default_rank < 1) throw ConfigError("rank space: default rank must be >= 1");
}

std::size_t RankConfig::tunable_count() const {
  return static_cast<std::size_t>(std::count(tunable.begin(), tunable.end(), true));
}

std::vector<int> RankConfig::tunable_ranks() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (tunable[i]) out.push_back(ranks[i]);
  }
  return out;
}

std::string RankConfig::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < ranks.size(); ++i) os << (i ? "," : "") << ranks[i];
  return os.str();
}

void RankConfig::validate(std::size_t n_blocks, const RankSpace& space) const {
  if (ranks.size() != n_blocks || tunable.size() != n_blocks) {
    throw ConfigError("rank config has " + std::to_string(ranks.size()) + " entries for " +
                      std::to_string(n_blocks) + " blocks");
  }
  for (std::size_t b = 0; b < n_blocks; ++b) {
    if (tunable[b] && !space.contains(ranks[b])) {
      throw ConfigError("rank " + std::to_string(ranks[b]) + " on block " + std::to_string(b) +
                        " is not a candidate");
    }
    if (!tunable[b] && ranks[b] != space.default_rank) {
      throw ConfigError("protected block " + std::to_string(b) + " must keep rank " +
                        std::to_string(space.default_rank));
    }
  }
}

std::vector<bool> tunable_mask(std::size_t n_blocks, const std::set<std::size_t>& protected_blocks) {
  std::vector<bool> mask(n_blocks, true);
  for (std::size_t b : protected_blocks) {
    if (b < n_blocks) mask[b] = false;
  }
  return mask;
}

RankConfig uniform_config(const std::vector<bool>& tunable, int rank, int default_rank) {
  RankConfig rc{std::vector<int>(tunable.size(), default_rank), tunable};
  for (std::size_t b = 0; b < tunable.size(); ++b) {
    if (tunable[b]) rc.ranks[b] = rank;
  }
  return rc;
}

RankConfig ramp_config(const std::vector<bool>& tunable, int default_rank) {
  static constexpr int kQuartileRanks[4] = {4, 6, 10, 12};
  RankConfig rc = uniform_config(tunable, default_rank, default_rank);
  const std::size_t n = rc.tunable_count();
  std::size_t i = 0;
  for (std::size_t b = 0; b < tunable.size(); ++b) {
    if (!tunable[b]) continue;
    rc.ranks[b] = kQuartileRanks[i * 4 / n];
    ++i;
  }
  return rc;
}

std::vector<int> parse_rank_list(std::string_view text) {
  std::vector<int> ranks;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    std::string item(text.substr(pos, comma - pos));
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    try {
      std::size_t used = 0;
      ranks.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse rank \"" + item + "\" in \"" + std::string(text) + "\"");
    }
    pos = comma + 1;
  }
  return ranks;
}

RankConfig make_config(std::vector<int> ranks, const std::vector<bool>& tunable) {
  if (ranks.size() != tunable.size()) {
    throw ConfigError("rank list has " + std::to_string(ranks.size()) + " entries for " +
                      std::to_string(tunable.size()) + " blocks");
  }
  return {std::move(ranks), tunable};
}

AdaptedModel attach_adapters(const ModelGraph& pruned, const RankConfig& config,
                             const RankSpace& space, std::uint64_t seed) {
  space.validate();
  config.validate(pruned.n_blocks(), space);
  AdaptedModel out{pruned, {}, config};
  for (std::size_t b = 0; b < pruned.n_blocks(); ++b) {
    const auto rank = static_cast<std::size_t>(config.ranks[b]);
    for (const char* leaf : kAdaptedLeaves) {
      const std::string name = param::block(b, leaf);
      const Matrix& w = pruned.param(name);
      LowRank lr{Matrix(w.rows(), rank), Matrix(rank, w.cols(), 0.0)};
      Rng rng(seed, "adapter/" + name);
      const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
      for (double& v : lr.a.data()) v = rng.uniform(-bound, bound);
      out.adapters.emplace(name, std::move(lr));
    }
  }
  return out;
}

std::size_t trainable_param_count(const AdaptedModel& adapted) {
  std::size_t n = 0;
  for (const auto& [_, lr] : adapted.adapters) n += lr.a.size() + lr.b.size();
  return n;
}

ForwardResult forward(const AdaptedModel& adapted, std::span<const Example> batch) {
  return forward(adapted.base, batch, &adapted.adapters);
}

RecoveryResult recover(const AdaptedModel& adapted, const Task& task, const TrainConfig& cfg) {
  cfg.validate();
  if (task.train.empty()) throw InputError("recover: empty train split");
  RecoveryResult result{adapted, 0.0, 0.0, {}};
  AdapterTable& adapters = result.adapted.adapters;
  Optimizer opt(cfg.optimizer, cfg.learning_rate);
  std::vector<std::size_t> order(task.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Example> micro;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(cfg.seed, "recover/shuffle/" + std::to_string(epoch));
    rng.shuffle(order);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.micro_batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.micro_batch_size);
      micro.clear();
      for (std::size_t i = start; i < end; ++i) micro.push_back(task.train[order[i]]);
      double loss = 0.0;
      Gradients g = forward_backward(result.adapted.base, micro, &adapters,
                                     BackwardOptions{.base_params = false}, &loss);
      opt.begin_step();
      for (auto& [name, lr] : adapters) {
        const LowRank& d = g.adapters.at(name);
        opt.apply(name + "#a", lr.a, d.a);
        opt.apply(name + "#b", lr.b, d.b);
      }
      total += loss;
      ++steps;
    }
    result.loss_history.push_back(total / static_cast<double>(steps));
  }
  result.validation_accuracy = evaluate(result.adapted.base, task, Split::kValidation, &adapters);
  result.test_accuracy = evaluate(result.adapted.base, task, Split::kTest, &adapters);
  return result;
}

ModelGraph merge_adapters(const AdaptedModel& adapted) {
  ModelGraph merged = adapted.base;
  for (const auto& [name, lr] : adapted.adapters) {
    merged.mutable_param(name).map().noalias() += lr.a.map() * lr.b.map();
  }
  return merged;
}

void to_json(nlohmann::json& j, const RankConfig& c) { j = c.ranks; }

void to_json(nlohmann::json& j, const RankSpace& s) {
  j = nlohmann::json{{"candidates", s.candidates}, {"default_rank", s.default_rank}};
}

void from_json(const nlohmann::json& j, RankSpace& s) {
  j.at("candidates").get_to(s.candidates);
  j.at("default_rank").get_to(s.default_rank);
}

}  // namespace ranktuner
