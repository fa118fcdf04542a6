#include "ranktuner/pruner.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "ranktuner/error.h"
#include "ranktuner/random.h"

namespace ranktuner {
namespace {

ParamSlice make_slice(const ModelGraph& model, const std::string& name, int axis,
                      std::size_t begin, std::size_t end) {
  const Matrix& m = model.param(name);
  const std::size_t other = axis == 0 ? m.cols() : m.rows();
  return {name, axis, begin, end, (end - begin) * other};
}

template <typename Fn>
void for_each_entry(const Matrix& m, const ParamSlice& s, Fn&& fn) {
  if (s.axis == 0) {
    for (std::size_t r = s.begin; r < s.end; ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) fn(r * m.cols() + c);
    }
  } else {
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = s.begin; c < s.end; ++c) fn(r * m.cols() + c);
    }
  }
}

struct SurvivorCount {
  std::size_t heads = 0;
  std::size_t channels = 0;
};

std::map<std::size_t, SurvivorCount> count_structures(
    const std::vector<DependencyGroup>& groups) {
  std::map<std::size_t, SurvivorCount> counts;
  for (const auto& g : groups) {
    auto& c = counts[g.block];
    (g.kind == GroupKind::kAttentionHead ? c.heads : c.channels) += 1;
  }
  return counts;
}

void check_rate(double rate) {
  if (!(rate > 0.0 && rate < 1.0)) {
    throw ConfigError("global pruning rate must lie in (0, 1), got " + std::to_string(rate));
  }
}

}  // namespace

std::string_view group_kind_name(GroupKind kind) {
  return kind == GroupKind::kAttentionHead ? "attention-head" : "ffn-channel";
}

std::string_view importance_order_name(ImportanceOrder order) {
  return order == ImportanceOrder::kElement1 ? "element1" : "element2";
}

ImportanceOrder parse_importance_order(std::string_view name) {
  if (name == "element1") return ImportanceOrder::kElement1;
  if (name == "element2") return ImportanceOrder::kElement2;
  throw ConfigError("unknown importance order \"" + std::string(name) + "\"");
}

std::size_t DependencyGroup::mass() const {
  std::size_t m = 0;
  for (const auto& s : slices) m += s.entries;
  return m;
}

std::vector<DependencyGroup> build_dependency_groups(const ModelGraph& model) {
  std::vector<DependencyGroup> groups;
  const std::size_t dh = model.head_dim();
  for (std::size_t b = 0; b < model.n_blocks(); ++b) {
    const auto& meta = model.blocks()[b];
    for (std::size_t h = 0; h < meta.heads; ++h) {
      DependencyGroup g{groups.size(), b, GroupKind::kAttentionHead, h, {}};
      const std::size_t lo = h * dh, hi = lo + dh;
      g.slices.push_back(make_slice(model, param::block(b, "wq"), 1, lo, hi));
      g.slices.push_back(make_slice(model, param::block(b, "wk"), 1, lo, hi));
      g.slices.push_back(make_slice(model, param::block(b, "wv"), 1, lo, hi));
      g.slices.push_back(make_slice(model, param::block(b, "wo"), 0, lo, hi));
      groups.push_back(std::move(g));
    }
    for (std::size_t c = 0; c < meta.ffn_channels; ++c) {
      DependencyGroup g{groups.size(), b, GroupKind::kFfnChannel, c, {}};
      g.slices.push_back(make_slice(model, param::block(b, "ffn_up"), 1, c, c + 1));
      g.slices.push_back(make_slice(model, param::block(b, "ffn_up_bias"), 1, c, c + 1));
      g.slices.push_back(make_slice(model, param::block(b, "ffn_down"), 0, c, c + 1));
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

std::size_t total_group_mass(const std::vector<DependencyGroup>& groups) {
  std::size_t m = 0;
  for (const auto& g : groups) m += g.mass();
  return m;
}

ImportanceReport score_groups(const ModelGraph& model,
                              const std::vector<DependencyGroup>& groups,
                              const ParamTable& mean_grad,
                              const std::vector<ParamTable>& per_example_grads,
                              ImportanceOrder order) {
  ImportanceReport report;
  report.order = order;
  report.n_calibration = per_example_grads.size();
  report.scores.reserve(groups.size());
  for (const auto& g : groups) {
    double score = 0.0;
    for (const auto& s : g.slices) {
      const Matrix& w = model.param(s.param);
      const Matrix& grad = mean_grad.at(s.param);
      for_each_entry(w, s, [&](std::size_t i) {
        const double wk = w.data()[i];
        double term = grad.data()[i] * wk;
        if (order == ImportanceOrder::kElement2) {
          double second = 0.0;
          for (const auto& gj : per_example_grads) {
            const double v = gj.at(s.param).data()[i] * wk;
            second += v * v;
          }
          term -= 0.5 * second;
        }
        score += std::abs(term);
      });
    }
    report.scores.push_back(score);
  }
  return report;
}

ImportanceReport estimate_importance(const ModelGraph& model,
                                     const std::vector<DependencyGroup>& groups,
                                     const Task& task, std::size_t n_calibration,
                                     ImportanceOrder order, std::uint64_t seed) {
  if (n_calibration == 0) throw InputError("estimate_importance: n_calibration must be >= 1");
  if (n_calibration > task.train.size()) {
    throw InputError("estimate_importance: n_calibration " + std::to_string(n_calibration) +
                     " exceeds train split size " + std::to_string(task.train.size()));
  }
  std::vector<std::size_t> order_idx(task.train.size());
  std::iota(order_idx.begin(), order_idx.end(), 0);
  Rng rng(seed, "prune/calibration");
  rng.shuffle(order_idx);
  std::vector<Example> calib;
  calib.reserve(n_calibration);
  for (std::size_t i = 0; i < n_calibration; ++i) calib.push_back(task.train[order_idx[i]]);

  const Gradients mean = backward(model, calib);
  std::vector<ParamTable> per_example;
  if (order == ImportanceOrder::kElement2) {
    per_example.reserve(n_calibration);
    for (const auto& ex : calib) {
      per_example.push_back(backward(model, std::span<const Example>(&ex, 1)).params);
    }
  }
  ImportanceReport report = score_groups(model, groups, mean.params, per_example, order);
  report.n_calibration = n_calibration;
  return report;
}

std::set<std::size_t> default_protected_blocks(std::size_t n_blocks) {
  if (n_blocks == 0) return {};
  return {0, n_blocks - 1};
}

double middle_rate_for_global(double global_rate, const std::vector<DependencyGroup>& groups,
                              const std::set<std::size_t>& protected_blocks) {
  check_rate(global_rate);
  const double total = static_cast<double>(total_group_mass(groups));
  double prunable = 0.0;
  for (const auto& g : groups) {
    if (!protected_blocks.contains(g.block)) prunable += static_cast<double>(g.mass());
  }
  if (prunable <= 0.0) {
    throw InfeasibleError("every block is protected; nothing can be pruned");
  }
  const double middle = global_rate * total / prunable;
  if (middle >= 1.0) {
    throw InfeasibleError("global rate " + std::to_string(global_rate) +
                          " needs middle-block rate " + std::to_string(middle) + " >= 1");
  }
  return middle;
}

double middle_rate_for_global(double global_rate, const ModelGraph& model,
                              const std::set<std::size_t>& protected_blocks) {
  return middle_rate_for_global(global_rate, build_dependency_groups(model), protected_blocks);
}

PrunePlan select_prune_set(const std::vector<DependencyGroup>& groups,
                           const ImportanceReport& report, const PruneTargets& targets) {
  if (report.scores.size() != groups.size()) {
    throw InputError("select_prune_set: report has " + std::to_string(report.scores.size()) +
                     " scores for " + std::to_string(groups.size()) + " groups");
  }
  PrunePlan plan;
  plan.global_rate = targets.global_rate;
  plan.protected_blocks = targets.protected_blocks;
  plan.middle_rate = middle_rate_for_global(targets.global_rate, groups, targets.protected_blocks);
  plan.n_groups = groups.size();
  plan.target_mass = targets.global_rate * static_cast<double>(total_group_mass(groups));

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (!targets.protected_blocks.contains(groups[i].block)) candidates.push_back(i);
  }
  std::sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    if (report.scores[a] != report.scores[b]) return report.scores[a] < report.scores[b];
    if (groups[a].block != groups[b].block) return groups[a].block < groups[b].block;
    return groups[a].id < groups[b].id;
  });

  auto survivors = count_structures(groups);
  for (std::size_t i : candidates) {
    if (static_cast<double>(plan.removed_mass) >= plan.target_mass) break;
    const auto& g = groups[i];
    auto& left = survivors[g.block];
    std::size_t& pool = g.kind == GroupKind::kAttentionHead ? left.heads : left.channels;
    if (pool <= 1) continue;
    --pool;
    plan.groups_to_remove.push_back(g.id);
    plan.removed_mass += g.mass();
  }
  if (static_cast<double>(plan.removed_mass) < plan.target_mass) {
    throw InfeasibleError("pruning target unreachable while keeping one head and one "
                          "channel per block");
  }
  std::sort(plan.groups_to_remove.begin(), plan.groups_to_remove.end());
  return plan;
}

ModelGraph apply_pruning(const ModelGraph& model, const PrunePlan& plan) {
  const auto groups = build_dependency_groups(model);
  if (plan.n_groups != groups.size()) {
    throw InputError("apply_pruning: plan built for a model with " +
                     std::to_string(plan.n_groups) + " groups, this model has " +
                     std::to_string(groups.size()));
  }
  if (plan.groups_to_remove.empty()) return model;

  std::vector<std::vector<bool>> drop_head(model.n_blocks()), drop_channel(model.n_blocks());
  for (std::size_t b = 0; b < model.n_blocks(); ++b) {
    drop_head[b].assign(model.blocks()[b].heads, false);
    drop_channel[b].assign(model.blocks()[b].ffn_channels, false);
  }
  std::set<std::size_t> seen;
  for (std::size_t id : plan.groups_to_remove) {
    if (id >= groups.size()) throw InputError("apply_pruning: unknown group id " + std::to_string(id));
    if (!seen.insert(id).second) throw InputError("apply_pruning: duplicate group id " + std::to_string(id));
    const auto& g = groups[id];
    if (plan.protected_blocks.contains(g.block)) {
      throw InputError("apply_pruning: group " + std::to_string(id) + " lies in a protected block");
    }
    (g.kind == GroupKind::kAttentionHead ? drop_head : drop_channel)[g.block][g.index] = true;
  }

  const std::size_t dh = model.head_dim();
  ParamTable params = model.params();
  std::vector<BlockMeta> blocks = model.blocks();
  for (std::size_t b = 0; b < model.n_blocks(); ++b) {
    std::vector<std::size_t> head_cols, channels;
    std::size_t heads = 0;
    for (std::size_t h = 0; h < drop_head[b].size(); ++h) {
      if (drop_head[b][h]) continue;
      ++heads;
      for (std::size_t k = 0; k < dh; ++k) head_cols.push_back(h * dh + k);
    }
    for (std::size_t c = 0; c < drop_channel[b].size(); ++c) {
      if (!drop_channel[b][c]) channels.push_back(c);
    }
    if (heads == 0 || channels.empty()) {
      throw InputError("apply_pruning: block " + std::to_string(b) +
                       " would lose all heads or all channels");
    }
    const auto name = [b](const char* leaf) { return param::block(b, leaf); };
    if (heads != blocks[b].heads) {
      for (const char* leaf : {"wq", "wk", "wv"}) {
        params[name(leaf)] = params[name(leaf)].select_cols(head_cols);
      }
      params[name("wo")] = params[name("wo")].select_rows(head_cols);
      blocks[b].heads = heads;
    }
    if (channels.size() != blocks[b].ffn_channels) {
      params[name("ffn_up")] = params[name("ffn_up")].select_cols(channels);
      params[name("ffn_up_bias")] = params[name("ffn_up_bias")].select_cols(channels);
      params[name("ffn_down")] = params[name("ffn_down")].select_rows(channels);
      blocks[b].ffn_channels = channels.size();
    }
  }
  return ModelGraph(model.spec(), model.seed(), std::move(blocks), std::move(params));
}

std::size_t prunable_param_count(const ModelGraph& model) {
  return total_group_mass(build_dependency_groups(model));
}

PruneOutcome prune(const ModelGraph& model, const Task& calibration_task,
                   const PruneOptions& options) {
  PruneTargets targets{options.global_rate, options.protected_blocks};
  if (targets.protected_blocks.empty()) {
    targets.protected_blocks = default_protected_blocks(model.n_blocks());
  }
  const auto groups = build_dependency_groups(model);
  ImportanceReport report = estimate_importance(model, groups, calibration_task,
                                                options.n_calibration, options.order,
                                                options.seed);
  PrunePlan plan = select_prune_set(groups, report, targets);
  ModelGraph pruned = apply_pruning(model, plan);
  return {std::move(pruned), std::move(plan), std::move(report)};
}

void to_json(nlohmann::json& j, const ImportanceReport& r) {
  j = nlohmann::json{{"order", importance_order_name(r.order)},
                     {"n_calibration", r.n_calibration},
                     {"scores", r.scores}};
}

void from_json(const nlohmann::json& j, ImportanceReport& r) {
  r.order = parse_importance_order(j.at("order").get<std::string>());
  j.at("n_calibration").get_to(r.n_calibration);
  j.at("scores").get_to(r.scores);
}

void to_json(nlohmann::json& j, const PrunePlan& p) {
  j = nlohmann::json{{"global_rate", p.global_rate},
                     {"middle_rate", p.middle_rate},
                     {"protected_blocks", p.protected_blocks},
                     {"groups_to_remove", p.groups_to_remove},
                     {"n_groups", p.n_groups},
                     {"target_mass", p.target_mass},
                     {"removed_mass", p.removed_mass}};
}

void from_json(const nlohmann::json& j, PrunePlan& p) {
  j.at("global_rate").get_to(p.global_rate);
  j.at("middle_rate").get_to(p.middle_rate);
  j.at("protected_blocks").get_to(p.protected_blocks);
  j.at("groups_to_remove").get_to(p.groups_to_remove);
  j.at("n_groups").get_to(p.n_groups);
  j.at("target_mass").get_to(p.target_mass);
  j.at("removed_mass").get_to(p.removed_mass);
}

}  // namespace ranktuner
