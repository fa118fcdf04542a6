#include "ranktuner/search.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "ranktuner/error.h"

namespace ranktuner {
namespace {

Rng stream(const SearchEnv& env, const std::string& name) { return Rng(env.seed, name); }

RankConfig default_config(const SearchEnv& env) {
  return uniform_config(env.tunable, env.space.default_rank, env.space.default_rank);
}

// Higher validation wins; ties go to the smaller rank sequence.
bool better(const Candidate& a, const Candidate& b) {
  if (a.measured.validation != b.measured.validation) {
    return a.measured.validation > b.measured.validation;
  }
  return a.config.ranks < b.config.ranks;
}

}  // namespace

std::string EvalCache::key(const std::string& context, const std::string& task_id,
                           const RankConfig& config) {
  return context + "|" + task_id + "|" + config.to_string();
}

std::optional<Measurement> EvalCache::find(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void EvalCache::insert(const std::string& key, const Measurement& m) {
  entries_[key] = m;
  if (on_insert) on_insert(key, m);
}

SearchEnv make_env(ModelGraph pruned, Task target, const RankSpace& space,
                   const std::set<std::size_t>& protected_blocks, const TrainConfig& recovery,
                   std::uint64_t seed) {
  space.validate();
  recovery.validate();
  const std::size_t n = pruned.spec().n_blocks;
  for (std::size_t b : protected_blocks) {
    if (b >= n) throw ConfigError("protected block " + std::to_string(b) + " out of range");
  }
  SearchEnv env{.pruned = std::move(pruned),
                .target = std::move(target),
                .space = space,
                .tunable = tunable_mask(n, protected_blocks),
                .recovery = recovery,
                .seed = seed,
                .context = {},
                .evaluator = {}};
  if (std::find(env.tunable.begin(), env.tunable.end(), true) == env.tunable.end()) {
    throw ConfigError("search: every block is protected, nothing to tune");
  }
  return env;
}

Measurement measure(SearchEnv& env, const RankConfig& config, const Task& task) {
  const std::string key = EvalCache::key(env.context, task.id(), config);
  if (auto hit = env.cache->find(key)) return *hit;
  config.validate(env.tunable.size(), env.space);
  Measurement m;
  if (env.evaluator) {
    m = env.evaluator(config, task);
  } else {
    const AdaptedModel adapted = attach_adapters(env.pruned, config, env.space, env.seed);
    const RecoveryResult r = recover(adapted, task, env.recovery);
    m = {r.validation_accuracy, r.test_accuracy};
  }
  ++env.recovery_runs;
  env.cache->insert(key, m);
  return m;
}

void SearchParams::validate() const {
  if (n_init == 0) throw ConfigError("search.n_init must be >= 1");
  if (m_candidates == 0) throw ConfigError("search.m_candidates must be >= 1");
  if (!(epsilon >= 0.0)) throw ConfigError("search.epsilon must be >= 0");
  if (k == 0) throw ConfigError("search.k must be >= 1");
  if (max_iters == 0) throw ConfigError("search.max_iters must be >= 1");
  if (pool_size == 0) throw ConfigError("search.pool_size must be >= 1");
  if (top_t == 0) throw ConfigError("search.top_t must be >= 1");
  if (!(meta_fit.learning_rate >= 0.0) || !(online_fit.learning_rate >= 0.0)) {
    throw ConfigError("search: surrogate learning rates must be >= 0");
  }
}

std::vector<EvalRecord> SearchState::online_records() const {
  std::vector<EvalRecord> out;
  for (const auto& r : records) {
    if (r.phase == RecordPhase::kOnline) out.push_back(r);
  }
  return out;
}

double solution_space_size(const SearchEnv& env) {
  const std::size_t l = static_cast<std::size_t>(
      std::count(env.tunable.begin(), env.tunable.end(), true));
  return std::pow(static_cast<double>(env.space.candidates.size()), static_cast<double>(l));
}

std::vector<RankConfig> enumerate_space(const SearchEnv& env, std::size_t limit) {
  if (solution_space_size(env) > static_cast<double>(limit)) {
    throw InputError("enumerate_space: solution space larger than " + std::to_string(limit));
  }
  std::vector<int> cands = env.space.candidates;
  std::sort(cands.begin(), cands.end());
  std::vector<std::size_t> slots;
  for (std::size_t b = 0; b < env.tunable.size(); ++b) {
    if (env.tunable[b]) slots.push_back(b);
  }
  std::vector<RankConfig> out;
  std::vector<std::size_t> digit(slots.size(), 0);
  RankConfig rc = default_config(env);
  while (true) {
    for (std::size_t i = 0; i < slots.size(); ++i) rc.ranks[slots[i]] = cands[digit[i]];
    out.push_back(rc);
    // odometer, last tunable block fastest
    std::size_t i = slots.size();
    while (i > 0) {
      --i;
      if (++digit[i] < cands.size()) break;
      digit[i] = 0;
      if (i == 0) return out;
    }
    if (slots.empty()) return out;
  }
}

std::vector<RankConfig> sample_configs(const SearchEnv& env, std::size_t m, Rng& rng) {
  std::vector<RankConfig> out;
  out.reserve(m);
  const RankConfig base = default_config(env);
  for (std::size_t i = 0; i < m; ++i) {
    RankConfig rc = base;
    for (std::size_t b = 0; b < rc.ranks.size(); ++b) {
      if (rc.tunable[b]) rc.ranks[b] = env.space.candidates[rng.below(env.space.candidates.size())];
    }
    out.push_back(std::move(rc));
  }
  return out;
}

SearchState initialization_phase(SearchEnv& env, std::size_t n_init,
                                 const std::vector<Task>& offline_tasks,
                                 const SearchParams& params) {
  if (n_init == 0) throw ConfigError("initialization_phase: n_init must be >= 1");
  SearchState state;
  const std::size_t l = static_cast<std::size_t>(
      std::count(env.tunable.begin(), env.tunable.end(), true));
  state.surrogate = init_surrogate(l, params.surrogate_dims, mix64(env.seed ^ 0x5eed),
                                   static_cast<double>(env.space.max_candidate()));
  for (const Task& task : offline_tasks) {
    Rng rng = stream(env, "search/init/" + task.id());
    for (const RankConfig& rc : sample_configs(env, n_init, rng)) {
      const Measurement m = measure(env, rc, task);
      state.records.push_back({rc, task.id(), m.validation, RecordPhase::kOffline});
    }
  }
  if (!state.records.empty()) {
    state.surrogate = meta_pretrain(std::move(state.surrogate), state.records, params.meta_fit);
  }
  return state;
}

std::size_t argmax_config(const std::vector<RankConfig>& configs,
                          const std::vector<double>& scores) {
  if (configs.empty() || configs.size() != scores.size()) {
    throw InputError("argmax_config: need matching, nonempty configs and scores");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < configs.size(); ++i) {
    if (scores[i] > scores[best] ||
        (scores[i] == scores[best] && configs[i].ranks < configs[best].ranks)) {
      best = i;
    }
  }
  return best;
}

void iteration_step(SearchEnv& env, SearchState& state, std::size_t m_candidates,
                    const SearchParams& params) {
  if (state.surrogate.widths.empty()) throw InputError("iteration_step: state not initialized");
  Rng rng = stream(env, "search/iter/" + std::to_string(state.iteration));
  const auto candidates = sample_configs(env, m_candidates, rng);
  const auto scores = predict(state.surrogate, std::span<const RankConfig>(candidates));
  const std::size_t pick = argmax_config(candidates, scores);
  const RankConfig& chosen = candidates[pick];

  const Measurement m = measure(env, chosen, env.target);
  const EvalRecord record{chosen, env.target.id(), m.validation, RecordPhase::kOnline};
  const auto replay = state.online_records();
  state.surrogate =
      online_update(std::move(state.surrogate), record, replay, env.target.id(), params.online_fit);
  state.records.push_back(record);
  state.history.push_back({state.iteration, chosen, scores[pick], m.validation,
                           predict_one(state.surrogate, chosen)});
  ++state.iteration;
}

bool has_converged(const SearchState& state, double epsilon, std::size_t k) {
  if (k == 0 || state.history.size() < k) return false;
  for (std::size_t i = state.history.size() - k; i < state.history.size(); ++i) {
    const auto& h = state.history[i];
    if (std::abs(h.predicted - h.measured) > epsilon) return false;
  }
  return true;
}

Selection final_selection(SearchEnv& env, const SearchState& state, std::size_t pool_size,
                          std::size_t top_t) {
  if (pool_size == 0 || top_t == 0) throw InputError("final_selection: empty pool or top_t");
  std::vector<RankConfig> pool;
  if (solution_space_size(env) <= static_cast<double>(pool_size)) {
    pool = enumerate_space(env);
  } else {
    Rng rng = stream(env, "search/final");
    pool = sample_configs(env, pool_size, rng);
  }
  const auto scores = predict(state.surrogate, std::span<const RankConfig>(pool));
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return pool[a].ranks < pool[b].ranks;
  });

  Selection sel;
  std::set<std::vector<int>> seen;
  for (std::size_t i : order) {
    if (sel.measured.size() == top_t) break;
    if (!seen.insert(pool[i].ranks).second) continue;
    sel.measured.push_back({pool[i], scores[i], measure(env, pool[i], env.target)});
  }
  sel.best = sel.measured.front();
  for (const auto& c : sel.measured) {
    if (better(c, sel.best)) sel.best = c;
  }
  return sel;
}

SearchResult run_rankadaptor(SearchEnv& env, const std::vector<Task>& offline_tasks,
                             const SearchParams& params) {
  params.validate();
  const std::size_t runs_before = env.recovery_runs;
  SearchState state = initialization_phase(env, params.n_init, offline_tasks, params);
  while (state.iteration < params.max_iters) {
    iteration_step(env, state, params.m_candidates, params);
    if (has_converged(state, params.epsilon, params.k)) {
      state.converged = true;
      break;
    }
  }
  const Selection sel = final_selection(env, state, params.pool_size, params.top_t);

  // Best measured over everything the target task has seen: the final
  // candidates plus each iteration's pick.
  Candidate best = sel.best;
  std::set<std::vector<int>> measured;
  for (const auto& c : sel.measured) measured.insert(c.config.ranks);
  for (const auto& h : state.history) {
    measured.insert(h.config.ranks);
    Candidate c{h.config, h.predicted, measure(env, h.config, env.target)};
    if (better(c, best)) best = c;
  }

  SearchResult r;
  r.method = "rankadaptor";
  r.config = best.config;
  r.validation_accuracy = best.measured.validation;
  r.test_accuracy = best.measured.test;
  r.predicted = predict_one(state.surrogate, best.config);
  r.iterations = state.iteration;
  r.recovery_runs = env.recovery_runs - runs_before;
  r.evaluations = measured.size();
  r.converged = state.converged;
  r.history = std::move(state.history);
  r.final_candidates = sel.measured;
  return r;
}

std::string_view baseline_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kUniform8: return "uniform8";
    case BaselineKind::kRamp: return "ramp";
    case BaselineKind::kRandomSearch: return "random_search";
  }
  return "?";
}

BaselineKind parse_baseline(std::string_view name) {
  for (auto k : {BaselineKind::kUniform8, BaselineKind::kRamp, BaselineKind::kRandomSearch}) {
    if (baseline_name(k) == name) return k;
  }
  throw ConfigError("unknown baseline \"" + std::string(name) +
                    "\" (expected uniform8, ramp or random_search)");
}

SearchResult run_baseline(SearchEnv& env, BaselineKind kind, std::size_t budget) {
  const std::size_t runs_before = env.recovery_runs;
  SearchResult r;
  r.method = std::string(baseline_name(kind));
  std::vector<RankConfig> configs;
  switch (kind) {
    case BaselineKind::kUniform8:
      configs.push_back(uniform_config(env.tunable, 8, env.space.default_rank));
      break;
    case BaselineKind::kRamp:
      configs.push_back(ramp_config(env.tunable, env.space.default_rank));
      break;
    case BaselineKind::kRandomSearch: {
      if (budget == 0) throw ConfigError("random_search: budget must be >= 1");
      Rng rng = stream(env, "search/random");
      configs = sample_configs(env, budget, rng);
      break;
    }
  }
  std::optional<Candidate> best;
  std::set<std::vector<int>> seen;
  for (const auto& rc : configs) {
    seen.insert(rc.ranks);
    Candidate c{rc, 0.0, measure(env, rc, env.target)};
    if (!best || better(c, *best)) best = c;
  }
  r.config = best->config;
  r.validation_accuracy = best->measured.validation;
  r.test_accuracy = best->measured.test;
  r.recovery_runs = env.recovery_runs - runs_before;
  r.evaluations = seen.size();
  return r;
}

void to_json(nlohmann::json& j, const SearchParams& p) {
  j = nlohmann::json{{"n_init", p.n_init},
                     {"m_candidates", p.m_candidates},
                     {"epsilon", p.epsilon},
                     {"k", p.k},
                     {"max_iters", p.max_iters},
                     {"pool_size", p.pool_size},
                     {"top_t", p.top_t},
                     {"surrogate_dims", p.surrogate_dims},
                     {"meta_steps", p.meta_fit.steps},
                     {"meta_lr", p.meta_fit.learning_rate},
                     {"online_steps", p.online_fit.steps},
                     {"online_lr", p.online_fit.learning_rate}};
}

void from_json(const nlohmann::json& j, SearchParams& p) {
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("n_init", p.n_init);
  opt("m_candidates", p.m_candidates);
  opt("epsilon", p.epsilon);
  opt("k", p.k);
  opt("max_iters", p.max_iters);
  opt("pool_size", p.pool_size);
  opt("top_t", p.top_t);
  opt("surrogate_dims", p.surrogate_dims);
  opt("meta_steps", p.meta_fit.steps);
  opt("meta_lr", p.meta_fit.learning_rate);
  opt("online_steps", p.online_fit.steps);
  opt("online_lr", p.online_fit.learning_rate);
}

void to_json(nlohmann::json& j, const SearchResult& r) {
  auto candidate_json = [](const Candidate& c) {
    return nlohmann::json{{"ranks", c.config.ranks},
                          {"predicted", c.predicted},
                          {"validation", c.measured.validation},
                          {"test", c.measured.test}};
  };
  j = nlohmann::json{{"method", r.method},
                     {"ranks", r.config.ranks},
                     {"validation_accuracy", r.validation_accuracy},
                     {"test_accuracy", r.test_accuracy},
                     {"iterations", r.iterations},
                     {"recovery_runs", r.recovery_runs},
                     {"evaluations", r.evaluations},
                     {"converged", r.converged}};
  j["predicted"] = r.predicted ? nlohmann::json(*r.predicted) : nlohmann::json(nullptr);
  j["status"] = r.converged ? "converged" : "unconverged";
  auto& hist = j["history"] = nlohmann::json::array();
  for (const auto& h : r.history) {
    hist.push_back({{"iteration", h.iteration},
                    {"ranks", h.config.ranks},
                    {"predicted", h.predicted},
                    {"measured", h.measured},
                    {"predicted_after", h.predicted_after}});
  }
  auto& fin = j["final_candidates"] = nlohmann::json::array();
  for (const auto& c : r.final_candidates) fin.push_back(candidate_json(c));
}

std::string history_csv(const SearchResult& r) {
  std::ostringstream out;
  out.precision(17);
  out << "iteration,ranks,predicted,measured\n";
  for (const auto& h : r.history) {
    out << h.iteration << ",\"" << h.config.to_string() << "\"," << h.predicted << ','
        << h.measured << '\n';
  }
  return out.str();
}

}  // namespace ranktuner
