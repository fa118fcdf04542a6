#include "ranktuner/harness.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ranktuner/error.h"
#include "ranktuner/random.h"

namespace ranktuner {
namespace {

using nlohmann::json;

const std::vector<std::string> kMethodOrder = {"uniform8", "ramp", "random_search",
                                               "rankadaptor"};

// Reads fields of one JSON object, remembering which keys were consumed so
// leftovers can be reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  template <typename T>
  bool get(const std::string& key, T& out) {
    known_.insert(key);
    if (!j_.contains(key)) return false;
    const json& v = j_.at(key);
    if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(where(key) + ": expected a non-negative integer");
    }
    try {
      v.get_to(out);
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
    return true;
  }

  template <typename T>
  bool get_list(const std::string& key, std::vector<T>& out) {
    known_.insert(key);
    if (!j_.contains(key)) return false;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + ": expected a list");
    std::vector<T> items;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if constexpr (std::is_unsigned_v<T>) {
        if (!v[i].is_number_unsigned()) {
          throw ConfigError(where(key) + "[" + std::to_string(i) + "]: expected a non-negative integer");
        }
      }
      try {
        items.push_back(v[i].get<T>());
      } catch (const json::exception& e) {
        throw ConfigError(where(key) + "[" + std::to_string(i) + "]: " + e.what());
      }
    }
    out = std::move(items);
    return true;
  }

  const json* object(const std::string& key) {
    known_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!known_.count(item.key())) {
        throw ConfigError("unknown key \"" + where(item.key()) + "\"");
      }
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

void read_train_config(Fields& f, TrainConfig& c) {
  f.get("epochs", c.epochs);
  f.get("micro_batch_size", c.micro_batch_size);
  f.get("learning_rate", c.learning_rate);
  f.get("seed", c.seed);
  std::string opt;
  if (f.get("optimizer", opt)) {
    try {
      c.optimizer = parse_optimizer(opt);
    } catch (const ConfigError& e) {
      throw ConfigError(f.where("optimizer") + ": " + e.what());
    }
  }
}

std::string canonical_task(const std::string& name, const std::string& where) {
  try {
    return std::string(task_kind_name(parse_task_kind(name)));
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Everything that influences a single measurement.
std::string fingerprint(const ExperimentConfig& cfg) {
  json j = config_to_json(cfg);
  for (const char* k : {"name", "output_dir", "methods", "search"}) j.erase(k);
  return hex64(fnv1a(j.dump()));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void log(const RunOptions& o, const std::string& msg) {
  if (o.verbose) std::clog << msg << std::endl;
}

}  // namespace

std::set<std::size_t> ExperimentConfig::protected_set() const {
  if (protected_blocks.empty()) return default_protected_blocks(model.n_blocks);
  return {protected_blocks.begin(), protected_blocks.end()};
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("name: must not be empty");
  try {
    model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (target_tasks.empty()) throw ConfigError("tasks.target: at least one target task required");
  if (rates.empty()) throw ConfigError("pruning.rates: at least one rate required");
  for (std::size_t i = 0; i < rates.size(); ++i) {
    if (!(rates[i] > 0.0 && rates[i] < 1.0)) {
      throw ConfigError("pruning.rates[" + std::to_string(i) + "]: rate must lie in (0, 1)");
    }
  }
  if (n_calibration == 0) throw ConfigError("pruning.n_calibration: must be >= 1");
  for (std::size_t b : protected_blocks) {
    if (b >= model.n_blocks) {
      throw ConfigError("pruning.protected_blocks: block " + std::to_string(b) + " out of range");
    }
  }
  if (protected_set().size() >= model.n_blocks) {
    throw ConfigError("pruning.protected_blocks: no tunable block left");
  }
  try {
    ranks.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("ranks: ") + e.what());
  }
  try {
    pretrain.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("pretrain: ") + e.what());
  }
  try {
    recovery.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("recovery: ") + e.what());
  }
  try {
    search.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("search: ") + e.what());
  }
  if (methods.empty()) throw ConfigError("methods: at least one method required");
  std::set<std::string> seen;
  for (const auto& m : methods) {
    if (std::find(kMethodOrder.begin(), kMethodOrder.end(), m) == kMethodOrder.end()) {
      throw ConfigError("methods: unknown method \"" + m + "\"");
    }
    if (!seen.insert(m).second) throw ConfigError("methods: duplicate method \"" + m + "\"");
  }
  if (sizes.train < n_calibration) {
    throw ConfigError("pruning.n_calibration: exceeds data.train");
  }
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  Fields root(j, "");
  root.get("name", cfg.name);
  std::string out_dir;
  if (root.get("output_dir", out_dir)) cfg.output_dir = out_dir;
  root.get("seed", cfg.seed);
  root.get("model_seed", cfg.model_seed);

  if (const json* m = root.object("model")) {
    Fields f(*m, "model");
    f.get("vocab_size", cfg.model.vocab_size);
    f.get("d_model", cfg.model.d_model);
    f.get("n_blocks", cfg.model.n_blocks);
    f.get("n_heads", cfg.model.n_heads);
    f.get("d_ff", cfg.model.d_ff);
    f.get("n_classes", cfg.model.n_classes);
    f.finish();
  }
  if (const json* t = root.object("tasks")) {
    Fields f(*t, "tasks");
    f.get_list("target", cfg.target_tasks);
    f.get_list("offline", cfg.offline_tasks);
    f.get_list("pretrain", cfg.pretrain_tasks);
    f.get("calibration", cfg.calibration_task);
    f.finish();
    for (auto* list : {&cfg.target_tasks, &cfg.offline_tasks, &cfg.pretrain_tasks}) {
      for (auto& name : *list) name = canonical_task(name, "tasks");
    }
    if (!cfg.calibration_task.empty()) {
      cfg.calibration_task = canonical_task(cfg.calibration_task, "tasks.calibration");
    }
  }
  if (const json* d = root.object("data")) {
    Fields f(*d, "data");
    f.get("seed", cfg.data_seed);
    f.get("train", cfg.sizes.train);
    f.get("validation", cfg.sizes.validation);
    f.get("test", cfg.sizes.test);
    f.get("seq_len", cfg.sizes.seq_len);
    f.finish();
  }
  if (const json* p = root.object("pruning")) {
    Fields f(*p, "pruning");
    f.get_list("rates", cfg.rates);
    std::string order;
    if (f.get("order", order)) {
      try {
        cfg.order = parse_importance_order(order);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("pruning.order: ") + e.what());
      }
    }
    f.get("n_calibration", cfg.n_calibration);
    f.get_list("protected_blocks", cfg.protected_blocks);
    f.finish();
  }
  if (const json* r = root.object("ranks")) {
    Fields f(*r, "ranks");
    f.get_list("candidates", cfg.ranks.candidates);
    f.get("default_rank", cfg.ranks.default_rank);
    f.finish();
  }
  if (const json* p = root.object("pretrain")) {
    Fields f(*p, "pretrain");
    read_train_config(f, cfg.pretrain);
    std::string ckpt;
    if (f.get("checkpoint", ckpt)) cfg.dense_checkpoint = ckpt;
    f.finish();
  }
  if (const json* r = root.object("recovery")) {
    Fields f(*r, "recovery");
    read_train_config(f, cfg.recovery);
    f.finish();
  }
  if (const json* s = root.object("search")) {
    Fields f(*s, "search");
    auto& p = cfg.search;
    f.get("n_init", p.n_init);
    f.get("m_candidates", p.m_candidates);
    f.get("epsilon", p.epsilon);
    f.get("k", p.k);
    f.get("max_iters", p.max_iters);
    f.get("pool_size", p.pool_size);
    f.get("top_t", p.top_t);
    f.get_list("surrogate_dims", p.surrogate_dims);
    f.get("meta_steps", p.meta_fit.steps);
    f.get("meta_lr", p.meta_fit.learning_rate);
    f.get("online_steps", p.online_fit.steps);
    f.get("online_lr", p.online_fit.learning_rate);
    f.finish();
  }
  root.get_list("methods", cfg.methods);
  root.finish();

  if (const char* env = std::getenv("RANKTUNER_SEED"); env && *env) {
    std::uint64_t seed = 0;
    const char* end = env + std::char_traits<char>::length(env);
    const auto [ptr, ec] = std::from_chars(env, end, seed);
    if (ec != std::errc() || ptr != end) {
      throw ConfigError(std::string("RANKTUNER_SEED: not an unsigned integer: ") + env);
    }
    cfg.seed = seed;
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json config_to_json(const ExperimentConfig& cfg) {
  auto train_json = [](const TrainConfig& c) {
    return json{{"epochs", c.epochs},
                {"micro_batch_size", c.micro_batch_size},
                {"learning_rate", c.learning_rate},
                {"optimizer", optimizer_name(c.optimizer)},
                {"seed", c.seed}};
  };
  json pretrain = train_json(cfg.pretrain);
  if (!cfg.dense_checkpoint.empty()) pretrain["checkpoint"] = cfg.dense_checkpoint.string();
  return json{
      {"name", cfg.name},
      {"output_dir", cfg.output_dir.string()},
      {"seed", cfg.seed},
      {"model_seed", cfg.model_seed},
      {"model", cfg.model},
      {"tasks",
       {{"target", cfg.target_tasks},
        {"offline", cfg.offline_tasks},
        {"pretrain", cfg.pretrain_tasks},
        {"calibration", cfg.calibration_task}}},
      {"data",
       {{"seed", cfg.data_seed},
        {"train", cfg.sizes.train},
        {"validation", cfg.sizes.validation},
        {"test", cfg.sizes.test},
        {"seq_len", cfg.sizes.seq_len}}},
      {"pruning",
       {{"rates", cfg.rates},
        {"order", importance_order_name(cfg.order)},
        {"n_calibration", cfg.n_calibration},
        {"protected_blocks", cfg.protected_blocks}}},
      {"ranks", cfg.ranks},
      {"pretrain", pretrain},
      {"recovery", train_json(cfg.recovery)},
      {"search", cfg.search},
      {"methods", cfg.methods}};
}

// ---- report

void ReportTable::add_row(const std::string& method, double rate,
                          const std::vector<double>& accuracies) {
  if (accuracies.size() != tasks.size()) {
    throw InputError("report row has " + std::to_string(accuracies.size()) + " values for " +
                     std::to_string(tasks.size()) + " tasks");
  }
  ReportRow row{method, rate, {}, 0.0};
  double sum = 0.0;
  for (double a : accuracies) {
    row.values.push_back(std::round(a * 10000.0) / 100.0);
    sum += row.values.back();
  }
  row.average = std::round(sum / static_cast<double>(tasks.size()) * 100.0) / 100.0;
  rows.push_back(std::move(row));
}

const ReportRow* ReportTable::find(const std::string& method, double rate) const {
  for (const auto& r : rows) {
    if (r.method == method && r.rate == rate) return &r;
  }
  return nullptr;
}

std::string format_percent(double accuracy) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", std::round(accuracy * 10000.0) / 100.0);
  return buf;
}

std::string format_rate(double rate) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, rate);
  return std::string(buf, res.ptr);
}

namespace {
std::string fixed2(double percent) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", percent);
  return buf;
}
}  // namespace

std::string report_csv(const ReportTable& table) {
  std::string out = "method,rate";
  for (const auto& t : table.tasks) out += "," + t;
  out += ",avg\n";
  for (const auto& r : table.rows) {
    out += r.method + "," + format_rate(r.rate);
    for (double v : r.values) out += "," + fixed2(v);
    out += "," + fixed2(r.average) + "\n";
  }
  return out;
}

std::string report_markdown(const ReportTable& table) {
  std::string out = "| Method | Rate |";
  std::string rule = "|---|---|";
  for (const auto& t : table.tasks) {
    out += " " + t + " |";
    rule += "---|";
  }
  out += " Avg |\n" + rule + "---|\n";
  for (const auto& r : table.rows) {
    out += "| " + r.method + " | " + format_rate(r.rate) + " |";
    for (double v : r.values) out += " " + fixed2(v) + " |";
    out += " " + fixed2(r.average) + " |\n";
  }
  return out;
}

ReportTable parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  if (!std::getline(in, line)) throw InputError("report csv: empty input");
  const auto header = split(line);
  if (header.size() < 4 || header[0] != "method" || header[1] != "rate" ||
      header.back() != "avg") {
    throw InputError("report csv: unexpected header \"" + line + "\"");
  }
  ReportTable table;
  table.tasks.assign(header.begin() + 2, header.end() - 1);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw InputError("report csv: ragged row \"" + line + "\"");
    ReportRow row;
    row.method = cells[0];
    row.rate = std::stod(cells[1]);
    for (std::size_t i = 2; i + 1 < cells.size(); ++i) row.values.push_back(std::stod(cells[i]));
    row.average = std::stod(cells.back());
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::vector<std::filesystem::path> emit_report(const ReportTable& table,
                                               const std::vector<ReportFormat>& formats,
                                               const std::filesystem::path& stem) {
  if (table.rows.empty() || table.tasks.empty()) throw InputError("emit_report: empty table");
  std::vector<std::filesystem::path> written;
  for (ReportFormat f : formats) {
    std::filesystem::path p = stem;
    if (f == ReportFormat::kCsv) {
      p += ".csv";
      write_text(p, report_csv(table));
    } else {
      p += ".md";
      write_text(p, report_markdown(table));
    }
    written.push_back(p);
  }
  return written;
}

// ---- experiment

std::vector<Task> make_tasks(const ExperimentConfig& cfg, const std::vector<std::string>& names) {
  std::vector<Task> tasks;
  for (const auto& n : names) {
    tasks.push_back(make_task(n, cfg.data_seed, cfg.sizes, cfg.model.vocab_size));
  }
  return tasks;
}

ModelGraph dense_model(const ExperimentConfig& cfg, const RunOptions& options) {
  const std::filesystem::path path = cfg.dense_checkpoint.empty()
                                         ? cfg.experiment_dir() / "checkpoints" / "dense.json"
                                         : cfg.dense_checkpoint;
  if (std::filesystem::exists(path)) {
    ModelGraph m = load_checkpoint(path);
    if (!(m.spec() == cfg.model)) {
      throw ConfigError("dense checkpoint " + path.string() + " does not match the model spec");
    }
    log(options, "loaded dense model from " + path.string());
    return m;
  }
  log(options, "pretraining dense model -> " + path.string());
  const auto tasks = make_tasks(cfg, cfg.pretrain_tasks);
  ModelGraph m = pretrain(build_model(cfg.model, cfg.model_seed), tasks, cfg.pretrain).model;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_checkpoint(m, path);
  return m;
}

void save_pruned(const std::filesystem::path& path, const ModelGraph& model, const PrunePlan& plan) {
  write_text(path, json{{"model", checkpoint_to_json(model)}, {"plan", plan}}.dump());
}

std::pair<ModelGraph, PrunePlan> load_pruned(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  if (j.contains("model")) return {checkpoint_from_json(j.at("model")), j.at("plan").get<PrunePlan>()};
  return {checkpoint_from_json(j), PrunePlan{}};
}

void load_cache(EvalCache& cache, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) return;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Measurement m{j.at("validation").get<double>(), j.at("test").get<double>()};
      auto hook = std::move(cache.on_insert);
      cache.on_insert = nullptr;
      cache.insert(j.at("key").get<std::string>(), m);
      cache.on_insert = std::move(hook);
    } catch (const json::exception&) {
      // a run killed mid-write leaves a truncated last line
      std::clog << "warning: skipping malformed cache line " << lineno << " in "
                << path.string() << "\n";
    }
  }
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  ExperimentOutcome outcome;
  outcome.directory = cfg.experiment_dir();
  const auto ckpt_dir = outcome.directory / "checkpoints";
  std::filesystem::create_directories(ckpt_dir);

  const ModelGraph dense = dense_model(cfg, options);
  const auto targets = make_tasks(cfg, cfg.target_tasks);
  const auto offline = make_tasks(cfg, cfg.offline_tasks);
  const std::string calib_name =
      cfg.calibration_task.empty() ? cfg.target_tasks.front() : cfg.calibration_task;
  const Task calibration = make_task(calib_name, cfg.data_seed, cfg.sizes, cfg.model.vocab_size);
  const std::string fp = fingerprint(cfg);

  const auto cache_path = outcome.directory / "cache.jsonl";
  auto cache = std::make_shared<EvalCache>();
  load_cache(*cache, cache_path);
  std::ofstream cache_out(cache_path, std::ios::app);
  if (!cache_out) throw std::runtime_error("cannot write " + cache_path.string());
  cache->on_insert = [&](const std::string& key, const Measurement& m) {
    cache_out << json{{"key", key}, {"validation", m.validation}, {"test", m.test}}.dump()
              << '\n';
    cache_out.flush();
  };

  outcome.table.tasks = cfg.target_tasks;
  json results = {{"config", config_to_json(cfg)}, {"fingerprint", fp}};
  json& rate_list = results["rates"] = json::array();

  for (double rate : cfg.rates) {
    RateOutcome ro;
    ro.rate = rate;
    const auto pruned_path = ckpt_dir / ("pruned-" + fp + "-" + format_rate(rate) + ".json");
    std::optional<ModelGraph> pruned;
    if (std::filesystem::exists(pruned_path)) {
      auto loaded = load_pruned(pruned_path);
      pruned = std::move(loaded.first);
      ro.plan = loaded.second;
      log(options, "loaded pruned model " + pruned_path.string());
    } else {
      PruneOptions po;
      po.global_rate = rate;
      po.order = cfg.order;
      po.n_calibration = cfg.n_calibration;
      po.protected_blocks = cfg.protected_set();
      po.seed = cfg.seed;
      PruneOutcome out = prune(dense, calibration, po);
      ro.plan = out.plan;
      pruned = std::move(out.model);
      save_pruned(pruned_path, *pruned, ro.plan);
      log(options, "pruned at rate " + format_rate(rate) + " -> " + pruned_path.string());
    }

    json rate_json = {{"rate", rate}, {"plan", ro.plan}};
    for (const Task& target : targets) {
      ro.pruned_accuracy[target.id()] = {evaluate(*pruned, target, Split::kValidation),
                                         evaluate(*pruned, target, Split::kTest)};
      TrainConfig recovery = cfg.recovery;
      recovery.seed = cfg.seed;
      SearchEnv env = make_env(*pruned, target, cfg.ranks, cfg.protected_set(), recovery, cfg.seed);
      env.context = fp + "/rate=" + format_rate(rate);
      env.cache = cache;

      auto& by_method = ro.results[target.id()];
      const std::size_t offline_budget = cfg.search.n_init * offline.size();
      std::size_t budget = offline_budget + cfg.search.max_iters + cfg.search.top_t;
      auto wants = [&](const std::string& m) {
        return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end();
      };
      if (wants("rankadaptor")) {
        log(options, "rankadaptor on " + target.id() + " @ " + format_rate(rate));
        SearchResult r = run_rankadaptor(env, offline, cfg.search);
        budget = offline_budget + r.history.size() + r.final_candidates.size();
        by_method["rankadaptor"] = std::move(r);
      }
      for (const auto& m : {"uniform8", "ramp", "random_search"}) {
        if (!wants(m)) continue;
        log(options, std::string(m) + " on " + target.id() + " @ " + format_rate(rate));
        by_method[m] = run_baseline(env, parse_baseline(m), budget);
      }
      outcome.recovery_runs += env.recovery_runs;

      json& tj = rate_json["tasks"][target.id()];
      tj["pruned"] = {{"validation", ro.pruned_accuracy[target.id()].validation},
                      {"test", ro.pruned_accuracy[target.id()].test}};
      for (const auto& [m, r] : by_method) tj["methods"][m] = r;
    }
    for (const auto& m : kMethodOrder) {
      if (std::find(cfg.methods.begin(), cfg.methods.end(), m) == cfg.methods.end()) continue;
      std::vector<double> acc;
      for (const Task& target : targets) acc.push_back(ro.results[target.id()][m].test_accuracy);
      outcome.table.add_row(m, rate, acc);
    }
    rate_list.push_back(std::move(rate_json));
    outcome.rates.push_back(std::move(ro));
  }

  results["recovery_runs"] = outcome.recovery_runs;
  write_text(outcome.directory / "results.json", results.dump(2) + "\n");
  emit_report(outcome.table, {ReportFormat::kCsv, ReportFormat::kMarkdown},
              outcome.directory / "report");
  return outcome;
}

}  // namespace ranktuner
