// rankadaptor: prune, recover and search rank configurations from the shell.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ranktuner/error.h"
#include "ranktuner/harness.h"

namespace rt = ranktuner;
using nlohmann::json;

namespace {

// Options shared by every subcommand that builds an experiment setup.
struct Common {
  std::string config;
  std::string task;
  std::optional<double> global_rate;
  std::optional<std::uint64_t> seed;
  std::string dense;
  bool verbose = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "experiment config (JSON)");
    app->add_option("--task", task, "target task");
    app->add_option("--global-rate", global_rate, "global pruning rate in (0, 1)");
    app->add_option("--seed", seed, "seed (RANKTUNER_SEED overrides the config too)");
    app->add_option("--dense", dense, "dense checkpoint; pretrained and written if missing");
    app->add_flag("-v,--verbose", verbose, "progress on stderr");
  }

  rt::ExperimentConfig build() const {
    json j = json::object();
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw rt::ConfigError("cannot open config " + config);
      j = json::parse(in);
    }
    if (!task.empty()) j["tasks"]["target"] = {task};
    if (global_rate) j["pruning"]["rates"] = {*global_rate};
    if (!j.contains("pruning") || !j["pruning"].contains("rates")) j["pruning"]["rates"] = {0.2};
    if (!dense.empty()) j["pretrain"]["checkpoint"] = dense;
    // A CLI seed beats the file; the environment variable beats both.
    if (seed && !std::getenv("RANKTUNER_SEED")) j["seed"] = *seed;
    rt::ExperimentConfig cfg = rt::parse_config(j);
    if (cfg.offline_tasks.empty() && config.empty()) {
      for (const char* t : {"parity-of-marked", "majority-token", "sorted-order"}) {
        if (t != cfg.target_tasks.front()) cfg.offline_tasks.push_back(t);
      }
    }
    return cfg;
  }
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prune a transformer classifier, recover it with low-rank adapters and "
               "search per-block adapter ranks"};
  app.require_subcommand(1);

  Common prune_opts;
  std::string prune_out = "pruned.json";
  std::string prune_order;
  std::optional<std::size_t> n_calibration;
  auto* prune_cmd = app.add_subcommand("prune", "structurally prune the dense model");
  prune_opts.attach(prune_cmd);
  prune_cmd->add_option("--importance-order,--order", prune_order, "element1 or element2")
      ->check(CLI::IsMember({"element1", "element2"}));
  prune_cmd->add_option("--n-calibration", n_calibration, "calibration examples for importance");
  prune_cmd->add_option("-o,--out", prune_out, "pruned model output");

  Common recover_opts;
  std::string recover_in, ranks_text, preset;
  auto* recover_cmd = app.add_subcommand("recover", "train adapters on a pruned model");
  recover_opts.attach(recover_cmd);
  recover_cmd->add_option("--pruned", recover_in, "pruned model from `prune`")->required();
  auto* ranks_opt =
      recover_cmd->add_option("--ranks", ranks_text, "per-block ranks, e.g. 8,8,4,6,12,8");
  recover_cmd->add_option("--preset", preset, "uniform8 or ramp")
      ->check(CLI::IsMember({"uniform8", "ramp"}))
      ->excludes(ranks_opt);

  Common search_opts;
  std::optional<double> epsilon;
  std::optional<std::size_t> max_iters;
  std::string search_out;
  auto* search_cmd = app.add_subcommand("search", "run the surrogate-guided rank search");
  search_cmd->alias("run");
  search_opts.attach(search_cmd);
  search_cmd->add_option("--epsilon", epsilon, "convergence threshold on |Q - P|");
  search_cmd->add_option("--max-iters", max_iters, "iteration budget");
  search_cmd->add_option("-o,--out", search_out, "result JSON (history CSV written alongside)");

  std::string experiment_config;
  bool experiment_verbose = false;
  auto* experiment_cmd = app.add_subcommand("experiment", "run every method over every rate");
  experiment_cmd->add_option("config", experiment_config, "experiment config (JSON)")->required();
  experiment_cmd->add_flag("-v,--verbose", experiment_verbose, "progress on stderr");

  std::string report_in, report_format = "markdown";
  auto* report_cmd = app.add_subcommand("report", "print a report.csv as a table");
  report_cmd->add_option("csv", report_in, "report.csv or an experiment directory")->required();
  report_cmd->add_option("--format", report_format, "markdown or csv")
      ->check(CLI::IsMember({"markdown", "csv"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prune_cmd) {
      rt::ExperimentConfig cfg = prune_opts.build();
      if (!prune_order.empty()) cfg.order = rt::parse_importance_order(prune_order);
      if (n_calibration) cfg.n_calibration = *n_calibration;
      cfg.validate();
      const rt::ModelGraph dense = rt::dense_model(cfg, {prune_opts.verbose});
      rt::PruneOptions po;
      po.global_rate = cfg.rates.front();
      po.order = cfg.order;
      po.n_calibration = cfg.n_calibration;
      po.protected_blocks = cfg.protected_set();
      po.seed = cfg.seed;
      const rt::Task calib = rt::make_tasks(cfg, {cfg.target_tasks.front()}).front();
      const rt::PruneOutcome out = rt::prune(dense, calib, po);
      rt::save_pruned(prune_out, out.model, out.plan);
      json summary = out.plan;
      summary["params_before"] = dense.param_count();
      summary["params_after"] = out.model.param_count();
      summary["validation_accuracy"] = rt::evaluate(out.model, calib, rt::Split::kValidation);
      std::cout << summary.dump(2) << "\n";
    } else if (*recover_cmd) {
      const rt::ExperimentConfig cfg = recover_opts.build();
      auto [pruned, plan] = rt::load_pruned(recover_in);
      const auto tunable = rt::tunable_mask(pruned.spec().n_blocks, cfg.protected_set());
      const rt::RankConfig rc =
          !ranks_text.empty() ? rt::make_config(rt::parse_rank_list(ranks_text), tunable)
          : preset == "ramp"  ? rt::ramp_config(tunable, cfg.ranks.default_rank)
                              : rt::uniform_config(tunable, 8, cfg.ranks.default_rank);
      rc.validate(pruned.spec().n_blocks, cfg.ranks);
      const rt::Task task = rt::make_tasks(cfg, {cfg.target_tasks.front()}).front();
      rt::TrainConfig recovery = cfg.recovery;
      recovery.seed = cfg.seed;
      const rt::AdaptedModel adapted = rt::attach_adapters(pruned, rc, cfg.ranks, cfg.seed);
      const rt::RecoveryResult r = rt::recover(adapted, task, recovery);
      std::cout << json{{"task", task.id()},
                        {"ranks", rc.ranks},
                        {"trainable_params", rt::trainable_param_count(adapted)},
                        {"pruned_validation_accuracy",
                         rt::evaluate(pruned, task, rt::Split::kValidation)},
                        {"validation_accuracy", r.validation_accuracy},
                        {"test_accuracy", r.test_accuracy},
                        {"loss_history", r.loss_history}}
                       .dump(2)
                << "\n";
    } else if (*search_cmd) {
      rt::ExperimentConfig cfg = search_opts.build();
      if (epsilon) cfg.search.epsilon = *epsilon;
      if (max_iters) cfg.search.max_iters = *max_iters;
      cfg.validate();
      const rt::ModelGraph dense = rt::dense_model(cfg, {search_opts.verbose});
      rt::PruneOptions po;
      po.global_rate = cfg.rates.front();
      po.order = cfg.order;
      po.n_calibration = cfg.n_calibration;
      po.protected_blocks = cfg.protected_set();
      po.seed = cfg.seed;
      const rt::Task target = rt::make_tasks(cfg, {cfg.target_tasks.front()}).front();
      const rt::PruneOutcome pruned = rt::prune(dense, target, po);
      rt::TrainConfig recovery = cfg.recovery;
      recovery.seed = cfg.seed;
      rt::SearchEnv env =
          rt::make_env(pruned.model, target, cfg.ranks, cfg.protected_set(), recovery, cfg.seed);
      const rt::SearchResult r =
          rt::run_rankadaptor(env, rt::make_tasks(cfg, cfg.offline_tasks), cfg.search);
      const std::string text = json(r).dump(2) + "\n";
      if (search_out.empty()) {
        std::cout << text;
      } else {
        write_file(search_out, text);
        std::string csv_path = search_out;
        if (csv_path.size() > 5 && csv_path.ends_with(".json")) csv_path.resize(csv_path.size() - 5);
        write_file(csv_path + ".history.csv", rt::history_csv(r));
        std::cout << "ranks " << r.config.to_string() << "  validation "
                  << rt::format_percent(r.validation_accuracy) << "  test "
                  << rt::format_percent(r.test_accuracy) << "  ("
                  << (r.converged ? "converged" : "unconverged") << ", " << r.iterations
                  << " iterations, " << r.recovery_runs << " recoveries)\n";
      }
    } else if (*experiment_cmd) {
      const rt::ExperimentConfig cfg = rt::load_config(experiment_config);
      const rt::ExperimentOutcome out = rt::run_experiment(cfg, {experiment_verbose});
      std::cout << rt::report_markdown(out.table) << "\nrecovery runs: " << out.recovery_runs
                << "\nwritten to " << out.directory.string() << "\n";
    } else if (*report_cmd) {
      std::filesystem::path p = report_in;
      if (std::filesystem::is_directory(p)) p /= "report.csv";
      std::ifstream in(p);
      if (!in) throw rt::InputError("cannot open " + p.string());
      const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      const rt::ReportTable table = rt::parse_report_csv(text);
      std::cout << (report_format == "csv" ? rt::report_csv(table) : rt::report_markdown(table));
    }
  } catch (const rt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const rt::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
