#include "ranktuner/surrogate.h"

#include <cmath>
#include <functional>
#include <numbers>
#include <iostream>
#include <set>

#include "ranktuner/error.h"
#include "ranktuner/random.h"

namespace ranktuner {
namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

struct Activations {
  std::vector<Matrix> layers;  // layers[0] = input, layers.back() = output
};

Activations run(const Surrogate& s, const Matrix& x) {
  if (x.cols() != s.input_dim()) {
    throw InputError("surrogate: encoding has " + std::to_string(x.cols()) +
                     " features, model expects " + std::to_string(s.input_dim()));
  }
  Activations act;
  act.layers.push_back(x);
  const std::size_t n_layers = s.weights.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    Matrix z(x.rows(), s.weights[l].cols());
    z.map().noalias() = act.layers.back().map() * s.weights[l].map();
    z.map().rowwise() += s.biases[l].map().row(0);
    if (l + 1 < n_layers) {
      for (double& v : z.data()) v = std::tanh(v);
    }
    act.layers.push_back(std::move(z));
  }
  return act;
}

Matrix encode_records(const Surrogate& s, std::span<const EvalRecord> records,
                      std::vector<double>& targets) {
  Matrix x(records.size(), s.input_dim());
  targets.clear();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto e = encode_config(records[i].config, s.rank_scale);
    if (e.size() != s.input_dim()) {
      throw InputError("surrogate: record has " + std::to_string(e.size()) +
                       " tunable blocks, model expects " + std::to_string(s.input_dim()));
    }
    std::copy(e.begin(), e.end(), x.row(i).begin());
    const double p = records[i].performance;
    if (!(p >= 0.0 && p <= 1.0)) {
      throw InputError("surrogate: performance " + std::to_string(p) + " outside [0, 1]");
    }
    targets.push_back(p);
  }
  return x;
}

}  // namespace

std::vector<double> encode_config(const RankConfig& config, double rank_scale) {
  std::vector<double> out;
  for (std::size_t i = 0; i < config.ranks.size(); ++i) {
    if (config.tunable[i]) out.push_back(static_cast<double>(config.ranks[i]) / rank_scale);
  }
  return out;
}

Surrogate init_surrogate(std::size_t l_tunable, const std::vector<std::size_t>& dims,
                         std::uint64_t seed, double rank_scale) {
  if (l_tunable == 0) throw ConfigError("surrogate: needs at least one tunable block");
  if (dims.size() != 4) {
    throw ConfigError("surrogate: expected dims (D1, D2, D3, 1), got " +
                      std::to_string(dims.size()) + " values");
  }
  for (std::size_t d : dims) {
    if (d == 0) throw ConfigError("surrogate: layer widths must be >= 1");
  }
  if (dims.back() != 1) throw ConfigError("surrogate: output layer must have width 1");
  if (!(rank_scale > 0.0)) throw ConfigError("surrogate: rank_scale must be positive");

  Surrogate s;
  s.widths.push_back(l_tunable);
  s.widths.insert(s.widths.end(), dims.begin(), dims.end());
  s.rank_scale = rank_scale;
  for (std::size_t l = 0; l + 1 < s.widths.size(); ++l) {
    const std::size_t fan_in = s.widths[l];
    Rng rng(seed, "surrogate/w" + std::to_string(l));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix w(fan_in, s.widths[l + 1]);
    for (double& v : w.data()) v = rng.uniform(-bound, bound);
    s.weights.push_back(std::move(w));
    s.biases.emplace_back(1, s.widths[l + 1], 0.0);
  }
  return s;
}

// Row by row: a batched product may sum in a different order than a
// single-row one, and a batch must agree bit for bit with its items.
std::vector<double> predict(const Surrogate& s, const Matrix& features) {
  if (features.cols() != s.input_dim()) run(s, features);  // throws
  std::vector<double> out;
  out.reserve(features.rows());
  Matrix row(1, features.cols());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    std::copy(features.row(i).begin(), features.row(i).end(), row.data().begin());
    out.push_back(run(s, row).layers.back()(0, 0));
  }
  return out;
}

std::vector<double> predict(const Surrogate& s, std::span<const RankConfig> configs) {
  if (configs.empty()) return {};
  Matrix x(configs.size(), s.input_dim());
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto e = encode_config(configs[i], s.rank_scale);
    if (e.size() != s.input_dim()) {
      throw InputError("surrogate: config has " + std::to_string(e.size()) +
                       " tunable blocks, model expects " + std::to_string(s.input_dim()));
    }
    std::copy(e.begin(), e.end(), x.row(i).begin());
  }
  return predict(s, x);
}

double predict_one(const Surrogate& s, const RankConfig& config) {
  return predict(s, std::span<const RankConfig>(&config, 1)).front();
}

SurrogateGradient mse_gradient(const Surrogate& s, const Matrix& features,
                               std::span<const double> targets) {
  if (features.rows() != targets.size() || targets.empty()) {
    throw InputError("surrogate: feature/target count mismatch");
  }
  const Activations act = run(s, features);
  const std::size_t n = targets.size();
  const std::size_t n_layers = s.weights.size();
  SurrogateGradient g;
  g.weights.resize(n_layers);
  g.biases.resize(n_layers);

  Matrix delta(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = act.layers.back()(i, 0) - targets[i];
    g.loss += r * r;
    delta(i, 0) = 2.0 * r / static_cast<double>(n);
  }
  g.loss /= static_cast<double>(n);

  for (std::size_t l = n_layers; l-- > 0;) {
    const Matrix& input = act.layers[l];
    g.weights[l] = Matrix(s.weights[l].rows(), s.weights[l].cols());
    g.weights[l].map().noalias() = input.map().transpose() * delta.map();
    g.biases[l] = Matrix(1, s.weights[l].cols());
    g.biases[l].map() = delta.map().colwise().sum();
    if (l == 0) break;
    Matrix prev(n, s.weights[l].rows());
    prev.map().noalias() = delta.map() * s.weights[l].map().transpose();
    // input = tanh(z) for every hidden layer
    for (std::size_t i = 0; i < prev.size(); ++i) {
      const double a = input.data()[i];
      prev.data()[i] *= 1.0 - a * a;
    }
    delta = std::move(prev);
  }
  return g;
}

namespace {

// Adam loop behind fit(). The returned iterate is the lowest-loss one among
// those `accept` admits (all of them when it is empty); with none admitted the
// surrogate is left as it was.
std::vector<double> fit_admissible(Surrogate& s, const Matrix& features,
                                   std::span<const double> targets, const FitOptions& options,
                                   const std::function<bool(const Surrogate&)>& accept,
                                   bool cosine_decay) {
  if (targets.empty()) throw InputError("surrogate fit: no records");
  const std::size_t n_layers = s.weights.size();
  std::vector<Matrix> mw, vw, mb, vb;
  for (std::size_t l = 0; l < n_layers; ++l) {
    mw.emplace_back(s.weights[l].rows(), s.weights[l].cols());
    vw.emplace_back(s.weights[l].rows(), s.weights[l].cols());
    mb.emplace_back(1, s.biases[l].cols());
    vb.emplace_back(1, s.biases[l].cols());
  }
  auto adam = [&](Matrix& p, const Matrix& g, Matrix& m, Matrix& v, double c1, double c2,
                  double lr) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.data()[i];
      m.data()[i] = kBeta1 * m.data()[i] + (1.0 - kBeta1) * gi;
      v.data()[i] = kBeta2 * v.data()[i] + (1.0 - kBeta2) * gi * gi;
      p.data()[i] -= lr * (m.data()[i] / c1) /
                     (std::sqrt(v.data()[i] / c2) + kAdamEps);
    }
  };

  std::vector<double> history;
  history.reserve(options.steps + 1);
  Surrogate best = s;
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t step = 0; step <= options.steps; ++step) {
    const SurrogateGradient g = mse_gradient(s, features, targets);
    history.push_back(g.loss);
    if (g.loss < best_loss && (!accept || accept(s))) {
      best_loss = g.loss;
      best = s;
    }
    if (step == options.steps) break;
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(kBeta1, t);
    const double c2 = 1.0 - std::pow(kBeta2, t);
    const double lr =
        cosine_decay ? options.learning_rate * 0.5 *
                           (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                           static_cast<double>(options.steps)))
                     : options.learning_rate;
    for (std::size_t l = 0; l < n_layers; ++l) {
      adam(s.weights[l], g.weights[l], mw[l], vw[l], c1, c2, lr);
      adam(s.biases[l], g.biases[l], mb[l], vb[l], c1, c2, lr);
    }
  }
  const std::uint64_t steps = s.steps + options.steps;
  s = std::move(best);
  s.steps = steps;
  return history;
}

}  // namespace

std::vector<double> fit(Surrogate& s, const Matrix& features, std::span<const double> targets,
                        const FitOptions& options) {
  return fit_admissible(s, features, targets, options, {}, false);
}

std::vector<double> fit(Surrogate& s, std::span<const EvalRecord> records,
                        const FitOptions& options) {
  if (records.empty()) throw InputError("surrogate fit: no records");
  std::vector<double> targets;
  const Matrix x = encode_records(s, records, targets);
  return fit(s, x, targets, options);
}

double training_mse(const Surrogate& s, std::span<const EvalRecord> records) {
  std::vector<double> targets;
  const Matrix x = encode_records(s, records, targets);
  return mse_gradient(s, x, targets).loss;
}

Surrogate meta_pretrain(Surrogate s, std::span<const EvalRecord> records,
                        const FitOptions& options) {
  if (records.empty()) throw InputError("meta_pretrain: empty record pool");
  std::set<std::string> tasks;
  for (const auto& r : records) tasks.insert(r.task_id);
  if (tasks.size() < 2) {
    std::clog << "warning: meta_pretrain over a single task (" << *tasks.begin()
              << "); offline phase degenerates to plain pretraining\n";
  }
  fit(s, records, options);
  return s;
}

Surrogate online_update(Surrogate s, const EvalRecord& new_record,
                        std::span<const EvalRecord> replay, const std::string& target_task,
                        const FitOptions& options) {
  if (new_record.task_id != target_task) {
    throw InputError("online_update: record for task \"" + new_record.task_id +
                     "\" but the target task is \"" + target_task + "\"");
  }
  std::vector<EvalRecord> pool(replay.begin(), replay.end());
  pool.push_back(new_record);
  std::vector<double> targets;
  const Matrix x = encode_records(s, pool, targets);
  // Only iterates that move Q toward the new measurement qualify; a pooled
  // minimum alone can trade the newest record away for the replay.
  const double gap = std::abs(predict_one(s, new_record.config) - new_record.performance);
  fit_admissible(s, x, targets, options, [&](const Surrogate& cand) {
    return std::abs(predict_one(cand, new_record.config) - new_record.performance) < gap;
  }, true);
  return s;
}

void to_json(nlohmann::json& j, const Surrogate& s) {
  j = nlohmann::json{{"widths", s.widths},   {"weights", s.weights}, {"biases", s.biases},
                     {"rank_scale", s.rank_scale}, {"steps", s.steps}};
}

void from_json(const nlohmann::json& j, Surrogate& s) {
  j.at("widths").get_to(s.widths);
  j.at("weights").get_to(s.weights);
  j.at("biases").get_to(s.biases);
  j.at("rank_scale").get_to(s.rank_scale);
  j.at("steps").get_to(s.steps);
}

void to_json(nlohmann::json& j, const EvalRecord& r) {
  j = nlohmann::json{{"ranks", r.config.ranks},
                     {"task", r.task_id},
                     {"performance", r.performance},
                     {"phase", r.phase == RecordPhase::kOffline ? "offline" : "online"}};
}

EvalRecord record_from_json(const nlohmann::json& j, const std::vector<bool>& tunable) {
  EvalRecord r;
  r.config = make_config(j.at("ranks").get<std::vector<int>>(), tunable);
  j.at("task").get_to(r.task_id);
  j.at("performance").get_to(r.performance);
  r.phase = j.at("phase").get<std::string>() == "offline" ? RecordPhase::kOffline
                                                          : RecordPhase::kOnline;
  return r;
}

}  // namespace ranktuner
