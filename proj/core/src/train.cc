#include "ranktuner/train.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ranktuner/error.h"
#include "ranktuner/random.h"

namespace ranktuner {
namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr std::size_t kEvalChunk = 256;

std::size_t argmax_row(const Matrix& m, std::size_t r) {
  const auto row = m.row(r);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

TrainResult train_on(const ModelGraph& model, const std::vector<Example>& data,
                     const TrainConfig& cfg, const std::set<std::string>& trainable) {
  cfg.validate();
  if (trainable.empty()) throw ConfigError("train: nothing is trainable (empty mask)");
  for (const auto& name : trainable) {
    if (!model.params().contains(name)) {
      throw ConfigError("train: mask names unknown parameter \"" + name + "\"");
    }
  }
  if (data.empty()) throw InputError("train: empty training split");

  TrainResult result{model, {}};
  Optimizer opt(cfg.optimizer, cfg.learning_rate);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Example> micro;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(cfg.seed, "train/shuffle/" + std::to_string(epoch));
    rng.shuffle(order);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.micro_batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.micro_batch_size);
      micro.clear();
      for (std::size_t i = start; i < end; ++i) micro.push_back(data[order[i]]);
      double loss = 0.0;
      Gradients g = forward_backward(result.model, micro, nullptr, {}, &loss);
      opt.begin_step();
      for (const auto& name : trainable) {
        opt.apply(name, result.model.mutable_param(name), g.params.at(name));
      }
      total += loss;
      ++steps;
    }
    result.loss_history.push_back(total / static_cast<double>(steps));
  }
  return result;
}

}  // namespace

std::string_view optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adam";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer \"" + std::string(name) + "\"");
}

void TrainConfig::validate() const {
  if (micro_batch_size == 0) throw ConfigError("train config: micro_batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train config: learning_rate must be positive");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"micro_batch_size", c.micro_batch_size},
                     {"learning_rate", c.learning_rate},
                     {"optimizer", optimizer_name(c.optimizer)},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("micro_batch_size").get_to(c.micro_batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  j.at("seed").get_to(c.seed);
}

void Optimizer::apply(const std::string& key, Matrix& param, const Matrix& grad) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols()) {
    throw InputError("optimizer: gradient shape mismatch for " + key);
  }
  if (kind_ == OptimizerKind::kSgd) {
    param.map() -= lr_ * grad.map();
    return;
  }
  auto [it, inserted] = state_.try_emplace(key);
  Moments& s = it->second;
  if (inserted) {
    s.m = Matrix(param.rows(), param.cols());
    s.v = Matrix(param.rows(), param.cols());
  }
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  auto& p = param.data();
  auto& m = s.m.data();
  auto& v = s.v.data();
  const auto& g = grad.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
    v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
    p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
  }
}

TrainResult train(const ModelGraph& model, const Task& task, const TrainConfig& cfg,
                  const std::set<std::string>& trainable) {
  return train_on(model, task.train, cfg, trainable);
}

std::set<std::string> all_parameters(const ModelGraph& model) {
  std::set<std::string> names;
  for (const auto& [name, _] : model.params()) names.insert(name);
  return names;
}

double accuracy(const ModelGraph& model, std::span<const Example> examples,
                const AdapterTable* adapters) {
  if (examples.empty()) throw InputError("evaluate: empty split");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < examples.size(); start += kEvalChunk) {
    const auto chunk = examples.subspan(start, std::min(kEvalChunk, examples.size() - start));
    const ForwardResult out = forward(model, chunk, adapters);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      correct += argmax_row(out.logits, i) == static_cast<std::size_t>(chunk[i].label);
    }
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

double evaluate(const ModelGraph& model, const Task& task, Split split,
                const AdapterTable* adapters) {
  return accuracy(model, task.split(split), adapters);
}

TrainResult pretrain(const ModelGraph& model, std::span<const Task> tasks,
                     const TrainConfig& cfg) {
  std::vector<Example> pooled;
  for (const Task& t : tasks) pooled.insert(pooled.end(), t.train.begin(), t.train.end());
  return train_on(model, pooled, cfg, all_parameters(model));
}

}  // namespace ranktuner
