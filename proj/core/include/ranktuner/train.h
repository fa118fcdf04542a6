#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ranktuner/model.h"
#include "ranktuner/task.h"

namespace ranktuner {

enum class OptimizerKind { kSgd, kAdam };
std::string_view optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t micro_batch_size = 16;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Per-tensor first-order optimizer. Adam uses beta1=0.9, beta2=0.999,
// eps=1e-8 with bias correction; state is keyed by the caller's name.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate)
      : kind_(kind), lr_(learning_rate) {}

  // Call begin_step() once per update, then apply() for each tensor.
  void begin_step() { ++t_; }
  void apply(const std::string& key, Matrix& param, const Matrix& grad);

 private:
  struct Moments {
    Matrix m;
    Matrix v;
  };
  OptimizerKind kind_;
  double lr_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

struct TrainResult {
  ModelGraph model;
  std::vector<double> loss_history;  // mean micro-batch loss per epoch
};

// Trains the parameters named in `trainable`; every other parameter is left
// bit-identical. Throws ConfigError for an empty mask or unknown names.
TrainResult train(const ModelGraph& model, const Task& task, const TrainConfig& cfg,
                  const std::set<std::string>& trainable);

std::set<std::string> all_parameters(const ModelGraph& model);

// Fraction of correctly classified examples. Throws InputError on an empty
// split.
double evaluate(const ModelGraph& model, const Task& task, Split split,
                const AdapterTable* adapters = nullptr);
double accuracy(const ModelGraph& model, std::span<const Example> examples,
                const AdapterTable* adapters = nullptr);

// Multi-task training over the concatenated train splits (the dense
// "pretrained" model every pruning run starts from).
TrainResult pretrain(const ModelGraph& model, std::span<const Task> tasks,
                     const TrainConfig& cfg);

}  // namespace ranktuner
