#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ranktuner/adapter.h"
#include "ranktuner/matrix.h"

namespace ranktuner {

enum class RecordPhase { kOffline, kOnline };

// One measured point: a rank configuration recovered on a task.
struct EvalRecord {
  RankConfig config;
  std::string task_id;
  double performance = 0.0;  // accuracy in [0, 1]
  RecordPhase phase = RecordPhase::kOffline;
};

// Performance model: input layer over the tunable ranks, three tanh hidden
// layers, one linear output unit. widths = (l_in, D1, D2, D3, 1).
struct Surrogate {
  std::vector<std::size_t> widths;
  std::vector<Matrix> weights;  // widths[i] x widths[i + 1]
  std::vector<Matrix> biases;   // 1 x widths[i + 1]
  double rank_scale = 12.0;     // ranks are divided by this before input
  std::uint64_t steps = 0;      // optimizer steps taken over its lifetime

  std::size_t input_dim() const { return widths.front(); }
  friend bool operator==(const Surrogate&, const Surrogate&) = default;
};

// Tunable ranks / rank_scale, protected blocks dropped.
std::vector<double> encode_config(const RankConfig& config, double rank_scale);

// dims = (D1, D2, D3, 1). Throws ConfigError on zero widths or output != 1.
Surrogate init_surrogate(std::size_t l_tunable, const std::vector<std::size_t>& dims,
                         std::uint64_t seed, double rank_scale = 12.0);

std::vector<double> predict(const Surrogate& s, const Matrix& features);
std::vector<double> predict(const Surrogate& s, std::span<const RankConfig> configs);
double predict_one(const Surrogate& s, const RankConfig& config);

// Mean squared error and its gradient with respect to every weight and bias.
struct SurrogateGradient {
  double loss = 0.0;
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;
};
SurrogateGradient mse_gradient(const Surrogate& s, const Matrix& features,
                               std::span<const double> targets);

struct FitOptions {
  std::size_t steps = 2000;
  double learning_rate = 1e-2;
  friend bool operator==(const FitOptions&, const FitOptions&) = default;
};

// Full-batch Adam on mean squared error. Keeps the lowest-loss iterate, so the
// returned training MSE never exceeds the starting MSE. History holds the loss
// before every step plus the final loss.
std::vector<double> fit(Surrogate& s, std::span<const EvalRecord> records,
                        const FitOptions& options);
std::vector<double> fit(Surrogate& s, const Matrix& features, std::span<const double> targets,
                        const FitOptions& options);

double training_mse(const Surrogate& s, std::span<const EvalRecord> records);

// Pooled fit over records from several tasks. A single task id only logs a
// warning. Throws InputError on an empty pool.
Surrogate meta_pretrain(Surrogate s, std::span<const EvalRecord> records,
                        const FitOptions& options);

// Fit over replay + new_record with the learning rate cosine-decayed to zero
// (fixed-rate Adam jitters more than a near-exact record's gap). Keeps the
// lowest pooled loss among iterates that bring the prediction for new_record
// strictly closer to it, even if that loss is above the starting one; with no
// such iterate the weights come back unchanged. Throws InputError if
// new_record belongs to a task other than target_task.
Surrogate online_update(Surrogate s, const EvalRecord& new_record,
                        std::span<const EvalRecord> replay, const std::string& target_task,
                        const FitOptions& options = {200, 1e-2});

void to_json(nlohmann::json& j, const Surrogate& s);
void from_json(const nlohmann::json& j, Surrogate& s);
void to_json(nlohmann::json& j, const EvalRecord& r);
// Tunability cannot be recovered from the rank list alone; callers supply it.
EvalRecord record_from_json(const nlohmann::json& j, const std::vector<bool>& tunable);

}  // namespace ranktuner
