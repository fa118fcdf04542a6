#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ranktuner/matrix.h"
#include "ranktuner/task.h"

namespace ranktuner {

struct ModelSpec {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t n_blocks = 6;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t n_classes = 2;

  std::size_t head_dim() const { return d_model / n_heads; }
  // Throws ConfigError on zero sizes or d_model % n_heads != 0.
  void validate() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct BlockMeta {
  std::size_t heads = 0;
  std::size_t ffn_channels = 0;

  friend bool operator==(const BlockMeta&, const BlockMeta&) = default;
};

using ParamTable = std::map<std::string, Matrix>;

// Parameter names. Weights use the row-vector convention y = x W, so a
// projection from d_in to d_out is stored as a d_in x d_out matrix.
namespace param {
inline constexpr const char* kEmbed = "embed";
inline constexpr const char* kFinalNorm = "final_norm";
inline constexpr const char* kHead = "head";
inline constexpr const char* kHeadBias = "head_bias";
std::string block(std::size_t b, std::string_view leaf);
}  // namespace param

// The six per-block projections that receive low-rank adapters.
inline constexpr std::array<const char*, 6> kAdaptedLeaves = {
    "wq", "wk", "wv", "wo", "ffn_up", "ffn_down"};

// Pre-norm transformer classifier: token embedding plus fixed sinusoidal
// positions, n_blocks of (RMSNorm -> multi-head attention -> residual,
// RMSNorm -> ReLU FFN -> residual), final RMSNorm, mean-pool, linear head.
class ModelGraph {
 public:
  ModelGraph() = default;
  ModelGraph(ModelSpec spec, std::uint64_t seed, std::vector<BlockMeta> blocks,
             ParamTable params);

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<BlockMeta>& blocks() const { return blocks_; }
  std::size_t n_blocks() const { return blocks_.size(); }
  std::size_t head_dim() const { return spec_.head_dim(); }

  const ParamTable& params() const { return params_; }
  ParamTable& mutable_params() { return params_; }
  const Matrix& param(const std::string& name) const;
  Matrix& mutable_param(const std::string& name);

  std::size_t param_count() const;

  // Checks every projection shape against the block metadata; throws
  // InputError naming the first inconsistency.
  void check_consistency() const;

  friend bool operator==(const ModelGraph&, const ModelGraph&) = default;

 private:
  ModelSpec spec_;
  std::uint64_t seed_ = 0;
  std::vector<BlockMeta> blocks_;
  ParamTable params_;
};

// Deterministic scaled-uniform (+-1/sqrt(fan_in)) init; norm scales start at 1
// and biases at 0. Each parameter draws from its own named stream.
ModelGraph build_model(const ModelSpec& spec, std::uint64_t seed);

// Low-rank update for one projection: delta W = a * b with a (d_in x r) and
// b (r x d_out).
struct LowRank {
  Matrix a;
  Matrix b;

  std::size_t rank() const { return a.cols(); }
  friend bool operator==(const LowRank&, const LowRank&) = default;
};
using AdapterTable = std::map<std::string, LowRank>;

struct ForwardResult {
  Matrix logits;  // batch x n_classes
  double loss = 0.0;
};

struct Gradients {
  ParamTable params;      // keyed like ModelGraph::params(); empty if skipped
  AdapterTable adapters;  // keyed like the adapter table; a/b hold dA/dB
};

struct BackwardOptions {
  bool base_params = true;
};

// Mean cross-entropy over the batch. All sequences must share one length.
// Throws InputError on out-of-range tokens, labels, or ragged batches.
ForwardResult forward(const ModelGraph& model, std::span<const Example> batch,
                      const AdapterTable* adapters = nullptr);

// Gradient of the mean loss. Adapter gradients are produced for every entry
// of `adapters`; base gradients unless disabled.
Gradients backward(const ModelGraph& model, std::span<const Example> batch,
                   const AdapterTable* adapters = nullptr,
                   BackwardOptions options = {});

// Both at once; `loss` receives the forward loss.
Gradients forward_backward(const ModelGraph& model, std::span<const Example> batch,
                           const AdapterTable* adapters, BackwardOptions options,
                           double* loss);

// Versioned JSON checkpoint: header (format, version, spec, seed, block
// metadata) followed by named parameter blobs.
nlohmann::json checkpoint_to_json(const ModelGraph& model);
ModelGraph checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const ModelGraph& model, const std::filesystem::path& path);
ModelGraph load_checkpoint(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

}  // namespace ranktuner
