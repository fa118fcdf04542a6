#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ranktuner/model.h"
#include "ranktuner/random.h"
#include "ranktuner/task.h"

namespace rt_test {

inline ranktuner::ModelSpec small_spec(std::size_t n_blocks = 2) {
  ranktuner::ModelSpec s;
  s.vocab_size = 16;
  s.d_model = 8;
  s.n_blocks = n_blocks;
  s.n_heads = 2;
  s.d_ff = 8;
  s.n_classes = 2;
  return s;
}

inline ranktuner::Task small_task(ranktuner::TaskKind kind, std::uint64_t seed = 3,
                                  std::size_t train = 64, std::size_t eval = 32) {
  ranktuner::TaskSizes sizes{train, eval, eval, 5};
  return ranktuner::make_task(kind, seed, sizes, 16);
}

inline std::vector<ranktuner::Example> random_batch(const ranktuner::ModelSpec& spec,
                                                    std::size_t n, std::size_t seq_len,
                                                    std::uint64_t seed) {
  ranktuner::Rng rng(seed, "test/batch");
  std::vector<ranktuner::Example> out(n);
  for (auto& e : out) {
    for (std::size_t t = 0; t < seq_len; ++t) e.tokens.push_back(static_cast<int>(rng.below(spec.vocab_size)));
    e.label = static_cast<int>(rng.below(spec.n_classes));
  }
  return out;
}

// Central difference of f around *x, restoring *x afterwards.
inline double central_difference(const std::function<double()>& f, double* x, double eps) {
  const double saved = *x;
  *x = saved + eps;
  const double up = f();
  *x = saved - eps;
  const double down = f();
  *x = saved;
  return (up - down) / (2.0 * eps);
}

// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
// turning rounding noise into huge relative errors.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace rt_test
