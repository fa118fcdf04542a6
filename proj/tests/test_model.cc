#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ranktuner/error.h"
#include "ranktuner/model.h"
#include "support.h"

using namespace ranktuner;
using rt_test::central_difference;
using rt_test::relative_error;

TEST(BuildModel, DefaultSpecHasHeadDim8) {
  ModelSpec s{64, 32, 6, 4, 64, 2};
  const ModelGraph m = build_model(s, 7);
  EXPECT_EQ(m.head_dim(), 8u);
  EXPECT_EQ(m.n_blocks(), 6u);
  for (const auto& b : m.blocks()) {
    EXPECT_EQ(b.heads, 4u);
    EXPECT_EQ(b.ffn_channels, 64u);
  }
  EXPECT_EQ(m.param(param::block(3, "wq")).rows(), 32u);
  EXPECT_EQ(m.param(param::block(3, "ffn_down")).rows(), 64u);
}

TEST(BuildModel, IndivisibleOrZeroDimsAreConfigErrors) {
  EXPECT_THROW(build_model({64, 30, 6, 4, 64, 2}, 7), ConfigError);
  EXPECT_THROW(build_model({0, 32, 6, 4, 64, 2}, 7), ConfigError);
  EXPECT_THROW(build_model({64, 32, 0, 4, 64, 2}, 7), ConfigError);
  EXPECT_THROW(build_model({64, 32, 6, 4, 0, 2}, 7), ConfigError);
  EXPECT_THROW(build_model({64, 32, 6, 4, 64, 0}, 7), ConfigError);
}

TEST(BuildModel, DeterministicPerSeed) {
  const auto s = rt_test::small_spec();
  EXPECT_EQ(build_model(s, 7), build_model(s, 7));
  EXPECT_NE(build_model(s, 7).params(), build_model(s, 8).params());
}

TEST(BuildModel, ParamCountMatchesShapeTable) {
  ModelSpec s{64, 32, 6, 4, 64, 2};
  const std::size_t d = 32, f = 64;
  const std::size_t per_block = d + 4 * d * d + d + d * f + f + f * d;
  EXPECT_EQ(build_model(s, 1).param_count(), 64 * d + d + d * 2 + 2 + 6 * per_block);
}

TEST(Forward, ZeroHeadGivesLn2) {
  auto m = build_model(rt_test::small_spec(), 1);
  m.mutable_param(param::kHead).fill(0.0);
  m.mutable_param(param::kHeadBias).fill(0.0);
  const auto batch = rt_test::random_batch(m.spec(), 10, 5, 1);
  EXPECT_NEAR(forward(m, batch).loss, std::log(2.0), 1e-15);
}

TEST(Forward, SaturatedCorrectLogitGivesZeroLoss) {
  auto m = build_model(rt_test::small_spec(), 1);
  m.mutable_param(param::kHead).fill(0.0);
  m.mutable_param(param::kHeadBias)(0, 1) = 50.0;
  auto batch = rt_test::random_batch(m.spec(), 1, 5, 2);
  batch[0].label = 1;
  EXPECT_LT(forward(m, batch).loss, 1e-20);
}

TEST(Forward, InvalidBatchesAreInputErrors) {
  const auto m = build_model(rt_test::small_spec(), 1);
  std::vector<Example> bad = {{{0, 1, 16}, 0}};
  EXPECT_THROW(forward(m, bad), InputError);
  bad = {{{0, 1, 15}, 2}};
  EXPECT_THROW(forward(m, bad), InputError);
  bad = {{{0, 1, 2}, 0}, {{0, 1}, 0}};
  EXPECT_THROW(forward(m, bad), InputError);
  EXPECT_THROW(forward(m, std::vector<Example>{}), InputError);
  std::vector<Example> ok = {{{0, 1, 15}, 1}};
  EXPECT_NO_THROW(forward(m, ok));
}

TEST(Forward, UntrainedLossNearLn2OnBalancedData) {
  const auto m = build_model(rt_test::small_spec(), 11);
  const Task t = rt_test::small_task(TaskKind::kParityOfMarked, 3, 256);
  EXPECT_NEAR(forward(m, t.train).loss / std::log(2.0), 1.0, 0.02);
}

TEST(Forward, LogitsAreFinite) {
  const auto m = build_model({64, 32, 6, 4, 64, 2}, 7);
  const auto batch = rt_test::random_batch(m.spec(), 8, 8, 3);
  EXPECT_TRUE(forward(m, batch).logits.all_finite());
}

namespace {

// Checks `samples_per_param` entries of every parameter (and adapter matrix)
// against central differences; returns the worst relative error and count.
std::pair<double, std::size_t> worst_gradient_error(ModelGraph& m, AdapterTable* adapters,
                                                    const std::vector<Example>& batch,
                                                    std::size_t samples_per_param) {
  const Gradients g = backward(m, batch, adapters);
  auto loss = [&] { return forward(m, batch, adapters).loss; };
  Rng rng(5, "test/fd");
  double worst = 0.0;
  std::size_t checked = 0;
  auto check = [&](Matrix& p, const Matrix& grad) {
    for (std::size_t s = 0; s < samples_per_param; ++s) {
      const std::size_t i = rng.below(p.size());
      const double numeric = central_difference(loss, &p.data()[i], 1e-4);
      worst = std::max(worst, relative_error(grad.data()[i], numeric));
      ++checked;
    }
  };
  for (auto& [name, p] : m.mutable_params()) check(p, g.params.at(name));
  if (adapters) {
    for (auto& [name, lr] : *adapters) {
      check(lr.a, g.adapters.at(name).a);
      check(lr.b, g.adapters.at(name).b);
    }
  }
  return {worst, checked};
}

}  // namespace

TEST(Backward, MatchesFiniteDifferences) {
  auto m = build_model(rt_test::small_spec(), 3);
  // move norms and biases off their init so every path is exercised
  Rng rng(9, "test/perturb");
  for (auto& [name, p] : m.mutable_params()) {
    for (double& v : p.data()) v += 0.1 * rng.uniform(-1, 1);
  }
  const auto batch = rt_test::random_batch(m.spec(), 4, 5, 4);
  const auto [worst, checked] = worst_gradient_error(m, nullptr, batch, 4);
  EXPECT_GE(checked, 64u);
  EXPECT_LT(worst, 1e-4);
}

TEST(Backward, AdapterGradientsMatchFiniteDifferences) {
  auto m = build_model(rt_test::small_spec(), 3);
  AdapterTable adapters;
  Rng rng(10, "test/adapters");
  for (std::size_t b = 0; b < m.n_blocks(); ++b) {
    for (const char* leaf : kAdaptedLeaves) {
      const std::string name = param::block(b, leaf);
      const Matrix& w = m.param(name);
      LowRank lr{Matrix(w.rows(), 2), Matrix(2, w.cols())};
      for (double& v : lr.a.data()) v = rng.uniform(-0.5, 0.5);
      for (double& v : lr.b.data()) v = rng.uniform(-0.5, 0.5);
      adapters[name] = std::move(lr);
    }
  }
  const auto batch = rt_test::random_batch(m.spec(), 3, 5, 6);
  const auto [worst, checked] = worst_gradient_error(m, &adapters, batch, 3);
  EXPECT_GE(checked, 64u);
  EXPECT_LT(worst, 1e-4);
}

TEST(Backward, FfnUpEntrySingleCheck) {
  auto m = build_model(rt_test::small_spec(), 4);
  const auto batch = rt_test::random_batch(m.spec(), 6, 5, 7);
  const Gradients g = backward(m, batch);
  const std::string name = param::block(1, "ffn_up");
  double* x = &m.mutable_param(name)(3, 2);
  const double numeric = central_difference([&] { return forward(m, batch).loss; }, x, 1e-4);
  EXPECT_LT(relative_error(g.params.at(name)(3, 2), numeric), 1e-4);
}

TEST(Backward, UnusedEmbeddingRowsGetZeroGradient) {
  const auto m = build_model(rt_test::small_spec(), 4);
  std::vector<Example> batch = {{{0, 5, 6, 7, 5}, 1}, {{0, 6, 6, 7, 8}, 0}};
  const Matrix& ge = backward(m, batch).params.at(param::kEmbed);
  for (std::size_t r = 0; r < ge.rows(); ++r) {
    const bool used = r == 0 || (r >= 5 && r <= 8);
    double norm = 0.0;
    for (double v : ge.row(r)) norm += v * v;
    if (used) {
      EXPECT_GT(norm, 0.0) << r;
    } else {
      EXPECT_EQ(norm, 0.0) << r;
    }
  }
}

TEST(Backward, DuplicatedRowsLeaveMeanGradientUnchanged) {
  const auto m = build_model(rt_test::small_spec(), 4);
  const auto base = rt_test::random_batch(m.spec(), 3, 5, 8);
  std::vector<Example> doubled;
  for (const auto& e : base) {
    doubled.push_back(e);
    doubled.push_back(e);
  }
  const Gradients a = backward(m, base);
  const Gradients b = backward(m, doubled);
  for (const auto& [name, g] : a.params) {
    EXPECT_LT(max_abs_diff(g, b.params.at(name)), 1e-14) << name;
  }
}

TEST(Backward, ForwardBackwardAgreesWithSeparateCalls) {
  const auto m = build_model(rt_test::small_spec(), 4);
  const auto batch = rt_test::random_batch(m.spec(), 5, 5, 9);
  double loss = 0.0;
  const Gradients g = forward_backward(m, batch, nullptr, {}, &loss);
  EXPECT_EQ(loss, forward(m, batch).loss);
  EXPECT_EQ(g.params, backward(m, batch).params);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto m = build_model(rt_test::small_spec(), 21);
  const auto path = std::filesystem::temp_directory_path() / "ranktuner_ckpt_test.json";
  save_checkpoint(m, path);
  EXPECT_EQ(load_checkpoint(path), m);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsWrongFormat) {
  nlohmann::json j = checkpoint_to_json(build_model(rt_test::small_spec(), 1));
  j["format"] = "something-else";
  EXPECT_THROW(checkpoint_from_json(j), InputError);
}

TEST(Consistency, DetectsBadShapes) {
  auto m = build_model(rt_test::small_spec(), 1);
  ParamTable p = m.params();
  p[param::block(0, "wq")] = Matrix(8, 7);
  EXPECT_THROW(ModelGraph(m.spec(), 1, m.blocks(), p), InputError);
}
