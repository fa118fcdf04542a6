#include <gtest/gtest.h>

#include "ranktuner/adapter.h"
#include "ranktuner/error.h"
#include "ranktuner/pruner.h"
#include "support.h"

using namespace ranktuner;

namespace {

const RankSpace kSpace;

// Default spec pruned at 20% so the adapters see uneven shapes.
ModelGraph pruned_model(std::uint64_t seed = 7) {
  const auto m = build_model({32, 16, 4, 2, 16, 2}, seed);
  const Task t = make_task(TaskKind::kMajorityToken, 3, {64, 16, 16, 6}, 32);
  PruneOptions o;
  o.global_rate = 0.2;
  return prune(m, t, o).model;
}

RankConfig random_config(std::size_t n_blocks, Rng& rng) {
  const auto tunable = tunable_mask(n_blocks, default_protected_blocks(n_blocks));
  RankConfig rc = uniform_config(tunable, 8, 8);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    if (tunable[b]) rc.ranks[b] = kSpace.candidates[rng.below(kSpace.candidates.size())];
  }
  return rc;
}

}  // namespace

TEST(RankConfig, Validation) {
  const auto tunable = tunable_mask(4, {0, 3});
  EXPECT_EQ(tunable, (std::vector<bool>{false, true, true, false}));
  EXPECT_NO_THROW(make_config({8, 2, 12, 8}, tunable).validate(4, kSpace));
  EXPECT_THROW(make_config({8, 5, 12, 8}, tunable).validate(4, kSpace), ConfigError);
  EXPECT_THROW(make_config({8, 2, 12, 8}, tunable).validate(5, kSpace), ConfigError);
  EXPECT_THROW(make_config({4, 2, 12, 8}, tunable).validate(4, kSpace), ConfigError);
  EXPECT_THROW(make_config({8, 2, 12}, tunable), ConfigError);
}

TEST(RankConfig, PresetsAndParsing) {
  const auto tunable = tunable_mask(10, {0, 9});
  EXPECT_EQ(uniform_config(tunable, 8, 8).ranks, std::vector<int>(10, 8));
  EXPECT_EQ(ramp_config(tunable, 8).ranks,
            (std::vector<int>{8, 4, 4, 6, 6, 10, 10, 12, 12, 8}));
  EXPECT_EQ(parse_rank_list("8, 8,4,6,10,8"), (std::vector<int>{8, 8, 4, 6, 10, 8}));
  EXPECT_THROW(parse_rank_list("8,x"), ConfigError);
  EXPECT_THROW(parse_rank_list("8,,4"), ConfigError);
  const RankConfig rc = make_config({8, 2, 12, 8}, tunable_mask(4, {0, 3}));
  EXPECT_EQ(rc.to_string(), "8,2,12,8");
  EXPECT_EQ(nlohmann::json(rc).dump(), "[8,2,12,8]");
  EXPECT_EQ(rc.tunable_ranks(), (std::vector<int>{2, 12}));
}

TEST(Attach, PreservesOutputsExactly) {
  const auto pruned = pruned_model();
  Rng rng(1, "test/configs");
  for (int i = 0; i < 10; ++i) {
    const auto rc = random_config(pruned.n_blocks(), rng);
    const auto adapted = attach_adapters(pruned, rc, kSpace, static_cast<std::uint64_t>(i));
    const auto batch = rt_test::random_batch(pruned.spec(), 8, 6, static_cast<std::uint64_t>(i));
    const auto a = forward(adapted, batch);
    const auto b = forward(pruned, batch);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.loss, b.loss);
    for (const auto& [name, lr] : adapted.adapters) {
      const std::size_t block = static_cast<std::size_t>(name[5] - '0');
      EXPECT_EQ(lr.rank(), static_cast<std::size_t>(rc.ranks[block])) << name;
      for (double v : lr.b.data()) EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(Attach, RejectsInvalidConfigs) {
  const auto pruned = pruned_model();
  const auto tunable = tunable_mask(4, {0, 3});
  EXPECT_THROW(attach_adapters(pruned, make_config({8, 5, 8, 8}, tunable), kSpace, 1), ConfigError);
  EXPECT_THROW(attach_adapters(pruned, make_config({8, 8, 8}, tunable_mask(3, {0})), kSpace, 1),
               ConfigError);
}

TEST(TrainableCount, SquareMatrixExamples) {
  const auto m = build_model(rt_test::small_spec(), 1);
  AdaptedModel a{m, {{"x", {Matrix(32, 4), Matrix(4, 32)}}}, {}};
  EXPECT_EQ(trainable_param_count(a), 256u);
  a.adapters["x"] = {Matrix(32, 2), Matrix(2, 32)};
  EXPECT_EQ(trainable_param_count(a), 128u);
}

TEST(TrainableCount, MatchesShapeTable) {
  const auto dense = build_model({64, 32, 6, 4, 64, 2}, 7);
  const auto tunable = tunable_mask(6, {0, 5});
  const auto a = attach_adapters(dense, uniform_config(tunable, 8, 8), kSpace, 1);
  // per block: four 32x32 projections and 32x64, 64x32 FFN, all rank 8
  EXPECT_EQ(trainable_param_count(a), 6u * (4 * 8 * 64 + 2 * 8 * 96));

  const auto pruned = pruned_model();
  const auto b = attach_adapters(pruned, uniform_config(tunable_mask(4, {0, 3}), 8, 8), kSpace, 1);
  std::size_t oracle = 0;
  for (std::size_t blk = 0; blk < 4; ++blk) {
    for (const char* leaf : kAdaptedLeaves) {
      const Matrix& w = pruned.param(param::block(blk, leaf));
      oracle += 8 * (w.rows() + w.cols());
    }
  }
  EXPECT_EQ(trainable_param_count(b), oracle);
}

TEST(TrainableCount, BudgetStaysComparableToUniform8) {
  const auto pruned = pruned_model();
  const auto tunable = tunable_mask(4, {0, 3});
  const double base = static_cast<double>(
      trainable_param_count(attach_adapters(pruned, uniform_config(tunable, 8, 8), kSpace, 1)));
  Rng rng(2, "test/configs");
  for (int i = 0; i < 50; ++i) {
    const auto rc = random_config(4, rng);
    const double ratio =
        static_cast<double>(trainable_param_count(attach_adapters(pruned, rc, kSpace, 1))) / base;
    EXPECT_GE(ratio, 2.0 / 8.0);
    EXPECT_LE(ratio, 12.0 / 8.0);
  }
}

TEST(Merge, ZeroBGivesBaseExactly) {
  const auto pruned = pruned_model();
  const auto a = attach_adapters(pruned, uniform_config(tunable_mask(4, {0, 3}), 8, 8), kSpace, 1);
  EXPECT_EQ(merge_adapters(a), pruned);
}

TEST(Merge, MatchesAdaptedForwardOnHundredInputs) {
  const auto pruned = pruned_model();
  Rng rng(5, "test/merge");
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    auto a = attach_adapters(pruned, random_config(4, rng), kSpace, static_cast<std::uint64_t>(i));
    for (auto& [_, lr] : a.adapters) {
      for (double& v : lr.a.data()) v = rng.uniform(-0.5, 0.5);
      for (double& v : lr.b.data()) v = rng.uniform(-0.5, 0.5);
    }
    const auto merged = merge_adapters(a);
    EXPECT_EQ(merged.param_count(), pruned.param_count());
    const auto batch = rt_test::random_batch(pruned.spec(), 1, 6, static_cast<std::uint64_t>(i));
    worst = std::max(worst, max_abs_diff(forward(a, batch).logits, forward(merged, batch).logits));
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(Recover, ZeroEpochsKeepsPrunedAccuracy) {
  const auto pruned = pruned_model();
  const Task t = make_task(TaskKind::kMajorityToken, 3, {64, 64, 64, 6}, 32);
  const auto a = attach_adapters(pruned, uniform_config(tunable_mask(4, {0, 3}), 8, 8), kSpace, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto r = recover(a, t, cfg);
  EXPECT_EQ(r.validation_accuracy, evaluate(pruned, t, Split::kValidation));
  EXPECT_EQ(r.test_accuracy, evaluate(pruned, t, Split::kTest));
}

TEST(Recover, OnlyAdaptersMoveAndRunsAreDeterministic) {
  const auto pruned = pruned_model();
  const Task t = make_task(TaskKind::kSortedOrder, 3, {128, 64, 64, 6}, 32);
  const auto a = attach_adapters(pruned, make_config({8, 2, 12, 8}, tunable_mask(4, {0, 3})),
                                 kSpace, 1);
  TrainConfig cfg{2, 16, 3e-3, OptimizerKind::kAdam, 4};
  const auto r1 = recover(a, t, cfg);
  const auto r2 = recover(a, t, cfg);
  EXPECT_EQ(r1.adapted.base, pruned);
  EXPECT_NE(r1.adapted.adapters, a.adapters);
  EXPECT_EQ(r1.adapted.adapters, r2.adapted.adapters);
  EXPECT_EQ(r1.validation_accuracy, r2.validation_accuracy);
  EXPECT_EQ(r1.loss_history, r2.loss_history);
  EXPECT_EQ(r1.validation_accuracy, accuracy(pruned, t.validation, &r1.adapted.adapters));
}
