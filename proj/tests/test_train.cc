#include <gtest/gtest.h>

#include "ranktuner/error.h"
#include "ranktuner/train.h"
#include "support.h"

using namespace ranktuner;

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.micro_batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_optimizer("rmsprop"), ConfigError);
}

TEST(Train, EmptyOrUnknownMaskIsConfigError) {
  const auto m = build_model(rt_test::small_spec(), 1);
  const Task t = rt_test::small_task(TaskKind::kParityOfMarked);
  EXPECT_THROW(train(m, t, {}, {}), ConfigError);
  EXPECT_THROW(train(m, t, {}, {"no_such_param"}), ConfigError);
}

TEST(Train, MaskFreezesEverythingElse) {
  const auto m = build_model(rt_test::small_spec(), 1);
  const Task t = rt_test::small_task(TaskKind::kMajorityToken);
  TrainConfig cfg;
  cfg.epochs = 2;
  const std::set<std::string> mask = {param::kHead, param::kHeadBias};
  const TrainResult r = train(m, t, cfg, mask);
  for (const auto& [name, p] : m.params()) {
    if (mask.contains(name)) {
      EXPECT_NE(r.model.param(name), p) << name;
    } else {
      EXPECT_EQ(r.model.param(name), p) << name;
    }
  }
}

TEST(Train, DeterministicHistories) {
  const auto m = build_model(rt_test::small_spec(), 1);
  const Task t = rt_test::small_task(TaskKind::kSortedOrder);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 4;
  const auto a = train(m, t, cfg, all_parameters(m));
  const auto b = train(m, t, cfg, all_parameters(m));
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(a.model, b.model);
}

TEST(Train, ConvexProbeHistoryNonincreasing) {
  // Head-only training with frozen features is logistic regression; full-batch
  // SGD with a small step never increases the loss.
  const auto m = build_model(rt_test::small_spec(), 2);
  const Task t = rt_test::small_task(TaskKind::kMajorityToken, 3, 64);
  TrainConfig cfg{40, 64, 0.05, OptimizerKind::kSgd, 0};
  const auto r = train(m, t, cfg, {param::kHead, param::kHeadBias});
  ASSERT_EQ(r.loss_history.size(), 40u);
  for (std::size_t i = 1; i < r.loss_history.size(); ++i) {
    EXPECT_LE(r.loss_history[i], r.loss_history[i - 1] + 1e-12) << i;
  }
  EXPECT_LT(r.loss_history.back(), r.loss_history.front());
}

TEST(Train, ParityIsLearnedWithAllParameters) {
  const ModelSpec spec{32, 32, 2, 4, 64, 2};
  const Task t = make_task(TaskKind::kParityOfMarked, 3, {1024, 512, 512, 6}, 32);
  TrainConfig cfg{30, 16, 3e-3, OptimizerKind::kAdam, 1};
  const auto m = build_model(spec, 7);
  const auto r = train(m, t, cfg, all_parameters(m));
  EXPECT_GT(evaluate(r.model, t, Split::kValidation), 0.9);
}

TEST(Evaluate, RandomModelIsNearChance) {
  const auto m = build_model(rt_test::small_spec(), 13);
  const Task t = rt_test::small_task(TaskKind::kSortedOrder, 3, 64, 400);
  EXPECT_NEAR(evaluate(m, t, Split::kTest), 0.5, 0.1);
}

TEST(Evaluate, MemorizesFourExamples) {
  const auto m = build_model(rt_test::small_spec(), 13);
  Task t = rt_test::small_task(TaskKind::kParityOfMarked, 3, 4, 4);
  t.validation = t.train;
  TrainConfig cfg{200, 4, 1e-2, OptimizerKind::kAdam, 0};
  const auto r = train(m, t, cfg, all_parameters(m));
  EXPECT_EQ(evaluate(r.model, t, Split::kValidation), 1.0);
}

TEST(Evaluate, EmptySplitIsInputError) {
  const auto m = build_model(rt_test::small_spec(), 13);
  Task t = rt_test::small_task(TaskKind::kParityOfMarked);
  t.test.clear();
  EXPECT_THROW(evaluate(m, t, Split::kTest), InputError);
}

TEST(Evaluate, AccuracyIsCorrectOverTotal) {
  auto m = build_model(rt_test::small_spec(), 13);
  m.mutable_param(param::kHead).fill(0.0);
  m.mutable_param(param::kHeadBias)(0, 1) = 1.0;  // always predicts class 1
  const Task t = rt_test::small_task(TaskKind::kParityOfMarked);
  std::size_t ones = 0;
  for (const auto& e : t.test) ones += static_cast<std::size_t>(e.label);
  EXPECT_DOUBLE_EQ(evaluate(m, t, Split::kTest),
                   static_cast<double>(ones) / static_cast<double>(t.test.size()));
}

TEST(Pretrain, UsesEveryTask) {
  const auto m = build_model(rt_test::small_spec(), 1);
  std::vector<Task> tasks = {rt_test::small_task(TaskKind::kParityOfMarked),
                             rt_test::small_task(TaskKind::kSortedOrder)};
  TrainConfig cfg;
  cfg.epochs = 1;
  const auto r = pretrain(m, tasks, cfg);
  EXPECT_EQ(r.loss_history.size(), 1u);
  EXPECT_NE(r.model, m);
}
