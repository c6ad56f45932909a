#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "dpsr/negatives.hpp"
#include "dpsr/scoring.hpp"
#include "dpsr/trainer.hpp"
#include "support.hpp"

using namespace dpsr;

namespace {

TowerConfig tiny_towers(std::size_t vocab, std::size_t heads = 2) {
  TowerConfig c;
  c.dim = 4;
  c.heads = heads;
  c.agg_dim = 5;
  c.mlp_hidden = {6};
  c.vocab_size = vocab;
  return c;
}

}  // namespace

TEST(Attention, WeightsFormADistribution) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(1 + rng() % 6);
    for (auto& x : s) x = n(rng);
    for (double beta : {1e-3, 0.5, 1.0, 50.0}) {
      const auto w = attention_weights<double>(s, beta);
      EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
      for (auto x : w) EXPECT_GE(x, 0.0);
      const double f = soft_dot<double>(s, beta);
      EXPECT_LE(f, *std::max_element(s.begin(), s.end()) + 1e-12);
      EXPECT_GE(f, *std::min_element(s.begin(), s.end()) - 1e-12);
    }
  }
}

TEST(Attention, TemperatureLimits) {
  const std::vector<double> s{0.2, 0.9, -0.4};
  EXPECT_NEAR(soft_dot<double>(s, 1e-4), 0.9, 1e-9);
  const auto w = attention_weights<double>(s, 1e6);
  for (auto x : w) EXPECT_NEAR(x, 1.0 / 3, 1e-6);
  EXPECT_NEAR(soft_dot<double>(s, 1e6), (0.2 + 0.9 - 0.4) / 3, 1e-6);
}

TEST(Attention, StableForLargeScores) {
  const std::vector<double> s{1e6, 1e6 - 1};
  const auto w = attention_weights<double>(s, 1.0);
  EXPECT_NEAR(w[0], 1 / (1 + std::exp(-1.0)), 1e-12);
  EXPECT_THROW(attention_weights<double>(s, 0.0), Error);
}

TEST(Hinge, Example) {
  const std::vector<double> negs{0.3, 0.45, 0.7};
  EXPECT_NEAR(hinge_loss<double>(0.5, negs, 0.1), 0.35, 1e-12);
  EXPECT_EQ(hinge_loss<double>(0.5, std::span<const double>{}, 0.1), 0.0);
  EXPECT_THROW(hinge_loss<double>(0.5, negs, -1.0), Error);
}

TEST(Negatives, QuotaSplit) {
  EXPECT_EQ(random_quota(0.5, 64), 32u);
  EXPECT_EQ(random_quota(0.0, 64), 0u);
  EXPECT_EQ(random_quota(1.0, 64), 64u);
  std::vector<int> rnd(100), bat(100);
  std::iota(rnd.begin(), rnd.end(), 0);
  std::iota(bat.begin(), bat.end(), 1000);
  Rng rng(1);
  for (double alpha : {0.0, 0.25, 0.5, 1.0}) {
    const auto split = assemble_negatives<int>(rnd, bat, alpha, 64, rng);
    EXPECT_EQ(split.random.size(), random_quota(alpha, 64));
    EXPECT_EQ(split.size(), 64u);
    EXPECT_EQ(std::set<int>(split.random.begin(), split.random.end()).size(), split.random.size());
    EXPECT_EQ(std::set<int>(split.batch.begin(), split.batch.end()).size(), split.batch.size());
    for (auto x : split.batch) EXPECT_GE(x, 1000);
  }
}

TEST(Negatives, ShortSourceIsNotBackfilled) {
  const std::vector<int> rnd{1, 2, 3}, bat{10, 11, 12, 13, 14, 15, 16, 17};
  Rng rng(2);
  const auto split = assemble_negatives<int>(rnd, bat, 0.5, 10, rng);
  EXPECT_EQ(split.random.size(), 3u);
  EXPECT_EQ(split.batch.size(), 5u);
  EXPECT_THROW(assemble_negatives<int>(std::vector<int>{}, std::vector<int>{}, 0.5, 4, rng), Error);
  EXPECT_THROW(assemble_negatives<int>(rnd, bat, 1.5, 4, rng), Error);
}

TEST(Negatives, BatchPositionsExcludeSelf) {
  EXPECT_TRUE(batch_negative_positions(1, 0).empty());
  EXPECT_EQ(batch_negative_positions(4, 2), (std::vector<std::size_t>{0, 1, 3}));
  const std::vector<std::string> pos{"a", "b", "a"};
  EXPECT_EQ(batch_negatives<std::string>(pos, 1), (std::vector<std::string>{"a", "a"}));
}

TEST(PrepareStep, ColumnsAndNegatives) {
  const auto data = support::random_training_data(30, 50, 40, 1);
  TrainConfig cfg;
  cfg.n_rand = 16;
  cfg.n_neg = 12;
  Rng rng(5);
  std::vector<std::size_t> batch{0, 1, 2, 3, 4, 5, 6, 7};
  const auto in = prepare_step(data, batch, cfg, rng);
  ASSERT_EQ(in.items.size(), batch.size() + cfg.n_rand);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    EXPECT_EQ(in.item_index[i], data.pairs[batch[i]].item);
    const auto& neg = in.negatives[i];
    EXPECT_LE(neg.random.size(), 6u);
    for (auto c : neg.random) {
      EXPECT_GE(c, batch.size());
      EXPECT_NE(in.item_index[c], in.item_index[i]);
    }
    for (auto c : neg.batch) {
      EXPECT_LT(c, batch.size());
      EXPECT_NE(c, i);
      EXPECT_NE(in.item_index[c], in.item_index[i]);
    }
  }
}

TEST(PrepareStep, SupervisedNegativesJoinRandomSource) {
  auto data = support::random_training_data(30, 50, 4, 2);
  data.pairs[0].query_key = "shared";
  data.pairs[1].query_key = "shared";
  const std::size_t bad = (data.pairs[0].item + 1) % 50;
  data.supervised_negatives["shared"] = {bad};
  TrainConfig cfg;
  cfg.alpha = 1.0;
  cfg.n_rand = 1;
  cfg.n_neg = 2;
  Rng rng(3);
  std::vector<std::size_t> batch{0, 1, 2};
  const auto in = prepare_step(data, batch, cfg, rng);
  ASSERT_EQ(in.items.size(), 3u + 1u + 1u);
  EXPECT_EQ(in.item_index.back(), bad);
  if (data.pairs[0].item != bad) {
    const auto& r = in.negatives[0].random;
    EXPECT_NE(std::find(r.begin(), r.end(), in.items.size() - 1), r.end());
  }
  for (auto c : in.negatives[2].random) EXPECT_NE(c, in.items.size() - 1);
}

TEST(BatchLoss, MatchesPerTripletOracle) {
  const auto data = support::random_training_data(25, 40, 16, 3);
  const auto params = init_params<double>(tiny_towers(25), 4);
  TrainConfig cfg;
  cfg.n_rand = 8;
  cfg.n_neg = 6;
  Rng rng(1);
  std::vector<std::size_t> batch{0, 1, 2, 3, 4};
  const auto in = prepare_step(data, batch, cfg, rng);
  const double beta = 0.7, margin = 0.3;
  const auto r = batch_loss<double>(params, in, beta, margin);
  EXPECT_EQ(r.item_forwards, batch.size() + cfg.n_rand);
  double want = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto q = query_forward<double>(params, in.queries[i]);
    const double pos = score<double>(q, item_forward<double>(params, in.items[i]).g, beta);
    std::vector<double> negs;
    for (const auto* part : {&in.negatives[i].random, &in.negatives[i].batch}) {
      for (auto c : *part) negs.push_back(score<double>(q, item_forward<double>(params, in.items[c]).g, beta));
    }
    want += hinge_loss<double>(pos, negs, margin);
  }
  EXPECT_NEAR(r.loss, want, 1e-9);
}

TEST(BatchLoss, AnalyticGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto data = support::random_training_data(12, 10, 6, seed);
    const auto params = init_params<double>(tiny_towers(12), seed);
    TrainConfig cfg;
    cfg.n_rand = 3;
    cfg.n_neg = 4;
    Rng rng(seed);
    std::vector<std::size_t> batch{0, 1, 2};
    const auto in = prepare_step(data, batch, cfg, rng);
    const auto check = support::check_gradients(params, in, 1.0, 1.0, 1e-5);
    EXPECT_GT(check.checked, 50u);
    EXPECT_LT(check.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(AdaGrad, SingleUpdateMatchesFormula) {
  const auto cfg = tiny_towers(6, 1);
  auto params = init_params<double>(cfg, 1);
  const auto before = params;
  Gradients<double> g(cfg);
  g.grad.item.mlp.layers[0].weight(0, 0) = 2.0;
  g.grad.query.token_table(3, 1) = -0.5;
  g.grad.query.token_table(kUnkId, 1) = 7.0;
  g.query_rows = {kUnkId, 3};
  AdaGrad<double> opt(cfg, 0.1);
  opt.apply(params, g);
  EXPECT_NEAR(params.item.mlp.layers[0].weight(0, 0),
              before.item.mlp.layers[0].weight(0, 0) - 0.1 * 2.0 / std::sqrt(4.0 + 1e-8), 1e-12);
  EXPECT_NEAR(params.query.token_table(3, 1), before.query.token_table(3, 1) + 0.1 * 0.5 / std::sqrt(0.25 + 1e-8),
              1e-12);
  EXPECT_EQ(params.query.token_table(kUnkId, 1), 0.0);
  EXPECT_EQ(params.query.token_table(2, 1), before.query.token_table(2, 1));
  EXPECT_EQ(params.item.mlp.layers[0].weight(0, 1), before.item.mlp.layers[0].weight(0, 1));
}

TEST(Train, DeterministicAndLossDecreases) {
  const auto data = support::random_training_data(40, 30, 600, 9);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.n_rand = 16;
  cfg.n_neg = 16;
  cfg.epochs = 6;
  cfg.learning_rate = 0.05;
  const auto towers = tiny_towers(40);
  const auto a = train(data, cfg, towers);
  const auto b = train(data, cfg, towers);
  ASSERT_EQ(a.losses, b.losses);
  ASSERT_EQ(a.steps, 6u * (600 / 16 + 1));
  const auto head = std::accumulate(a.losses.begin(), a.losses.begin() + 20, 0.0);
  const auto tail = std::accumulate(a.losses.end() - 20, a.losses.end(), 0.0);
  EXPECT_LT(tail, head * 0.8);
  EXPECT_TRUE(a.params.query.token_table.row(kUnkId).isZero(0));
  EXPECT_TRUE(all_finite(a.params));
}

TEST(Train, MaxStepsStopsEarlyAndZeroStepsKeepsInit) {
  const auto data = support::random_training_data(20, 10, 100, 1);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.n_rand = 4;
  cfg.n_neg = 4;
  cfg.max_steps = 3;
  const auto towers = tiny_towers(20);
  EXPECT_EQ(train(data, cfg, towers).steps, 3u);
  cfg.max_steps = 0;
  const auto r = train(data, cfg, towers);
  EXPECT_EQ(r.steps, 0u);
  const auto init = init_params<float>(towers, cfg.seed);
  EXPECT_EQ(r.params.item.mlp.layers[0].weight, init.item.mlp.layers[0].weight);
}

TEST(Train, RejectsBadConfig) {
  const auto data = support::random_training_data(20, 10, 10, 1);
  TrainConfig cfg;
  cfg.alpha = 0.5;
  cfg.batch_size = 1;
  EXPECT_THROW(train(data, cfg, tiny_towers(20)), Error);
  cfg = {};
  cfg.beta = 0;
  EXPECT_THROW(train(data, cfg, tiny_towers(20)), Error);
  EXPECT_THROW(train(TrainingData{data.items, {}, {}}, TrainConfig{}, tiny_towers(20)), Error);
}
