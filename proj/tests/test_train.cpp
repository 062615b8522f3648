#include <gtest/gtest.h>

#include <cmath>

#include "cast/train.hpp"
#include "fixtures.hpp"

using namespace cast;

namespace {

ModelConfig compact(double dropout = 0.0) {
  ModelConfig c;
  c.vocab_size = fixtures::kSmallVocab;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.dropout = dropout;
  return c;
}

std::vector<const Example*> pointers(const std::vector<Example>& xs) {
  std::vector<const Example*> out;
  for (const auto& x : xs) out.push_back(&x);
  return out;
}

double max_grad_diff(const std::map<std::string, ad::Tensor<double>>& a,
                     const std::map<std::string, ad::Tensor<double>>& b) {
  double worst = 0;
  for (const auto& [name, t] : a) {
    const auto& u = b.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) worst = std::max(worst, std::abs(t.data[i] - u.data[i]));
  }
  return worst;
}

}  // namespace

TEST(Schedule, HandExamples) {
  const double peak = 5e-5;
  EXPECT_EQ(warmup_steps(100, 0.1), 10u);
  EXPECT_EQ(warmup_steps(95, 0.1), 10u);
  EXPECT_EQ(warmup_steps(30, 0.1), 3u);
  EXPECT_EQ(lr_at(0, 100, 0.1, peak), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5, 100, 0.1, peak), peak / 2);
  EXPECT_DOUBLE_EQ(lr_at(10, 100, 0.1, peak), peak);
  EXPECT_DOUBLE_EQ(lr_at(55, 100, 0.1, peak), peak / 2);
  EXPECT_EQ(lr_at(100, 100, 0.1, peak), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(0, 10, 0.0, peak), peak);
}

TEST(Schedule, PeakAtWarmupEndAndMonotoneSides) {
  for (std::size_t total : {7u, 20u, 100u, 1234u}) {
    const std::size_t w = warmup_steps(total, 0.1);
    double prev = -1;
    for (std::size_t k = 0; k <= w; ++k) {
      const double lr = lr_at(k, total, 0.1, 1.0);
      EXPECT_GT(lr, prev);
      prev = lr;
    }
    EXPECT_EQ(prev, 1.0);
    for (std::size_t k = w + 1; k <= total; ++k) {
      const double lr = lr_at(k, total, 0.1, 1.0);
      EXPECT_LT(lr, prev);
      prev = lr;
    }
    EXPECT_EQ(prev, 0.0);
  }
}

TEST(Schedule, Errors) {
  EXPECT_THROW(lr_at(0, 1, 0.5, 1.0), ConfigError);
  EXPECT_THROW(lr_at(0, 0, 0.1, 1.0), ConfigError);
  EXPECT_THROW(lr_at(11, 10, 0.1, 1.0), ConfigError);
}

TEST(Adam, FirstStepMovesByLrTimesSign) {
  ParameterStore<double> p;
  p.tensors.emplace("w", ad::Tensor<double>({3}, {0.5, -1, 2}));
  auto state = make_optimizer_state(p);
  std::map<std::string, ad::Tensor<double>> g;
  g.emplace("w", ad::Tensor<double>({3}, {1, -4, 0}));
  adam_step(p, g, state, 1e-3);
  EXPECT_DOUBLE_EQ(p.tensors.at("w").data[0], 0.5 - 1e-3 / (1 + 1e-8));
  EXPECT_DOUBLE_EQ(p.tensors.at("w").data[1], -1 + 1e-3 * 4 / (4 + 1e-8));
  EXPECT_EQ(p.tensors.at("w").data[2], 2.0);
  EXPECT_EQ(state.t, 1u);
}

TEST(Adam, ZeroGradientAndZeroLrLeaveParamsUnchanged) {
  auto p = init_params<double>(compact(), 1);
  const auto before = p;
  auto state = make_optimizer_state(p);
  std::map<std::string, ad::Tensor<double>> zero;
  for (const auto& [name, t] : p.tensors) zero.emplace(name, ad::Tensor<double>(t.shape));
  adam_step(p, zero, state, 1e-3);
  EXPECT_EQ(p, before);
  auto g = zero;
  for (auto& [_, t] : g)
    for (auto& x : t.data) x = 1;
  adam_step(p, g, state, 0.0);
  EXPECT_EQ(p, before);
  EXPECT_THROW(adam_step(p, g, state, -1.0), ConfigError);
  g.erase(g.begin());
  EXPECT_THROW(adam_step(p, g, state, 1e-3), ShapeError);
}

TEST(Loss, InitialLossIsNearLogV) {
  const auto ex = fixtures::separable_examples(16, 3);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto p = init_params<double>(compact(), seed);
    const double loss = batch_gradient<double>(p, pointers(ex), 1, 0).loss;
    EXPECT_NEAR(loss, std::log(double(fixtures::kSmallVocab)), 0.1 * std::log(double(fixtures::kSmallVocab)));
  }
}

TEST(Loss, TokenAverageOverTheBatch) {
  // Targets of different lengths: the batch loss weights every token equally.
  auto ex = fixtures::separable_examples(2, 4);
  ex[1].target = {fixtures::kYes, fixtures::kNo, fixtures::kYes, kEos};
  const auto p = init_params<double>(compact(), 5);
  double summed = 0;
  std::size_t tokens = 0;
  for (const auto& e : ex) {
    ad::Tape<double> tape;
    summed += Transformer<double>(tape, p).sequence_loss(e.src, e.mask, e.target, ad::Reduction::sum).item();
    tokens += e.target.size();
  }
  EXPECT_NEAR(batch_gradient<double>(p, pointers(ex), 1, 0).loss, summed / double(tokens), 1e-12);
}

TEST(Accumulation, SplitsGiveTheSameGradient) {
  const auto ex = fixtures::separable_examples(16, 6);
  for (double dropout : {0.0, 0.1}) {
    const auto p = init_params<double>(compact(dropout), 7);
    const auto one = batch_gradient<double>(p, pointers(ex), 1, 99);
    for (std::size_t k : {2u, 4u}) {
      const auto split = batch_gradient<double>(p, pointers(ex), k, 99);
      EXPECT_NEAR(split.loss, one.loss, 1e-12);
      EXPECT_LT(max_grad_diff(one.grads, split.grads), 1e-12) << k << " / " << dropout;
    }
  }
}

TEST(Accumulation, TrainingTrajectoriesAgree) {
  const auto ex = fixtures::separable_examples(32, 8);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.peak_lr = 1e-3;
  std::vector<ParameterStore<double>> finals;
  for (std::size_t k : {1u, 2u, 4u}) {
    cfg.accum_steps = k;
    TrainState<double> st{init_params<double>(compact(), 9), {}, 0};
    train(st, ex, cfg);
    finals.push_back(st.params);
  }
  for (std::size_t i = 1; i < finals.size(); ++i) {
    double worst = 0;
    for (const auto& [name, t] : finals[0].tensors) {
      const auto& u = finals[i].tensors.at(name);
      for (std::size_t j = 0; j < t.size(); ++j) worst = std::max(worst, std::abs(t.data[j] - u.data[j]));
    }
    EXPECT_LT(worst, 1e-9);
  }
}

TEST(Train, StepsUseTheScheduleAndCountCorrectly) {
  const auto ex = fixtures::separable_examples(20, 10);
  TrainConfig cfg;
  cfg.epochs = 3;
  TrainState<double> st{init_params<double>(compact(), 11), {}, 0};
  const auto hist = train(st, ex, cfg);
  ASSERT_EQ(hist.size(), 6u);
  EXPECT_EQ(st.step, 6u);
  for (std::size_t k = 0; k < hist.size(); ++k) {
    EXPECT_EQ(hist[k].step, k + 1);
    EXPECT_EQ(hist[k].epoch, k / 2);
    EXPECT_EQ(hist[k].lr, lr_at(k, 6, 0.1, cfg.peak_lr));
  }
}

TEST(Train, EpochOrderIsASeededPermutation) {
  const auto a = epoch_order(50, 42, 0);
  EXPECT_EQ(a, epoch_order(50, 42, 0));
  EXPECT_NE(a, epoch_order(50, 42, 1));
  EXPECT_NE(a, epoch_order(50, 43, 0));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Train, DeterministicGivenSeed) {
  const auto ex = fixtures::separable_examples(24, 12);
  TrainConfig cfg;
  cfg.epochs = 2;
  auto run = [&](std::uint64_t seed) {
    cfg.seed = seed;
    TrainState<float> st{init_params<float>(compact(0.1), 13), {}, 0};
    auto h = train(st, ex, cfg);
    return std::make_pair(h, st.params);
  };
  const auto a = run(1);
  const auto b = run(1);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.first, run(2).first);
}

TEST(Train, InterruptedRunResumesIdentically) {
  const auto ex = fixtures::separable_examples(40, 14);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.effective_batch = 8;
  TrainState<double> full{init_params<double>(compact(0.1), 15), {}, 0};
  const auto straight = train(full, ex, cfg);
  ASSERT_EQ(straight.size(), 20u);
  TrainState<double> part{init_params<double>(compact(0.1), 15), {}, 0};
  const auto first = train(part, ex, cfg, {[](const StepRecord& r) { return r.step < 10; }});
  ASSERT_EQ(first.size(), 10u);
  const auto rest = train(part, ex, cfg);
  ASSERT_EQ(rest.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(rest[i], straight[10 + i]);
  EXPECT_EQ(part.params, full.params);
  EXPECT_EQ(part.optimizer, full.optimizer);
}

TEST(Train, Errors) {
  TrainConfig cfg;
  TrainState<double> st{init_params<double>(compact(), 16), {}, 0};
  EXPECT_THROW(train(st, {}, cfg), PlanError);
  cfg.accum_steps = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.accum_steps = 4;
  cfg.effective_batch = 6;
  EXPECT_THROW(cfg.validate(), ConfigError);
  Example all_pad{{5, kEos}, {1, 1}, {kPad, kPad}};
  std::vector<const Example*> batch{&all_pad};
  EXPECT_THROW(batch_gradient<double>(st.params, batch, 1, 0), Error);
}
