#pragma once

// Fine-tuning loop: token-level cross entropy under teacher forcing, Adam,
// linear warmup then linear decay, effective batch 16 assembled from up to
// four accumulated micro-batches.

#include <cmath>
#include <cstdint>
#include <functional>
#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cast/error.hpp"
#include "cast/model.hpp"
#include "cast/rng.hpp"
#include "cast/tensor.hpp"

namespace cast {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct TrainConfig {
  double peak_lr = 5e-5;
  double warmup_ratio = 0.10;
  std::size_t effective_batch = 16;
  std::size_t accum_steps = 1;  // 1, 2 or 4
  std::size_t epochs = 12;
  std::size_t max_src_len = 128;
  std::size_t max_tgt_len = 10;
  std::uint64_t seed = 42;
  AdamConfig adam;

  std::size_t micro_batch() const { return effective_batch / accum_steps; }

  void validate() const {
    if (accum_steps != 1 && accum_steps != 2 && accum_steps != 4) {
      throw ConfigError("accum_steps must be 1, 2 or 4, got " + std::to_string(accum_steps));
    }
    if (effective_batch == 0 || effective_batch % accum_steps != 0) {
      throw ConfigError("effective_batch must be a positive multiple of accum_steps");
    }
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(peak_lr >= 0)) throw ConfigError("peak_lr must be non-negative");
    if (warmup_ratio < 0 || warmup_ratio >= 1) throw ConfigError("warmup_ratio must lie in [0, 1)");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// W = ceil(warmup_ratio * total_steps), with a 1e-9 allowance so products
// such as 0.1 * 30 round to the intended integer.
inline std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio) {
  return static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps) - 1e-9));
}

// peak * step / W during warmup, peak * (total - step) / (total - W) after.
inline double lr_at(std::size_t step, std::size_t total_steps, double warmup_ratio, double peak) {
  if (total_steps < 1) throw ConfigError("lr_at: total_steps must be at least 1");
  if (step > total_steps) throw ConfigError("lr_at: step beyond total_steps");
  const std::size_t w = warmup_steps(total_steps, warmup_ratio);
  if (w >= total_steps) throw ConfigError("lr_at: warmup covers every step, no decay region");
  if (step < w) return peak * (static_cast<double>(step) / static_cast<double>(w));
  return peak * (static_cast<double>(total_steps - step) / static_cast<double>(total_steps - w));
}

template <typename T>
struct OptimizerState {
  std::map<std::string, ad::Tensor<T>> m;
  std::map<std::string, ad::Tensor<T>> v;
  std::uint64_t t = 0;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

template <typename T>
OptimizerState<T> make_optimizer_state(const ParameterStore<T>& params) {
  OptimizerState<T> s;
  for (const auto& [name, tensor] : params.tensors) {
    s.m.emplace(name, ad::Tensor<T>(tensor.shape));
    s.v.emplace(name, ad::Tensor<T>(tensor.shape));
  }
  return s;
}

// One Adam update with bias correction:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
template <typename T>
void adam_step(ParameterStore<T>& params, const std::map<std::string, ad::Tensor<T>>& grads,
               OptimizerState<T>& state, double lr, const AdamConfig& cfg = {}) {
  if (lr < 0) throw ConfigError("adam_step: negative learning rate");
  if (grads.size() != params.tensors.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.tensors.size()) + " parameters");
  }
  for (const auto& [name, tensor] : params.tensors) {
    auto g = grads.find(name);
    auto m = state.m.find(name);
    auto v = state.v.find(name);
    if (g == grads.end() || m == state.m.end() || v == state.v.end()) {
      throw ShapeError("adam_step: no gradient or moment for parameter '" + name + "'");
    }
    if (g->second.shape != tensor.shape || m->second.shape != tensor.shape || v->second.shape != tensor.shape) {
      throw ShapeError("adam_step: shape mismatch for parameter '" + name + "'");
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T corr1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
  const T corr2 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
  const T step = static_cast<T>(lr);
  const T eps = static_cast<T>(cfg.eps);
  const T decay = static_cast<T>(cfg.weight_decay);
  for (auto& [name, tensor] : params.tensors) {
    const auto& g = grads.at(name).data;
    auto& m = state.m.at(name).data;
    auto& v = state.v.at(name).data;
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const T gi = g[i] + decay * tensor.data[i];
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const T m_hat = m[i] * corr1;
      const T v_hat = v[i] * corr2;
      tensor.data[i] -= step * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

// One encoded training pair: source ids (unpadded) and target ids ending in EOS.
struct Example {
  std::vector<TokenId> src;
  std::vector<std::uint8_t> mask;
  std::vector<TokenId> target;
};

inline std::size_t supervised_tokens(const Example& e) {
  return static_cast<std::size_t>(std::count_if(e.target.begin(), e.target.end(), [](TokenId t) { return t != kPad; }));
}

template <typename T>
struct GradientResult {
  std::map<std::string, ad::Tensor<T>> grads;
  double loss = 0;  // token-averaged over the whole batch
};

// Gradient of the batch's token-averaged loss, computed as `accum_steps`
// micro-batches whose gradients are summed in order. Every micro-batch is
// normalized by the token count of the whole batch, so the split does not
// change the quantity being differentiated.
template <typename T>
GradientResult<T> batch_gradient(const ParameterStore<T>& params, std::span<const Example* const> batch,
                                 std::size_t accum_steps, std::uint64_t dropout_seed) {
  if (batch.empty()) throw ConfigError("empty batch");
  std::size_t tokens = 0;
  for (const Example* e : batch) tokens += supervised_tokens(*e);
  if (tokens == 0) throw Error("no supervised positions");
  const T norm = static_cast<T>(1.0 / static_cast<double>(tokens));
  GradientResult<T> out;
  for (const auto& [name, tensor] : params.tensors) out.grads.emplace(name, ad::Tensor<T>(tensor.shape));
  const std::size_t per_micro = (batch.size() + accum_steps - 1) / accum_steps;
  SplitMix64 dropout_rng(dropout_seed);
  ForwardMode mode{params.config.dropout > 0 ? &dropout_rng : nullptr};
  for (std::size_t begin = 0; begin < batch.size(); begin += per_micro) {
    const std::size_t end = std::min(batch.size(), begin + per_micro);
    ad::Tape<T> tape;
    Transformer<T> net(tape, params, mode);
    ad::Var<T> total;
    for (std::size_t i = begin; i < end; ++i) {
      const Example& e = *batch[i];
      ad::Var<T> l = net.sequence_loss(e.src, e.mask, e.target, ad::Reduction::sum);
      total = total.valid() ? ad::add(total, l) : l;
    }
    ad::Var<T> scaled = ad::scale(total, norm);
    out.loss += static_cast<double>(scaled.item());
    tape.backward(scaled);
    for (auto& [name, g] : tape.gradients()) {
      auto& acc = out.grads.at(name).data;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g.data[i];
    }
  }
  return out;
}

struct StepRecord {
  std::size_t step = 0;  // 1-based optimizer step
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

inline std::size_t steps_per_epoch(std::size_t examples, std::size_t effective_batch) {
  return (examples + effective_batch - 1) / effective_batch;
}

// Example order of one epoch: Fisher-Yates over [0, n) seeded by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(derive_seed(seed, "epoch/" + std::to_string(epoch)));
  shuffle(std::span<std::size_t>(order), rng);
  return order;
}

template <typename T>
struct TrainState {
  ParameterStore<T> params;
  OptimizerState<T> optimizer;
  std::size_t step = 0;  // optimizer steps completed
};

struct TrainHooks {
  // Called after every optimizer step; return false to stop early (used to
  // cut a run at a checkpoint boundary).
  std::function<bool(const StepRecord&)> on_step;
};

// Runs optimizer steps state.step .. total-1, where total = epochs *
// ceil(|examples| / effective_batch). Step k uses lr_at(k, total, ...).
template <typename T>
std::vector<StepRecord> train(TrainState<T>& state, const std::vector<Example>& examples, const TrainConfig& config,
                              const TrainHooks& hooks = {}) {
  config.validate();
  if (examples.empty()) throw PlanError("cannot train on an empty source dataset");
  const std::size_t per_epoch = steps_per_epoch(examples.size(), config.effective_batch);
  const std::size_t total = config.epochs * per_epoch;
  if (state.optimizer.m.empty()) state.optimizer = make_optimizer_state(state.params);
  std::vector<StepRecord> history;
  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  for (std::size_t step = state.step; step < total; ++step) {
    const std::size_t epoch = step / per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(examples.size(), config.seed, epoch);
      order_epoch = epoch;
    }
    const std::size_t offset = (step % per_epoch) * config.effective_batch;
    const std::size_t end = std::min(examples.size(), offset + config.effective_batch);
    std::vector<const Example*> batch;
    for (std::size_t i = offset; i < end; ++i) batch.push_back(&examples[order[i]]);
    const auto grad = batch_gradient<T>(state.params, batch, config.accum_steps,
                                        derive_seed(config.seed, "dropout/" + std::to_string(step)));
    const double lr = lr_at(step, total, config.warmup_ratio, config.peak_lr);
    adam_step(state.params, grad.grads, state.optimizer, lr, config.adam);
    state.step = step + 1;
    StepRecord rec{step + 1, epoch, lr, grad.loss};
    history.push_back(rec);
    if (hooks.on_step && !hooks.on_step(rec)) break;
  }
  return history;
}

}  // namespace cast
