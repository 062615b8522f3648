#pragma once

// Fixtures and independent oracles shared by the unit tests and the
// acceptance runner.

#include <cmath>
#include <string>
#include <vector>

#include "cast/corpus.hpp"
#include "cast/model.hpp"
#include "cast/scenario.hpp"
#include "cast/synth.hpp"
#include "cast/train.hpp"

namespace fixtures {

using cast::EventDescriptor;
using cast::Label;
using cast::Scenario;

struct TemplateCase {
  std::string text;
  Scenario scenario;
  EventDescriptor event;
  std::string expected;
};

// Expected strings are written out by hand.
inline std::vector<TemplateCase> template_cases() {
  const EventDescriptor alberta{"AF", "Alberta", "Floods", std::nullopt};
  const EventDescriptor nepal{"NE", "", "Nepal Earthquake", std::nullopt};
  const EventDescriptor texas{"WTE", "West Texas", "Explosion", std::nullopt};
  const EventDescriptor queensland{"QF", "Queensland", "Floods", std::nullopt};
  return {
      {"water rising fast", Scenario::postq, alberta,
       "Content: water rising fast. Question: Is this message relevant to Alberta Floods?"},
      {"water rising fast", Scenario::standard, alberta, "water rising fast"},
      {"", Scenario::postq, nepal, "Content: . Question: Is this message relevant to Nepal Earthquake?"},
      {"boom heard downtown", Scenario::variant2, texas,
       "Content: boom heard downtown. Question: Is this message relevant to a Explosion event that occurred in West Texas?"},
      {"water rising fast", Scenario::variant1, alberta,
       "Content: water rising fast. Question: Is this message relevant to Floods?"},
      {"water rising fast", Scenario::variant3, alberta, "Content: water rising fast. Question: Alberta Floods?"},
      {"", Scenario::standard, nepal, ""},
      {"", Scenario::variant1, nepal, "Content: . Question: Is this message relevant to Nepal Earthquake?"},
      {"", Scenario::variant3, nepal, "Content: . Question: Nepal Earthquake?"},
      {"", Scenario::variant2, queensland,
       "Content: . Question: Is this message relevant to a Floods event that occurred in Queensland?"},
      {"Help! We need boats.", Scenario::postq, queensland,
       "Content: Help! We need boats.. Question: Is this message relevant to Queensland Floods?"},
      {"Help! We need boats.", Scenario::variant3, queensland,
       "Content: Help! We need boats.. Question: Queensland Floods?"},
      {"Help! We need boats.", Scenario::standard, queensland, "Help! We need boats."},
      {"buildings down in kathmandu", Scenario::variant1, nepal,
       "Content: buildings down in kathmandu. Question: Is this message relevant to Nepal Earthquake?"},
      {"buildings down in kathmandu", Scenario::variant3, nepal,
       "Content: buildings down in kathmandu. Question: Nepal Earthquake?"},
      {"  spaced  out  ", Scenario::postq, texas,
       "Content:   spaced  out  . Question: Is this message relevant to West Texas Explosion?"},
      {"line one\nline two", Scenario::variant2, alberta,
       "Content: line one\nline two. Question: Is this message relevant to a Floods event that occurred in Alberta?"},
      {"naïve café 🌊", Scenario::postq, alberta,
       "Content: naïve café 🌊. Question: Is this message relevant to Alberta Floods?"},
      {"Is this message relevant to you?", Scenario::variant3, texas,
       "Content: Is this message relevant to you?. Question: West Texas Explosion?"},
      {"plant explosion", Scenario::variant1, texas,
       "Content: plant explosion. Question: Is this message relevant to Explosion?"},
  };
}

// ---------------------------------------------------------------------------
// Metric oracles: direct recounts that share no code with the library.

inline double accuracy_oracle(const std::vector<Label>& preds, const std::vector<Label>& golds) {
  long hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == golds[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

inline double weighted_f1_oracle(const std::vector<Label>& preds, const std::vector<Label>& golds) {
  double total = 0;
  for (Label c : {Label::yes, Label::no}) {
    long tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i] == c, g = golds[i] == c;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
      support += g;
    }
    const double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    const double f1 = precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
    total += f1 * static_cast<double>(support);
  }
  return total / static_cast<double>(preds.size());
}

// Pearson r as the mean product of z-scores, accumulated in long double.
inline double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  using LD = long double;
  const LD n = static_cast<LD>(x.size());
  LD mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  LD vx = 0, vy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
  }
  const LD sx = std::sqrt(vx / n), sy = std::sqrt(vy / n);
  LD r = 0;
  for (std::size_t i = 0; i < x.size(); ++i) r += ((x[i] - mx) / sx) * ((y[i] - my) / sy);
  return static_cast<double>(r / n);
}

// ---------------------------------------------------------------------------
// Full-model gradient check

inline cast::ModelConfig grad_check_config() {
  cast::ModelConfig c;
  c.vocab_size = 50;
  c.d_model = 16;
  c.n_heads = 4;
  c.d_ff = 64;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.dropout = 0;
  return c;
}

// At the 0.02 init scale most gradients sit near 1e-12, below what a central
// difference can resolve, so the check runs at a randomized point instead:
// weights and biases ~ N(0, 0.3^2), gains 1 + 0.2 N(0, 1).
inline cast::ParameterStore<double> grad_check_params(std::uint64_t seed) {
  auto p = cast::init_params<double>(grad_check_config(), seed);
  cast::SplitMix64 rng(seed * 31 + 1);
  for (auto& [name, t] : p.tensors) {
    const bool gain = name.find("gain") != std::string::npos;
    for (auto& x : t.data) x = gain ? 1 + 0.2 * rng.normal() : 0.3 * rng.normal();
  }
  return p;
}

// Largest relative error over every parameter coordinate: analytic fp64
// gradients against long-double central differences with eps = 1e-6.
inline double model_grad_check(std::uint64_t seed) {
  using LD = long double;
  auto p = grad_check_params(seed);
  auto q = p.cast<LD>();
  std::vector<cast::TokenId> src;
  for (int i = 0; i < 12; ++i) src.push_back(static_cast<cast::TokenId>(3 + (i * 7 + seed) % 47));
  src.push_back(cast::kEos);
  const std::vector<std::uint8_t> mask(src.size(), 1);
  const std::vector<cast::TokenId> target = {30, 12, 7, cast::kEos};
  cast::ad::Inputs<double> in;
  for (auto& [name, t] : p.tensors) in.emplace_back(name, &t);
  cast::ad::Inputs<LD> ref;
  for (auto& [name, t] : q.tensors) ref.emplace_back(name, &t);
  cast::ad::ScalarFn<double> f = [&](cast::ad::Tape<double>& tape) {
    return cast::Transformer<double>(tape, p).sequence_loss(src, mask, target);
  };
  cast::ad::ScalarFn<LD> f_ref = [&](cast::ad::Tape<LD>& tape) {
    return cast::Transformer<LD>(tape, q).sequence_loss(src, mask, target);
  };
  return cast::ad::finite_diff_check<double, LD>(f, in, f_ref, ref, 1e-6);
}

// ---------------------------------------------------------------------------
// Training fixtures

// A tiny vocabulary keeps the output layer small enough that the paper's
// learning rate fits the marginal over the vocabulary within the epoch
// budget: 40 ids, "yes" and "no" messages drawn from disjoint id ranges.
inline constexpr cast::TokenId kYes = 3;
inline constexpr cast::TokenId kNo = 4;
inline constexpr std::size_t kSmallVocab = 40;

inline std::vector<cast::Example> separable_examples(std::size_t n, std::uint64_t seed) {
  cast::SplitMix64 rng(seed);
  std::vector<cast::Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    cast::Example e;
    const bool yes = i % 2 == 1;
    const std::size_t len = 8 + rng.below(12);
    for (std::size_t j = 0; j < len; ++j) {
      e.src.push_back(static_cast<cast::TokenId>((yes ? 5 : 22) + rng.below(12)));
    }
    e.src.push_back(cast::kEos);
    e.mask.assign(e.src.size(), 1);
    e.target = {yes ? kYes : kNo, cast::kEos};
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace fixtures
