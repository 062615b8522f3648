// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "cast/checkpoint.hpp"
#include "cast/eval.hpp"
#include "cast/experiment.hpp"
#include "cast/synth.hpp"
#include "fixtures.hpp"

using namespace cast;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. Full-model gradient check in fp64 against long-double differences.
Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  const double err = fixtures::model_grad_check(1);
  const double secs = seconds_since(t0);
  return {err < 1e-6 && secs < 120, fmt("max relative error %.3g over all parameters in %.1fs", err, secs)};
}

// 2. First-batch loss at init on the synthetic corpus.
Outcome init_loss() {
  synth::Options opt;
  opt.events = synth::default_events();
  const auto corpus = synth::generate(opt);
  std::vector<CrisisRecord> src;
  for (const auto& r : corpus.train)
    if (r.event_id == "A") src.push_back(r);
  ExperimentConfig cfg;
  const auto vocab = build_plan_vocab(src, cfg.scenario, corpus.registry, cfg.vocab);
  const auto examples = make_examples(src, cfg.scenario, corpus.registry, vocab, cfg.train);
  const auto params = init_params<float>(model_config_for(cfg, vocab.size()), derive_seed(42, "init"));
  std::vector<const Example*> batch;
  const auto order = epoch_order(examples.size(), 42, 0);
  for (std::size_t i = 0; i < cfg.train.effective_batch; ++i) batch.push_back(&examples[order[i]]);
  const double loss = batch_gradient<float>(params, batch, 1, 0).loss;
  const double target = std::log(static_cast<double>(vocab.size()));
  const double rel = std::abs(loss - target) / target;
  return {rel < 0.10, fmt("loss %.4f vs ln(%zu) = %.4f (%.1f%% off)", loss, vocab.size(), target, 100 * rel)};
}

// Same decision rule as label prediction, on raw ids.
bool predicts_target(const ParameterStore<float>& p, const Example& e) {
  const auto out = generate_greedy(p, std::span<const TokenId>(e.src), std::span<const std::uint8_t>(e.mask));
  TokenId label;
  if (out.size() == 2 && out[1] == kEos && (out[0] == fixtures::kYes || out[0] == fixtures::kNo)) {
    label = out[0];
  } else {
    const std::vector<TokenId> yes{fixtures::kYes, kEos}, no{fixtures::kNo, kEos};
    const double sy = score_sequence(p, std::span<const TokenId>(e.src), std::span<const std::uint8_t>(e.mask),
                                     std::span<const TokenId>(yes));
    const double sn = score_sequence(p, std::span<const TokenId>(e.src), std::span<const std::uint8_t>(e.mask),
                                     std::span<const TokenId>(no));
    label = sy > sn ? fixtures::kYes : fixtures::kNo;
  }
  return label == e.target[0];
}

// 3. Memorization of a 64-example binary fixture with the default recipe.
Outcome memorization() {
  const auto t0 = Clock::now();
  const auto examples = fixtures::separable_examples(64, 5);
  TrainConfig cfg;
  cfg.epochs = 200;
  TrainState<float> st{init_params<float>(tiny_config(fixtures::kSmallVocab), 1), {}, 0};
  const std::size_t per_epoch = steps_per_epoch(examples.size(), cfg.effective_batch);
  double acc = 0;
  std::size_t epoch_reached = 0;
  train(st, examples, cfg, {[&](const StepRecord& r) {
          if (r.step % per_epoch != 0) return true;
          std::size_t hits = 0;
          for (const auto& e : examples) hits += predicts_target(st.params, e);
          acc = static_cast<double>(hits) / static_cast<double>(examples.size());
          epoch_reached = r.step / per_epoch;
          return acc < 1.0;
        }});
  const double secs = seconds_since(t0);
  return {acc == 1.0 && secs < 300,
          fmt("training accuracy %.4f after %zu epochs (budget 200) in %.1fs", acc, epoch_reached, secs)};
}

// 4. Templates against the hand-written fixture.
Outcome templates() {
  const auto cases = fixtures::template_cases();
  std::size_t hits = 0;
  for (const auto& c : cases) hits += construct(c.text, c.scenario, c.event).text == c.expected;
  return {hits == cases.size(), fmt("%zu/%zu exact matches", hits, cases.size())};
}

// 5. Metrics against the brute-force oracles.
Outcome metric_oracles() {
  SplitMix64 rng(99);
  double worst_acc = 0, worst_f1 = 0, worst_r = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(300);
    const auto yes_g = rng.below(11), yes_p = rng.below(11);
    std::vector<Label> golds, preds;
    for (std::size_t i = 0; i < n; ++i) {
      golds.push_back(rng.below(10) < yes_g ? Label::yes : Label::no);
      preds.push_back(rng.below(10) < yes_p ? Label::yes : Label::no);
    }
    worst_acc = std::max(worst_acc, std::abs(accuracy(preds, golds) - fixtures::accuracy_oracle(preds, golds)));
    worst_f1 = std::max(worst_f1, std::abs(weighted_f1(preds, golds).weighted_f1 -
                                           fixtures::weighted_f1_oracle(preds, golds)));
  }
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 3 + rng.below(100);
    std::vector<double> x(n), y(n);
    const double coupling = rng.uniform() * 2 - 1;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = coupling * x[i] + rng.normal();
    }
    worst_r = std::max(worst_r, std::abs(pearson(x, y) - fixtures::pearson_oracle(x, y)));
  }
  return {worst_acc <= 1e-12 && worst_f1 <= 1e-12 && worst_r <= 1e-9,
          fmt("max deviation accuracy %.2g, weighted F1 %.2g, Pearson %.2g", worst_acc, worst_f1, worst_r)};
}

// 6. Schedule values for total = 100, W = 10.
Outcome scheduler() {
  const double peak = 5e-5;
  const std::size_t total = 100;
  const std::size_t w = warmup_steps(total, 0.1);
  const double at0 = lr_at(0, total, 0.1, peak), at_w = lr_at(w, total, 0.1, peak);
  const double mid = lr_at(55, total, 0.1, peak), end = lr_at(total, total, 0.1, peak);
  // Both sides of the piecewise definition evaluated at W.
  const double warm_side = peak * (static_cast<double>(w) / static_cast<double>(w));
  const double decay_side = peak * (static_cast<double>(total - w) / static_cast<double>(total - w));
  const bool ok = w == 10 && at0 == 0.0 && at_w == 5e-5 && mid == 2.5e-5 && end == 0.0 && warm_side == decay_side &&
                  at_w == warm_side;
  return {ok, fmt("W=%zu lr(0)=%g lr(W)=%g lr(55)=%g lr(total)=%g", w, at0, at_w, mid, end)};
}

// 7. Bitwise determinism, checkpoint resume and byte-identical round trip.
Outcome determinism() {
  synth::Options opt;
  opt.events = synth::default_events();
  opt.train_per_event = 96;
  const auto corpus = synth::generate(opt);
  std::vector<CrisisRecord> src;
  for (const auto& r : corpus.train)
    if (r.event_id == "A") src.push_back(r);
  ExperimentConfig cfg;
  cfg.train.epochs = 2;
  const auto a = train_on<float>(src, corpus.registry, cfg, 42);
  const auto b = train_on<float>(src, corpus.registry, cfg, 42);
  const bool same_history = a.history == b.history && a.state.params == b.state.params;

  const auto vocab = build_plan_vocab(src, cfg.scenario, corpus.registry, cfg.vocab);
  const auto examples = make_examples(src, cfg.scenario, corpus.registry, vocab, cfg.train);
  TrainState<float> full{init_params<float>(model_config_for(cfg, vocab.size()), 3), {}, 0};
  const auto straight = train(full, examples, cfg.train);
  const auto dir = std::filesystem::temp_directory_path() / "cast_acceptance";
  std::filesystem::create_directories(dir);
  TrainState<float> part{init_params<float>(model_config_for(cfg, vocab.size()), 3), {}, 0};
  train(part, examples, cfg.train, {[](const StepRecord& r) { return r.step < 2; }});
  save_checkpoint(dir / "a.castckpt", part, cfg.train, vocab.hash_hex());
  auto ck = load_checkpoint<float>(dir / "a.castckpt", vocab.hash_hex());
  save_checkpoint(dir / "b.castckpt", ck.state, ck.train, ck.vocab_hash);
  auto read_all = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  };
  const bool byte_identical = read_all(dir / "a.castckpt") == read_all(dir / "b.castckpt");
  std::size_t matched = 0;
  train(ck.state, examples, ck.train, {[&](const StepRecord& r) {
          matched += r.loss == straight[r.step - 1].loss;
          return r.step < 12;
        }});
  std::filesystem::remove_all(dir);
  return {same_history && byte_identical && matched == 10,
          fmt("identical histories: %s; resumed losses matching: %zu/10; round trip byte-identical: %s",
              same_history ? "yes" : "no", matched, byte_identical ? "yes" : "no")};
}

// 8. One optimizer step with accum_steps 4 vs 1 on the same batch.
Outcome accumulation() {
  ModelConfig c = tiny_config(fixtures::kSmallVocab);
  c.dropout = 0;
  const auto examples = fixtures::separable_examples(16, 8);
  std::vector<const Example*> batch;
  for (const auto& e : examples) batch.push_back(&e);
  const auto start = init_params<double>(c, 4);
  auto step = [&](std::size_t accum) {
    auto p = start;
    auto opt = make_optimizer_state(p);
    adam_step(p, batch_gradient<double>(p, batch, accum, 0).grads, opt, 5e-5);
    return p;
  };
  const auto one = step(1), four = step(4);
  double diff = 0, update = 0;
  for (const auto& [name, t] : one.tensors) {
    const auto& u = four.tensors.at(name);
    const auto& s = start.tensors.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      diff += (t.data[i] - u.data[i]) * (t.data[i] - u.data[i]);
      update += (t.data[i] - s.data[i]) * (t.data[i] - s.data[i]);
    }
  }
  const double rel = std::sqrt(diff) / std::sqrt(update);
  return {rel < 1e-6, fmt("||theta_4 - theta_1|| / ||theta_1 - theta_0|| = %.3g", rel)};
}

// 9. Synthetic 3x3 adaptation matrix.
Outcome adaptation_experiment() {
  const auto t0 = Clock::now();
  synth::Options opt;
  opt.events = synth::default_events();
  const auto corpus = synth::generate(opt);
  ExperimentConfig cfg;
  cfg.train.epochs = 60;
  MatrixData data;
  data.splits = split_standard(corpus.train, corpus.dev, corpus.test);
  const std::vector<std::string> events = {"A", "B", "C"};
  const auto m = build_adaptation_matrix(events, cfg.scenario, cfg.metric, data,
                                         model_runner<float>(corpus.registry, cfg), 42);
  const double secs = seconds_since(t0);
  if (!m.complete()) return {false, "matrix incomplete"};
  const auto v = m.values();
  const auto corr = pearson_row_correlation(v);
  std::cout << square_csv(events, v);
  const double min_diag = std::min({v[0][0], v[1][1], v[2][2]});
  const bool ok = min_diag >= 0.95 && v[0][1] >= 0.90 && v[1][0] >= 0.90 && corr.r[0][1] > corr.r[0][2] && secs < 1200;
  return {ok, fmt("min in-domain %.4f, A->B %.4f, B->A %.4f, corr(A,B) %.4f > corr(A,C) %.4f, %.0fs", min_diag,
                  v[0][1], v[1][0], corr.r[0][1], corr.r[0][2], secs)};
}

// 10. Leave-one-out and many-to-one plan enumeration.
Outcome plan_enumeration() {
  const std::vector<std::string> events = {"SH", "AF", "BB", "WTE", "OT", "QF"};
  std::vector<CrisisRecord> train, test;
  for (const auto& e : events) {
    for (int i = 0; i < 4; ++i) {
      CrisisRecord r{e + std::to_string(i), "m", "relevant", i % 2 ? Label::yes : Label::no, e};
      train.push_back(r);
      r.id += "t";
      test.push_back(r);
    }
  }
  const auto splits = split_standard(train, {}, test);
  const auto specs = plan_leave_one_out(events, Scenario::postq);
  bool shapes = specs.size() == 6;
  std::vector<EvalReport> reports;
  double sum = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto plan = compose(specs[i], splits, 1);
    shapes = shapes && plan.sources.size() == 5 && plan.source_data.size() == 20;
    for (const auto& r : plan.source_data) shapes = shapes && r.event_id != plan.target;
    for (const auto& r : plan.target_test) shapes = shapes && r.event_id == plan.target;
    EvalReport rep;
    rep.value = 0.1 * static_cast<double>(i + 1);
    sum += rep.value;
    reports.push_back(rep);
  }
  const bool mean_ok = std::abs(mean_value(reports) - sum / 6) < 1e-15;
  bool rejects = false;
  try {
    plan_many_to_one({{"AF", "QF"}}, "QF", Scenario::postq);
  } catch (const PlanError&) {
    rejects = true;
  }
  return {shapes && mean_ok && rejects,
          fmt("%zu plans with |S|=5: %s; average row is the mean: %s; target-in-source rejected: %s", specs.size(),
              shapes ? "yes" : "no", mean_ok ? "yes" : "no", rejects ? "yes" : "no")};
}

// 11. Over-length postQ inputs keep the question suffix.
Outcome truncation_safety() {
  EventRegistry reg;
  reg.add({"QF", "Queensland", "Floods", std::nullopt});
  reg.add({"NE", "", "Nepal Earthquake", std::nullopt});
  const std::vector<std::string> words = {"water", "rising", "help", "boats", "!", "road", "closed"};
  const auto v = build_vocab({"water rising help boats ! road closed"}, {1, 100}, forced_tokens(reg));
  SplitMix64 rng(11);
  std::size_t ok = 0;
  for (int t = 0; t < 100; ++t) {
    const auto& event = reg.at(t % 2 ? "QF" : "NE");
    std::string text;
    const auto n = 130 + rng.below(800);
    for (std::uint64_t i = 0; i < n; ++i) {
      text += rng.below(4) == 0 ? "oov" + std::to_string(rng.below(40)) : words[rng.below(words.size())];
      text += ' ';
    }
    const auto enc = encode(construct(text, Scenario::postq, event), v, 128, false);
    std::string question;
    for (const auto& tok : normalize(question_suffix(event, Scenario::postq))) question += (question.empty() ? "" : " ") + tok;
    const std::string decoded = decode(enc.ids, v);
    ok += enc.ids.size() == 128 && decoded.size() >= question.size() &&
          decoded.compare(decoded.size() - question.size(), question.size(), question) == 0;
  }
  return {ok == 100, fmt("%zu/100 encoded tails end with the full question", ok)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient integrity", gradient_integrity},
      {"init loss", init_loss},
      {"memorization", memorization},
      {"template conformance", templates},
      {"metric oracles", metric_oracles},
      {"scheduler", scheduler},
      {"determinism and persistence", determinism},
      {"accumulation equivalence", accumulation},
      {"synthetic adaptation experiment", adaptation_experiment},
      {"plan enumeration", plan_enumeration},
      {"truncation safety", truncation_safety},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
