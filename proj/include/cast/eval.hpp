#pragma once

// Label prediction, evaluation reports, plan enumeration and the
// source x target adaptation matrix.

#include <atomic>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cast/corpus.hpp"
#include "cast/metrics.hpp"
#include "cast/model.hpp"
#include "cast/prompt.hpp"
#include "cast/tokenizer.hpp"

namespace cast {

struct Prediction {
  Label label = Label::no;
  bool used_fallback = false;
  std::string generated;
};

// Greedy generation; an exact "yes"/"no" decides. Anything else falls back
// to comparing log p(yes, EOS) with log p(no, EOS), ties going to "no".
template <typename T>
Prediction predict_label(const ParameterStore<T>& params, const Vocabulary& vocab, std::span<const TokenId> src,
                         std::span<const std::uint8_t> mask) {
  Prediction p;
  const auto ids = generate_greedy(params, src, mask);
  p.generated = decode(ids, vocab);
  if (auto label = parse_label(p.generated)) {
    p.label = *label;
    return p;
  }
  p.used_fallback = true;
  const std::vector<TokenId> yes{vocab.id("yes"), kEos};
  const std::vector<TokenId> no{vocab.id("no"), kEos};
  const double s_yes = score_sequence(params, src, mask, std::span<const TokenId>(yes));
  const double s_no = score_sequence(params, src, mask, std::span<const TokenId>(no));
  p.label = s_yes > s_no ? Label::yes : Label::no;
  return p;
}

template <typename T>
Prediction predict_label(const ParameterStore<T>& params, const Vocabulary& vocab, const AugmentedInput& input) {
  const Encoded enc = encode(input, vocab, params.config.max_src_len, false);
  return predict_label(params, vocab, enc.ids, enc.mask);
}

enum class Metric { accuracy, weighted_f1 };

inline std::string_view to_string(Metric m) { return m == Metric::accuracy ? "accuracy" : "weighted_f1"; }

inline Metric parse_metric(std::string_view s) {
  if (s == "accuracy") return Metric::accuracy;
  if (s == "weighted_f1") return Metric::weighted_f1;
  throw ConfigError("unknown metric '" + std::string(s) + "' (expected accuracy or weighted_f1)");
}

struct EvalReport {
  std::string plan_id;
  Metric metric = Metric::accuracy;
  double value = 0;
  double accuracy = 0;
  F1Breakdown f1;
  Confusion confusion;
  double fallback_rate = 0;
  std::size_t n = 0;
};

inline EvalReport make_report(std::string plan_id, Metric metric, std::span<const Label> preds,
                              std::span<const Label> golds, std::size_t fallbacks) {
  EvalReport r;
  r.plan_id = std::move(plan_id);
  r.metric = metric;
  r.confusion = confusion(preds, golds);
  r.accuracy = cast::accuracy(r.confusion);
  r.f1 = f1_breakdown(r.confusion);
  r.value = metric == Metric::accuracy ? r.accuracy : r.f1.weighted_f1;
  r.n = golds.size();
  r.fallback_rate = static_cast<double>(fallbacks) / static_cast<double>(r.n);
  return r;
}

// Evaluates on `records`, constructing every input with the TARGET event's
// descriptor.
template <typename T>
EvalReport evaluate(const ParameterStore<T>& params, const Vocabulary& vocab, const std::vector<CrisisRecord>& records,
                    Scenario scenario, const EventDescriptor& target, Metric metric, std::string plan_id = {}) {
  std::vector<Label> preds, golds;
  std::size_t fallbacks = 0;
  for (const auto& r : records) {
    if (!r.unified_label) throw LabelError("record '" + r.id + "' has no unified label");
    const Prediction p = predict_label(params, vocab, construct(r, scenario, target));
    preds.push_back(p.label);
    golds.push_back(*r.unified_label);
    fallbacks += p.used_fallback;
  }
  return make_report(std::move(plan_id), metric, preds, golds, fallbacks);
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (Label l : {Label::no, Label::yes}) {
    const auto& s = r.f1.per_class[static_cast<int>(l)];
    per_class[std::string(to_string(l))] = {
        {"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}};
  }
  nlohmann::json conf = nlohmann::json::object();
  for (Label g : {Label::no, Label::yes})
    for (Label p : {Label::no, Label::yes})
      conf[std::string("gold_") + std::string(to_string(g)) + "_pred_" + std::string(to_string(p))] =
          r.confusion.counts[static_cast<int>(g)][static_cast<int>(p)];
  return {{"plan_id", r.plan_id},   {"metric", to_string(r.metric)}, {"value", r.value},
          {"accuracy", r.accuracy}, {"weighted_f1", r.f1.weighted_f1}, {"per_class", per_class},
          {"confusion", conf},      {"fallback_rate", r.fallback_rate}, {"n", r.n}};
}

// gold,pred,count rows.
inline std::string confusion_csv(const Confusion& c) {
  std::string out = "gold,pred,count\n";
  for (Label g : {Label::no, Label::yes})
    for (Label p : {Label::no, Label::yes})
      out += std::string(to_string(g)) + "," + std::string(to_string(p)) + "," +
             std::to_string(c.counts[static_cast<int>(g)][static_cast<int>(p)]) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Plan enumeration

struct PlanSpec {
  std::vector<std::string> sources;
  std::string target;
  Scenario scenario = Scenario::postq;

  std::string id() const {
    std::string s;
    for (std::size_t i = 0; i < sources.size(); ++i) s += (i ? "+" : "") + sources[i];
    return s + "->" + target;
  }
};

// Plan i targets events[i] and trains on every other event.
inline std::vector<PlanSpec> plan_leave_one_out(const std::vector<std::string>& events, Scenario scenario) {
  if (events.size() < 2) throw PlanError("leave-one-out needs at least 2 events, got " + std::to_string(events.size()));
  if (std::set<std::string>(events.begin(), events.end()).size() != events.size()) {
    throw PlanError("leave-one-out: duplicate event ids");
  }
  std::vector<PlanSpec> plans;
  for (const auto& target : events) {
    PlanSpec p{{}, target, scenario};
    for (const auto& e : events)
      if (e != target) p.sources.push_back(e);
    plans.push_back(std::move(p));
  }
  return plans;
}

inline std::vector<PlanSpec> plan_many_to_one(const std::vector<std::vector<std::string>>& source_sets,
                                              const std::string& target, Scenario scenario) {
  std::vector<PlanSpec> plans;
  for (const auto& set : source_sets) {
    if (set.empty()) throw PlanError("invalid plan: empty source set");
    if (std::find(set.begin(), set.end(), target) != set.end()) {
      throw PlanError("invalid plan: target " + target + " is inside source set " + PlanSpec{set, target}.id());
    }
    plans.push_back({set, target, scenario});
  }
  return plans;
}

// Composes a plan from the splits; its seed derives from the master seed and
// the plan id.
inline AdaptationPlan compose(const PlanSpec& spec, const SplitSet& splits, std::uint64_t master_seed) {
  return compose_plan(spec.sources, spec.target, spec.scenario, splits, derive_seed(master_seed, spec.id()));
}

inline double mean_value(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ShapeError("no reports to average");
  double s = 0;
  for (const auto& r : reports) s += r.value;
  return s / static_cast<double>(reports.size());
}

// ---------------------------------------------------------------------------
// Adaptation matrix

enum class DiagonalMode { five_fold_mean, standard_split };

inline std::string_view to_string(DiagonalMode m) {
  return m == DiagonalMode::five_fold_mean ? "five_fold_mean" : "standard_split";
}

struct EvalTarget {
  std::string target;
  std::vector<CrisisRecord> test;
};

// One model trained on `source_data` and evaluated on each target. Cells
// sharing a source share the model.
struct TrainingRun {
  std::string key;  // e.g. "A" or "A/fold2"
  std::vector<std::string> sources;
  Scenario scenario = Scenario::postq;
  std::uint64_t seed = 0;
  std::vector<CrisisRecord> source_data;
  std::vector<EvalTarget> targets;
};

struct RunResult {
  std::vector<EvalReport> reports;  // one per target, same order
  std::string checkpoint;
};

using Runner = std::function<RunResult(const TrainingRun&)>;

// A composed plan as a single-target training run.
inline TrainingRun plan_run(const AdaptationPlan& plan) {
  return {plan.id(), plan.sources, plan.scenario, plan.seed, plan.source_data, {{plan.target, plan.target_test}}};
}

struct CellRun {
  std::string key;
  std::uint64_t seed = 0;
  std::string checkpoint;
  double value = 0;
};

struct MatrixCell {
  double value = std::numeric_limits<double>::quiet_NaN();
  std::vector<CellRun> runs;
  std::optional<std::string> error;
  bool ok() const { return !error && std::isfinite(value); }
};

struct AdaptationMatrix {
  std::vector<std::string> events;
  Scenario scenario = Scenario::postq;
  Metric metric = Metric::accuracy;
  DiagonalMode diagonal_mode = DiagonalMode::standard_split;
  std::uint64_t seed = 0;
  std::vector<std::vector<MatrixCell>> cells;  // [source][target]

  bool complete() const {
    for (const auto& row : cells)
      for (const auto& c : row)
        if (!c.ok()) return false;
    return true;
  }

  std::vector<std::vector<double>> values() const {
    std::vector<std::vector<double>> v;
    for (const auto& row : cells) {
      v.emplace_back();
      for (const auto& c : row) v.back().push_back(c.value);
    }
    return v;
  }
};

// Where the matrix takes its data from. Standard-split corpora give each
// event its own train/test portions; CV corpora give all records, which are
// folded per event for the diagonal and used whole off the diagonal.
struct MatrixData {
  DiagonalMode mode = DiagonalMode::standard_split;
  SplitSet splits;                  // standard_split
  std::vector<CrisisRecord> records;  // five_fold_mean
  int folds = 5;
};

inline std::vector<TrainingRun> matrix_runs(const std::vector<std::string>& events, Scenario scenario,
                                            const MatrixData& data, std::uint64_t seed) {
  if (events.size() < 2) throw PlanError("an adaptation matrix needs at least 2 events");
  std::vector<TrainingRun> runs;
  auto shuffled = [](std::vector<CrisisRecord> d, std::uint64_t s) {
    SplitMix64 rng(s);
    shuffle(std::span<CrisisRecord>(d), rng);
    return d;
  };
  if (data.mode == DiagonalMode::standard_split) {
    for (const auto& s : events) {
      auto it = data.splits.find(s);
      if (it == data.splits.end() || it->second.train.empty()) {
        throw PlanError("invalid plan: no training data for source event " + s);
      }
      TrainingRun run{s, {s}, scenario, derive_seed(seed, s), {}, {}};
      run.source_data = shuffled(it->second.train, run.seed);
      for (const auto& t : events) {
        auto jt = data.splits.find(t);
        if (jt == data.splits.end() || jt->second.test.empty()) {
          throw PlanError("invalid plan: no test data for target event " + t);
        }
        run.targets.push_back({t, jt->second.test});
      }
      runs.push_back(std::move(run));
    }
    return runs;
  }
  std::map<std::string, std::vector<CrisisRecord>> by_event;
  for (const auto& r : data.records) by_event[r.event_id].push_back(r);
  for (const auto& e : events) {
    if (by_event[e].empty()) throw PlanError("invalid plan: no records for event " + e);
  }
  for (const auto& s : events) {
    TrainingRun run{s, {s}, scenario, derive_seed(seed, s), {}, {}};
    run.source_data = shuffled(by_event[s], run.seed);
    for (const auto& t : events)
      if (t != s) run.targets.push_back({t, by_event[t]});
    runs.push_back(std::move(run));
    const FoldPlan folds = make_folds(by_event[s], data.folds, derive_seed(seed, "folds/" + s));
    for (int f = 0; f < data.folds; ++f) {
      const SplitSet split = split_fold(by_event[s], folds, f);
      const auto& es = split.at(s);
      const std::string key = s + "/fold" + std::to_string(f);
      TrainingRun fr{key, {s}, scenario, derive_seed(seed, key), {}, {{s, es.test}}};
      fr.source_data = shuffled(es.train, fr.seed);
      runs.push_back(std::move(fr));
    }
  }
  return runs;
}

struct RunOutcome {
  std::optional<RunResult> result;
  std::string error;  // set when result is empty
};

// Executes the runs on up to `jobs` threads. Outcomes are stored by index,
// so the schedule never changes the result; a throwing run records its error.
inline std::vector<RunOutcome> execute_runs(const std::vector<TrainingRun>& runs, const Runner& runner,
                                            unsigned jobs = 1) {
  std::vector<RunOutcome> out(runs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        auto r = runner(runs[i]);
        if (r.reports.size() != runs[i].targets.size()) {
          throw ShapeError("runner returned " + std::to_string(r.reports.size()) + " reports for " +
                           std::to_string(runs[i].targets.size()) + " targets");
        }
        out[i].result = std::move(r);
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
  };
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(runs.size(), 1))));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  return out;
}

// Runs every training job and assembles the matrix; failing runs leave their
// cells annotated with the error instead of aborting.
inline AdaptationMatrix build_adaptation_matrix(const std::vector<std::string>& events, Scenario scenario,
                                                Metric metric, const MatrixData& data, const Runner& runner,
                                                std::uint64_t seed, unsigned jobs = 1) {
  const auto runs = matrix_runs(events, scenario, data, seed);
  const auto outcomes = execute_runs(runs, runner, jobs);

  AdaptationMatrix m;
  m.events = events;
  m.scenario = scenario;
  m.metric = metric;
  m.diagonal_mode = data.mode;
  m.seed = seed;
  m.cells.assign(events.size(), std::vector<MatrixCell>(events.size()));
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < events.size(); ++i) index[events[i]] = i;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& run = runs[i];
    const std::size_t s = index.at(run.sources.front());
    for (std::size_t k = 0; k < run.targets.size(); ++k) {
      auto& cell = m.cells[s][index.at(run.targets[k].target)];
      const auto& o = outcomes[i];
      if (!o.result) {
        cell.error = "run " + run.key + " failed: " + o.error;
        continue;
      }
      cell.runs.push_back({run.key, run.seed, o.result->checkpoint, o.result->reports[k].value});
    }
  }
  for (auto& row : m.cells) {
    for (auto& cell : row) {
      if (cell.error || cell.runs.empty()) {
        if (!cell.error) cell.error = "no run produced this cell";
        cell.value = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      double sum = 0;
      for (const auto& r : cell.runs) sum += r.value;
      cell.value = sum / static_cast<double>(cell.runs.size());
    }
  }
  return m;
}

inline std::string format4(double v) {
  if (!std::isfinite(v)) return "NA";
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

// Header row and column of event ids, 4 decimals, NA for missing values.
inline std::string square_csv(const std::vector<std::string>& events, const std::vector<std::vector<double>>& v) {
  std::string out = "source";
  for (const auto& e : events) out += "," + e;
  out += "\n";
  for (std::size_t i = 0; i < events.size(); ++i) {
    out += events[i];
    for (double x : v[i]) out += "," + format4(x);
    out += "\n";
  }
  return out;
}

inline nlohmann::json to_json(const AdaptationMatrix& m) {
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t i = 0; i < m.events.size(); ++i) {
    for (std::size_t j = 0; j < m.events.size(); ++j) {
      const auto& c = m.cells[i][j];
      nlohmann::json runs = nlohmann::json::array();
      for (const auto& r : c.runs)
        runs.push_back({{"key", r.key}, {"seed", r.seed}, {"checkpoint", r.checkpoint}, {"value", r.value}});
      nlohmann::json cell = {{"source", m.events[i]}, {"target", m.events[j]}, {"runs", runs}};
      cell["value"] = c.ok() ? nlohmann::json(c.value) : nlohmann::json(nullptr);
      if (c.error) cell["error"] = *c.error;
      cells.push_back(std::move(cell));
    }
  }
  return {{"events", m.events},
          {"scenario", to_string(m.scenario)},
          {"metric", to_string(m.metric)},
          {"diagonal_mode", to_string(m.diagonal_mode)},
          {"seed", m.seed},
          {"complete", m.complete()},
          {"cells", cells}};
}

}  // namespace cast
