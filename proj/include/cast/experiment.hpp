#pragma once

// End-to-end glue: vocabulary over a plan's constructed source inputs,
// example encoding, training, evaluation against each target event.

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "cast/checkpoint.hpp"
#include "cast/config.hpp"
#include "cast/corpus.hpp"
#include "cast/eval.hpp"
#include "cast/model.hpp"
#include "cast/prompt.hpp"
#include "cast/tokenizer.hpp"
#include "cast/train.hpp"

namespace cast {

struct ExperimentConfig {
  std::string model_size = "tiny";
  Scenario scenario = Scenario::postq;
  Metric metric = Metric::accuracy;
  TrainConfig train;
  VocabOptions vocab;
  double dropout = 0.1;
  std::string dtype = "f32";  // f32 | f64
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"model_size", c.model_size},
          {"scenario", to_string(c.scenario)},
          {"metric", to_string(c.metric)},
          {"dropout", c.dropout},
          {"dtype", c.dtype},
          {"vocab", {{"min_freq", c.vocab.min_freq}, {"max_size", c.vocab.max_size}}},
          {"train", to_json(c.train)}};
}

// Every key is optional; defaults are the reference training recipe.
inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  using namespace config_detail;
  constexpr std::string_view what = "experiment config";
  reject_unknown(j, what, {"model_size", "scenario", "metric", "dropout", "dtype", "vocab", "train"});
  ExperimentConfig c;
  read(j, "model_size", c.model_size, what);
  std::string scenario(to_string(c.scenario)), metric(to_string(c.metric));
  read(j, "scenario", scenario, what);
  read(j, "metric", metric, what);
  c.scenario = parse_scenario(scenario);
  c.metric = parse_metric(metric);
  read(j, "dropout", c.dropout, what);
  read(j, "dtype", c.dtype, what);
  if (c.dtype != "f32" && c.dtype != "f64") throw ConfigError("dtype must be f32 or f64, got '" + c.dtype + "'");
  if (j.contains("vocab")) {
    reject_unknown(j["vocab"], "vocab config", {"min_freq", "max_size"});
    read(j["vocab"], "min_freq", c.vocab.min_freq, "vocab config");
    read(j["vocab"], "max_size", c.vocab.max_size, "vocab config");
  }
  if (j.contains("train")) c.train = train_from_json(j["train"]);
  named_config(c.model_size, 16);  // validates the size name
  return c;
}

// Template words, the two target strings and every registered event phrase.
// Event phrases are forced so a target event's description is never reduced
// to UNK merely because the source data never mentions it.
inline std::set<std::string> forced_tokens(const EventRegistry& registry) {
  std::set<std::string> forced{template_glossary(), "yes", "no"};
  for (const auto& id : registry.ids()) {
    const auto& e = registry.at(id);
    forced.insert(e.location_name);
    forced.insert(e.crisis_name);
  }
  return forced;
}

inline Vocabulary build_plan_vocab(const std::vector<CrisisRecord>& source_data, Scenario scenario,
                                   const EventRegistry& registry, const VocabOptions& opt) {
  std::vector<std::string> corpus;
  corpus.reserve(source_data.size());
  for (const auto& r : source_data) corpus.push_back(construct(r, scenario, registry.at(r.event_id)).text);
  const Vocabulary vocab = build_vocab(corpus, opt, forced_tokens(registry));
  if (vocab.id("yes") == kUnk || vocab.id("no") == kUnk) throw ConfigError("vocabulary lacks yes/no");
  return vocab;
}

// Training pair for a record, constructed with `event` (the record's own
// event during training).
inline Example make_example(const CrisisRecord& r, Scenario scenario, const EventDescriptor& event,
                            const Vocabulary& vocab, const TrainConfig& cfg) {
  if (!r.unified_label) throw LabelError("record '" + r.id + "' has no unified label");
  const Encoded src = encode(construct(r, scenario, event), vocab, cfg.max_src_len, false);
  const Encoded tgt = encode(target_text(*r.unified_label), vocab, cfg.max_tgt_len, false);
  return {src.ids, src.mask, tgt.ids};
}

inline std::vector<Example> make_examples(const std::vector<CrisisRecord>& records, Scenario scenario,
                                          const EventRegistry& registry, const Vocabulary& vocab,
                                          const TrainConfig& cfg) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(make_example(r, scenario, registry.at(r.event_id), vocab, cfg));
  return out;
}

inline ModelConfig model_config_for(const ExperimentConfig& cfg, std::size_t vocab_size) {
  ModelConfig m = named_config(cfg.model_size, vocab_size);
  m.dropout = cfg.dropout;
  m.max_src_len = cfg.train.max_src_len;
  m.max_tgt_len = cfg.train.max_tgt_len;
  m.validate();
  return m;
}

template <typename T>
struct TrainedModel {
  Vocabulary vocab;
  TrainState<T> state;
  std::vector<StepRecord> history;
};

// Builds the vocabulary, initializes from `seed` and trains on `source_data`.
template <typename T>
TrainedModel<T> train_on(const std::vector<CrisisRecord>& source_data, const EventRegistry& registry,
                         const ExperimentConfig& cfg, std::uint64_t seed, const TrainHooks& hooks = {}) {
  if (source_data.empty()) throw PlanError("cannot train on an empty source dataset");
  TrainedModel<T> m;
  m.vocab = build_plan_vocab(source_data, cfg.scenario, registry, cfg.vocab);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  const auto examples = make_examples(source_data, cfg.scenario, registry, m.vocab, tc);
  m.state.params = init_params<T>(model_config_for(cfg, m.vocab.size()), derive_seed(seed, "init"));
  m.history = train(m.state, examples, tc, hooks);
  return m;
}

// Runner for build_adaptation_matrix: one model per TrainingRun, optionally
// persisted under `checkpoint_dir/<key>/`.
template <typename T>
Runner model_runner(const EventRegistry& registry, const ExperimentConfig& cfg,
                    std::optional<std::filesystem::path> checkpoint_dir = std::nullopt) {
  return [registry, cfg, checkpoint_dir](const TrainingRun& run) {
    ExperimentConfig c = cfg;
    c.scenario = run.scenario;
    const auto model = train_on<T>(run.source_data, registry, c, run.seed);
    RunResult result;
    if (checkpoint_dir) {
      std::string dir_name = run.key;
      std::replace(dir_name.begin(), dir_name.end(), '/', '_');
      const auto dir = *checkpoint_dir / dir_name;
      std::filesystem::create_directories(dir);
      TrainConfig tc = c.train;
      tc.seed = run.seed;
      save_checkpoint(dir / "checkpoint.castckpt", model.state, tc, model.vocab.hash_hex());
      model.vocab.save(dir / "vocab.txt");
      result.checkpoint = (dir / "checkpoint.castckpt").string();
    }
    for (const auto& t : run.targets) {
      std::string id;
      for (std::size_t i = 0; i < run.sources.size(); ++i) id += (i ? "+" : "") + run.sources[i];
      result.reports.push_back(evaluate(model.state.params, model.vocab, t.test, run.scenario, registry.at(t.target),
                                        cfg.metric, id + "->" + t.target));
    }
    return result;
  };
}

}  // namespace cast
