// cast: experiment runner.
//
//   cast synth        --out DIR
//   cast build-vocab  --data data.json --out vocab.txt
//   cast train        --data data.json --source A --target B --out RUN
//   cast evaluate     --run RUN
//   cast matrix       --data data.json --out DIR
//   cast loo          --data data.json --out DIR
//   cast many-to-one  --data data.json --sets "A;B+C" --target D --out DIR
//
// Exit codes: 0 ok, 2 usage/config, 3 data, 4 incomplete experiment.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cast/checkpoint.hpp"
#include "cast/datasets.hpp"
#include "cast/eval.hpp"
#include "cast/experiment.hpp"
#include "cast/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitIncomplete = 4;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw cast::IoError("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw cast::IoError("cannot read '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw cast::ConfigError("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

// Run bookkeeping: everything that determines the results goes into the
// run id; timestamps and artifact paths do not.
struct Manifest {
  std::string command;
  json config;
  json inputs = json::object();
  std::uint64_t seed = 0;
  json extra = json::object();
  std::string started = utc_now();
  std::vector<std::string> artifacts;

  json finish() const {
    json identity = {{"command", command}, {"config", config}, {"inputs", inputs}, {"seed", seed}, {"extra", extra}};
    json j = identity;
    j["run_id"] = cast::ckpt_detail::hex64(cast::fnv1a64(identity.dump()));
    j["started"] = started;
    j["finished"] = utc_now();
    j["artifacts"] = artifacts;
    return j;
  }
};

struct Common {
  std::string config_path;
  std::string data_path;
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  unsigned jobs = 1;
};

cast::ExperimentConfig load_config(const Common& c) {
  cast::ExperimentConfig cfg;
  if (!c.config_path.empty()) cfg = cast::experiment_from_json(read_json(c.config_path));
  if (!c.scenario.empty()) cfg.scenario = cast::parse_scenario(c.scenario);
  if (c.seed) cfg.train.seed = *c.seed;
  if (c.epochs) cfg.train.epochs = *c.epochs;
  cfg.train.validate();
  return cfg;
}

// --data, else $CAST_DATA_DIR/data.json.
fs::path data_path(const Common& c) {
  if (!c.data_path.empty()) return c.data_path;
  if (const char* dir = std::getenv("CAST_DATA_DIR")) return fs::path(dir) / "data.json";
  throw cast::ConfigError("no data description: pass --data or set CAST_DATA_DIR");
}

template <typename T>
cast::Runner runner_for(const cast::EventRegistry& registry, const cast::ExperimentConfig& cfg,
                        std::optional<fs::path> checkpoints) {
  return cast::model_runner<T>(registry, cfg, std::move(checkpoints));
}

cast::Runner make_runner(const cast::EventRegistry& registry, const cast::ExperimentConfig& cfg,
                         std::optional<fs::path> checkpoints) {
  return cfg.dtype == "f64" ? runner_for<double>(registry, cfg, std::move(checkpoints))
                            : runner_for<float>(registry, cfg, std::move(checkpoints));
}

// Event ids named on the command line are usage errors when unknown, unlike dangling ids inside data files.
void require_event(const cast::EventRegistry& reg, const std::string& id) {
  if (!reg.contains(id)) throw cast::PlanError("unknown event '" + id + "'; registry has " + [&] {
    std::string all;
    for (const auto& e : reg.ids()) all += (all.empty() ? "" : ",") + e;
    return all;
  }());
}

std::vector<std::string> event_list(const std::vector<std::string>& given, const cast::EventRegistry& reg) {
  if (given.empty()) return reg.ids();
  for (const auto& e : given) require_event(reg, e);
  return given;
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out, const cast::synth::Options& base) {
  cast::synth::Options opt = base;
  opt.events = cast::synth::default_events();
  const auto corpus = cast::synth::generate(opt);
  fs::create_directories(out);
  cast::save_dataset(fs::path(out) / "train.tsv", corpus.train);
  cast::save_dataset(fs::path(out) / "dev.tsv", corpus.dev);
  cast::save_dataset(fs::path(out) / "test.tsv", corpus.test);
  write_json(fs::path(out) / "registry.json", corpus.registry.to_json());
  write_json(fs::path(out) / "data.json", {{"registry", "registry.json"},
                                           {"layout", "standard_split"},
                                           {"train", "train.tsv"},
                                           {"dev", "dev.tsv"},
                                           {"test", "test.tsv"},
                                           {"labels", "default"}});
  std::cout << "wrote " << corpus.train.size() << " train, " << corpus.dev.size() << " dev, " << corpus.test.size()
            << " test records to " << out << "\n";
  return 0;
}

int cmd_build_vocab(const Common& c, std::vector<std::string> sources, const std::string& out,
                    std::optional<int> min_freq, std::optional<int> max_size) {
  auto cfg = load_config(c);
  if (min_freq) cfg.vocab.min_freq = *min_freq;
  if (max_size) cfg.vocab.max_size = *max_size;
  const auto data = cast::load_data(data_path(c));
  sources = event_list(sources, data.registry);
  const auto splits = data.splits();
  std::vector<cast::CrisisRecord> corpus;
  for (const auto& s : sources) {
    auto it = splits.find(s);
    if (it != splits.end()) corpus.insert(corpus.end(), it->second.train.begin(), it->second.train.end());
  }
  const auto vocab = cast::build_plan_vocab(corpus, cfg.scenario, data.registry, cfg.vocab);
  vocab.save(out);
  std::cout << "size " << vocab.size() << " hash " << vocab.hash_hex() << "\n";
  return 0;
}

template <typename T>
void train_one(const fs::path& dir, const cast::AdaptationPlan& plan, const cast::DataSet& data,
               const cast::ExperimentConfig& cfg, Manifest manifest) {
  fs::create_directories(dir);
  const auto model = cast::train_on<T>(plan.source_data, data.registry, cfg, plan.seed);
  cast::TrainConfig tc = cfg.train;
  tc.seed = plan.seed;
  cast::save_checkpoint(dir / "checkpoint.castckpt", model.state, tc, model.vocab.hash_hex());
  model.vocab.save(dir / "vocab.txt");
  std::ostringstream hist;
  hist << "step,epoch,lr,loss\n" << std::setprecision(17);
  for (const auto& r : model.history) hist << r.step << "," << r.epoch << "," << r.lr << "," << r.loss << "\n";
  write_text(dir / "history.csv", hist.str());
  cast::save_dataset(dir / "test.tsv", plan.target_test);
  manifest.extra["plan"] = {{"id", plan.id()},
                            {"sources", plan.sources},
                            {"target", plan.target},
                            {"in_domain", plan.in_domain()},
                            {"scenario", cast::to_string(plan.scenario)},
                            {"plan_seed", plan.seed},
                            {"source_examples", plan.source_data.size()},
                            {"test_examples", plan.target_test.size()}};
  manifest.extra["registry"] = data.registry.to_json();
  manifest.extra["vocab_hash"] = model.vocab.hash_hex();
  manifest.artifacts = {(dir / "checkpoint.castckpt").string(), (dir / "vocab.txt").string(),
                        (dir / "history.csv").string(), (dir / "test.tsv").string()};
  write_json(dir / "manifest.json", manifest.finish());
  std::cout << plan.id() << ": " << model.history.size() << " steps, final loss " << model.history.back().loss
            << " -> " << dir.string() << "\n";
}

int cmd_train(const Common& c, const std::vector<std::string>& sources, const std::string& target, int folds,
              const std::string& out) {
  const auto cfg = load_config(c);
  const auto data = cast::load_data(data_path(c));
  cast::check_plan_shape(sources, target);
  for (const auto& s : sources) require_event(data.registry, s);
  require_event(data.registry, target);
  Manifest m;
  m.command = "train";
  m.config = cast::to_json(cfg);
  m.inputs = data.digests;
  m.seed = cfg.train.seed;
  auto train = [&](const fs::path& dir, const cast::AdaptationPlan& plan) {
    if (cfg.dtype == "f64") train_one<double>(dir, plan, data, cfg, m);
    else train_one<float>(dir, plan, data, cfg, m);
  };
  const cast::PlanSpec spec{sources, target, cfg.scenario};
  if (folds > 0) {
    if (!(sources.size() == 1 && sources.front() == target)) {
      throw cast::PlanError("--folds applies to in-domain plans only (source = target)");
    }
    std::vector<cast::CrisisRecord> records;
    const auto& pool = data.layout == cast::DiagonalMode::five_fold_mean ? data.records : data.train;
    for (const auto& r : pool)
      if (r.event_id == target) records.push_back(r);
    const auto plan_folds = cast::make_folds(records, folds, cast::derive_seed(cfg.train.seed, "folds/" + target));
    for (int f = 0; f < folds; ++f) {
      const auto splits = cast::split_fold(records, plan_folds, f);
      auto plan = cast::compose_plan(sources, target, cfg.scenario, splits,
                                     cast::derive_seed(cfg.train.seed, spec.id() + "/fold" + std::to_string(f)));
      m.extra["fold"] = f;
      train(fs::path(out) / ("fold" + std::to_string(f)), plan);
    }
    return 0;
  }
  train(out, cast::compose(spec, data.splits(), cfg.train.seed));
  return 0;
}

template <typename T>
cast::EvalReport evaluate_checkpoint(const fs::path& ckpt, const cast::Vocabulary& vocab,
                                     const std::vector<cast::CrisisRecord>& test, cast::Scenario scenario,
                                     const cast::EventDescriptor& target, cast::Metric metric, const std::string& id) {
  const auto ck = cast::load_checkpoint<T>(ckpt, vocab.hash_hex());
  return cast::evaluate(ck.state.params, vocab, test, scenario, target, metric, id);
}

int cmd_evaluate(const Common& c, const std::string& run, std::string ckpt, std::string vocab_path, std::string test,
                 std::string target, const std::string& metric_name, std::string out) {
  json run_manifest;
  if (!run.empty()) {
    run_manifest = read_json(fs::path(run) / "manifest.json");
    if (ckpt.empty()) ckpt = (fs::path(run) / "checkpoint.castckpt").string();
    if (vocab_path.empty()) vocab_path = (fs::path(run) / "vocab.txt").string();
    if (test.empty()) test = (fs::path(run) / "test.tsv").string();
    if (target.empty()) target = run_manifest.at("extra").at("plan").at("target").get<std::string>();
    if (out.empty()) out = run;
  }
  if (ckpt.empty() || vocab_path.empty() || test.empty() || target.empty() || out.empty()) {
    throw cast::ConfigError("evaluate needs --run, or all of --checkpoint --vocab --test --target --out");
  }
  cast::EventRegistry registry;
  if (!run_manifest.is_null() && c.data_path.empty()) {
    registry = cast::EventRegistry::from_json(run_manifest.at("extra").at("registry"));
  } else {
    registry = cast::load_data(data_path(c)).registry;
  }
  cast::Scenario scenario = cast::Scenario::postq;
  if (!c.scenario.empty()) scenario = cast::parse_scenario(c.scenario);
  else if (!run_manifest.is_null()) scenario = cast::parse_scenario(run_manifest.at("extra").at("plan").at("scenario").get<std::string>());
  else if (!c.config_path.empty()) scenario = load_config(c).scenario;
  const auto metric = cast::parse_metric(metric_name);
  const auto vocab = cast::Vocabulary::load(vocab_path);
  const auto records = cast::unify_labels(cast::load_dataset(test, registry), cast::default_labels());
  const std::string id = run_manifest.is_null() ? "->" + target : run_manifest["extra"]["plan"]["id"].get<std::string>();
  cast::EvalReport report;
  {
    const auto dtype = cast::checkpoint_dtype(ckpt);
    report = dtype == "f64" ? evaluate_checkpoint<double>(ckpt, vocab, records, scenario, registry.at(target), metric, id)
                             : evaluate_checkpoint<float>(ckpt, vocab, records, scenario, registry.at(target), metric, id);
  }
  write_json(fs::path(out) / "report.json", cast::to_json(report));
  write_text(fs::path(out) / "confusion.csv", cast::confusion_csv(report.confusion));
  std::cout << id << " " << cast::to_string(metric) << " " << cast::format4(report.value) << " (n=" << report.n
            << ", fallback_rate=" << report.fallback_rate << ")\n";
  return 0;
}

void write_correlation(const fs::path& dir, const cast::AdaptationMatrix& m, bool exclude_self, json& summary) {
  const auto corr = cast::pearson_row_correlation(m.values(), exclude_self);
  for (const auto& w : corr.warnings) std::cerr << "warning: correlation: " << w << "\n";
  write_text(dir / "correlation.csv", cast::square_csv(m.events, corr.r));
  summary["correlation_warnings"] = corr.warnings;
  summary["correlate_exclude_self"] = exclude_self;
}

int cmd_matrix(const Common& c, std::vector<std::string> events, const std::string& out, bool exclude_self,
               bool keep_checkpoints) {
  const auto cfg = load_config(c);
  const auto data = cast::load_data(data_path(c));
  events = event_list(events, data.registry);
  const fs::path dir(out);
  fs::create_directories(dir);
  Manifest man;
  man.command = "matrix";
  man.config = cast::to_json(cfg);
  man.inputs = data.digests;
  man.seed = cfg.train.seed;
  man.extra["events"] = events;
  const auto runner = make_runner(data.registry, cfg,
                                  keep_checkpoints ? std::optional<fs::path>(dir / "runs") : std::nullopt);
  const auto m = cast::build_adaptation_matrix(events, cfg.scenario, cfg.metric, data.matrix_data(), runner,
                                               cfg.train.seed, c.jobs);
  write_text(dir / "matrix.csv", cast::square_csv(events, m.values()));
  json mj = cast::to_json(m);
  man.artifacts = {(dir / "matrix.csv").string(), (dir / "matrix.json").string()};
  std::cout << cast::square_csv(events, m.values());
  if (!m.complete()) {
    for (const auto& row : m.cells)
      for (const auto& cell : row)
        if (cell.error) std::cerr << "error: " << *cell.error << "\n";
    write_json(dir / "matrix.json", mj);
    write_json(dir / "manifest.json", man.finish());
    std::cerr << "matrix incomplete; correlation not computed\n";
    return kExitIncomplete;
  }
  write_correlation(dir, m, exclude_self, mj);
  write_json(dir / "matrix.json", mj);
  man.artifacts.push_back((dir / "correlation.csv").string());
  write_json(dir / "manifest.json", man.finish());
  return 0;
}

// Trains and evaluates each plan; writes <name>.csv with one row per plan
// and a final average row.
int run_plans(const Common& c, const std::string& command, const std::vector<cast::PlanSpec>& specs,
              const cast::DataSet& data, const cast::ExperimentConfig& cfg, const fs::path& dir,
              const std::string& csv_name) {
  fs::create_directories(dir);
  const auto splits = data.splits();
  std::vector<cast::TrainingRun> runs;
  for (const auto& spec : specs) runs.push_back(cast::plan_run(cast::compose(spec, splits, cfg.train.seed)));
  const auto outcomes = cast::execute_runs(runs, make_runner(data.registry, cfg, std::nullopt), c.jobs);
  Manifest man;
  man.command = command;
  man.config = cast::to_json(cfg);
  man.inputs = data.digests;
  man.seed = cfg.train.seed;
  std::string csv = "plan,sources,target," + std::string(cast::to_string(cfg.metric)) + "\n";
  json plans = json::array();
  std::vector<cast::EvalReport> reports;
  bool complete = true;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& spec = specs[i];
    std::string sources;
    for (std::size_t k = 0; k < spec.sources.size(); ++k) sources += (k ? "+" : "") + spec.sources[k];
    json entry = {{"plan", spec.id()}, {"seed", runs[i].seed}};
    double value = std::numeric_limits<double>::quiet_NaN();
    if (outcomes[i].result) {
      const auto& r = outcomes[i].result->reports.front();
      value = r.value;
      reports.push_back(r);
      entry["report"] = cast::to_json(r);
    } else {
      complete = false;
      entry["error"] = outcomes[i].error;
      std::cerr << "error: " << spec.id() << ": " << outcomes[i].error << "\n";
    }
    csv += spec.id() + "," + sources + "," + spec.target + "," + cast::format4(value) + "\n";
    plans.push_back(std::move(entry));
  }
  csv += "average,,," + cast::format4(complete ? cast::mean_value(reports) : std::numeric_limits<double>::quiet_NaN()) + "\n";
  write_text(dir / csv_name, csv);
  write_json(dir / "plans.json", plans);
  man.extra["complete"] = complete;
  man.artifacts = {(dir / csv_name).string(), (dir / "plans.json").string()};
  write_json(dir / "manifest.json", man.finish());
  std::cout << csv;
  return complete ? 0 : kExitIncomplete;
}

int cmd_loo(const Common& c, std::vector<std::string> events, const std::string& out) {
  const auto cfg = load_config(c);
  const auto data = cast::load_data(data_path(c));
  events = event_list(events, data.registry);
  return run_plans(c, "loo", cast::plan_leave_one_out(events, cfg.scenario), data, cfg, out, "loo.csv");
}

// "A;B+C" -> {{A}, {B, C}}
std::vector<std::vector<std::string>> parse_sets(const std::string& text) {
  std::vector<std::vector<std::string>> sets;
  std::stringstream outer(text);
  std::string set;
  while (std::getline(outer, set, ';')) {
    std::vector<std::string> members;
    std::stringstream inner(set);
    std::string e;
    while (std::getline(inner, e, '+'))
      if (!e.empty()) members.push_back(e);
    sets.push_back(std::move(members));
  }
  if (sets.empty()) throw cast::ConfigError("--sets is empty");
  return sets;
}

int cmd_many_to_one(const Common& c, const std::string& sets, const std::string& target, const std::string& out) {
  const auto cfg = load_config(c);
  const auto data = cast::load_data(data_path(c));
  require_event(data.registry, target);
  const auto specs = cast::plan_many_to_one(parse_sets(sets), target, cfg.scenario);
  for (const auto& s : specs)
    for (const auto& e : s.sources) require_event(data.registry, e);
  return run_plans(c, "many-to-one", specs, data, cfg, out, "many_to_one.csv");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Event-aware crisis relevance classification: training, evaluation and adaptation experiments"};
  app.require_subcommand(1);
  Common c;
  app.add_option("--jobs", c.jobs, "Parallel training runs")->check(CLI::PositiveNumber);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config_path, "Experiment config JSON")->check(CLI::ExistingFile);
    sub->add_option("--data", c.data_path, "Data description JSON (default $CAST_DATA_DIR/data.json)")
        ->check(CLI::ExistingFile);
    sub->add_option("--scenario", c.scenario, "standard | postq | variant1 | variant2 | variant3");
    sub->add_option("--seed", c.seed, "Master seed (overrides config)");
    sub->add_option("--epochs", c.epochs, "Epochs (overrides config)");
    sub->add_option("--jobs", c.jobs, "Parallel training runs")->check(CLI::PositiveNumber);
  };

  std::string out;
  std::vector<std::string> events;

  auto* synth = app.add_subcommand("synth", "Write a synthetic three-event corpus");
  cast::synth::Options synth_opt;
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--train-per-event", synth_opt.train_per_event);
  synth->add_option("--dev-per-event", synth_opt.dev_per_event);
  synth->add_option("--test-per-event", synth_opt.test_per_event);
  synth->add_option("--seed", synth_opt.seed);

  auto* vocab = app.add_subcommand("build-vocab", "Build the vocabulary of a source set");
  add_common(vocab);
  std::optional<int> min_freq, max_size;
  vocab->add_option("--source", events, "Source events (default: all)")->delimiter(',');
  vocab->add_option("--out", out, "Vocabulary file")->required();
  vocab->add_option("--min-freq", min_freq);
  vocab->add_option("--max-size", max_size);

  auto* train = app.add_subcommand("train", "Train one plan");
  add_common(train);
  std::string target;
  int folds = 0;
  train->add_option("--source", events, "Source events")->delimiter(',')->required();
  train->add_option("--target", target, "Target event")->required();
  train->add_option("--folds", folds, "Train each of K folds (in-domain only)")->check(CLI::Range(2, 100));
  train->add_option("--out", out, "Run directory")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a trained run");
  add_common(evaluate);
  std::string run, ckpt, vocab_path, test, metric = "accuracy";
  evaluate->add_option("--run", run, "Run directory written by train")->check(CLI::ExistingDirectory);
  evaluate->add_option("--checkpoint", ckpt)->check(CLI::ExistingFile);
  evaluate->add_option("--vocab", vocab_path)->check(CLI::ExistingFile);
  evaluate->add_option("--test", test)->check(CLI::ExistingFile);
  evaluate->add_option("--target", target);
  evaluate->add_option("--metric", metric, "accuracy | weighted_f1");
  evaluate->add_option("--out", out, "Report directory (default: the run directory)");

  auto* matrix = app.add_subcommand("matrix", "Pairwise adaptation matrix and its row correlation");
  add_common(matrix);
  bool exclude_self = false, keep = false;
  matrix->add_option("--events", events, "Events (default: all registered)")->delimiter(',');
  matrix->add_option("--out", out, "Output directory")->required();
  matrix->add_flag("--correlate-exclude-self", exclude_self, "Drop columns i and j when correlating rows i and j");
  matrix->add_flag("--keep-checkpoints", keep, "Save each run's checkpoint under OUT/runs");

  auto* loo = app.add_subcommand("loo", "Leave-one-out plans");
  add_common(loo);
  loo->add_option("--events", events, "Events (default: all registered)")->delimiter(',');
  loo->add_option("--out", out, "Output directory")->required();

  auto* m2o = app.add_subcommand("many-to-one", "Several source sets against one target");
  add_common(m2o);
  std::string sets;
  m2o->add_option("--sets", sets, "Source sets, e.g. \"A;B+C\"")->required();
  m2o->add_option("--target", target, "Target event")->required();
  m2o->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(out, synth_opt);
    if (*vocab) return cmd_build_vocab(c, events, out, min_freq, max_size);
    if (*train) return cmd_train(c, events, target, folds, out);
    if (*evaluate) return cmd_evaluate(c, run, ckpt, vocab_path, test, target, metric, out);
    if (*matrix) return cmd_matrix(c, events, out, exclude_self, keep);
    if (*loo) return cmd_loo(c, events, out);
    if (*m2o) return cmd_many_to_one(c, sets, target, out);
  } catch (const cast::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
