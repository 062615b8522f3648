#pragma once

// Crisis datasets: TSV ingestion, event registry, label unification,
// stratified folds and source/target adaptation plans.

#include <unicode/ustring.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cast/error.hpp"
#include "cast/rng.hpp"
#include "cast/scenario.hpp"

namespace cast {

enum class Label { no = 0, yes = 1 };

inline std::string_view to_string(Label l) { return l == Label::yes ? "yes" : "no"; }

struct CrisisRecord {
  std::string id;
  std::string text;  // may be empty
  std::string raw_label;
  std::optional<Label> unified_label;
  std::string event_id;

  friend bool operator==(const CrisisRecord&, const CrisisRecord&) = default;
};

struct EventDescriptor {
  std::string event_id;
  std::string location_name;  // may be empty
  std::string crisis_name;
  std::optional<std::string> event_type;
};

class EventRegistry {
 public:
  EventRegistry() = default;

  void add(EventDescriptor event) {
    if (event.crisis_name.empty()) {
      throw ConfigError("event '" + event.event_id + "' has an empty crisis_name");
    }
    if (events_.contains(event.event_id)) {
      throw ConfigError("duplicate event id '" + event.event_id + "'");
    }
    std::string key = event.event_id;
    events_.emplace(std::move(key), std::move(event));
  }

  bool contains(std::string_view id) const { return events_.find(std::string(id)) != events_.end(); }

  const EventDescriptor& at(std::string_view id) const {
    auto it = events_.find(std::string(id));
    if (it == events_.end()) throw ReferenceError("unknown event_id '" + std::string(id) + "'");
    return it->second;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& [id, _] : events_) out.push_back(id);
    return out;
  }

  std::size_t size() const { return events_.size(); }

  // {event_id: {"location_name": str, "crisis_name": str, "event_type": str?}}
  static EventRegistry from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("event registry must be a JSON object");
    EventRegistry reg;
    for (const auto& [id, body] : j.items()) {
      if (!body.is_object()) throw ConfigError("registry entry '" + id + "' must be an object");
      EventDescriptor e;
      e.event_id = id;
      e.location_name = body.value("location_name", std::string{});
      if (!body.contains("crisis_name") || !body["crisis_name"].is_string()) {
        throw ConfigError("registry entry '" + id + "' lacks a string crisis_name");
      }
      e.crisis_name = body["crisis_name"].get<std::string>();
      if (body.contains("event_type") && !body["event_type"].is_null()) {
        e.event_type = body["event_type"].get<std::string>();
      }
      reg.add(std::move(e));
    }
    return reg;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, e] : events_) {
      nlohmann::json body = {{"location_name", e.location_name}, {"crisis_name", e.crisis_name}};
      if (e.event_type) body["event_type"] = *e.event_type;
      j[id] = std::move(body);
    }
    return j;
  }

  static EventRegistry load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read event registry '" + path.string() + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("invalid registry JSON in '" + path.string() + "': " + e.what());
    }
    return from_json(j);
  }

 private:
  std::map<std::string, EventDescriptor> events_;
};

// ---------------------------------------------------------------------------
// TSV dataset format
//
//   id<TAB>text<TAB>label<TAB>event_id      (header, LF line endings)
//
// Inside text, `\t`, `\n` and `\\` are escapes; any other backslash is
// literal. The writer escapes a backslash only when it would otherwise read
// back as an escape, so canonical files round-trip byte for byte.

namespace tsv {

inline constexpr std::string_view kHeader = "id\ttext\tlabel\tevent_id";

inline std::string unescape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      const char n = s[i + 1];
      if (n == 't') { out.push_back('\t'); ++i; continue; }
      if (n == 'n') { out.push_back('\n'); ++i; continue; }
      if (n == '\\') { out.push_back('\\'); ++i; continue; }
    }
    out.push_back(s[i]);
  }
  return out;
}

inline std::string escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (c == '\t') { out += "\\t"; continue; }
    if (c == '\n') { out += "\\n"; continue; }
    if (c == '\\' && i + 1 < s.size()) {
      const char n = s[i + 1];
      if (n == 't' || n == 'n' || n == '\\' || n == '\t' || n == '\n') {
        out += "\\\\";
        continue;
      }
    }
    out.push_back(c);
  }
  return out;
}

inline bool valid_utf8(std::string_view s) {
  UErrorCode status = U_ZERO_ERROR;
  int32_t needed = 0;
  u_strFromUTF8(nullptr, 0, &needed, s.data(), static_cast<int32_t>(s.size()), &status);
  return status == U_BUFFER_OVERFLOW_ERROR || status == U_STRING_NOT_TERMINATED_WARNING ||
         U_SUCCESS(status);
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      cols.push_back(line.substr(start));
      break;
    }
    cols.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return cols;
}

}  // namespace tsv

// Parses a dataset stream. `registry` may be null to skip event validation.
inline std::vector<CrisisRecord> parse_dataset(std::istream& in, const EventRegistry* registry,
                                               std::string_view source = "<stream>") {
  std::vector<CrisisRecord> records;
  std::string line;
  std::size_t line_no = 0;
  const std::string where = " in " + std::string(source);
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != tsv::kHeader) {
        throw SchemaError("bad header" + where + ", expected 'id\\ttext\\tlabel\\tevent_id'", 1);
      }
      continue;
    }
    if (line.empty()) continue;
    if (!tsv::valid_utf8(line)) throw DecodeError("malformed UTF-8" + where + " at line " + std::to_string(line_no));
    const auto cols = tsv::split_tabs(line);
    if (cols.size() != 4) {
      throw SchemaError("expected 4 columns, found " + std::to_string(cols.size()) + where, line_no);
    }
    CrisisRecord r;
    r.id = std::string(cols[0]);
    r.text = tsv::unescape(cols[1]);
    r.raw_label = std::string(cols[2]);
    r.event_id = std::string(cols[3]);
    while (!r.event_id.empty() && (r.event_id.back() == ' ' || r.event_id.back() == '\t')) {
      r.event_id.pop_back();
    }
    if (r.id.empty()) throw SchemaError("empty id" + where, line_no);
    if (registry != nullptr && !registry->contains(r.event_id)) {
      throw ReferenceError("unknown event_id '" + r.event_id + "'" + where + " at line " +
                           std::to_string(line_no));
    }
    records.push_back(std::move(r));
  }
  if (line_no == 0) throw SchemaError("empty file" + where + ", header missing", 1);
  return records;
}

inline std::vector<CrisisRecord> load_dataset(const std::filesystem::path& path,
                                              const EventRegistry& registry) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read dataset '" + path.string() + "'");
  return parse_dataset(in, &registry, path.string());
}

inline void write_dataset(std::ostream& out, const std::vector<CrisisRecord>& records) {
  out << tsv::kHeader << '\n';
  for (const auto& r : records) {
    out << r.id << '\t' << tsv::escape(r.text) << '\t' << r.raw_label << '\t' << r.event_id << '\n';
  }
}

inline void save_dataset(const std::filesystem::path& path, const std::vector<CrisisRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset '" + path.string() + "'");
  write_dataset(out, records);
}

// ---------------------------------------------------------------------------
// Label unification

using LabelMap = std::map<std::string, Label, std::less<>>;

inline LabelMap nepal_queensland_labels() {
  return {{"relevant", Label::yes}, {"not_relevant", Label::no}};
}

inline LabelMap crisist6_labels() {
  return {{"on-topic", Label::yes}, {"off-topic", Label::no}};
}

// Both benchmark maps plus the already-unified strings.
inline LabelMap default_labels() {
  LabelMap m = nepal_queensland_labels();
  m.merge(crisist6_labels());
  m.emplace("yes", Label::yes);
  m.emplace("no", Label::no);
  return m;
}

inline std::vector<CrisisRecord> unify_labels(std::vector<CrisisRecord> records, const LabelMap& mapping) {
  std::map<std::string, std::size_t> unmapped;
  for (const auto& r : records) {
    if (!mapping.contains(r.raw_label)) ++unmapped[r.raw_label];
  }
  if (!unmapped.empty()) {
    std::string msg = "unmapped: ";
    bool first = true;
    for (const auto& [label, count] : unmapped) {
      if (!first) msg += ", ";
      msg += label + " (" + std::to_string(count) + ")";
      first = false;
    }
    throw LabelError(msg);
  }
  for (auto& r : records) r.unified_label = mapping.find(r.raw_label)->second;
  return records;
}

// ---------------------------------------------------------------------------
// Folds

struct FoldPlan {
  int k = 0;
  std::uint64_t seed = 0;
  std::map<std::string, int> assignments;  // record id -> fold

  int fold_of(const std::string& id) const {
    auto it = assignments.find(id);
    if (it == assignments.end()) throw ReferenceError("record '" + id + "' has no fold");
    return it->second;
  }
};

// Stratified by (event_id, unified_label). Strata are visited in sorted key
// order, each is shuffled with one shared SplitMix64(seed) stream, then its
// members are dealt round-robin continuing a global cursor, so both whole
// folds and per-stratum counts differ by at most one.
inline FoldPlan make_folds(const std::vector<CrisisRecord>& records, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k must be at least 2, got " + std::to_string(k));
  if (records.size() < static_cast<std::size_t>(k)) {
    throw ConfigError("k=" + std::to_string(k) + " exceeds record count " + std::to_string(records.size()));
  }
  std::map<std::pair<std::string, int>, std::vector<std::string>> strata;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!r.unified_label) throw LabelError("record '" + r.id + "' has no unified label");
    if (!seen.insert(r.id).second) throw ConfigError("duplicate record id '" + r.id + "'");
    strata[{r.event_id, static_cast<int>(*r.unified_label)}].push_back(r.id);
  }
  FoldPlan plan{k, seed, {}};
  SplitMix64 rng(seed);
  std::size_t cursor = 0;
  for (auto& [key, ids] : strata) {
    shuffle(std::span<std::string>(ids), rng);
    for (const auto& id : ids) {
      plan.assignments[id] = static_cast<int>(cursor % static_cast<std::size_t>(k));
      ++cursor;
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Splits and plans

struct EventSplit {
  std::vector<CrisisRecord> train;
  std::vector<CrisisRecord> dev;
  std::vector<CrisisRecord> test;
};

using SplitSet = std::map<std::string, EventSplit>;

// Standard train/dev/test files, possibly holding several events each.
inline SplitSet split_standard(const std::vector<CrisisRecord>& train, const std::vector<CrisisRecord>& dev,
                               const std::vector<CrisisRecord>& test) {
  SplitSet out;
  for (const auto& r : train) out[r.event_id].train.push_back(r);
  for (const auto& r : dev) out[r.event_id].dev.push_back(r);
  for (const auto& r : test) out[r.event_id].test.push_back(r);
  return out;
}

// Cross-validation view: records in `fold` form the test portion.
inline SplitSet split_fold(const std::vector<CrisisRecord>& records, const FoldPlan& folds, int fold) {
  if (fold < 0 || fold >= folds.k) throw ConfigError("fold index out of range");
  SplitSet out;
  for (const auto& r : records) {
    auto& split = out[r.event_id];
    (folds.fold_of(r.id) == fold ? split.test : split.train).push_back(r);
  }
  return out;
}

// Whole corpus as training data and as test data, for cross-domain cells of
// CV-style corpora where the target's full set is evaluated.
inline SplitSet split_whole(const std::vector<CrisisRecord>& records) {
  SplitSet out;
  for (const auto& r : records) {
    out[r.event_id].train.push_back(r);
    out[r.event_id].test.push_back(r);
  }
  return out;
}

struct AdaptationPlan {
  std::string task_id = "relevance";
  std::vector<std::string> sources;  // S, unique, in the order given
  std::string target;                // T
  Scenario scenario = Scenario::postq;
  std::uint64_t seed = 0;
  std::vector<CrisisRecord> source_data;  // S_d
  std::vector<CrisisRecord> target_test;  // T_d

  bool in_domain() const { return sources.size() == 1 && sources.front() == target; }

  std::string id() const {
    std::string s;
    for (std::size_t i = 0; i < sources.size(); ++i) s += (i ? "+" : "") + sources[i];
    return s + "->" + target;
  }
};

// Validates an (S, T) pair: in-domain iff S = {T}, cross-domain iff T not in S.
inline void check_plan_shape(const std::vector<std::string>& sources, const std::string& target) {
  if (sources.empty()) throw PlanError("invalid plan: empty source set");
  if (target.empty()) throw PlanError("invalid plan: empty target");
  const bool has_target = std::find(sources.begin(), sources.end(), target) != sources.end();
  if (has_target && sources.size() > 1) {
    throw PlanError("invalid plan: target " + target + " is inside a multi-event source set");
  }
}

inline AdaptationPlan compose_plan(std::vector<std::string> sources, const std::string& target, Scenario scenario,
                                   const SplitSet& splits, std::uint64_t seed = 0) {
  {
    std::vector<std::string> unique;
    for (auto& s : sources) {
      if (std::find(unique.begin(), unique.end(), s) == unique.end()) unique.push_back(s);
    }
    sources = std::move(unique);
  }
  check_plan_shape(sources, target);
  AdaptationPlan plan;
  plan.sources = sources;
  plan.target = target;
  plan.scenario = scenario;
  plan.seed = seed;
  for (const auto& s : sources) {
    auto it = splits.find(s);
    if (it == splits.end() || it->second.train.empty()) {
      throw PlanError("invalid plan: no training data for source event " + s);
    }
    plan.source_data.insert(plan.source_data.end(), it->second.train.begin(), it->second.train.end());
  }
  SplitMix64 rng(derive_seed(seed, plan.id()));
  shuffle(std::span<CrisisRecord>(plan.source_data), rng);
  auto it = splits.find(target);
  if (it == splits.end() || it->second.test.empty()) {
    throw PlanError("invalid plan: no test data for target event " + target);
  }
  plan.target_test = it->second.test;
  return plan;
}

}  // namespace cast
