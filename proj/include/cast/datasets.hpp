#pragma once

// Data description files. A JSON document names the event registry and the
// dataset files of one corpus:
//
//   {
//     "registry": "registry.json",             // or an inline object
//     "layout": "standard_split",              // or "cross_validation"
//     "train": "train.tsv", "dev": "dev.tsv", "test": "test.tsv",
//     "records": "all.tsv", "folds": 5,        // cross_validation only
//     "labels": "default"                      // nepal_queensland | crisist6 | default
//   }
//
// Relative paths resolve against the description file's directory.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cast/corpus.hpp"
#include "cast/error.hpp"
#include "cast/eval.hpp"
#include "cast/rng.hpp"

namespace cast {

struct DataSet {
  EventRegistry registry;
  DiagonalMode layout = DiagonalMode::standard_split;
  std::vector<CrisisRecord> train, dev, test;  // standard_split
  std::vector<CrisisRecord> records;           // cross_validation
  int folds = 5;
  std::map<std::string, std::string> digests;  // file path -> FNV-1a 64 hex

  // Splits for plans over whole events: the standard portions, or for CV
  // corpora every record as both training and test data.
  SplitSet splits() const {
    return layout == DiagonalMode::standard_split ? split_standard(train, dev, test) : split_whole(records);
  }

  MatrixData matrix_data() const {
    MatrixData d;
    d.mode = layout;
    d.folds = folds;
    if (layout == DiagonalMode::standard_split) d.splits = split_standard(train, dev, test);
    else d.records = records;
    return d;
  }
};

inline std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(buf.str());
  return hex.str();
}

inline LabelMap label_map(const std::string& name) {
  if (name == "default") return default_labels();
  if (name == "nepal_queensland") return nepal_queensland_labels();
  if (name == "crisist6") return crisist6_labels();
  throw ConfigError("unknown label map '" + name + "' (expected default, nepal_queensland or crisist6)");
}

inline DataSet load_data(const std::filesystem::path& description) {
  std::ifstream in(description);
  if (!in) throw IoError("cannot read data description '" + description.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in '" + description.string() + "': " + e.what());
  }
  if (!j.is_object()) throw ConfigError("data description must be a JSON object");
  const auto base = description.parent_path();
  auto resolve = [&](const std::string& p) { return std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base / p; };
  DataSet d;
  d.digests[description.string()] = file_digest(description);
  if (!j.contains("registry")) throw ConfigError("data description lacks 'registry'");
  if (j["registry"].is_string()) {
    const auto path = resolve(j["registry"].get<std::string>());
    d.registry = EventRegistry::load(path);
    d.digests[path.string()] = file_digest(path);
  } else {
    d.registry = EventRegistry::from_json(j["registry"]);
  }
  const std::string layout = j.value("layout", std::string("standard_split"));
  const LabelMap labels = label_map(j.value("labels", std::string("default")));
  auto read = [&](const char* key, bool required) {
    std::vector<CrisisRecord> out;
    if (!j.contains(key)) {
      if (required) throw ConfigError("data description lacks '" + std::string(key) + "'");
      return out;
    }
    const auto path = resolve(j[key].get<std::string>());
    d.digests[path.string()] = file_digest(path);
    return unify_labels(load_dataset(path, d.registry), labels);
  };
  if (layout == "standard_split") {
    d.layout = DiagonalMode::standard_split;
    d.train = read("train", true);
    d.dev = read("dev", false);
    d.test = read("test", true);
  } else if (layout == "cross_validation") {
    d.layout = DiagonalMode::five_fold_mean;
    d.records = read("records", true);
    d.folds = j.value("folds", 5);
  } else {
    throw ConfigError("unknown layout '" + layout + "' (expected standard_split or cross_validation)");
  }
  return d;
}

}  // namespace cast
