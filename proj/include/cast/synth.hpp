#pragma once

// Synthetic multi-event corpora.
//
// Each event draws its relevant ("yes") messages from a topical word list
// chosen by its generator name; irrelevant ("no") messages come from one
// shared off-topic list. Events on the same generator therefore have the
// same input distribution (differing only by seed), while events on
// different generators share nothing but filler and off-topic words.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cast/corpus.hpp"
#include "cast/error.hpp"
#include "cast/rng.hpp"

namespace cast::synth {

inline const std::map<std::string, std::vector<std::string_view>>& topical_words() {
  static const std::map<std::string, std::vector<std::string_view>> words = {
      {"flood", {"flood", "water", "river", "rain", "levee", "submerged", "evacuate", "sandbags", "rescue", "boats"}},
      {"earthquake",
       {"earthquake", "quake", "tremor", "rubble", "collapsed", "aftershock", "magnitude", "debris", "buried", "cracks"}},
      {"wildfire",
       {"wildfire", "fire", "smoke", "flames", "burning", "blaze", "firefighters", "ash", "embers", "scorched"}},
  };
  return words;
}

inline constexpr std::string_view kOffTopic[] = {"lunch", "movie", "concert", "coffee", "football", "birthday",
                                                 "music", "weekend", "shopping", "pizza", "gym", "holiday"};

inline constexpr std::string_view kFiller[] = {"the", "and", "now", "so", "just", "today"};

struct EventSpec {
  std::string event_id;
  std::string location_name;
  std::string crisis_name;
  std::string generator;  // key of topical_words()
};

struct Options {
  std::vector<EventSpec> events;
  std::size_t train_per_event = 640;
  std::size_t dev_per_event = 64;
  std::size_t test_per_event = 200;
  double yes_fraction = 0.5;
  std::size_t min_words = 5;
  std::size_t max_words = 10;
  std::uint64_t seed = 7;
};

// The default three-event layout: A and B on the flood generator, C on the
// earthquake generator.
inline std::vector<EventSpec> default_events() {
  return {{"A", "riverton", "flood", "flood"},
          {"B", "lakeside", "flood", "flood"},
          {"C", "hillcrest", "earthquake", "earthquake"}};
}

struct Corpus {
  EventRegistry registry;
  std::vector<CrisisRecord> train, dev, test;
};

inline std::string message(SplitMix64& rng, const std::vector<std::string_view>& topical, bool relevant,
                           const Options& opt) {
  const std::size_t n = opt.min_words + rng.below(opt.max_words - opt.min_words + 1);
  const std::size_t content = (n + 1) / 2 + rng.below(n / 2 + 1);  // about half to all of the words
  std::vector<std::string_view> words;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < content) {
      words.push_back(relevant ? topical[rng.below(topical.size())] : kOffTopic[rng.below(std::size(kOffTopic))]);
    } else {
      words.push_back(kFiller[rng.below(std::size(kFiller))]);
    }
  }
  shuffle(std::span<std::string_view>(words), rng);
  std::string out;
  for (auto w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

inline Corpus generate(const Options& opt) {
  if (opt.events.empty()) throw ConfigError("synth: no events requested");
  if (opt.min_words < 1 || opt.max_words < opt.min_words) throw ConfigError("synth: bad message length range");
  if (opt.yes_fraction < 0 || opt.yes_fraction > 1) throw ConfigError("synth: yes_fraction must lie in [0, 1]");
  Corpus c;
  for (const auto& e : opt.events) {
    auto it = topical_words().find(e.generator);
    if (it == topical_words().end()) throw ConfigError("synth: unknown generator '" + e.generator + "'");
    c.registry.add({e.event_id, e.location_name, e.crisis_name, e.generator});
    SplitMix64 rng(derive_seed(opt.seed, "synth/" + e.event_id));
    auto fill = [&](std::vector<CrisisRecord>& out, std::size_t count, std::string_view split) {
      const auto yes = static_cast<std::size_t>(std::llround(opt.yes_fraction * static_cast<double>(count)));
      std::vector<char> order(count, 0);
      std::fill_n(order.begin(), yes, 1);
      shuffle(std::span<char>(order), rng);
      for (std::size_t i = 0; i < count; ++i) {
        const bool relevant = order[i] != 0;
        CrisisRecord r;
        r.id = e.event_id + "-" + std::string(split) + "-" + std::to_string(i);
        r.text = message(rng, it->second, relevant, opt);
        r.raw_label = relevant ? "relevant" : "not_relevant";
        r.unified_label = relevant ? Label::yes : Label::no;
        r.event_id = e.event_id;
        out.push_back(std::move(r));
      }
    };
    fill(c.train, opt.train_per_event, "train");
    fill(c.dev, opt.dev_per_event, "dev");
    fill(c.test, opt.test_per_event, "test");
  }
  return c;
}

}  // namespace cast::synth
