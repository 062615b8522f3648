#pragma once

// Event-aware input construction. A message X becomes
//
//   "Content: {X}. Question: {task}{event}?"
//
// where {task} is the fixed task description and {event} names the crisis.
// Every scenario except `standard` appends the same glue for a given event,
// so two records of one event differ only inside their content span.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cast/corpus.hpp"
#include "cast/scenario.hpp"

namespace cast {

inline constexpr std::string_view kContentPrefix = "Content: ";
inline constexpr std::string_view kQuestionLead = ". Question: ";
inline constexpr std::string_view kTaskDescription = "Is this message relevant to ";

struct AugmentedInput {
  std::string text;
  std::size_t content_begin = 0;  // byte range of the message inside `text`
  std::size_t content_end = 0;
  Scenario scenario = Scenario::standard;
  std::string event_id;

  std::string_view prefix() const { return std::string_view(text).substr(0, content_begin); }
  std::string_view content() const {
    return std::string_view(text).substr(content_begin, content_end - content_begin);
  }
  std::string_view suffix() const { return std::string_view(text).substr(content_end); }
};

inline std::string_view task_description(Scenario s) {
  switch (s) {
    case Scenario::postq:
    case Scenario::variant1:
    case Scenario::variant2: return kTaskDescription;
    case Scenario::standard:
    case Scenario::variant3: return {};
  }
  return {};
}

// The event description as it appears in the constructed input.
inline std::string event_phrase(const EventDescriptor& event, Scenario s) {
  if (event.crisis_name.empty()) {
    throw ConfigError("event '" + event.event_id + "' has an empty crisis_name");
  }
  const auto& loc = event.location_name;
  const auto& crisis = event.crisis_name;
  switch (s) {
    case Scenario::standard: return {};
    case Scenario::postq:
    case Scenario::variant3: return loc.empty() ? crisis : loc + " " + crisis;
    case Scenario::variant1: return crisis;
    case Scenario::variant2:
      if (loc.empty()) {
        throw ConfigError("variant2 needs a location_name, event '" + event.event_id + "' has none");
      }
      return "a " + crisis + " event that occurred in " + loc;
  }
  return {};
}

// Everything after the message content; empty for `standard`.
inline std::string question_suffix(const EventDescriptor& event, Scenario s) {
  if (s == Scenario::standard) return {};
  std::string out(kQuestionLead);
  out += task_description(s);
  out += event_phrase(event, s);
  out += '?';
  return out;
}

inline AugmentedInput construct(std::string_view text, Scenario s, const EventDescriptor& event) {
  AugmentedInput in;
  in.scenario = s;
  in.event_id = event.event_id;
  if (s == Scenario::standard) {
    if (event.crisis_name.empty()) {
      throw ConfigError("event '" + event.event_id + "' has an empty crisis_name");
    }
    in.text = std::string(text);
    in.content_end = in.text.size();
    return in;
  }
  const std::string suffix = question_suffix(event, s);
  in.text.reserve(kContentPrefix.size() + text.size() + suffix.size());
  in.text += kContentPrefix;
  in.content_begin = in.text.size();
  in.text += text;
  in.content_end = in.text.size();
  in.text += suffix;
  return in;
}

inline AugmentedInput construct(const CrisisRecord& record, Scenario s, const EventDescriptor& event) {
  return construct(record.text, s, event);
}

inline std::string target_text(Label label) { return std::string(to_string(label)); }

inline std::optional<Label> parse_label(std::string_view s) {
  if (s == "yes") return Label::yes;
  if (s == "no") return Label::no;
  return std::nullopt;
}

// Raw text of every template word across all scenarios, for vocabulary forcing.
inline std::string template_glossary() {
  return std::string(kContentPrefix) + std::string(kQuestionLead) + std::string(kTaskDescription) +
         " a event that occurred in ? yes no";
}

}  // namespace cast
