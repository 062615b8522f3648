#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <string>
#include <string_view>

#include "cast/error.hpp"

namespace cast {

// Input-construction scenario. `standard` feeds the raw message; the others
// append a task/event question to it.
enum class Scenario { standard, postq, variant1, variant2, variant3 };

inline constexpr std::array<Scenario, 5> kAllScenarios = {
    Scenario::standard, Scenario::postq, Scenario::variant1, Scenario::variant2,
    Scenario::variant3};

inline std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::standard: return "standard";
    case Scenario::postq: return "postq";
    case Scenario::variant1: return "variant1";
    case Scenario::variant2: return "variant2";
    case Scenario::variant3: return "variant3";
  }
  return "standard";
}

// Case-insensitive.
inline Scenario parse_scenario(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (Scenario s : kAllScenarios) {
    if (to_string(s) == lower) return s;
  }
  throw ConfigError("unknown scenario '" + std::string(name) +
                    "' (expected standard, postq, variant1, variant2 or variant3)");
}

}  // namespace cast
