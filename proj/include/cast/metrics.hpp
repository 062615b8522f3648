#pragma once

// Classification metrics over {no, yes} and row correlation of adaptation
// matrices. All functions are pure.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cast/corpus.hpp"
#include "cast/error.hpp"

namespace cast {

// counts[gold][pred], indexed by static_cast<int>(Label).
struct Confusion {
  std::array<std::array<std::size_t, 2>, 2> counts{};

  std::size_t total() const { return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1]; }
  std::size_t support(Label gold) const {
    const auto g = static_cast<int>(gold);
    return counts[g][0] + counts[g][1];
  }
};

struct ClassScores {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;
};

struct F1Breakdown {
  double weighted_f1 = 0;
  std::array<ClassScores, 2> per_class{};  // indexed by Label
};

inline void check_pairs(std::span<const Label> preds, std::span<const Label> golds) {
  if (preds.size() != golds.size()) {
    throw ShapeError("predictions (" + std::to_string(preds.size()) + ") and golds (" + std::to_string(golds.size()) +
                     ") differ in length");
  }
  if (golds.empty()) throw ShapeError("no predictions to score");
}

inline Confusion confusion(std::span<const Label> preds, std::span<const Label> golds) {
  check_pairs(preds, golds);
  Confusion c;
  for (std::size_t i = 0; i < preds.size(); ++i) ++c.counts[static_cast<int>(golds[i])][static_cast<int>(preds[i])];
  return c;
}

inline double accuracy(const Confusion& c) {
  return static_cast<double>(c.counts[0][0] + c.counts[1][1]) / static_cast<double>(c.total());
}

inline double accuracy(std::span<const Label> preds, std::span<const Label> golds) {
  return accuracy(confusion(preds, golds));
}

// Per class: P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2PR/(P+R), each 0 when its
// denominator is 0. Weighted F1 = sum_c support(c)/N * F1(c).
inline F1Breakdown f1_breakdown(const Confusion& c) {
  F1Breakdown out;
  const double n = static_cast<double>(c.total());
  for (int k = 0; k < 2; ++k) {
    const double tp = static_cast<double>(c.counts[k][k]);
    const double fp = static_cast<double>(c.counts[1 - k][k]);
    const double fn = static_cast<double>(c.counts[k][1 - k]);
    ClassScores& s = out.per_class[k];
    s.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    s.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    s.support = c.support(static_cast<Label>(k));
    out.weighted_f1 += static_cast<double>(s.support) / n * s.f1;
  }
  return out;
}

inline F1Breakdown weighted_f1(std::span<const Label> preds, std::span<const Label> golds) {
  return f1_breakdown(confusion(preds, golds));
}

struct CorrelationResult {
  std::vector<std::vector<double>> r;
  std::vector<std::string> warnings;
};

// Pearson r between two equally long samples; zero variance on either side
// yields 0 and a warning.
inline double pearson(std::span<const double> x, std::span<const double> y, std::string* warning = nullptr) {
  if (x.size() != y.size()) throw ShapeError("pearson: samples differ in length");
  if (x.size() < 3) throw ShapeError("pearson: need at least 3 paired points, got " + std::to_string(x.size()));
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) {
    if (warning) *warning = "zero-variance row";
    return 0.0;
  }
  const double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

// Cell (i, j) correlates rows i and j. With exclude_self, columns i and j are
// dropped from both rows first. The diagonal is 1 by definition. Pairs with
// fewer than 3 points left are NaN with a warning.
inline CorrelationResult pearson_row_correlation(const std::vector<std::vector<double>>& m, bool exclude_self = false) {
  const std::size_t n = m.size();
  for (const auto& row : m) {
    if (row.size() != n) throw ShapeError("pearson_row_correlation: matrix is not square");
    for (double v : row)
      if (!std::isfinite(v)) throw ShapeError("pearson_row_correlation: matrix is incomplete");
  }
  CorrelationResult out;
  out.r.assign(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      std::vector<double> a, b;
      for (std::size_t k = 0; k < n; ++k) {
        if (exclude_self && (k == i || k == j)) continue;
        a.push_back(m[i][k]);
        b.push_back(m[j][k]);
      }
      if (a.size() < 3) {
        out.warnings.push_back("fewer than 3 points in pair (" + std::to_string(i) + ", " + std::to_string(j) + ")");
        out.r[i][j] = out.r[j][i] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      std::string warning;
      const double r = pearson(a, b, &warning);
      if (!warning.empty()) out.warnings.push_back(warning + " in pair (" + std::to_string(i) + ", " + std::to_string(j) + ")");
      out.r[i][j] = out.r[j][i] = r;
    }
  }
  return out;
}

}  // namespace cast
