#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlvc {

// Bad user-supplied configuration. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Model exceeds its serving budget. The CLI maps this to exit code 4.
class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One example: string id, dense feature vector of length D, and a set of
// label indices in [0, C). Labels are kept sorted and unique.
struct Example {
  std::string id;
  std::vector<double> features;
  std::vector<int> labels;
};

// Per-label scores in [0, 1], length C. Not a probability distribution:
// labels are not mutually exclusive, rows need not sum to one.
using ScoreVector = std::vector<double>;

struct LabelVocabulary {
  std::vector<std::string> names;        // dense, index == position
  std::vector<std::int64_t> counts;      // examples carrying each label

  int size() const { return static_cast<int>(names.size()); }
};

struct Validation {
  bool ok = true;
  std::string message;

  static Validation pass() { return {}; }
  static Validation fail(std::string msg) { return {false, std::move(msg)}; }
  explicit operator bool() const { return ok; }
};

inline void normalize_labels(Example& e) {
  std::sort(e.labels.begin(), e.labels.end());
  e.labels.erase(std::unique(e.labels.begin(), e.labels.end()), e.labels.end());
}

inline Validation validate_example(const Example& e, int feature_dim, int num_labels,
                                   bool require_labels = true) {
  if (static_cast<int>(e.features.size()) != feature_dim)
    return Validation::fail("example " + e.id + ": feature length " +
                            std::to_string(e.features.size()) + " != " +
                            std::to_string(feature_dim));
  for (double f : e.features)
    if (!std::isfinite(f)) return Validation::fail("example " + e.id + ": non-finite feature");
  if (require_labels && e.labels.empty())
    return Validation::fail("example " + e.id + ": empty label set");
  int prev = -1;
  for (int l : e.labels) {
    if (l < 0 || l >= num_labels)
      return Validation::fail("example " + e.id + ": label " + std::to_string(l) +
                              " out of range [0, " + std::to_string(num_labels) + ")");
    if (l == prev) return Validation::fail("example " + e.id + ": duplicate label " + std::to_string(l));
    if (l < prev) return Validation::fail("example " + e.id + ": labels not sorted");
    prev = l;
  }
  return Validation::pass();
}

inline Validation validate_scores(const ScoreVector& s, int num_labels) {
  if (static_cast<int>(s.size()) != num_labels)
    return Validation::fail("score vector length " + std::to_string(s.size()) + " != " +
                            std::to_string(num_labels));
  for (double v : s) {
    if (!std::isfinite(v)) return Validation::fail("non-finite score");
    if (v < 0.0 || v > 1.0) return Validation::fail("score " + std::to_string(v) + " outside [0, 1]");
  }
  return Validation::pass();
}

inline Validation validate_vocabulary(const LabelVocabulary& v) {
  if (v.names.size() != v.counts.size())
    return Validation::fail("vocabulary names/counts length mismatch");
  for (std::int64_t c : v.counts)
    if (c < 0) return Validation::fail("negative label count");
  std::vector<std::string> sorted = v.names;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    return Validation::fail("duplicate label name");
  return Validation::pass();
}

}  // namespace mlvc
