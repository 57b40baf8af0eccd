#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "mlvc/dataset.hpp"
#include "mlvc/types.hpp"

namespace mlvc {

// Global average precision at k: each example contributes its top-k
// (score, label) pairs to one global pool; the pool is ranked by score
// descending (ties: label ascending, then example id ascending) and average
// precision is computed over it, dividing by the number of ground-truth
// positives (uncapped, not by the number of pooled pairs).

struct GapConfig {
  int top_k = kDefaultTopK;
};

namespace detail {

struct PooledPair {
  double score;
  int label;
  const std::string* id;
  bool hit;
};

inline void check_alignment(const PredictionSet& preds, const std::vector<Example>& truth) {
  if (preds.ids.size() != truth.size())
    throw std::runtime_error("predictions hold " + std::to_string(preds.ids.size()) +
                             " rows but ground truth holds " + std::to_string(truth.size()));
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (preds.ids[i] != truth[i].id)
      throw std::runtime_error("prediction row " + std::to_string(i) + " is '" + preds.ids[i] +
                               "' but ground truth has '" + truth[i].id + "'");
}

}  // namespace detail

inline double gap(const PredictionSet& preds, const std::vector<Example>& truth,
                  const GapConfig& cfg = {}) {
  if (cfg.top_k <= 0) throw ConfigError("gap: top_k must be positive");
  if (truth.empty()) throw std::runtime_error("gap: empty input");
  detail::check_alignment(preds, truth);

  std::vector<detail::PooledPair> pool;
  std::vector<int> order;
  std::int64_t total_positives = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const ScoreVector& s = preds.scores[i];
    const std::vector<int>& labels = truth[i].labels;
    total_positives += static_cast<std::int64_t>(labels.size());
    order.resize(s.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t k = std::min<std::size_t>(cfg.top_k, s.size());
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      if (s[a] != s[b]) return s[a] > s[b];
      return a < b;
    });
    for (std::size_t j = 0; j < k; ++j) {
      const int label = order[j];
      const bool hit = std::binary_search(labels.begin(), labels.end(), label);
      pool.push_back({s[label], label, &preds.ids[i], hit});
    }
  }
  if (total_positives == 0) throw std::runtime_error("gap: ground truth holds no positive labels");

  std::sort(pool.begin(), pool.end(), [](const detail::PooledPair& a, const detail::PooledPair& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.label != b.label) return a.label < b.label;
    return *a.id < *b.id;
  });

  double ap_sum = 0.0;
  std::int64_t hits = 0;
  for (std::size_t rank = 1; rank <= pool.size(); ++rank) {
    if (!pool[rank - 1].hit) continue;
    ++hits;
    ap_sum += static_cast<double>(hits) / static_cast<double>(rank);
  }
  return ap_sum / static_cast<double>(total_positives);
}

// Per-label average precision over the full ranking of one label's scores
// (ties broken by ascending example id). Labels with no positive example
// have undefined AP and come back empty rather than as zero.
inline std::vector<std::optional<double>> per_label_ap(const PredictionSet& preds,
                                                       const std::vector<Example>& truth,
                                                       int num_labels) {
  if (truth.empty()) throw std::runtime_error("per_label_ap: empty input");
  detail::check_alignment(preds, truth);

  std::vector<std::optional<double>> ap(num_labels);
  std::vector<std::size_t> order(truth.size());
  std::vector<char> positive(truth.size());
  for (int c = 0; c < num_labels; ++c) {
    std::int64_t positives = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      positive[i] = std::binary_search(truth[i].labels.begin(), truth[i].labels.end(), c) ? 1 : 0;
      positives += positive[i];
    }
    if (positives == 0) continue;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double sa = preds.scores[a][c], sb = preds.scores[b][c];
      if (sa != sb) return sa > sb;
      return preds.ids[a] < preds.ids[b];
    });
    double ap_sum = 0.0;
    std::int64_t hits = 0;
    for (std::size_t rank = 1; rank <= order.size(); ++rank) {
      if (!positive[order[rank - 1]]) continue;
      ++hits;
      ap_sum += static_cast<double>(hits) / static_cast<double>(rank);
    }
    ap[c] = ap_sum / static_cast<double>(positives);
  }
  return ap;
}

}  // namespace mlvc
