#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlvc/config.hpp"
#include "mlvc/dataset.hpp"
#include "mlvc/rng.hpp"
#include "mlvc/types.hpp"

namespace mlvc {

// Label-frequency balancing plus feature-space synthesis. Per example the
// least-frequent label decides the regime against a target count T:
// over-represented labels are subsampled, under-represented ones are
// oversampled with synthetic variants built from same-label nearest
// neighbors (interpolation / extrapolation / additive noise, cycled).
// Counts are frozen from the input before any augmentation. Processing is
// chunked by shard groups; each chunk owns a child RNG stream, so results
// are deterministic and independent of how many chunks fit in memory only
// when the chunk layout is identical.

struct AugmentConfig {
  std::int64_t threshold = 10000;      // target per-label count T
  double lambda_interpolate = 0.5;
  double lambda_extrapolate = 0.5;
  double noise_sigma = 0.03;
  double noise_gamma = 1.0;
  int k_max = 8;
  int chunk_size = 256;                // shards per chunk
  double max_oversample_factor = 20.0;
  double min_keep_prob = 0.1;
  Seed seed{0};

  void validate() const {
    if (threshold < 1) throw ConfigError("augment: threshold must be >= 1");
    if (noise_sigma < 0) throw ConfigError("augment: noise_sigma must be >= 0");
    if (k_max < 1) throw ConfigError("augment: k_max must be >= 1");
    if (chunk_size < 1) throw ConfigError("augment: chunk_size must be >= 1");
    if (max_oversample_factor < 1) throw ConfigError("augment: max_oversample_factor must be >= 1");
    if (min_keep_prob <= 0 || min_keep_prob > 1)
      throw ConfigError("augment: min_keep_prob must be in (0, 1]");
  }

  static AugmentConfig from_json(const nlohmann::json& j) {
    reject_unknown_keys(j,
                        {"threshold", "lambda_interpolate", "lambda_extrapolate", "noise_sigma",
                         "noise_gamma", "k_max", "chunk_size", "max_oversample_factor",
                         "min_keep_prob", "seed"},
                        "augment config");
    AugmentConfig c;
    c.threshold = json_get(j, "threshold", c.threshold, "augment config");
    c.lambda_interpolate = json_get(j, "lambda_interpolate", c.lambda_interpolate, "augment config");
    c.lambda_extrapolate = json_get(j, "lambda_extrapolate", c.lambda_extrapolate, "augment config");
    c.noise_sigma = json_get(j, "noise_sigma", c.noise_sigma, "augment config");
    c.noise_gamma = json_get(j, "noise_gamma", c.noise_gamma, "augment config");
    c.k_max = json_get(j, "k_max", c.k_max, "augment config");
    c.chunk_size = json_get(j, "chunk_size", c.chunk_size, "augment config");
    c.max_oversample_factor =
        json_get(j, "max_oversample_factor", c.max_oversample_factor, "augment config");
    c.min_keep_prob = json_get(j, "min_keep_prob", c.min_keep_prob, "augment config");
    c.seed.value = json_get<std::uint64_t>(j, "seed", c.seed.value, "augment config");
    c.validate();
    return c;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["threshold"] = threshold;
    j["lambda_interpolate"] = lambda_interpolate;
    j["lambda_extrapolate"] = lambda_extrapolate;
    j["noise_sigma"] = noise_sigma;
    j["noise_gamma"] = noise_gamma;
    j["k_max"] = k_max;
    j["chunk_size"] = chunk_size;
    j["max_oversample_factor"] = max_oversample_factor;
    j["min_keep_prob"] = min_keep_prob;
    j["seed"] = seed.value;
    return j;
  }
};

struct SamplingDecision {
  enum class Regime { keep, oversample, subsample };

  Regime regime = Regime::keep;
  int deciding_label = -1;
  double factor = 1.0;     // oversample target multiplier
  double keep_prob = 1.0;  // subsample retention probability
};

inline const char* regime_name(SamplingDecision::Regime r) {
  switch (r) {
    case SamplingDecision::Regime::keep: return "keep";
    case SamplingDecision::Regime::oversample: return "oversample";
    case SamplingDecision::Regime::subsample: return "subsample";
  }
  return "?";
}

// The least-frequent label of the example decides (ties -> smallest index;
// labels are sorted, so the first minimum wins).
inline SamplingDecision decide(const Example& e, const std::vector<std::int64_t>& counts,
                               const AugmentConfig& cfg) {
  if (e.labels.empty()) throw std::invalid_argument("decide: example has no labels");
  SamplingDecision d;
  std::int64_t min_count = -1;
  for (int l : e.labels) {
    const std::int64_t c = counts.at(static_cast<std::size_t>(l));
    if (min_count < 0 || c < min_count) {
      min_count = c;
      d.deciding_label = l;
    }
  }
  const double t = static_cast<double>(cfg.threshold);
  if (min_count > cfg.threshold) {
    d.regime = SamplingDecision::Regime::subsample;
    d.keep_prob = std::max(cfg.min_keep_prob, t / static_cast<double>(min_count));
  } else if (min_count < cfg.threshold) {
    d.regime = SamplingDecision::Regime::oversample;
    d.factor = std::min(cfg.max_oversample_factor, t / static_cast<double>(min_count));
  }
  return d;
}

// k nearest same-label neighbors by L2 distance, excluding the query by id.
// Distance ties break by ascending id. Returns fewer than k when the pool
// runs short; empty when the label has no other carrier in the pool.
inline std::vector<const Example*> knn_within_label(const Example& query,
                                                    const std::vector<const Example*>& pool,
                                                    int label, int k) {
  if (k < 1) throw std::invalid_argument("knn_within_label: k must be >= 1");
  std::vector<std::pair<double, const Example*>> candidates;
  for (const Example* e : pool) {
    if (e->id == query.id) continue;
    if (!std::binary_search(e->labels.begin(), e->labels.end(), label)) continue;
    if (e->features.size() != query.features.size())
      throw std::invalid_argument("knn_within_label: feature length mismatch");
    double d2 = 0.0;
    for (std::size_t i = 0; i < query.features.size(); ++i) {
      const double diff = e->features[i] - query.features[i];
      d2 += diff * diff;
    }
    candidates.emplace_back(d2, e);
  }
  std::sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second->id < b.second->id;
  });
  std::vector<const Example*> out;
  out.reserve(std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(k)));
  for (std::size_t i = 0; i < candidates.size() && i < static_cast<std::size_t>(k); ++i)
    out.push_back(candidates[i].second);
  return out;
}

inline std::vector<double> synth_interpolate(const std::vector<double>& xi,
                                             const std::vector<double>& xj, double lambda) {
  if (xi.size() != xj.size()) throw std::invalid_argument("synth_interpolate: length mismatch");
  std::vector<double> out(xi.size());
  for (std::size_t i = 0; i < xi.size(); ++i) out[i] = xi[i] + lambda * (xj[i] - xi[i]);
  return out;
}

inline std::vector<double> synth_extrapolate(const std::vector<double>& xi,
                                             const std::vector<double>& xj, double lambda) {
  if (xi.size() != xj.size()) throw std::invalid_argument("synth_extrapolate: length mismatch");
  std::vector<double> out(xi.size());
  for (std::size_t i = 0; i < xi.size(); ++i) out[i] = xi[i] + lambda * (xi[i] - xj[i]);
  return out;
}

inline std::vector<double> synth_noise(const std::vector<double>& x, double sigma, double gamma,
                                       Rng& rng) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + gamma * rng.gaussian(0.0, sigma);
  return out;
}

struct AugmentReport {
  std::int64_t total_before = 0;
  std::int64_t total_after = 0;
  std::vector<std::int64_t> per_label_before;
  std::vector<std::int64_t> per_label_after;
  std::int64_t kept = 0;
  std::int64_t oversampled = 0;
  std::int64_t subsampled = 0;
  std::int64_t dropped = 0;
  std::int64_t synthesized = 0;
  std::int64_t fallback_noise_events = 0;
  nlohmann::ordered_json audit;  // populated only with audit=true

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["total_before"] = total_before;
    j["total_after"] = total_after;
    j["expansion_ratio"] =
        total_before ? static_cast<double>(total_after) / static_cast<double>(total_before) : 0.0;
    j["examples_kept"] = kept;
    j["examples_oversampled"] = oversampled;
    j["examples_subsampled"] = subsampled;
    j["examples_dropped"] = dropped;
    j["examples_synthesized"] = synthesized;
    j["fallback_noise_events"] = fallback_noise_events;
    j["per_label_before"] = per_label_before;
    j["per_label_after"] = per_label_after;
    if (!audit.is_null()) j["audit"] = audit;
    return j;
  }
};

// neighbor budget for an oversampled example
inline int neighbor_count(std::int64_t threshold, std::int64_t count, int k_max) {
  const double raw = std::ceil(static_cast<double>(threshold) / (static_cast<double>(count) * 10.0));
  return std::clamp(static_cast<int>(raw), 1, k_max);
}

// Streams the selected shards of in_dir through the policy into out_dir
// (same shard grouping, renumbered densely). Synthetic ids are
// "<source-id>#aug<n>"; synthetics inherit the full label set of their
// source. A chunk with no same-label neighbor falls back to noise-only
// synthesis and the report counts those events.
inline AugmentReport augment_dataset(const std::filesystem::path& in_dir,
                                     const std::filesystem::path& out_dir, const AugmentConfig& cfg,
                                     const ShardFilter& filter = {}, bool audit = false) {
  cfg.validate();
  const DatasetManifest in_manifest = load_manifest(in_dir);

  std::vector<std::size_t> selected;
  for (std::size_t s = 0; s < in_manifest.shards.size(); ++s)
    if (filter.matches(s)) selected.push_back(s);

  // pass 1: freeze per-label counts over the selected input
  std::vector<std::int64_t> counts(in_manifest.num_labels, 0);
  std::int64_t total_before = 0;
  for (std::size_t s : selected) {
    const std::filesystem::path p = in_dir / in_manifest.shards[s];
    if (!std::filesystem::exists(p)) throw std::runtime_error("missing shard: " + p.string());
    auto in = detail::open_in(p);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      ++total_before;
      for (int l : j.at("labels").get<std::vector<int>>()) {
        if (l < 0 || l >= in_manifest.num_labels)
          throw std::runtime_error(p.string() + ": label out of range");
        ++counts[static_cast<std::size_t>(l)];
      }
    }
  }
  if (filter.kind == ShardFilter::Kind::all && counts != in_manifest.per_label_counts)
    throw std::runtime_error(in_dir.string() + ": manifest counts disagree with shard recount");

  AugmentReport report;
  report.total_before = total_before;
  report.per_label_before = counts;
  report.per_label_after.assign(in_manifest.num_labels, 0);
  nlohmann::ordered_json audit_decisions = nlohmann::ordered_json::array();
  nlohmann::ordered_json audit_synthetics = nlohmann::ordered_json::array();

  std::filesystem::create_directories(out_dir);
  DatasetManifest out_manifest;
  out_manifest.feature_dim = in_manifest.feature_dim;
  out_manifest.num_labels = in_manifest.num_labels;
  out_manifest.vocabulary.names = in_manifest.vocabulary.names;
  out_manifest.per_label_counts.assign(in_manifest.num_labels, 0);

  // pass 2: chunked policy application
  const std::size_t chunk_shards = static_cast<std::size_t>(cfg.chunk_size);
  std::size_t out_shard_index = 0;
  for (std::size_t chunk_lo = 0, chunk_idx = 0; chunk_lo < selected.size();
       chunk_lo += chunk_shards, ++chunk_idx) {
    const std::size_t chunk_hi = std::min(selected.size(), chunk_lo + chunk_shards);
    Rng rng(cfg.seed.child(chunk_idx));

    std::vector<std::vector<Example>> chunk;  // per shard in chunk
    std::vector<const Example*> pool;
    for (std::size_t si = chunk_lo; si < chunk_hi; ++si) {
      const std::filesystem::path p = in_dir / in_manifest.shards[selected[si]];
      auto in = detail::open_in(p);
      std::vector<Example> shard;
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        Example e = detail::example_from_json(nlohmann::json::parse(line));
        if (auto v = validate_example(e, in_manifest.feature_dim, in_manifest.num_labels); !v)
          throw std::runtime_error(p.string() + ":" + std::to_string(lineno) + ": " + v.message);
        shard.push_back(std::move(e));
      }
      chunk.push_back(std::move(shard));
    }
    for (const auto& shard : chunk)
      for (const Example& e : shard) pool.push_back(&e);

    for (const auto& shard : chunk) {
      auto out = detail::open_out(out_dir / shard_file_name(out_shard_index));
      auto emit = [&](const Example& e) {
        out << detail::example_to_json(e).dump() << '\n';
        ++out_manifest.total_examples;
        for (int l : e.labels) ++out_manifest.per_label_counts[static_cast<std::size_t>(l)];
      };

      for (const Example& e : shard) {
        const SamplingDecision d = decide(e, counts, cfg);
        if (audit) {
          nlohmann::ordered_json a;
          a["id"] = e.id;
          a["regime"] = regime_name(d.regime);
          a["deciding_label"] = d.deciding_label;
          if (d.regime == SamplingDecision::Regime::oversample) a["factor"] = d.factor;
          if (d.regime == SamplingDecision::Regime::subsample) a["keep_prob"] = d.keep_prob;
          audit_decisions.push_back(std::move(a));
        }
        switch (d.regime) {
          case SamplingDecision::Regime::keep:
            ++report.kept;
            emit(e);
            break;
          case SamplingDecision::Regime::subsample:
            ++report.subsampled;
            if (rng.uniform01() < d.keep_prob) emit(e);
            else ++report.dropped;
            break;
          case SamplingDecision::Regime::oversample: {
            ++report.oversampled;
            emit(e);
            // stochastic rounding keeps the expected copy count at the
            // target factor without per-label bias
            const double base = std::floor(d.factor);
            const double frac = d.factor - base;
            std::int64_t copies = static_cast<std::int64_t>(base);
            if (frac > 0.0 && rng.uniform01() < frac) ++copies;
            const std::int64_t extra = copies - 1;
            if (extra <= 0) break;
            const int k = neighbor_count(cfg.threshold, counts[d.deciding_label], cfg.k_max);
            const auto neighbors = knn_within_label(e, pool, d.deciding_label, k);
            if (neighbors.empty()) ++report.fallback_noise_events;
            for (std::int64_t slot = 0; slot < extra; ++slot) {
              Example synth;
              synth.id = e.id + "#aug" + std::to_string(slot);
              synth.labels = e.labels;
              const char* transform;
              const Example* neighbor = nullptr;
              if (neighbors.empty()) {
                transform = "noise";
                synth.features = synth_noise(e.features, cfg.noise_sigma, cfg.noise_gamma, rng);
              } else {
                neighbor = neighbors[static_cast<std::size_t>(slot) % neighbors.size()];
                switch (slot % 3) {
                  case 0:
                    transform = "interpolate";
                    synth.features =
                        synth_interpolate(e.features, neighbor->features, cfg.lambda_interpolate);
                    break;
                  case 1:
                    transform = "extrapolate";
                    synth.features =
                        synth_extrapolate(e.features, neighbor->features, cfg.lambda_extrapolate);
                    break;
                  default:
                    transform = "noise";
                    synth.features = synth_noise(e.features, cfg.noise_sigma, cfg.noise_gamma, rng);
                    break;
                }
              }
              ++report.synthesized;
              if (audit) {
                nlohmann::ordered_json a;
                a["id"] = synth.id;
                a["source"] = e.id;
                a["neighbor"] = neighbor ? nlohmann::ordered_json(neighbor->id)
                                         : nlohmann::ordered_json(nullptr);
                a["transform"] = transform;
                audit_synthetics.push_back(std::move(a));
              }
              emit(synth);
            }
            break;
          }
        }
      }
      out_manifest.shards.push_back(shard_file_name(out_shard_index));
      ++out_shard_index;
    }
  }

  out_manifest.vocabulary.counts = out_manifest.per_label_counts;
  save_manifest(out_manifest, out_dir);

  report.total_after = out_manifest.total_examples;
  report.per_label_after = out_manifest.per_label_counts;
  if (audit) {
    report.audit = nlohmann::ordered_json::object();
    report.audit["decisions"] = std::move(audit_decisions);
    report.audit["synthetics"] = std::move(audit_synthetics);
  }
  return report;
}

}  // namespace mlvc
