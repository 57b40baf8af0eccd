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

// Synthetic multi-label generator. Label frequencies follow a Zipf law over
// ranks (rank 1 == label 0 is the most frequent). Each label owns a fixed
// unit-norm Gaussian centroid; an example's features are the mean of its
// labels' centroids plus isotropic noise. Extra labels co-occur within a
// fixed neighborhood of adjacent Zipf ranks, so label structure is learnable
// but not trivial.

struct SynthConfig {
  int num_labels = 50;
  int feature_dim = 32;
  std::int64_t num_examples = 10000;
  double zipf_exponent = 1.0;
  double cluster_spread = 0.1;       // feature noise sigma
  double multi_label_prob = 0.0;     // per extra slot
  int max_labels_per_example = 1;
  int shard_size = 1000;
  Seed seed{0};

  void validate() const {
    if (num_labels < 2) throw ConfigError("synth: num_labels must be >= 2");
    if (feature_dim < 1) throw ConfigError("synth: feature_dim must be >= 1");
    if (num_examples < 0) throw ConfigError("synth: num_examples must be >= 0");
    if (zipf_exponent < 0) throw ConfigError("synth: zipf_exponent must be >= 0");
    if (cluster_spread < 0) throw ConfigError("synth: cluster_spread must be >= 0");
    if (multi_label_prob < 0 || multi_label_prob >= 1)
      throw ConfigError("synth: multi_label_prob must be in [0, 1)");
    if (max_labels_per_example < 1 || max_labels_per_example > num_labels)
      throw ConfigError("synth: max_labels_per_example must be in [1, num_labels]");
    if (shard_size < 1) throw ConfigError("synth: shard_size must be >= 1");
  }

  static SynthConfig from_json(const nlohmann::json& j) {
    reject_unknown_keys(j,
                        {"num_labels", "feature_dim", "num_examples", "zipf_exponent",
                         "cluster_spread", "multi_label_prob", "max_labels_per_example",
                         "shard_size", "seed"},
                        "synth config");
    SynthConfig c;
    c.num_labels = json_get(j, "num_labels", c.num_labels, "synth config");
    c.feature_dim = json_get(j, "feature_dim", c.feature_dim, "synth config");
    c.num_examples = json_get(j, "num_examples", c.num_examples, "synth config");
    c.zipf_exponent = json_get(j, "zipf_exponent", c.zipf_exponent, "synth config");
    c.cluster_spread = json_get(j, "cluster_spread", c.cluster_spread, "synth config");
    c.multi_label_prob = json_get(j, "multi_label_prob", c.multi_label_prob, "synth config");
    c.max_labels_per_example =
        json_get(j, "max_labels_per_example", c.max_labels_per_example, "synth config");
    c.shard_size = json_get(j, "shard_size", c.shard_size, "synth config");
    c.seed.value = json_get<std::uint64_t>(j, "seed", c.seed.value, "synth config");
    c.validate();
    return c;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["num_labels"] = num_labels;
    j["feature_dim"] = feature_dim;
    j["num_examples"] = num_examples;
    j["zipf_exponent"] = zipf_exponent;
    j["cluster_spread"] = cluster_spread;
    j["multi_label_prob"] = multi_label_prob;
    j["max_labels_per_example"] = max_labels_per_example;
    j["shard_size"] = shard_size;
    j["seed"] = seed.value;
    return j;
  }
};

namespace detail {

// cumulative Zipf mass over ranks 1..C with exponent s
inline std::vector<double> zipf_cumulative(int c, double s) {
  std::vector<double> cum(c);
  double acc = 0.0;
  for (int r = 1; r <= c; ++r) {
    acc += 1.0 / std::pow(static_cast<double>(r), s);
    cum[r - 1] = acc;
  }
  for (double& v : cum) v /= acc;
  cum.back() = 1.0;
  return cum;
}

inline int zipf_draw(const std::vector<double>& cum, double u) {
  const auto it = std::upper_bound(cum.begin(), cum.end(), u);
  return static_cast<int>(std::min<std::ptrdiff_t>(it - cum.begin(), cum.size() - 1));
}

}  // namespace detail

struct SynthOutput {
  std::vector<Example> examples;
  std::vector<std::string> label_names;
  std::vector<std::vector<double>> centroids;  // exposed for tests
};

inline SynthOutput synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  SynthOutput out;
  out.label_names.reserve(cfg.num_labels);
  for (int i = 0; i < cfg.num_labels; ++i) out.label_names.push_back(default_label_name(i));

  // fixed per-label centroids, unit norm
  out.centroids.assign(cfg.num_labels, std::vector<double>(cfg.feature_dim));
  for (auto& c : out.centroids) {
    double norm2 = 0.0;
    for (double& v : c) {
      v = rng.normal();
      norm2 += v * v;
    }
    const double inv = 1.0 / std::max(std::sqrt(norm2), 1e-12);
    for (double& v : c) v *= inv;
  }

  const auto cum = detail::zipf_cumulative(cfg.num_labels, cfg.zipf_exponent);
  out.examples.reserve(static_cast<std::size_t>(cfg.num_examples));
  std::vector<int> candidates;
  for (std::int64_t i = 0; i < cfg.num_examples; ++i) {
    Example e;
    {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "v%06lld", static_cast<long long>(i));
      e.id = buf;
    }
    const int primary = detail::zipf_draw(cum, rng.uniform01());
    e.labels.push_back(primary);
    for (int slot = 1; slot < cfg.max_labels_per_example; ++slot) {
      if (rng.uniform01() >= cfg.multi_label_prob) continue;
      // co-occurrence neighborhood: labels within two Zipf ranks of the primary
      candidates.clear();
      for (int d = -2; d <= 2; ++d) {
        const int n = primary + d;
        if (n < 0 || n >= cfg.num_labels || n == primary) continue;
        if (std::find(e.labels.begin(), e.labels.end(), n) != e.labels.end()) continue;
        candidates.push_back(n);
      }
      if (candidates.empty()) continue;
      e.labels.push_back(candidates[rng.uniform_below(candidates.size())]);
    }
    normalize_labels(e);

    e.features.assign(cfg.feature_dim, 0.0);
    for (int l : e.labels)
      for (int d = 0; d < cfg.feature_dim; ++d) e.features[d] += out.centroids[l][d];
    const double inv = 1.0 / static_cast<double>(e.labels.size());
    for (double& v : e.features) v *= inv;
    for (int d = 0; d < cfg.feature_dim; ++d) e.features[d] += cfg.cluster_spread * rng.normal();

    out.examples.push_back(std::move(e));
  }
  return out;
}

inline DatasetManifest synth_generate_to_dir(const SynthConfig& cfg, const std::filesystem::path& dir) {
  SynthOutput out = synth_generate(cfg);
  return write_shards(out.examples, dir, static_cast<std::size_t>(cfg.shard_size), cfg.feature_dim,
                      out.label_names);
}

// Independent single-pass recount of per-label example counts over the
// shards named by the manifest (the manifest's own counts are not trusted).
inline std::vector<std::int64_t> recount_labels(const std::filesystem::path& dir) {
  const DatasetManifest m = load_manifest(dir);
  std::vector<std::int64_t> counts(m.num_labels, 0);
  for (const std::string& shard : m.shards) {
    auto in = detail::open_in(dir / shard);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      for (int l : j.at("labels").get<std::vector<int>>()) {
        if (l < 0 || l >= m.num_labels)
          throw std::runtime_error(dir.string() + ": label " + std::to_string(l) + " out of range");
        ++counts[l];
      }
    }
  }
  return counts;
}

// Label histogram CSV: rows sorted by descending count (ties by ascending
// label index), then a final "total" row with the example count. Recounts
// from the shards and errors out if the manifest disagrees.
inline void write_stats_csv(const std::filesystem::path& data_dir, const std::filesystem::path& csv_path) {
  const DatasetManifest m = load_manifest(data_dir);
  const std::vector<std::int64_t> counts = recount_labels(data_dir);
  if (counts != m.per_label_counts)
    throw std::runtime_error(data_dir.string() + ": manifest per_label_counts disagree with shard recount");

  std::vector<int> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (counts[a] != counts[b]) return counts[a] > counts[b];
    return a < b;
  });

  auto out = detail::open_out(csv_path);
  out << "label,name,count\n";
  for (int l : order) out << l << ',' << m.vocabulary.names[l] << ',' << counts[l] << '\n';
  out << "total,," << m.total_examples << '\n';
}

}  // namespace mlvc
