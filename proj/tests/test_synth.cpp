#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "mlvc/synth.hpp"
#include "temp_dir.hpp"

using mlvc::SynthConfig;

namespace {

SynthConfig base_config() {
  SynthConfig cfg;
  cfg.num_labels = 10;
  cfg.feature_dim = 8;
  cfg.num_examples = 2000;
  cfg.zipf_exponent = 1.0;
  cfg.cluster_spread = 0.1;
  cfg.shard_size = 100;
  cfg.seed = mlvc::Seed{21};
  return cfg;
}

// least-squares slope of y over x
double slope_of(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("zero multi-label probability forces single labels") {
  auto cfg = base_config();
  cfg.multi_label_prob = 0.0;
  cfg.max_labels_per_example = 3;
  const auto out = mlvc::synth_generate(cfg);
  REQUIRE(out.examples.size() == 2000);
  for (const auto& e : out.examples) REQUIRE(e.labels.size() == 1);
}

TEST_CASE("noise-free single-label examples sit exactly on their centroid") {
  auto cfg = base_config();
  cfg.cluster_spread = 0.0;
  const auto out = mlvc::synth_generate(cfg);
  for (const auto& e : out.examples) {
    const auto& c = out.centroids[e.labels[0]];
    for (int d = 0; d < cfg.feature_dim; ++d) REQUIRE(e.features[d] == c[d]);
  }
}

TEST_CASE("centroids are unit norm") {
  const auto out = mlvc::synth_generate(base_config());
  for (const auto& c : out.centroids) {
    double n2 = 0;
    for (double v : c) n2 += v * v;
    REQUIRE(std::sqrt(n2) == Catch::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("rank-frequency follows the configured power law") {
  SynthConfig cfg;
  cfg.num_labels = 1000;
  cfg.feature_dim = 2;
  cfg.num_examples = 100000;
  cfg.zipf_exponent = 1.07;
  cfg.cluster_spread = 0.05;
  cfg.shard_size = 100000;
  cfg.seed = mlvc::Seed{33};
  const auto out = mlvc::synth_generate(cfg);
  std::vector<std::int64_t> counts(cfg.num_labels, 0);
  for (const auto& e : out.examples)
    for (int l : e.labels) ++counts[l];
  std::sort(counts.begin(), counts.end(), std::greater<>());
  std::vector<double> lx, ly;
  for (std::size_t r = 0; r < counts.size() && counts[r] > 0; ++r) {
    lx.push_back(std::log(static_cast<double>(r + 1)));
    ly.push_back(std::log(static_cast<double>(counts[r])));
  }
  const double m = slope_of(lx, ly);
  REQUIRE(m > -1.3);
  REQUIRE(m < -0.9);
}

TEST_CASE("multi-label draws stay within the rank neighborhood and are distinct") {
  auto cfg = base_config();
  cfg.multi_label_prob = 0.9;
  cfg.max_labels_per_example = 4;
  const auto out = mlvc::synth_generate(cfg);
  bool saw_multi = false;
  for (const auto& e : out.examples) {
    REQUIRE(!e.labels.empty());
    REQUIRE(static_cast<int>(e.labels.size()) <= 4);
    if (e.labels.size() > 1) saw_multi = true;
    for (std::size_t i = 1; i < e.labels.size(); ++i) REQUIRE(e.labels[i] > e.labels[i - 1]);
  }
  REQUIRE(saw_multi);
}

TEST_CASE("nearest centroid recovers at least 95 percent of single labels") {
  auto cfg = base_config();
  cfg.num_examples = 3000;
  cfg.cluster_spread = 0.12;
  const auto out = mlvc::synth_generate(cfg);
  int correct = 0, total = 0;
  for (const auto& e : out.examples) {
    if (e.labels.size() != 1) continue;
    ++total;
    int best = -1;
    double best_d = 0;
    for (int c = 0; c < cfg.num_labels; ++c) {
      double d = 0;
      for (int j = 0; j < cfg.feature_dim; ++j) {
        const double diff = e.features[j] - out.centroids[c][j];
        d += diff * diff;
      }
      if (best < 0 || d < best_d) {
        best = c;
        best_d = d;
      }
    }
    if (best == e.labels[0]) ++correct;
  }
  REQUIRE(total > 0);
  REQUIRE(static_cast<double>(correct) / total >= 0.95);
}

TEST_CASE("identical synth configs produce byte-identical datasets") {
  TempDir a("gen_a"), b("gen_b");
  const auto cfg = base_config();
  mlvc::synth_generate_to_dir(cfg, a.path());
  mlvc::synth_generate_to_dir(cfg, b.path());
  for (const auto& entry : std::filesystem::directory_iterator(a.path())) {
    const auto name = entry.path().filename();
    REQUIRE(slurp(entry.path()) == slurp(b.path() / name));
  }
}

TEST_CASE("stats histogram is count-descending and matches a recount") {
  TempDir dir("stats");
  auto cfg = base_config();
  cfg.multi_label_prob = 0.4;
  cfg.max_labels_per_example = 3;
  mlvc::synth_generate_to_dir(cfg, dir.path());
  const auto csv = dir / "counts.csv";
  mlvc::write_stats_csv(dir.path(), csv);

  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  REQUIRE(line == "label,name,count");
  std::int64_t prev = -1, total = -1;
  std::int64_t sum = 0;
  int rows = 0;
  while (std::getline(in, line)) {
    const auto c1 = line.find(','), c2 = line.rfind(',');
    const std::string head = line.substr(0, c1);
    const std::int64_t count = std::stoll(line.substr(c2 + 1));
    if (head == "total") {
      total = count;
      break;
    }
    if (prev >= 0) REQUIRE(count <= prev);
    prev = count;
    sum += count;
    ++rows;
  }
  REQUIRE(rows == cfg.num_labels);
  REQUIRE(total == cfg.num_examples);
  REQUIRE(sum >= total);  // multi-label counting increments several rows

  // recount agrees with the manifest
  const auto recount = mlvc::recount_labels(dir.path());
  const auto manifest = mlvc::load_manifest(dir.path());
  REQUIRE(recount == manifest.per_label_counts);
}

TEST_CASE("multi-label examples increment every carried label") {
  TempDir dir("multi");
  std::vector<mlvc::Example> ex{{"a", {0.0}, {0}}, {"b", {0.0}, {0}}, {"c", {0.0}, {0, 1}}};
  mlvc::write_shards(ex, dir.path(), 10, 1, {"x", "y"});
  const auto recount = mlvc::recount_labels(dir.path());
  REQUIRE(recount == std::vector<std::int64_t>{3, 1});
}

TEST_CASE("config bounds are enforced") {
  auto cfg = base_config();
  cfg.num_labels = 1;
  REQUIRE_THROWS_AS(cfg.validate(), mlvc::ConfigError);
  cfg = base_config();
  cfg.multi_label_prob = 1.0;
  REQUIRE_THROWS_AS(cfg.validate(), mlvc::ConfigError);
  cfg = base_config();
  cfg.cluster_spread = -0.1;
  REQUIRE_THROWS_AS(cfg.validate(), mlvc::ConfigError);
  cfg = base_config();
  cfg.max_labels_per_example = 11;
  REQUIRE_THROWS_AS(cfg.validate(), mlvc::ConfigError);
}
