#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "mlvc/dataset.hpp"
#include "mlvc/rng.hpp"
#include "temp_dir.hpp"

using mlvc::Example;
using mlvc::PredictionSet;
using mlvc::ShardFilter;

namespace {

std::vector<Example> make_examples(int n, int d, int c, std::uint64_t seed) {
  mlvc::Rng rng(mlvc::Seed{seed});
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    Example e;
    e.id = "v" + std::to_string(i);
    for (int j = 0; j < d; ++j) e.features.push_back(rng.uniform(-1.0, 1.0));
    e.labels.push_back(static_cast<int>(rng.uniform_below(c)));
    mlvc::normalize_labels(e);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> names(int c) {
  std::vector<std::string> out;
  for (int i = 0; i < c; ++i) out.push_back(mlvc::default_label_name(i));
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("ten examples at shard size four make shards of 4,4,2") {
  TempDir dir("shards");
  const auto manifest = mlvc::write_shards(make_examples(10, 3, 5, 1), dir.path(), 4, 3, names(5));
  REQUIRE(manifest.shards.size() == 3);
  REQUIRE(manifest.total_examples == 10);
  const auto all = mlvc::read_shards(dir.path(), ShardFilter::parse("all"));
  REQUIRE(all.examples.size() == 10);
  std::vector<std::size_t> sizes;
  for (std::size_t s = 0; s < 3; ++s) {
    std::ifstream in(dir.path() / manifest.shards[s]);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line))
      if (!line.empty()) ++n;
    sizes.push_back(n);
  }
  REQUIRE(sizes == std::vector<std::size_t>{4, 4, 2});
}

TEST_CASE("an empty dataset round-trips as zero shards") {
  TempDir dir("empty");
  const auto manifest = mlvc::write_shards({}, dir.path(), 4, 3, names(3));
  REQUIRE(manifest.shards.empty());
  REQUIRE(manifest.total_examples == 0);
  REQUIRE(mlvc::read_shards(dir.path(), ShardFilter::parse("all")).examples.empty());
}

TEST_CASE("shard write/read round-trip preserves every example") {
  TempDir dir("roundtrip");
  const auto examples = make_examples(1000, 8, 12, 2);
  mlvc::write_shards(examples, dir.path(), 64, 8, names(12));
  const auto back = mlvc::read_shards(dir.path(), ShardFilter::parse("all"));
  REQUIRE(back.examples.size() == examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    REQUIRE(back.examples[i].id == examples[i].id);
    REQUIRE(back.examples[i].labels == examples[i].labels);
    REQUIRE(back.examples[i].features == examples[i].features);
  }
  REQUIRE(back.manifest.per_label_counts.size() == 12);
}

TEST_CASE("mod filter selects exactly the matching shard indices") {
  TempDir dir("filter");
  mlvc::write_shards(make_examples(200, 2, 3, 3), dir.path(), 10, 2, names(3));  // 20 shards
  const auto val = mlvc::read_shards(dir.path(), ShardFilter::parse("mod 10 == 5"));
  REQUIRE(val.examples.size() == 20);
  REQUIRE(val.examples.front().id == "v50");   // shard 5 starts at example 50
  REQUIRE(val.examples.back().id == "v159");   // shard 15 ends at example 159
  const auto train = mlvc::read_shards(dir.path(), ShardFilter::parse("mod 10 != 5"));
  REQUIRE(train.examples.size() == 180);
  // complement filters partition the id set
  std::set<std::string> ids;
  for (const auto& e : val.examples) ids.insert(e.id);
  for (const auto& e : train.examples) ids.insert(e.id);
  REQUIRE(ids.size() == 200);
}

TEST_CASE("filter strings are validated") {
  REQUIRE(ShardFilter::parse("all").str() == "all");
  REQUIRE(ShardFilter::parse("mod 10 == 5").matches(15));
  REQUIRE_FALSE(ShardFilter::parse("mod 10 == 5").matches(16));
  REQUIRE(ShardFilter::parse("mod 4 != 0").matches(3));
  REQUIRE_THROWS_AS(ShardFilter::parse("every other"), mlvc::ConfigError);
  REQUIRE_THROWS_AS(ShardFilter::parse("mod 0 == 1"), mlvc::ConfigError);
  REQUIRE_THROWS_AS(ShardFilter::parse("mod 10 == 10"), mlvc::ConfigError);
}

TEST_CASE("missing shard files are reported") {
  TempDir dir("missing");
  const auto manifest = mlvc::write_shards(make_examples(10, 2, 3, 4), dir.path(), 5, 2, names(3));
  std::filesystem::remove(dir.path() / manifest.shards[1]);
  REQUIRE_THROWS(mlvc::read_shards(dir.path(), ShardFilter::parse("all")));
}

TEST_CASE("prediction rows keep the top pairs sorted by score then index") {
  TempDir dir("preds");
  PredictionSet p;
  p.model_name = "m";
  p.ids = {"a"};
  p.scores = {{0.1, 0.9, 0.5}};
  mlvc::write_predictions(p, dir / "p.csv", 2);
  const auto text = slurp(dir / "p.csv");
  REQUIRE(text == "VideoId,LabelConfidencePairs\na,1 0.900000 2 0.500000\n");
}

TEST_CASE("tied prediction scores fall back to ascending label index") {
  TempDir dir("ties");
  PredictionSet p;
  p.model_name = "m";
  p.ids = {"a"};
  p.scores = {{0.5, 0.5}};
  mlvc::write_predictions(p, dir / "p.csv", 2);
  REQUIRE(slurp(dir / "p.csv") == "VideoId,LabelConfidencePairs\na,0 0.500000 1 0.500000\n");
}

TEST_CASE("prediction round-trip zero-fills the dropped tail") {
  TempDir dir("predrt");
  mlvc::Rng rng(mlvc::Seed{5});
  PredictionSet p;
  p.model_name = "m";
  const int c = 12, top_k = 4;
  for (int i = 0; i < 50; ++i) {
    p.ids.push_back("v" + std::to_string(i));
    std::vector<double> row(c);
    for (double& s : row) s = rng.uniform01();
    p.scores.push_back(std::move(row));
  }
  mlvc::write_predictions(p, dir / "p.csv", top_k);
  const auto back = mlvc::read_predictions(dir / "p.csv", c);
  REQUIRE(back.ids == p.ids);
  for (int i = 0; i < 50; ++i) {
    // the kept pairs match to print precision, everything else is zero
    int kept = 0;
    for (int j = 0; j < c; ++j) {
      if (back.scores[i][j] > 0.0) {
        ++kept;
        REQUIRE(back.scores[i][j] == Catch::Approx(p.scores[i][j]).margin(5e-7));
      }
    }
    REQUIRE(kept == top_k);
  }
}

TEST_CASE("malformed prediction files are rejected") {
  TempDir dir("badpred");
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir / name);
    out << text;
    return dir / name;
  };
  REQUIRE_THROWS(mlvc::read_predictions(write("h.csv", "wrong,header\n"), 3));
  REQUIRE_THROWS(
      mlvc::read_predictions(write("dangle.csv", "VideoId,LabelConfidencePairs\na,0 0.5 1\n"), 3));
  REQUIRE_THROWS(
      mlvc::read_predictions(write("oob.csv", "VideoId,LabelConfidencePairs\na,3 0.5\n"), 3));
  REQUIRE_THROWS(
      mlvc::read_predictions(write("dup.csv", "VideoId,LabelConfidencePairs\na,1 0.5 1 0.4\n"), 3));
  REQUIRE_THROWS(
      mlvc::read_predictions(write("junk.csv", "VideoId,LabelConfidencePairs\na,x 0.5\n"), 3));
}
