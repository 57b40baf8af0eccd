#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlvc/types.hpp"

namespace mlvc {

// On-disk dataset layout: a directory holding manifest.json plus
// shard-%05d.jsonl files; each shard line is one example object
// {"id": ..., "labels": [...], "features": [...]}.

struct DatasetManifest {
  int feature_dim = 0;
  int num_labels = 0;
  LabelVocabulary vocabulary;
  std::vector<std::string> shards;
  std::int64_t total_examples = 0;
  std::vector<std::int64_t> per_label_counts;
};

// Shard selection by index digit rule, e.g. "mod 10 == 5" keeps shard
// indices ending in 5. "mod 10 == 5" and "mod 10 != 5" partition a
// directory exactly.
struct ShardFilter {
  enum class Kind { all, mod_eq, mod_ne };

  Kind kind = Kind::all;
  int modulus = 10;
  int residue = 5;

  bool matches(std::size_t shard_index) const {
    switch (kind) {
      case Kind::all: return true;
      case Kind::mod_eq: return static_cast<int>(shard_index % modulus) == residue;
      case Kind::mod_ne: return static_cast<int>(shard_index % modulus) != residue;
    }
    return false;
  }

  static ShardFilter all() { return {}; }

  static ShardFilter parse(const std::string& text) {
    if (text == "all" || text.empty()) return {};
    ShardFilter f;
    std::istringstream in(text);
    std::string word, op;
    if (!(in >> word >> f.modulus >> op >> f.residue) || word != "mod")
      throw ConfigError("bad shard filter '" + text + "' (want \"all\" or \"mod M ==|!= R\")");
    if (op == "==") f.kind = Kind::mod_eq;
    else if (op == "!=") f.kind = Kind::mod_ne;
    else throw ConfigError("bad shard filter operator '" + op + "'");
    if (f.modulus <= 0 || f.residue < 0 || f.residue >= f.modulus)
      throw ConfigError("bad shard filter range in '" + text + "'");
    return f;
  }

  std::string str() const {
    switch (kind) {
      case Kind::all: return "all";
      case Kind::mod_eq: return "mod " + std::to_string(modulus) + " == " + std::to_string(residue);
      case Kind::mod_ne: return "mod " + std::to_string(modulus) + " != " + std::to_string(residue);
    }
    return "all";
  }
};

inline std::string shard_file_name(std::size_t index) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "shard-%05zu.jsonl", index);
  return buf;
}

inline std::string default_label_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "label_%04d", index);
  return buf;
}

namespace detail {

inline nlohmann::ordered_json example_to_json(const Example& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["labels"] = e.labels;
  j["features"] = e.features;
  return j;
}

inline Example example_from_json(const nlohmann::json& j) {
  Example e;
  e.id = j.at("id").get<std::string>();
  e.labels = j.at("labels").get<std::vector<int>>();
  e.features = j.at("features").get<std::vector<double>>();
  return e;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + p.string());
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + p.string());
  return in;
}

}  // namespace detail

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& dir) {
  nlohmann::ordered_json j;
  j["feature_dim"] = m.feature_dim;
  j["num_labels"] = m.num_labels;
  j["vocabulary"] = m.vocabulary.names;
  j["per_label_counts"] = m.per_label_counts;
  j["shards"] = m.shards;
  j["total_examples"] = m.total_examples;
  auto out = detail::open_out(dir / "manifest.json");
  out << j.dump(2) << '\n';
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  auto in = detail::open_in(dir / "manifest.json");
  nlohmann::json j = nlohmann::json::parse(in);
  DatasetManifest m;
  m.feature_dim = j.at("feature_dim").get<int>();
  m.num_labels = j.at("num_labels").get<int>();
  m.vocabulary.names = j.at("vocabulary").get<std::vector<std::string>>();
  m.per_label_counts = j.at("per_label_counts").get<std::vector<std::int64_t>>();
  m.vocabulary.counts = m.per_label_counts;
  m.shards = j.at("shards").get<std::vector<std::string>>();
  m.total_examples = j.at("total_examples").get<std::int64_t>();
  if (static_cast<int>(m.vocabulary.names.size()) != m.num_labels ||
      static_cast<int>(m.per_label_counts.size()) != m.num_labels)
    throw std::runtime_error("manifest " + (dir / "manifest.json").string() +
                             ": vocabulary size disagrees with num_labels");
  if (auto v = validate_vocabulary(m.vocabulary); !v)
    throw std::runtime_error("manifest " + dir.string() + ": " + v.message);
  return m;
}

// Writes examples into fixed-size shards plus a manifest. Examples are
// validated against (feature_dim, label_names.size()) before anything is
// written. The final shard may be short.
inline DatasetManifest write_shards(const std::vector<Example>& examples,
                                    const std::filesystem::path& dir, std::size_t shard_size,
                                    int feature_dim, const std::vector<std::string>& label_names) {
  if (shard_size == 0) throw ConfigError("shard_size must be positive");
  const int num_labels = static_cast<int>(label_names.size());
  for (const Example& e : examples)
    if (auto v = validate_example(e, feature_dim, num_labels); !v)
      throw std::runtime_error("write_shards: " + v.message);

  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.feature_dim = feature_dim;
  m.num_labels = num_labels;
  m.vocabulary.names = label_names;
  m.per_label_counts.assign(num_labels, 0);
  m.total_examples = static_cast<std::int64_t>(examples.size());

  const std::size_t num_shards = examples.empty() ? 0 : (examples.size() + shard_size - 1) / shard_size;
  for (std::size_t s = 0; s < num_shards; ++s) {
    const std::string name = shard_file_name(s);
    auto out = detail::open_out(dir / name);
    const std::size_t lo = s * shard_size;
    const std::size_t hi = std::min(examples.size(), lo + shard_size);
    for (std::size_t i = lo; i < hi; ++i) {
      out << detail::example_to_json(examples[i]).dump() << '\n';
      for (int l : examples[i].labels) ++m.per_label_counts[l];
    }
    m.shards.push_back(name);
  }
  m.vocabulary.counts = m.per_label_counts;
  save_manifest(m, dir);
  return m;
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<Example> examples;
};

// Loads the shards selected by `filter`, in shard order then line order.
// Every example is validated against the manifest dims; with the all-filter
// the total count is cross-checked too.
inline Dataset read_shards(const std::filesystem::path& dir, const ShardFilter& filter = {}) {
  Dataset d;
  d.manifest = load_manifest(dir);
  for (std::size_t s = 0; s < d.manifest.shards.size(); ++s) {
    if (!filter.matches(s)) continue;
    const std::filesystem::path p = dir / d.manifest.shards[s];
    if (!std::filesystem::exists(p)) throw std::runtime_error("missing shard: " + p.string());
    auto in = detail::open_in(p);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      Example e;
      try {
        e = detail::example_from_json(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& ex) {
        throw std::runtime_error(p.string() + ":" + std::to_string(lineno) + ": bad example: " + ex.what());
      }
      if (auto v = validate_example(e, d.manifest.feature_dim, d.manifest.num_labels); !v)
        throw std::runtime_error(p.string() + ":" + std::to_string(lineno) + ": " + v.message);
      d.examples.push_back(std::move(e));
    }
  }
  if (filter.kind == ShardFilter::Kind::all &&
      static_cast<std::int64_t>(d.examples.size()) != d.manifest.total_examples)
    throw std::runtime_error(dir.string() + ": manifest total_examples " +
                             std::to_string(d.manifest.total_examples) + " but shards hold " +
                             std::to_string(d.examples.size()));
  return d;
}

// Model scores for a list of examples, aligned by position.
struct PredictionSet {
  std::string model_name;
  std::vector<std::string> ids;
  std::vector<ScoreVector> scores;

  std::size_t size() const { return ids.size(); }
};

inline constexpr int kDefaultTopK = 20;

// CSV format: header "VideoId,LabelConfidencePairs", then one row per
// example: id, comma, space-separated (label, score) pairs sorted by score
// descending with ties broken by ascending label. Scores carry 6 decimals.
inline void write_predictions(const PredictionSet& p, const std::filesystem::path& path,
                              int top_k = kDefaultTopK) {
  if (top_k <= 0) throw ConfigError("top_k must be positive");
  if (p.ids.size() != p.scores.size()) throw std::runtime_error("prediction ids/scores length mismatch");
  auto out = detail::open_out(path);
  out << "VideoId,LabelConfidencePairs\n";
  std::vector<int> order;
  char buf[48];
  for (std::size_t i = 0; i < p.ids.size(); ++i) {
    const ScoreVector& s = p.scores[i];
    if (auto v = validate_scores(s, static_cast<int>(s.size())); !v)
      throw std::runtime_error("prediction row " + p.ids[i] + ": " + v.message);
    order.resize(s.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t k = std::min<std::size_t>(top_k, s.size());
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      if (s[a] != s[b]) return s[a] > s[b];
      return a < b;
    });
    out << p.ids[i] << ',';
    for (std::size_t j = 0; j < k; ++j) {
      std::snprintf(buf, sizeof(buf), "%d %.6f", order[j], s[order[j]]);
      out << (j ? " " : "") << buf;
    }
    out << '\n';
  }
}

// Reads a prediction CSV back into dense score vectors; labels absent from a
// row get score 0. Malformed rows and out-of-vocabulary labels are errors.
inline PredictionSet read_predictions(const std::filesystem::path& path, int num_labels,
                                      std::string model_name = "") {
  auto in = detail::open_in(path);
  PredictionSet p;
  p.model_name = model_name.empty() ? path.stem().string() : std::move(model_name);
  std::string line;
  if (!std::getline(in, line) || line != "VideoId,LabelConfidencePairs")
    throw std::runtime_error(path.string() + ": missing prediction header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || comma == 0)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    ScoreVector s(num_labels, 0.0);
    std::istringstream rest(line.substr(comma + 1));
    int label;
    double score;
    std::vector<bool> seen(num_labels, false);
    while (rest >> label) {
      if (!(rest >> score))
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": dangling label");
      if (label < 0 || label >= num_labels)
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": label " +
                                 std::to_string(label) + " out of vocabulary");
      if (seen[label])
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": repeated label " +
                                 std::to_string(label));
      seen[label] = true;
      s[label] = score;
    }
    if (!rest.eof())
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed pair list");
    if (auto v = validate_scores(s, num_labels); !v)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + v.message);
    p.ids.push_back(line.substr(0, comma));
    p.scores.push_back(std::move(s));
  }
  return p;
}

}  // namespace mlvc
