#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mlvc/augment.hpp"
#include "mlvc/config.hpp"
#include "mlvc/dataset.hpp"
#include "mlvc/distill.hpp"
#include "mlvc/ensemble.hpp"
#include "mlvc/labelrel.hpp"
#include "mlvc/metrics.hpp"
#include "mlvc/model.hpp"
#include "mlvc/synth.hpp"
#include "mlvc/train.hpp"
#include "mlvc/types.hpp"

namespace mlvc {

// End-to-end experiment: synthesize -> stats -> augment -> train submodels
// (plus a raw-data reference and a label-relation fine-tune) -> predict ->
// fit and apply ensembles -> distill -> summarize. Every artifact under the
// output directory is a deterministic function of the configs, so a rerun
// into a fresh directory reproduces it byte for byte. Stages are
// content-addressed by a fingerprint of their config and upstream
// fingerprints; rerunning over an existing directory skips stages whose
// fingerprints match.

struct SubmodelSpec {
  std::string name;
  ModelType type = ModelType::logistic;
  int hidden = 0;
  int experts = 0;
  std::uint64_t seed = 0;
  nlohmann::json train_overrides = nlohmann::json::object();

  static SubmodelSpec from_json(const nlohmann::json& j) {
    reject_unknown_keys(j, {"name", "model_type", "hidden", "experts", "seed", "train_overrides"},
                        "submodel spec");
    SubmodelSpec s;
    s.name = json_get<std::string>(j, "name", "", "submodel spec");
    if (s.name.empty()) throw ConfigError("submodel spec: name is required");
    s.type = parse_model_type(json_get<std::string>(j, "model_type", "logistic", "submodel spec"));
    s.hidden = json_get(j, "hidden", 0, "submodel spec");
    s.experts = json_get(j, "experts", 0, "submodel spec");
    s.seed = json_get<std::uint64_t>(j, "seed", 0, "submodel spec");
    if (j.contains("train_overrides")) s.train_overrides = j.at("train_overrides");
    return s;
  }

  nlohmann::json descriptor() const {
    nlohmann::json j;
    j["name"] = name;
    j["model_type"] = model_type_name(type);
    j["hidden"] = hidden;
    j["experts"] = experts;
    j["seed"] = seed;
    j["train_overrides"] = train_overrides;
    return j;
  }
};

struct PipelineConfig {
  nlohmann::json synth_json;
  nlohmann::json augment_json;
  nlohmann::json train_json;
  nlohmann::json distill_json;
  ShardFilter train_filter = ShardFilter::parse("mod 10 != 5");
  ShardFilter val_filter = ShardFilter::parse("mod 10 == 5");
  std::vector<SubmodelSpec> submodels;
  nlohmann::json labelrel_overrides;  // merged onto train_json for the fine-tune
  nlohmann::json ensemble_fit_json;
  EnsembleMode ensemble_mode = EnsembleMode::per_model;
  int top_k = kDefaultTopK;

  static PipelineConfig load(const std::filesystem::path& path) {
    const nlohmann::json j = load_json_file(path);
    reject_unknown_keys(j,
                        {"synth_config", "augment_config", "train_config", "distill_config",
                         "train_filter", "val_filter", "submodels", "labelrel", "ensemble_fit",
                         "ensemble_mode", "top_k"},
                        "pipeline config");
    const std::filesystem::path base = path.parent_path();
    auto sub_config = [&](const char* key) {
      const std::string rel = json_get<std::string>(j, key, "", "pipeline config");
      if (rel.empty()) throw ConfigError(std::string("pipeline config: '") + key + "' is required");
      return load_json_file(base / rel);
    };
    PipelineConfig c;
    c.synth_json = sub_config("synth_config");
    c.augment_json = sub_config("augment_config");
    c.train_json = sub_config("train_config");
    c.distill_json = sub_config("distill_config");
    c.train_filter = ShardFilter::parse(json_get<std::string>(j, "train_filter", "mod 10 != 5", "pipeline config"));
    c.val_filter = ShardFilter::parse(json_get<std::string>(j, "val_filter", "mod 10 == 5", "pipeline config"));
    if (!j.contains("submodels") || !j.at("submodels").is_array() || j.at("submodels").empty())
      throw ConfigError("pipeline config: at least one submodel is required");
    for (const auto& sj : j.at("submodels")) c.submodels.push_back(SubmodelSpec::from_json(sj));
    // artifact names must not collide: submodels own <name>.model.json and
    // <name>.val.csv, the reference submodel additionally owns the _raw and
    // _rel variants, and the distilled model owns "student"
    {
      std::set<std::string> taken{"student", c.submodels.front().name + "_raw",
                                  c.submodels.front().name + "_rel"};
      for (const auto& s : c.submodels)
        if (!taken.insert(s.name).second)
          throw ConfigError("pipeline config: submodel name '" + s.name +
                            "' collides with another model artifact");
    }
    c.labelrel_overrides = j.value("labelrel", nlohmann::json::object());
    c.ensemble_fit_json = j.value("ensemble_fit", nlohmann::json::object());
    c.ensemble_mode = parse_ensemble_mode(json_get<std::string>(j, "ensemble_mode", "per_model", "pipeline config"));
    c.top_k = json_get(j, "top_k", c.top_k, "pipeline config");
    if (c.top_k < 1) throw ConfigError("pipeline config: top_k must be >= 1");

    // sanity: parse the sub-configs now so a typo fails before any stage runs
    SynthConfig::from_json(c.synth_json);
    AugmentConfig::from_json(c.augment_json);
    TrainConfig::from_json(c.train_json);
    DistillConfig::from_json(c.distill_json);
    EnsembleFitConfig::from_json(c.ensemble_fit_json);
    // submodel and labelrel overrides must merge into valid train configs
    for (const auto& s : c.submodels) merged_train_config(c.train_json, s.train_overrides, s.seed);
    nlohmann::json probe = c.train_json;
    merge_into(probe, c.labelrel_overrides);
    if (!probe.contains("lambda2") || probe.at("lambda2").get<double>() <= 0.0)
      throw ConfigError("pipeline config: labelrel overrides must set lambda2 > 0");
    return c;
  }

  static void merge_into(nlohmann::json& base, const nlohmann::json& overrides) {
    if (overrides.is_null()) return;
    if (!overrides.is_object()) throw ConfigError("config overrides must be a JSON object");
    for (const auto& [k, v] : overrides.items()) base[k] = v;
  }

  static TrainConfig merged_train_config(const nlohmann::json& base, const nlohmann::json& overrides,
                                         std::uint64_t seed) {
    nlohmann::json j = base;
    merge_into(j, overrides);
    j["seed"] = seed;
    return TrainConfig::from_json(j);
  }
};

namespace detail {

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string fingerprint(const std::string& payload) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(payload)));
  return buf;
}

}  // namespace detail

struct PipelineStageInfo {
  std::string name;
  std::vector<std::string> outputs;
  bool cached = false;
};

struct PipelineResult {
  nlohmann::ordered_json summary;
  std::vector<PipelineStageInfo> stages;
};

inline PipelineResult run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                                   bool dry_run = false,
                                   const std::function<void(const std::string&)>& log_raw = {}) {
  namespace fs = std::filesystem;
  const auto log = [&](const std::string& s) {
    if (log_raw) log_raw(s);
  };

  PipelineResult result;
  const fs::path cache_dir = out_dir / "cache";

  // A stage runs unless its fingerprint file matches and all outputs exist.
  auto stage = [&](const std::string& name, const std::string& key,
                   const std::vector<fs::path>& outputs, const std::function<void()>& fn) {
    PipelineStageInfo info;
    info.name = name;
    for (const auto& o : outputs) info.outputs.push_back(fs::relative(o, out_dir).string());
    if (dry_run) {
      std::string line = "plan " + name + " ->";
      for (const auto& o : info.outputs) line += " " + o;
      log(line);
      result.stages.push_back(std::move(info));
      return;
    }
    const fs::path key_file = cache_dir / (name + ".key");
    bool hit = fs::exists(key_file);
    if (hit) {
      std::ifstream in(key_file);
      std::string stored;
      std::getline(in, stored);
      hit = stored == key;
    }
    for (const auto& o : outputs)
      if (!fs::exists(o)) hit = false;
    if (hit) {
      log("[cache] " + name);
      info.cached = true;
      result.stages.push_back(std::move(info));
      return;
    }
    try {
      fn();
    } catch (const ConfigError& ex) {
      throw ConfigError("stage " + name + ": " + ex.what());
    } catch (const BudgetError& ex) {
      throw BudgetError("stage " + name + ": " + ex.what());
    } catch (const std::exception& ex) {
      throw std::runtime_error("stage " + name + ": " + ex.what());
    }
    fs::create_directories(key_file.parent_path());
    std::ofstream out(key_file, std::ios::binary);
    out << key << '\n';
    if (!out) throw std::runtime_error("stage " + name + ": cannot write " + key_file.string());
    log("[done] " + name);
    result.stages.push_back(std::move(info));
  };

  const fs::path data_dir = out_dir / "data";
  const fs::path aug_dir = out_dir / "data_aug";
  const fs::path models_dir = out_dir / "models";
  const fs::path preds_dir = out_dir / "preds";
  const fs::path ensemble_dir = out_dir / "ensemble";
  const fs::path distill_dir = out_dir / "distill";
  const fs::path stats_csv = out_dir / "stats" / "label_counts.csv";

  if (!dry_run) {
    fs::create_directories(out_dir);
    fs::create_directories(models_dir);
    fs::create_directories(preds_dir);
    fs::create_directories(ensemble_dir);
    fs::create_directories(distill_dir);
    fs::create_directories(out_dir / "stats");
  }

  const SynthConfig synth_cfg = SynthConfig::from_json(cfg.synth_json);
  const AugmentConfig aug_cfg = AugmentConfig::from_json(cfg.augment_json);
  const DistillConfig distill_cfg = DistillConfig::from_json(cfg.distill_json);
  const EnsembleFitConfig fit_cfg = EnsembleFitConfig::from_json(cfg.ensemble_fit_json);
  const GapConfig gap_cfg{cfg.top_k};

  const std::string k_synth = detail::fingerprint("synth|" + cfg.synth_json.dump());
  stage("synth-data", k_synth, {data_dir / "manifest.json"},
        [&] { synth_generate_to_dir(synth_cfg, data_dir); });

  stage("stats", detail::fingerprint("stats|" + k_synth), {stats_csv},
        [&] { write_stats_csv(data_dir, stats_csv); });

  const std::string k_aug = detail::fingerprint("augment|" + cfg.augment_json.dump() + "|" +
                                                cfg.train_filter.str() + "|" + k_synth);
  stage("augment", k_aug, {aug_dir / "manifest.json", aug_dir / "augment_report.json"}, [&] {
    const AugmentReport report = augment_dataset(data_dir, aug_dir, aug_cfg, cfg.train_filter);
    auto out = detail::open_out(aug_dir / "augment_report.json");
    out << report.to_json().dump(2) << '\n';
  });

  // model training: raw reference, submodels on augmented data, label-relation fine-tune
  struct TrainJob {
    std::string model_name;
    SubmodelSpec spec;
    bool on_augmented = true;
    std::string init_from;  // empty = fresh init
    nlohmann::json extra_overrides = nlohmann::json::object();
  };
  std::vector<TrainJob> jobs;
  const SubmodelSpec& ref = cfg.submodels.front();
  jobs.push_back({ref.name + "_raw", ref, false, "", {}});
  for (const auto& s : cfg.submodels) jobs.push_back({s.name, s, true, "", {}});
  jobs.push_back({ref.name + "_rel", ref, true, ref.name, cfg.labelrel_overrides});

  std::vector<Example> train_raw, train_aug, val;
  DatasetManifest manifest;
  auto ensure_data = [&]() {
    if (!train_raw.empty()) return;
    Dataset d = read_shards(data_dir, cfg.train_filter);
    manifest = d.manifest;
    train_raw = std::move(d.examples);
    val = read_shards(data_dir, cfg.val_filter).examples;
    if (train_raw.empty() || val.empty())
      throw std::runtime_error("pipeline: empty train or val split");
  };
  auto ensure_aug = [&]() {
    if (train_aug.empty()) train_aug = read_shards(aug_dir).examples;
  };

  std::vector<std::string> member_names;
  for (const auto& s : cfg.submodels) member_names.push_back(s.name);
  member_names.push_back(ref.name + "_rel");

  std::map<std::string, std::string> model_keys;
  for (const auto& job : jobs) {
    nlohmann::json merged_overrides = job.spec.train_overrides;
    PipelineConfig::merge_into(merged_overrides, job.extra_overrides);
    const TrainConfig tc =
        PipelineConfig::merged_train_config(cfg.train_json, merged_overrides, job.spec.seed);
    const std::string parent = job.init_from.empty()
                                   ? (job.on_augmented ? k_aug : k_synth)
                                   : model_keys.at(job.init_from) + "|" + k_aug;
    const std::string key = detail::fingerprint(
        "train|" + job.model_name + "|" + job.spec.descriptor().dump() + "|" +
        merged_overrides.dump() + "|" + cfg.train_json.dump() + "|" + parent);
    model_keys[job.model_name] = key;
    const fs::path model_path = models_dir / (job.model_name + ".model.json");
    const fs::path log_path = models_dir / (job.model_name + ".train.json");
    stage("train/" + job.model_name, key, {model_path, log_path}, [&] {
      ensure_data();
      if (job.on_augmented) ensure_aug();
      const std::vector<Example>& train_set = job.on_augmented ? train_aug : train_raw;
      ModelParams init;
      if (job.init_from.empty()) {
        init = make_model(job.spec.type, manifest.feature_dim, manifest.num_labels,
                          job.spec.hidden, job.spec.experts);
        Rng rng(Seed{job.spec.seed}.child(1));
        init_params(init, rng);
      } else {
        init = load_model(models_dir / (job.init_from + ".model.json"));
      }
      init.name = job.model_name;
      init.provenance = job.init_from.empty()
                            ? std::string("trained(") + (job.on_augmented ? "augmented" : "raw") + ")"
                            : "fine-tuned(" + job.init_from + ", label-relation)";
      TrainOptions opts;
      opts.log_fn = [&](const std::string& s) { log("  [" + job.model_name + "] " + s); };
      TrainResult r = train(init, train_set, val, tc, opts);
      save_model(r.params, model_path);
      auto out = detail::open_out(log_path);
      out << r.log.to_json().dump(2) << '\n';
    });
  }

  // omega snapshot of the label-relation model, for inspection
  const fs::path omega_csv = out_dir / "stats" / "omega.csv";
  stage("inspect-omega", detail::fingerprint("omega|" + model_keys.at(ref.name + "_rel")),
        {omega_csv}, [&] {
          const ModelParams m = load_model(models_dir / (ref.name + "_rel.model.json"));
          if (!m.omega) throw std::runtime_error("label-relation model carries no omega");
          auto out = detail::open_out(omega_csv);
          const DatasetManifest man = load_manifest(data_dir);
          write_omega_csv(*m.omega, man.vocabulary.names, out);
        });

  // predictions: every member on the val split; every member plus the raw
  // reference on the raw train split (teacher inputs); raw reference on val
  struct PredJob {
    std::string model_name;
    std::string split;  // "val" or "train"
  };
  std::vector<PredJob> pred_jobs;
  pred_jobs.push_back({ref.name + "_raw", "val"});
  for (const auto& m : member_names) {
    pred_jobs.push_back({m, "val"});
    pred_jobs.push_back({m, "train"});
  }
  std::map<std::string, std::string> pred_keys;
  for (const auto& pj : pred_jobs) {
    const std::string key = detail::fingerprint(
        "predict|" + pj.model_name + "|" + pj.split + "|" + std::to_string(cfg.top_k) + "|" +
        model_keys.at(pj.model_name) + "|" + k_synth + "|" +
        (pj.split == "val" ? cfg.val_filter.str() : cfg.train_filter.str()));
    pred_keys[pj.model_name + "." + pj.split] = key;
    const fs::path csv = preds_dir / (pj.model_name + "." + pj.split + ".csv");
    stage("predict/" + pj.model_name + "." + pj.split, key, {csv}, [&] {
      ensure_data();
      const ModelParams m = load_model(models_dir / (pj.model_name + ".model.json"));
      const auto& split = pj.split == "val" ? val : train_raw;
      write_predictions(predict_set(m, split, pj.model_name), csv, cfg.top_k);
    });
  }

  // ensemble fit on validation predictions, then apply
  std::string members_key;
  for (const auto& m : member_names) members_key += pred_keys.at(m + ".val") + "|";
  const std::string k_fit = detail::fingerprint("ensemble-fit|" + cfg.ensemble_fit_json.dump() +
                                                "|" + ensemble_mode_name(cfg.ensemble_mode) + "|" +
                                                members_key);
  const fs::path weights_path = ensemble_dir / "weights.json";
  const fs::path fit_log_path = ensemble_dir / "fit.json";

  auto read_member_preds = [&](const std::string& split) {
    ensure_data();
    std::vector<PredictionSet> sets;
    for (const auto& m : member_names)
      sets.push_back(read_predictions(preds_dir / (m + "." + split + ".csv"),
                                      manifest.num_labels, m));
    return sets;
  };

  stage("ensemble-fit", k_fit, {weights_path, fit_log_path}, [&] {
    const auto sets = read_member_preds("val");
    const EnsembleFitResult fit = fit_weights(sets, val, cfg.ensemble_mode, fit_cfg);
    save_ensemble_weights(fit.weights, weights_path);
    auto out = detail::open_out(fit_log_path);
    out << fit.to_json().dump(2) << '\n';
  });

  const fs::path equal_val_csv = preds_dir / "ensemble_equal.val.csv";
  const fs::path weighted_val_csv = preds_dir / "ensemble_weighted.val.csv";
  const fs::path weighted_train_csv = preds_dir / "ensemble_weighted.train.csv";
  stage("ensemble-apply/equal.val", detail::fingerprint("apply-equal|val|" + members_key),
        {equal_val_csv}, [&] {
          EnsembleWeights equal;
          equal.mode = EnsembleMode::equal;
          write_predictions(combine(read_member_preds("val"), equal, "ensemble_equal"),
                            equal_val_csv, cfg.top_k);
        });
  std::string train_members_key;
  for (const auto& m : member_names) train_members_key += pred_keys.at(m + ".train") + "|";
  stage("ensemble-apply/weighted.val", detail::fingerprint("apply-weighted|val|" + k_fit + "|" + members_key),
        {weighted_val_csv}, [&] {
          write_predictions(combine(read_member_preds("val"), load_ensemble_weights(weights_path),
                                    "ensemble_weighted"),
                            weighted_val_csv, cfg.top_k);
        });
  stage("ensemble-apply/weighted.train",
        detail::fingerprint("apply-weighted|train|" + k_fit + "|" + train_members_key),
        {weighted_train_csv}, [&] {
          write_predictions(combine(read_member_preds("train"), load_ensemble_weights(weights_path),
                                    "ensemble_weighted"),
                            weighted_train_csv, cfg.top_k);
        });

  // distillation from the weighted ensemble's training-split predictions
  const std::string k_distill = detail::fingerprint(
      "distill|" + cfg.distill_json.dump() + "|" + detail::fingerprint("apply-weighted|train|" + k_fit + "|" + train_members_key) +
      "|" + k_synth);
  const fs::path student_path = distill_dir / "student.model.json";
  const fs::path distill_report_path = distill_dir / "report.json";
  const fs::path student_val_csv = preds_dir / "student.val.csv";
  stage("distill", k_distill, {student_path, distill_report_path, student_val_csv}, [&] {
    ensure_data();
    const PredictionSet teacher =
        read_predictions(weighted_train_csv, manifest.num_labels, "ensemble_weighted");
    const PredictionSet weighted_val =
        read_predictions(weighted_val_csv, manifest.num_labels, "ensemble_weighted");
    const double teacher_gap = gap(weighted_val, val, gap_cfg);
    DistillResult r = distill(teacher, train_raw, val, distill_cfg, teacher_gap,
                              [&](const std::string& s) { log("  [student] " + s); });
    save_model(r.student, student_path);
    nlohmann::ordered_json report = r.report.to_json();
    report["train_log"] = r.log.to_json();
    auto out = detail::open_out(distill_report_path);
    out << report.dump(2) << '\n';
    write_predictions(predict_set(r.student, val, "student"), student_val_csv, cfg.top_k);
  });

  if (dry_run) {
    result.stages.push_back({"summary", {fs::relative(out_dir / "summary.json", out_dir).string()}, false});
    log("plan summary -> summary.json");
    return result;
  }

  // evaluations are recomputed from the serialized artifacts each run
  ensure_data();
  auto gap_of = [&](const fs::path& csv) {
    return gap(read_predictions(csv, manifest.num_labels), val, gap_cfg);
  };
  const double gap_raw = gap_of(preds_dir / (ref.name + "_raw.val.csv"));
  std::vector<std::pair<std::string, double>> member_gaps;
  double best_single = -1.0;
  std::string best_name;
  for (const auto& m : member_names) {
    const double g = gap_of(preds_dir / (m + ".val.csv"));
    member_gaps.emplace_back(m, g);
    if (g > best_single) {
      best_single = g;
      best_name = m;
    }
  }
  const double gap_aug = member_gaps.front().second;           // submodels.front() on augmented
  const double gap_rel = member_gaps.back().second;            // label-relation fine-tune
  const double gap_equal = gap_of(equal_val_csv);
  const double gap_weighted = gap_of(weighted_val_csv);
  const double gap_student = gap_of(student_val_csv);

  nlohmann::ordered_json summary;
  {
    const DatasetManifest man = load_manifest(data_dir);
    const nlohmann::json aug_report = load_json_file(aug_dir / "augment_report.json");
    nlohmann::ordered_json dataset;
    dataset["num_labels"] = man.num_labels;
    dataset["feature_dim"] = man.feature_dim;
    dataset["total_examples"] = man.total_examples;
    dataset["train_examples"] = train_raw.size();
    dataset["val_examples"] = val.size();
    dataset["train_filter"] = cfg.train_filter.str();
    dataset["val_filter"] = cfg.val_filter.str();
    dataset["augmented_examples"] = aug_report.at("total_after");
    dataset["augment_expansion_ratio"] = aug_report.at("expansion_ratio");
    summary["dataset"] = std::move(dataset);

    nlohmann::ordered_json progression = nlohmann::ordered_json::array();
    auto row = [&](const char* stage_name, const std::string& model, double g,
                   std::optional<double> delta) {
      nlohmann::ordered_json r;
      r["stage"] = stage_name;
      if (!model.empty()) r["model"] = model;
      r["val_gap"] = g;
      if (delta) r["delta"] = *delta;
      progression.push_back(std::move(r));
    };
    row("single_baseline", ref.name + "_raw", gap_raw, std::nullopt);
    row("augmentation", ref.name, gap_aug, gap_aug - gap_raw);
    row("label_relation", ref.name + "_rel", gap_rel, gap_rel - gap_aug);
    row("ensemble_equal", "", gap_equal, gap_equal - best_single);
    row("ensemble_weighted", "", gap_weighted, gap_weighted - gap_equal);
    row("distilled", "student", gap_student, gap_student - gap_weighted);
    summary["progression"] = std::move(progression);

    nlohmann::ordered_json members = nlohmann::ordered_json::array();
    for (const auto& [name, g] : member_gaps) {
      nlohmann::ordered_json mj;
      mj["name"] = name;
      mj["val_gap"] = g;
      members.push_back(std::move(mj));
    }
    summary["members"] = std::move(members);
    summary["best_single"] = {{"name", best_name}, {"val_gap", best_single}};
    summary["ensemble"] = load_json_file(fit_log_path);
    summary["distill"] = load_json_file(distill_report_path);
    summary["top_k"] = cfg.top_k;

    auto out = detail::open_out(out_dir / "summary.json");
    out << summary.dump(2) << '\n';
  }
  result.summary = std::move(summary);
  return result;
}

}  // namespace mlvc
