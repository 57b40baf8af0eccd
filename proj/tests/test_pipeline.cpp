#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlvc/pipeline.hpp"
#include "temp_dir.hpp"

namespace {

using nlohmann::json;

void write_json(const std::filesystem::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << '\n';
}

// a complete, tiny, fast pipeline configuration rooted at dir
std::filesystem::path tiny_configs(const std::filesystem::path& dir,
                                   const std::function<void(json&)>& mutate_pipeline = {},
                                   const std::function<void(json&)>& mutate_train = {}) {
  std::filesystem::create_directories(dir);
  write_json(dir / "synth.json", {{"num_labels", 6},
                                  {"feature_dim", 8},
                                  {"num_examples", 300},
                                  {"zipf_exponent", 1.0},
                                  {"cluster_spread", 0.2},
                                  {"multi_label_prob", 0.2},
                                  {"max_labels_per_example", 2},
                                  {"shard_size", 30},
                                  {"seed", 99}});
  write_json(dir / "augment.json",
             {{"threshold", 40}, {"chunk_size", 4}, {"k_max", 4}, {"seed", 5}});
  json train{{"base_lr", 0.02},      {"lr_decay_factor", 0.8},
             {"lr_decay_every_examples", 100000}, {"batch_size", 16},
             {"max_steps", 60},      {"lambda1", 0.0001},
             {"eval_every_steps", 30}, {"patience", 3},
             {"gap_top_k", 10},      {"seed", 1}};
  if (mutate_train) mutate_train(train);
  write_json(dir / "train.json", train);
  write_json(dir / "distill.json",
             {{"lambda", 1.0},
              {"model_type", "logistic"},
              {"budget_bytes", 1048576},
              {"train",
               {{"base_lr", 0.02}, {"batch_size", 16}, {"max_steps", 60},
                {"eval_every_steps", 30}, {"patience", 3}, {"gap_top_k", 10}, {"seed", 7}}}});
  json pipeline{{"synth_config", "synth.json"},
                {"augment_config", "augment.json"},
                {"train_config", "train.json"},
                {"distill_config", "distill.json"},
                {"submodels",
                 json::array({{{"name", "la"}, {"model_type", "logistic"}, {"seed", 101}},
                              {{"name", "lb"}, {"model_type", "logistic"}, {"seed", 102}}})},
                {"labelrel",
                 {{"lambda2", 0.001}, {"omega_update_every_steps", 20}, {"max_steps", 40}}},
                {"ensemble_fit", {{"max_epochs", 8}, {"seed", 3}}},
                {"ensemble_mode", "per_model"},
                {"top_k", 10}};
  if (mutate_pipeline) mutate_pipeline(pipeline);
  write_json(dir / "pipeline.json", pipeline);
  return dir / "pipeline.json";
}

}  // namespace

TEST_CASE("pipeline configs load with resolved sub configs") {
  TempDir tmp("pipe-load");
  const auto cfg = mlvc::PipelineConfig::load(tiny_configs(tmp / "c"));
  REQUIRE(cfg.submodels.size() == 2);
  REQUIRE(cfg.submodels[0].name == "la");
  REQUIRE(cfg.submodels[1].seed == 102);
  REQUIRE(cfg.ensemble_mode == mlvc::EnsembleMode::per_model);
  REQUIRE(cfg.top_k == 10);
  REQUIRE(cfg.train_filter.str() == "mod 10 != 5");
  REQUIRE(cfg.val_filter.str() == "mod 10 == 5");
  REQUIRE(cfg.synth_json.at("num_labels") == 6);
}

TEST_CASE("pipeline config loading rejects structural mistakes") {
  TempDir tmp("pipe-bad");
  int n = 0;
  auto expect_config_error = [&](const std::function<void(json&)>& mutate) {
    const auto path = tiny_configs(tmp / ("v" + std::to_string(n++)), mutate);
    REQUIRE_THROWS_AS(mlvc::PipelineConfig::load(path), mlvc::ConfigError);
  };

  expect_config_error([](json& p) { p.erase("distill_config"); });
  expect_config_error([](json& p) { p["surprise"] = 1; });
  expect_config_error([](json& p) { p["submodels"] = json::array(); });
  expect_config_error([](json& p) { p["submodels"][0].erase("name"); });
  expect_config_error([](json& p) { p["submodels"][1]["name"] = "la"; });       // duplicate
  expect_config_error([](json& p) { p["submodels"][1]["name"] = "la_rel"; });   // reserved
  expect_config_error([](json& p) { p["submodels"][1]["name"] = "student"; });  // reserved
  expect_config_error([](json& p) { p["labelrel"] = {{"lambda2", 0.0}}; });
  expect_config_error([](json& p) { p.erase("labelrel"); });
  expect_config_error([](json& p) { p["train_filter"] = "every other shard"; });
  expect_config_error([](json& p) { p["top_k"] = 0; });
  expect_config_error([](json& p) { p["ensemble_mode"] = "fancy"; });
  expect_config_error(
      [](json& p) { p["submodels"][0]["train_overrides"] = {{"base_lr", -1.0}}; });

  // a typo inside a sub config file fails at load time too
  const auto path =
      tiny_configs(tmp / "vt", {}, [](json& t) { t["learning_rate"] = 0.1; });
  REQUIRE_THROWS_AS(mlvc::PipelineConfig::load(path), mlvc::ConfigError);

  const auto missing = tmp / "vm";
  std::filesystem::create_directories(missing);
  write_json(missing / "pipeline.json", {{"synth_config", "nope.json"}});
  REQUIRE_THROWS(mlvc::PipelineConfig::load(missing / "pipeline.json"));
}

TEST_CASE("override merging replaces and extends the base object") {
  json base{{"a", 1}, {"b", 2}};
  mlvc::PipelineConfig::merge_into(base, json{{"b", 3}, {"c", 4}});
  REQUIRE(base == json{{"a", 1}, {"b", 3}, {"c", 4}});

  json untouched{{"a", 1}};
  mlvc::PipelineConfig::merge_into(untouched, json());
  REQUIRE(untouched == json{{"a", 1}});

  REQUIRE_THROWS_AS(mlvc::PipelineConfig::merge_into(base, json::array({1, 2})),
                    mlvc::ConfigError);
}

TEST_CASE("merged train configs apply overrides then the submodel seed") {
  const json base{{"base_lr", 0.01}, {"max_steps", 100}, {"seed", 1}};
  const auto cfg =
      mlvc::PipelineConfig::merged_train_config(base, json{{"base_lr", 0.5}}, 77);
  REQUIRE(cfg.base_lr == 0.5);
  REQUIRE(cfg.max_steps == 100);
  REQUIRE(cfg.seed.value == 77);

  REQUIRE_THROWS_AS(
      mlvc::PipelineConfig::merged_train_config(base, json{{"base_lr", -1.0}}, 1),
      mlvc::ConfigError);
  REQUIRE_THROWS_AS(
      mlvc::PipelineConfig::merged_train_config(base, json{{"learning_rate", 0.1}}, 1),
      mlvc::ConfigError);
}

TEST_CASE("stage fingerprints are stable and discriminating") {
  REQUIRE(mlvc::detail::fnv1a64("") == 0xcbf29ce484222325ULL);
  REQUIRE(mlvc::detail::fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  REQUIRE(mlvc::detail::fingerprint("") == "cbf29ce484222325");
  REQUIRE(mlvc::detail::fingerprint("x") == mlvc::detail::fingerprint("x"));
  REQUIRE(mlvc::detail::fingerprint("x") != mlvc::detail::fingerprint("y"));
}

TEST_CASE("a dry run plans every stage without touching the disk") {
  TempDir tmp("pipe-dry");
  const auto cfg = mlvc::PipelineConfig::load(tiny_configs(tmp / "c"));
  const auto out_dir = tmp / "out";
  std::vector<std::string> lines;
  const auto result =
      mlvc::run_pipeline(cfg, out_dir, true, [&](const std::string& s) { lines.push_back(s); });

  REQUIRE_FALSE(std::filesystem::exists(out_dir));
  REQUIRE(result.summary.is_null());
  REQUIRE(result.stages.size() >= 10);
  for (const auto& s : result.stages) {
    REQUIRE_FALSE(s.cached);
    REQUIRE_FALSE(s.outputs.empty());
  }
  REQUIRE(lines.size() == result.stages.size());
  for (const auto& l : lines) REQUIRE(l.rfind("plan ", 0) == 0);
}

TEST_CASE("the pipeline produces a coherent summary and caches reruns") {
  TempDir tmp("pipe-run");
  const auto cfg = mlvc::PipelineConfig::load(tiny_configs(tmp / "c"));
  const auto out_dir = tmp / "out";
  const auto result = mlvc::run_pipeline(cfg, out_dir);

  const auto& summary = result.summary;
  REQUIRE(summary.at("top_k") == 10);
  const auto& dataset = summary.at("dataset");
  REQUIRE(dataset.at("num_labels") == 6);
  REQUIRE(dataset.at("train_examples").get<int>() + dataset.at("val_examples").get<int>() ==
          dataset.at("total_examples").get<int>());

  const auto& prog = summary.at("progression");
  REQUIRE(prog.size() == 6);
  const std::vector<std::string> stages{"single_baseline", "augmentation", "label_relation",
                                        "ensemble_equal", "ensemble_weighted", "distilled"};
  for (std::size_t i = 0; i < stages.size(); ++i) {
    REQUIRE(prog[i].at("stage") == stages[i]);
    REQUIRE(prog[i].at("val_gap").is_number());
  }
  for (std::size_t i = 1; i < prog.size(); ++i) REQUIRE(prog[i].contains("delta"));

  const auto& members = summary.at("members");
  REQUIRE(members.size() == 3);  // la, lb, la_rel
  double best = -1.0;
  for (const auto& m : members) best = std::max(best, m.at("val_gap").get<double>());
  REQUIRE(summary.at("best_single").at("val_gap").get<double>() == best);
  REQUIRE(summary.at("distill").contains("budget_margin_bytes"));
  REQUIRE(summary.at("ensemble").contains("epoch_mse"));

  // the summary on disk is the returned summary
  const auto on_disk = mlvc::load_json_file(out_dir / "summary.json");
  REQUIRE(json(summary) == on_disk);

  // rerunning over the same directory is a full cache hit
  const auto rerun = mlvc::run_pipeline(cfg, out_dir);
  for (const auto& s : rerun.stages) {
    INFO(s.name);
    REQUIRE(s.cached);
  }
  REQUIRE(rerun.summary == summary);

  // a fresh directory reproduces the summary exactly
  const auto fresh = mlvc::run_pipeline(cfg, tmp / "out2");
  REQUIRE(fresh.summary == summary);
}

TEST_CASE("stage failures carry the stage name") {
  TempDir tmp("pipe-fail");
  const auto path = tiny_configs(tmp / "c");
  // shrink the distillation budget below any viable student
  auto distill = mlvc::load_json_file(tmp / "c" / "distill.json");
  distill["budget_bytes"] = 16;
  write_json(tmp / "c" / "distill.json", distill);

  const auto cfg = mlvc::PipelineConfig::load(path);
  try {
    mlvc::run_pipeline(cfg, tmp / "out");
    FAIL("expected a budget error");
  } catch (const mlvc::BudgetError& err) {
    REQUIRE(std::string(err.what()).find("stage distill") != std::string::npos);
  }
}
