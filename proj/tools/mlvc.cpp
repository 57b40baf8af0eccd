// Command-line driver: dataset synthesis, augmentation, training,
// prediction, evaluation, ensembling, distillation, and the end-to-end
// pipeline. Exit codes: 0 success, 2 bad configuration, 3 stage failure,
// 4 serving-budget violation.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mlvc/augment.hpp"
#include "mlvc/config.hpp"
#include "mlvc/dataset.hpp"
#include "mlvc/distill.hpp"
#include "mlvc/ensemble.hpp"
#include "mlvc/labelrel.hpp"
#include "mlvc/metrics.hpp"
#include "mlvc/model.hpp"
#include "mlvc/pipeline.hpp"
#include "mlvc/synth.hpp"
#include "mlvc/train.hpp"

namespace fs = std::filesystem;

namespace {

struct SeedOverride {
  std::uint64_t value = 0;
  bool set = false;

  void apply(mlvc::Seed& seed) const {
    if (set) seed.value = value;
  }
};

void add_seed_option(CLI::App* sub, SeedOverride& seed) {
  sub->add_option_function<std::uint64_t>(
         "--seed",
         [&seed](const std::uint64_t& v) {
           seed.value = v;
           seed.set = true;
         },
         "override the config seed")
      ->type_name("UINT");
}

void write_json_file(const nlohmann::ordered_json& j, const fs::path& path) {
  auto out = mlvc::detail::open_out(path);
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-label video classification toolkit"};
  app.require_subcommand(1);

  // synth-data
  struct {
    std::string config, out;
    SeedOverride seed;
  } synth_args;
  {
    auto* sub = app.add_subcommand("synth-data", "generate a synthetic sharded dataset");
    sub->add_option("--config", synth_args.config, "synth config JSON")->required();
    sub->add_option("--out", synth_args.out, "output dataset directory")->required();
    add_seed_option(sub, synth_args.seed);
    sub->callback([&] {
      auto cfg = mlvc::SynthConfig::from_json(mlvc::load_json_file(synth_args.config));
      synth_args.seed.apply(cfg.seed);
      const auto manifest = mlvc::synth_generate_to_dir(cfg, synth_args.out);
      std::cout << "wrote " << manifest.total_examples << " examples in " << manifest.shards.size()
                << " shards to " << synth_args.out << "\n";
    });
  }

  // stats
  struct {
    std::string data, out;
  } stats_args;
  {
    auto* sub = app.add_subcommand("stats", "recount labels and write the histogram CSV");
    sub->add_option("--data", stats_args.data, "dataset directory")->required();
    sub->add_option("--out", stats_args.out, "output CSV path")->required();
    sub->callback([&] {
      mlvc::write_stats_csv(stats_args.data, stats_args.out);
      const auto manifest = mlvc::load_manifest(stats_args.data);
      std::cout << "total examples: " << manifest.total_examples << "; histogram written to "
                << stats_args.out << "\n";
    });
  }

  // augment
  struct {
    std::string data, out, config, filter = "all", report;
    bool audit = false;
    SeedOverride seed;
  } aug_args;
  {
    auto* sub = app.add_subcommand("augment", "rebalance and synthesize training examples");
    sub->add_option("--data", aug_args.data, "input dataset directory")->required();
    sub->add_option("--out", aug_args.out, "output dataset directory")->required();
    sub->add_option("--config", aug_args.config, "augment config JSON")->required();
    sub->add_option("--filter", aug_args.filter, "input shard filter (default: all)");
    sub->add_option("--report", aug_args.report, "report JSON path (default: <out>/augment_report.json)");
    sub->add_flag("--audit", aug_args.audit, "record per-example decisions and synthetic sources");
    add_seed_option(sub, aug_args.seed);
    sub->callback([&] {
      auto cfg = mlvc::AugmentConfig::from_json(mlvc::load_json_file(aug_args.config));
      aug_args.seed.apply(cfg.seed);
      const auto filter = mlvc::ShardFilter::parse(aug_args.filter);
      const auto report = mlvc::augment_dataset(aug_args.data, aug_args.out, cfg, filter, aug_args.audit);
      const fs::path report_path = aug_args.report.empty()
                                       ? fs::path(aug_args.out) / "augment_report.json"
                                       : fs::path(aug_args.report);
      write_json_file(report.to_json(), report_path);
      std::printf("%lld -> %lld examples (x%.3f), %lld synthesized, %lld dropped, %lld fallbacks\n",
                  static_cast<long long>(report.total_before),
                  static_cast<long long>(report.total_after),
                  report.total_before ? static_cast<double>(report.total_after) /
                                            static_cast<double>(report.total_before)
                                      : 0.0,
                  static_cast<long long>(report.synthesized),
                  static_cast<long long>(report.dropped),
                  static_cast<long long>(report.fallback_noise_events));
    });
  }

  // train
  struct {
    std::string data, val, out, config, log;
    std::string model_type = "logistic", name, init_model;
    std::string filter = "all", val_filter = "mod 10 == 5";
    int hidden = 0, experts = 0;
    SeedOverride seed;
  } train_args;
  {
    auto* sub = app.add_subcommand("train", "train one model with early stopping");
    sub->add_option("--data", train_args.data, "dataset directory")->required();
    sub->add_option("--val", train_args.val, "validation dataset directory (default: --data)");
    sub->add_option("--out", train_args.out, "output model JSON")->required();
    sub->add_option("--config", train_args.config, "train config JSON")->required();
    sub->add_option("--log", train_args.log, "write the training log JSON here");
    sub->add_option("--model-type", train_args.model_type, "logistic | gated_mlp | moe");
    sub->add_option("--hidden", train_args.hidden, "hidden width (gated_mlp)");
    sub->add_option("--experts", train_args.experts, "expert count (moe)");
    sub->add_option("--name", train_args.name, "model name metadata");
    sub->add_option("--init-model", train_args.init_model, "start from this model (fine-tune)");
    sub->add_option("--filter", train_args.filter, "training shard filter (default: all)");
    sub->add_option("--val-filter", train_args.val_filter, "validation shard filter (default: mod 10 == 5)");
    add_seed_option(sub, train_args.seed);
    sub->callback([&] {
      auto cfg = mlvc::TrainConfig::from_json(mlvc::load_json_file(train_args.config));
      train_args.seed.apply(cfg.seed);
      const auto train_split = mlvc::read_shards(train_args.data, mlvc::ShardFilter::parse(train_args.filter));
      const std::string val_dir = train_args.val.empty() ? train_args.data : train_args.val;
      const auto val_split = mlvc::read_shards(val_dir, mlvc::ShardFilter::parse(train_args.val_filter));

      mlvc::ModelParams init;
      if (!train_args.init_model.empty()) {
        init = mlvc::load_model(train_args.init_model);
        init.provenance = "fine-tuned(" + fs::path(train_args.init_model).stem().string() + ")";
      } else {
        init = mlvc::make_model(mlvc::parse_model_type(train_args.model_type),
                                train_split.manifest.feature_dim, train_split.manifest.num_labels,
                                train_args.hidden, train_args.experts);
        mlvc::Rng rng(cfg.seed.child(1));
        mlvc::init_params(init, rng);
        init.provenance = "trained";
      }
      if (!train_args.name.empty()) init.name = train_args.name;
      else if (init.name.empty()) init.name = fs::path(train_args.out).stem().string();

      mlvc::TrainOptions opts;
      opts.log_fn = [](const std::string& s) { std::cout << s << "\n"; };
      const auto result = mlvc::train(init, train_split.examples, val_split.examples, cfg, opts);
      mlvc::save_model(result.params, train_args.out);
      if (!train_args.log.empty()) write_json_file(result.log.to_json(), train_args.log);
      std::printf("best val GAP %.6f at step %lld; model written to %s\n", result.log.best_val_gap,
                  static_cast<long long>(result.log.best_step), train_args.out.c_str());
    });
  }

  // predict
  struct {
    std::string model, data, out;
    std::string filter = "all";
    int top_k = mlvc::kDefaultTopK;
  } predict_args;
  {
    auto* sub = app.add_subcommand("predict", "score a dataset split with one model");
    sub->add_option("--model", predict_args.model, "model JSON")->required();
    sub->add_option("--data", predict_args.data, "dataset directory")->required();
    sub->add_option("--out", predict_args.out, "output prediction CSV")->required();
    sub->add_option("--filter", predict_args.filter, "shard filter (default: all)");
    sub->add_option("--top-k", predict_args.top_k, "pairs kept per row");
    sub->callback([&] {
      const auto model = mlvc::load_model(predict_args.model);
      const auto split = mlvc::read_shards(predict_args.data, mlvc::ShardFilter::parse(predict_args.filter));
      mlvc::write_predictions(mlvc::predict_set(model, split.examples), predict_args.out,
                              predict_args.top_k);
      std::cout << "wrote " << split.examples.size() << " prediction rows to " << predict_args.out
                << "\n";
    });
  }

  // eval
  struct {
    std::string preds, data, per_label;
    std::string filter = "all";
    int top_k = mlvc::kDefaultTopK;
  } eval_args;
  {
    auto* sub = app.add_subcommand("eval", "GAP of a prediction CSV against a dataset split");
    sub->add_option("--preds", eval_args.preds, "prediction CSV")->required();
    sub->add_option("--data", eval_args.data, "dataset directory")->required();
    sub->add_option("--filter", eval_args.filter, "shard filter (default: all)");
    sub->add_option("--top-k", eval_args.top_k, "GAP pool depth per example");
    sub->add_option("--per-label", eval_args.per_label, "also write per-label AP CSV here");
    sub->callback([&] {
      const auto split = mlvc::read_shards(eval_args.data, mlvc::ShardFilter::parse(eval_args.filter));
      const auto preds = mlvc::read_predictions(eval_args.preds, split.manifest.num_labels);
      const double g = mlvc::gap(preds, split.examples, mlvc::GapConfig{eval_args.top_k});
      std::printf("GAP@%d %.6f over %zu examples\n", eval_args.top_k, g, split.examples.size());
      if (!eval_args.per_label.empty()) {
        const auto ap = mlvc::per_label_ap(preds, split.examples, split.manifest.num_labels);
        auto out = mlvc::detail::open_out(eval_args.per_label);
        out << "label,name,ap\n";
        char buf[32];
        for (std::size_t c = 0; c < ap.size(); ++c) {
          out << c << ',' << split.manifest.vocabulary.names[c] << ',';
          if (ap[c]) {
            std::snprintf(buf, sizeof(buf), "%.6f", *ap[c]);
            out << buf;
          }
          out << '\n';
        }
      }
    });
  }

  // ensemble-fit
  struct {
    std::vector<std::string> preds;
    std::string data, out, config, log;
    std::string filter = "all", mode = "per_model";
    SeedOverride seed;
  } fit_args;
  {
    auto* sub = app.add_subcommand("ensemble-fit", "learn ensemble weights on a validation split");
    sub->add_option("--preds", fit_args.preds, "member prediction CSVs")->required()->expected(-2);
    sub->add_option("--data", fit_args.data, "validation dataset directory")->required();
    sub->add_option("--filter", fit_args.filter, "shard filter (default: all)");
    sub->add_option("--mode", fit_args.mode, "per_model | per_model_per_class");
    sub->add_option("--out", fit_args.out, "output weights JSON")->required();
    sub->add_option("--config", fit_args.config, "fit config JSON");
    sub->add_option("--log", fit_args.log, "write the fit log JSON here");
    add_seed_option(sub, fit_args.seed);
    sub->callback([&] {
      auto cfg = fit_args.config.empty()
                     ? mlvc::EnsembleFitConfig{}
                     : mlvc::EnsembleFitConfig::from_json(mlvc::load_json_file(fit_args.config));
      fit_args.seed.apply(cfg.seed);
      const auto split = mlvc::read_shards(fit_args.data, mlvc::ShardFilter::parse(fit_args.filter));
      std::vector<mlvc::PredictionSet> members;
      for (const auto& p : fit_args.preds)
        members.push_back(mlvc::read_predictions(p, split.manifest.num_labels));
      const auto result = mlvc::fit_weights(members, split.examples,
                                            mlvc::parse_ensemble_mode(fit_args.mode), cfg);
      mlvc::save_ensemble_weights(result.weights, fit_args.out);
      if (!fit_args.log.empty()) write_json_file(result.to_json(), fit_args.log);
      std::printf("fit %zu members, best MSE %.8f at epoch %d; weights written to %s\n",
                  members.size(), result.best_mse, result.best_epoch, fit_args.out.c_str());
    });
  }

  // ensemble-apply
  struct {
    std::vector<std::string> preds;
    std::string weights, data, out, name = "ensemble";
    int top_k = mlvc::kDefaultTopK;
  } apply_args;
  {
    auto* sub = app.add_subcommand("ensemble-apply", "combine member predictions");
    sub->add_option("--preds", apply_args.preds, "member prediction CSVs")->required()->expected(-2);
    sub->add_option("--weights", apply_args.weights, "weights JSON (mode equal needs no fit)")->required();
    sub->add_option("--data", apply_args.data, "dataset directory (for the label count)")->required();
    sub->add_option("--out", apply_args.out, "output prediction CSV")->required();
    sub->add_option("--top-k", apply_args.top_k, "pairs kept per row");
    sub->add_option("--name", apply_args.name, "combined model name");
    sub->callback([&] {
      const auto manifest = mlvc::load_manifest(apply_args.data);
      std::vector<mlvc::PredictionSet> members;
      for (const auto& p : apply_args.preds)
        members.push_back(mlvc::read_predictions(p, manifest.num_labels));
      const auto weights = mlvc::load_ensemble_weights(apply_args.weights);
      mlvc::write_predictions(mlvc::combine(members, weights, apply_args.name), apply_args.out,
                              apply_args.top_k);
      std::cout << "combined " << members.size() << " members into " << apply_args.out << "\n";
    });
  }

  // distill
  struct {
    std::string teacher, data, val, out, report, config;
    std::string filter = "all", val_filter = "mod 10 == 5";
    std::string teacher_val;
    SeedOverride seed;
  } distill_args;
  {
    auto* sub = app.add_subcommand("distill", "train a budgeted student from teacher predictions");
    sub->add_option("--teacher", distill_args.teacher, "teacher prediction CSV over the training split")
        ->required();
    sub->add_option("--data", distill_args.data, "dataset directory")->required();
    sub->add_option("--val", distill_args.val, "validation dataset directory (default: --data)");
    sub->add_option("--filter", distill_args.filter, "training shard filter (default: all)");
    sub->add_option("--val-filter", distill_args.val_filter, "validation shard filter");
    sub->add_option("--config", distill_args.config, "distill config JSON")->required();
    sub->add_option("--out", distill_args.out, "output student model JSON")->required();
    sub->add_option("--report", distill_args.report, "distillation report JSON")->required();
    sub->add_option("--teacher-val", distill_args.teacher_val,
                    "teacher prediction CSV over the validation split (reports the teacher GAP)");
    add_seed_option(sub, distill_args.seed);
    sub->callback([&] {
      auto cfg = mlvc::DistillConfig::from_json(mlvc::load_json_file(distill_args.config));
      distill_args.seed.apply(cfg.train.seed);
      const auto train_split =
          mlvc::read_shards(distill_args.data, mlvc::ShardFilter::parse(distill_args.filter));
      const std::string val_dir = distill_args.val.empty() ? distill_args.data : distill_args.val;
      const auto val_split = mlvc::read_shards(val_dir, mlvc::ShardFilter::parse(distill_args.val_filter));
      const auto teacher =
          mlvc::read_predictions(distill_args.teacher, train_split.manifest.num_labels, "teacher");
      std::optional<double> teacher_gap;
      if (!distill_args.teacher_val.empty()) {
        const auto tv = mlvc::read_predictions(distill_args.teacher_val, train_split.manifest.num_labels,
                                               "teacher");
        teacher_gap = mlvc::gap(tv, val_split.examples, mlvc::GapConfig{cfg.train.gap_top_k});
      }
      const auto result =
          mlvc::distill(teacher, train_split.examples, val_split.examples, cfg, teacher_gap,
                        [](const std::string& s) { std::cout << s << "\n"; });
      mlvc::save_model(result.student, distill_args.out);
      nlohmann::ordered_json report = result.report.to_json();
      report["train_log"] = result.log.to_json();
      write_json_file(report, distill_args.report);
      std::printf("student val GAP %.6f (size %lld / budget %lld bytes)\n",
                  result.report.final_val_gap,
                  static_cast<long long>(result.report.student_size_bytes),
                  static_cast<long long>(result.report.budget_bytes));
    });
  }

  // inspect-omega
  struct {
    std::string model, out, data;
  } omega_args;
  {
    auto* sub = app.add_subcommand("inspect-omega", "dump a model's label relation matrix as CSV");
    sub->add_option("--model", omega_args.model, "model JSON")->required();
    sub->add_option("--out", omega_args.out, "output CSV path")->required();
    sub->add_option("--data", omega_args.data, "dataset directory (for label names)");
    sub->callback([&] {
      const auto model = mlvc::load_model(omega_args.model);
      if (!model.omega)
        throw std::runtime_error(omega_args.model + " carries no label relation matrix");
      std::vector<std::string> names;
      if (!omega_args.data.empty()) {
        names = mlvc::load_manifest(omega_args.data).vocabulary.names;
      } else {
        for (int i = 0; i < model.num_labels; ++i) names.push_back(mlvc::default_label_name(i));
      }
      auto out = mlvc::detail::open_out(omega_args.out);
      mlvc::write_omega_csv(*model.omega, names, out);
      std::cout << "omega (" << model.num_labels << "x" << model.num_labels << ") written to "
                << omega_args.out << "\n";
    });
  }

  // pipeline
  struct {
    std::string config, out;
    bool dry_run = false;
  } pipe_args;
  {
    auto* sub = app.add_subcommand("pipeline", "run the full experiment end to end");
    sub->add_option("--config", pipe_args.config, "pipeline config JSON")->required();
    sub->add_option("--out", pipe_args.out, "artifact directory")->required();
    sub->add_flag("--dry-run", pipe_args.dry_run, "print the stage plan without running anything");
    sub->callback([&] {
      const auto cfg = mlvc::PipelineConfig::load(pipe_args.config);
      const auto result = mlvc::run_pipeline(cfg, pipe_args.out, pipe_args.dry_run,
                                             [](const std::string& s) { std::cout << s << "\n"; });
      if (pipe_args.dry_run) return;
      std::cout << "\nprogression (val GAP):\n";
      for (const auto& row : result.summary.at("progression")) {
        std::printf("  %-18s %.6f", row.at("stage").get<std::string>().c_str(),
                    row.at("val_gap").get<double>());
        if (row.contains("delta")) std::printf("  (%+.6f)", row.at("delta").get<double>());
        std::printf("\n");
      }
      std::cout << "summary written to " << (fs::path(pipe_args.out) / "summary.json").string()
                << "\n";
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const mlvc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const mlvc::BudgetError& e) {
    std::cerr << "budget violation: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
