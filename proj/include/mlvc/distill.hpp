#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mlvc/config.hpp"
#include "mlvc/dataset.hpp"
#include "mlvc/model.hpp"
#include "mlvc/train.hpp"
#include "mlvc/types.hpp"

namespace mlvc {

// Knowledge distillation under a serving budget: the student trains against
// a convex blend of teacher soft scores and hard ground truth,
//   L = lambda * CE(p, teacher) + (1 - lambda) * CE(p, hard),
// with CE the summed per-label binary cross-entropy. At lambda = 1 hard
// labels drop out entirely. Teacher scores arrive through the prediction
// CSV, so the student sees the quantized values a consumer would.

struct DistillConfig {
  double lambda = 1.0;
  ModelType student_type = ModelType::gated_mlp;
  int hidden = 64;
  int experts = 0;
  std::int64_t budget_bytes = 1 << 20;
  int bytes_per_param = 4;
  TrainConfig train;

  void validate() const {
    if (lambda < 0 || lambda > 1) throw ConfigError("distill: lambda must be in [0, 1]");
    if (budget_bytes < 1) throw ConfigError("distill: budget_bytes must be positive");
    if (bytes_per_param != 4 && bytes_per_param != 8)
      throw ConfigError("distill: bytes_per_param must be 4 or 8");
    train.validate();
  }

  static DistillConfig from_json(const nlohmann::json& j) {
    reject_unknown_keys(j,
                        {"lambda", "model_type", "hidden", "experts", "budget_bytes",
                         "bytes_per_param", "train"},
                        "distill config");
    DistillConfig c;
    c.lambda = json_get(j, "lambda", c.lambda, "distill config");
    c.student_type = parse_model_type(json_get<std::string>(
        j, "model_type", model_type_name(c.student_type), "distill config"));
    c.hidden = json_get(j, "hidden", c.hidden, "distill config");
    c.experts = json_get(j, "experts", c.experts, "distill config");
    c.budget_bytes = json_get(j, "budget_bytes", c.budget_bytes, "distill config");
    c.bytes_per_param = json_get(j, "bytes_per_param", c.bytes_per_param, "distill config");
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    c.validate();
    return c;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["lambda"] = lambda;
    j["model_type"] = model_type_name(student_type);
    j["hidden"] = hidden;
    j["experts"] = experts;
    j["budget_bytes"] = budget_bytes;
    j["bytes_per_param"] = bytes_per_param;
    j["train"] = train.to_json();
    return j;
  }
};

struct DistillLossResult {
  double value;
  std::vector<double> grad;  // d value / d student scores
};

inline DistillLossResult distill_loss(const ScoreVector& student, const ScoreVector& teacher,
                                      const std::vector<double>& hard, double lambda) {
  if (student.size() != teacher.size() || student.size() != hard.size())
    throw std::invalid_argument("distill_loss: length mismatch");
  if (lambda < 0 || lambda > 1) throw ConfigError("distill_loss: lambda must be in [0, 1]");
  const BceResult soft = bce_loss(student, teacher);
  const BceResult hard_part = bce_loss(student, hard);
  DistillLossResult r{lambda * soft.value + (1.0 - lambda) * hard_part.value,
                      std::vector<double>(student.size())};
  for (std::size_t i = 0; i < student.size(); ++i)
    r.grad[i] = lambda * soft.grad[i] + (1.0 - lambda) * hard_part.grad[i];
  return r;
}

struct DistillReport {
  std::int64_t student_size_bytes = 0;
  std::int64_t budget_bytes = 0;
  std::int64_t budget_margin_bytes = 0;
  double lambda = 0.0;
  double final_val_gap = 0.0;
  std::optional<double> teacher_val_gap;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["student_size_bytes"] = student_size_bytes;
    j["budget_bytes"] = budget_bytes;
    j["budget_margin_bytes"] = budget_margin_bytes;
    j["lambda"] = lambda;
    j["final_val_gap"] = final_val_gap;
    if (teacher_val_gap) j["teacher_val_gap"] = *teacher_val_gap;
    else j["teacher_val_gap"] = nullptr;
    return j;
  }
};

struct DistillResult {
  ModelParams student;
  DistillReport report;
  TrainLog log;
};

// Builds the student, refuses it before any training if it exceeds the
// budget (naming the required reduction), aligns teacher predictions to the
// training set by id, and trains with the blended loss.
inline DistillResult distill(const PredictionSet& teacher_preds,
                             const std::vector<Example>& train_set,
                             const std::vector<Example>& val_set, const DistillConfig& cfg,
                             std::optional<double> teacher_val_gap = std::nullopt,
                             const std::function<void(const std::string&)>& log_fn = {}) {
  cfg.validate();
  if (train_set.empty()) throw std::runtime_error("distill: empty training set");
  const int d = static_cast<int>(train_set.front().features.size());
  const int c = static_cast<int>(teacher_preds.scores.empty() ? 0 : teacher_preds.scores.front().size());
  if (c == 0) throw std::runtime_error("distill: empty teacher predictions");

  ModelParams student = make_model(cfg.student_type, d, c, cfg.hidden, cfg.experts);
  const BudgetCheck budget = check_budget(student, cfg.budget_bytes, cfg.bytes_per_param);
  if (!budget.within) {
    const std::int64_t over = budget.size_bytes - budget.budget_bytes;
    const std::int64_t params_over =
        (over + cfg.bytes_per_param - 1) / cfg.bytes_per_param;
    throw BudgetError("student model needs " + std::to_string(budget.size_bytes) +
                      " bytes but the budget is " + std::to_string(budget.budget_bytes) +
                      " (over by " + std::to_string(over) + " bytes; drop at least " +
                      std::to_string(params_over) + " parameters at " +
                      std::to_string(cfg.bytes_per_param) + " bytes each)");
  }

  std::unordered_map<std::string, std::size_t> teacher_row;
  teacher_row.reserve(teacher_preds.ids.size());
  for (std::size_t i = 0; i < teacher_preds.ids.size(); ++i) teacher_row[teacher_preds.ids[i]] = i;
  std::vector<const ScoreVector*> teacher(train_set.size());
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    const auto it = teacher_row.find(train_set[i].id);
    if (it == teacher_row.end())
      throw std::runtime_error("distill: no teacher prediction for example " + train_set[i].id);
    teacher[i] = &teacher_preds.scores[it->second];
  }

  Rng init_rng(cfg.train.seed.child(1));
  init_params(student, init_rng);
  student.name = "student";
  student.provenance = "distilled(lambda=" + std::to_string(cfg.lambda) + ", teacher=" +
                       teacher_preds.model_name + ")";

  TrainOptions opts;
  opts.log_fn = log_fn;
  const double lambda = cfg.lambda;
  opts.target_fn = [&teacher, lambda, c](std::size_t idx, const Example& e) {
    std::vector<double> t(static_cast<std::size_t>(c), 0.0);
    const ScoreVector& soft = *teacher[idx];
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = lambda * soft[i];
    if (lambda < 1.0)
      for (int l : e.labels) t[static_cast<std::size_t>(l)] += 1.0 - lambda;
    return t;
  };

  TrainResult trained = train(student, train_set, val_set, cfg.train, opts);

  DistillResult out;
  out.student = std::move(trained.params);
  out.log = std::move(trained.log);
  out.report.student_size_bytes = budget.size_bytes;
  out.report.budget_bytes = budget.budget_bytes;
  out.report.budget_margin_bytes = budget.budget_bytes - budget.size_bytes;
  out.report.lambda = cfg.lambda;
  out.report.final_val_gap = out.log.best_val_gap;
  out.report.teacher_val_gap = teacher_val_gap;
  return out;
}

}  // namespace mlvc
